"""Averaging for Marcus SDEs with Lévy jumps on foliated spaces.

Simulation of perturbed foliated systems driven by compound-Poisson noise,
estimation of leafwise ergodic averages, averaged dynamics, rate experiments
on the averaging error, and the nonlinear comparison bounds behind them.
"""

__version__ = "0.1.0"

from .averaging import (  # noqa: E402
    CoupledErrorSample,
    NumericParams,
    QTable,
    build_Q_table,
    coupled_error,
    coupled_errors,
    estimate_eta0,
    estimate_Q,
    integrate_averaged,
    lp_norm,
)
from .bihari import BihariProblem, PachpatteCoefficients, corollary_bound, maximal_solution, verify_dominance  # noqa: E402
from .foliation import BUILTIN_SYSTEMS, FoliationChart, TestSystem, VectorFieldSet, builtin_system  # noqa: E402
from .harness import (  # noqa: E402
    ExperimentConfig,
    PartitionScheme,
    RateFitResult,
    decompose_error,
    partition,
    run_rate_experiment,
)
from .levy import LevyMeasureSpec, LevyPath, moment, sample_levy_path, validate_hypothesis1  # noqa: E402
from .marcus import MarcusProblem, SamplePath, integrate, marcus_flow  # noqa: E402
from .rng import RandomStreams  # noqa: E402
