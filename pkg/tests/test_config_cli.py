import json
from pathlib import Path

import pytest

from foliated_averaging.cli import resolve_threads, run, verify_manifest
from foliated_averaging.config import ConfigError, load_config, parse_config, parse_law
from foliated_averaging.levy import AtomLaw, TruncatedNormalLaw, UniformLaw

DEFAULT = str(Path(__file__).resolve().parents[1] / "configs" / "default.ini")

SMALL = """
[experiment]
eps_grid = 0.2, 0.1, 0.05
n_paths = 4
eta0 = none
[numerics]
h = 0.01
batch_size = 2
[estimate_q]
v_grid = 0, 0.5
horizon = 20
replications = 2
[decompose]
n_paths = 2
[bihari]
m = 100
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL)
    return path


def test_default_file_parses():
    cfg = load_config(DEFAULT)
    exp = cfg.experiment()
    assert exp.p == 2 and exp.T == 1 and exp.eps_grid == (0.2, 0.1, 0.05, 0.025)
    assert exp.lambda_target == pytest.approx(0.2)


def test_missing_p_recorded_as_default():
    cfg = parse_config("[experiment]\nT = 1\n")
    assert cfg.experiment().p == 2.0
    assert "experiment.p" in cfg.defaults_applied


def test_lambda_above_ceiling_rejected_with_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("[experiment]\np = 2\nlambda_target = 0.3\n")
    assert exc.value.line == 3


def test_eps_grid_not_decreasing():
    with pytest.raises(ConfigError):
        parse_config("[experiment]\neps_grid = 0.05, 0.1\n")


@pytest.mark.parametrize("text, line", [
    ("[experiment]\nbogus = 1\n", 2),
    ("[nope]\nx = 1\n", 1),
    ("[experiment]\n\nn_paths = many\n", 3),
    ("[experiment]\nsystem = torus\n", 2),
])
def test_strict_parsing(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.line == line


def test_law_parsing():
    assert parse_law("uniform(2)") == UniformLaw(2.0)
    assert parse_law("uniform(1, 2)") == UniformLaw(1.0, 2)
    assert parse_law("truncnorm(0.5, 2)") == TruncatedNormalLaw(0.5, 2.0)
    law = parse_law("atoms(1:0.25, -1:0.75)")
    assert isinstance(law, AtomLaw) and law.probs == (0.25, 0.75)
    with pytest.raises(ValueError):
        parse_law("cauchy(1)")


def test_thread_resolution(monkeypatch):
    monkeypatch.setenv("FOLIATED_THREADS", "3")
    assert resolve_threads(None, 2) == 3
    assert resolve_threads(5, 2) == 5
    monkeypatch.delenv("FOLIATED_THREADS")
    assert resolve_threads(None, 2) == 2
    assert resolve_threads(None, None) >= 1


def test_validate_passes(tmp_path, capsys):
    assert run(["validate", "--config", DEFAULT, "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "validate.json").read_text())
    assert report["hypothesis1"]["passed"] and report["tangency"]["max_violation"] == 0.0


def test_synthetic_rate(tmp_path):
    assert run(["rate", "--synthetic", "--paths", "4", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert abs(summary["lambda_hat"] - 0.25) < 1e-9
    header = (tmp_path / "rate_results.csv").read_text().splitlines()[0]
    assert header == "eps,p,T,n_paths,lp_sup_error,std_error,trunc_frac,bound_value"


def test_same_seed_same_hashes(tmp_path, small):
    outs = []
    for name, threads in (("a", "1"), ("b", "2")):
        d = tmp_path / name
        assert run(["rate", "--config", str(small), "--seed", "4", "--threads", threads, "--out", str(d)]) == 0
        outs.append(json.loads((d / "manifest.json").read_text())["outputs"])
    assert outs[0]["rate_results.csv"] == outs[1]["rate_results.csv"]


def test_manifest_round_trip(tmp_path, small):
    assert run(["bihari", "--config", str(small), "--out", str(tmp_path)]) == 0
    assert all(verify_manifest(tmp_path / "manifest.json").values())
    (tmp_path / "bihari_sweep.csv").write_text("tampered\n")
    assert not all(verify_manifest(tmp_path / "manifest.json").values())
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["status"] == "ok" and "numerics.threads" in m["defaults_applied"]


@pytest.mark.parametrize("cmd, produced", [
    ("estimate-q", "q_table.csv"),
    ("decompose", "decomposition.csv"),
    ("simulate", "perturbed_path.csv"),
])
def test_subcommands_write_outputs(tmp_path, small, cmd, produced):
    assert run([cmd, "--config", str(small), "--out", str(tmp_path)]) == 0
    assert (tmp_path / produced).exists()
    assert produced in json.loads((tmp_path / "manifest.json").read_text())["outputs"]


def test_eta0_subcommand(tmp_path, small):
    assert run(["eta0", "--config", str(small), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eta0.csv").read_text().startswith("t,lp_error,std_error\n")


def test_failure_marker(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nunknown_key = 1\n")
    out = tmp_path / "out"
    assert run(["rate", "--config", str(bad), "--out", str(out)]) == 1
    assert "unknown key" in (out / "FAILED").read_text()


def test_failure_marker_cleared_on_success(tmp_path):
    (tmp_path / "FAILED").write_text("old")
    assert run(["bihari", "--out", str(tmp_path)]) == 0
    assert not (tmp_path / "FAILED").exists()
