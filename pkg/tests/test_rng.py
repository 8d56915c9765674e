import numpy as np
import pytest

from foliated_averaging.rng import RandomStreams


def test_same_key_same_numbers():
    a = RandomStreams(7).generator(3, "Z").random(5)
    b = RandomStreams(7).generator(3, "Z").random(5)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("other", [(8, 3, "Z"), (7, 4, "Z"), (7, 3, "Ztilde")])
def test_different_keys_differ(other):
    a = RandomStreams(7).generator(3, "Z").random(5)
    seed, idx, tag = other
    b = RandomStreams(seed).generator(idx, tag).random(5)
    assert not np.array_equal(a, b)


def test_invalid_seed_and_tag():
    with pytest.raises(ValueError):
        RandomStreams(-1)
    with pytest.raises(ValueError):
        RandomStreams(2**64)
    with pytest.raises(KeyError):
        RandomStreams(0).generator(0, "nope")
