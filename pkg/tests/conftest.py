import numpy as np
import pytest

from oechain.qtensor import Charge, Leg


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_leg(rng, direction=None, max_sectors=3, max_dim=4, charge_span=2):
    """Random leg with small even-ish charges for property tests."""
    if direction is None:
        direction = int(rng.choice([1, -1]))
    n = int(rng.integers(1, max_sectors + 1))
    charges = set()
    while len(charges) < n:
        charges.add(
            Charge(
                int(rng.integers(-charge_span, charge_span + 1)),
                int(rng.integers(-charge_span, charge_span + 1)),
            )
        )
    return Leg(direction, [(c, int(rng.integers(1, max_dim + 1))) for c in charges])


def random_nonempty(rng, make):
    """Call ``make(rng)`` until it yields a tensor with at least one block."""
    for _ in range(100):
        t = make(rng)
        if t.blocks:
            return t
    raise AssertionError("could not draw a tensor with admissible blocks")
