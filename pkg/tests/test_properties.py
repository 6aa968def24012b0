"""Range and invariance properties of the metrics over large randomized samples."""
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_model, tiny_images
from vaecircuits.interventions import latent_traverse
from vaecircuits.metrics import (ces_from_traversal, modularity, modularity_details,
                                 polysemanticity, specificity, specificity_flagged)

N = 10_000


def magnitudes(rng, shape):
    """Values spread over many decades, including exact zeros."""
    decades = rng.uniform(-150, 150, shape[:1] + (1,) * (len(shape) - 1))
    v = rng.standard_normal(shape) * 10.0 ** decades
    v[rng.random(shape) < 0.1] = 0.0
    return v


def test_modularity_in_unit_interval():
    rng = np.random.default_rng(0)
    for _ in range(N):
        k, n = int(rng.integers(2, 5)), int(rng.integers(2, 8))
        m = modularity(magnitudes(rng, (k, n)))
        assert 0.0 <= m <= 1.0


def test_ps_within_one_and_factor_count_for_active_units():
    rng = np.random.default_rng(1)
    active = 0
    for _ in range(N):
        f = int(rng.integers(2, 8))
        r = np.abs(magnitudes(rng, (1, f)))[0]
        if rng.random() < 0.05:
            r = np.full(f, r.max())  # exactly uniform rows
        ps = polysemanticity(r)
        if r.max() == 0:
            assert ps is None
            continue
        active += 1
        assert 1.0 <= ps <= f
    assert active > N // 2


def test_ces_nonnegative():
    rng = np.random.default_rng(2)
    for _ in range(N):
        g, b = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        d = magnitudes(rng, (g, b, 1, 3, 3))
        assert ces_from_traversal(SimpleNamespace(deltas=d)) >= 0.0


def test_specificity_positive_for_nonzero_deltas():
    rng = np.random.default_rng(3)
    for _ in range(N):
        d = magnitudes(rng, (1, int(rng.integers(1, 30))))[0]
        s, zero = specificity_flagged(d, 1e-6)
        assert zero == (not d.any())
        assert s > 0.0 if d.any() else s == 0.0


@given(st.integers(0, 2 ** 20), st.integers(0, 2))
def test_ces_nonnegative_on_models(seed, dim):
    m = random_model(seed)
    tr = latent_traverse(m, tiny_images(2, seed=seed % 50), dim, grid=[-2.0, 0.5, 3.0])
    assert ces_from_traversal(tr) >= 0.0


# ---------------------------------------------------------- invariances

# normal floats only: scaling a subnormal can round it to zero
finite = st.just(0.0) | st.floats(1e-250, 1e3) | st.floats(-1e3, -1e-250)
positive = st.floats(1e-3, 1e3)


@given(arrays(np.float64, (3, 5), elements=finite), st.lists(positive, min_size=3, max_size=3))
def test_modularity_invariant_to_row_scaling(d, c):
    base = modularity_details(d)
    scaled = modularity_details(d * np.array(c)[:, None])
    assert scaled.degenerate_pairs == base.degenerate_pairs
    assert scaled.value == pytest.approx(base.value, abs=1e-9)


@given(arrays(np.float64, 4, elements=st.just(0.0) | st.floats(1e-250, 1e3)), positive)
def test_ps_scale_invariant(r, c):
    a, b = polysemanticity(r), polysemanticity(r * c)
    assert (a is None) == (b is None)
    if a is not None:
        assert b == pytest.approx(a, rel=1e-9)


@given(arrays(np.float64, 12, elements=finite), positive)
def test_specificity_scale_invariant(d, c):
    assert specificity(d * c) == pytest.approx(specificity(d), rel=1e-9)


@given(arrays(np.float64, 6, elements=st.floats(0, 10)))
def test_ps_permutation_invariant(r):
    assert polysemanticity(r) == polysemanticity(r[::-1]) or \
        polysemanticity(r) == pytest.approx(polysemanticity(r[::-1]), rel=1e-12)


def test_non_finite_inputs_rejected():
    with pytest.raises(ValueError):
        polysemanticity([1.0, np.nan])
    with pytest.raises(ValueError):
        specificity(np.array([np.inf, 1.0]))
    with pytest.raises(ValueError):
        modularity(np.array([[1.0, np.nan], [0.0, 1.0]]))
