import math

import numpy as np
import pytest

from conftest import random_model, tiny_images
from reference import (ces_loop, coherence_loop, mig_loop, mi_loop, modularity_loop, ps_loop,
                       response_loop, specificity_loop, vae_forward_loop)
from vaecircuits.engine import SeededRNG
from vaecircuits.interventions import capture, intervene_on_z, latent_traverse
from vaecircuits.metrics import (MetricsConfig, ResponseProfile, ces, ces_from_traversal,
                                 cluster_coherence,
                                 discrete_mutual_info, discretize, disentanglement_proxy,
                                 factor_label_matrix, factor_response, modularity,
                                 modularity_details, monosemantic_fraction, polysemanticity,
                                 primary_factors, specificity, specificity_flagged,
                                 specificity_from_traversal)
from vaecircuits.models import ModelConfig, init_model

TOL = 1e-10
CASES = 100


def toy(seed, latent=2):
    cfg = ModelConfig(image_size=4, conv_channels=(2,), latent_dim=latent, epochs=1)
    m = init_model(cfg, SeededRNG(seed))
    rng = np.random.default_rng(seed)
    for t in m.params.values():
        t.data[...] = rng.uniform(-1, 1, t.shape)
    return m


# -------------------------------------------------------------------- CES

def test_ces_matches_loop_oracle_on_random_toys():
    for seed in range(CASES):
        m = toy(seed)
        rng = np.random.default_rng(1000 + seed)
        x = rng.random((2, 1, 4, 4))
        dim = seed % 2
        grid = rng.uniform(-3, 3, 3)
        p = {k: v.data for k, v in m.params.items()}
        base = vae_forward_loop(p, m.config, x)["recon"]

        def setter(v):
            def f(z):
                z = z.copy()
                z[:, dim] = v
                return z
            return f

        recons = [vae_forward_loop(p, m.config, x, {"z": setter(v)})["recon"] for v in grid]
        assert abs(ces(m, x, dim, grid) - ces_loop(base, recons)) < TOL


def test_ces_null_and_constant_decoder():
    m = random_model(1)
    x = tiny_images(3)
    z = capture(m, x)["z"]
    for d in range(3):
        # each item keeps its own z_d, so every delta is exactly zero
        _, _, delta = intervene_on_z(m, z, d, z[:, d])
        assert np.all(delta == 0)
        tr = latent_traverse(m, x[:1], d, grid=[capture(m, x[:1])["z"][0, d]])
        assert ces_from_traversal(tr) == 0.0
    for k, t in m.params.items():
        if k.startswith("dec"):
            t.data[...] = 0.0
    assert all(ces(m, x, d) == 0.0 for d in range(3))
    with pytest.raises(ValueError, match="empty"):
        ces(m, np.zeros((0, 1, 16, 16)), 0)


def test_ces_one_latent_hand_grid():
    cfg = ModelConfig(image_size=2, conv_channels=(1,), latent_dim=1, epochs=1)
    m = init_model(cfg, SeededRNG(0))
    m.params["dec_fc.w"].data[...] = 1.0
    m.params["dec_fc.b"].data[...] = 5.0
    w = m.params["dec0.w"].data[0, 0]
    b = m.params["dec0.b"].data[0]
    x = np.random.default_rng(2).random((3, 1, 2, 2))
    zs = capture(m, x)["z"][:, 0]
    grid = [-1.0, 0.0, 2.5]
    sig = lambda t: 1 / (1 + math.exp(-t))
    total = 0.0
    for v in grid:
        for z in zs:
            sq = 0.0
            for i in range(2):
                for j in range(2):
                    wij = w[i + 1, j + 1]
                    sq += (sig((v + 5) * wij + b) - sig((z + 5) * wij + b)) ** 2
            total += math.sqrt(sq)
    assert abs(ces(m, x, 0, grid) - total / 9) < 1e-12


# ------------------------------------------------------------ specificity

def test_specificity_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for i in range(CASES):
        d = rng.standard_normal(rng.integers(1, 30))
        d[rng.random(d.size) < 0.3] = 0.0
        eps = 10 ** rng.uniform(-8, -2)
        assert abs(specificity(d, eps) - specificity_loop(d, eps)) < TOL


def test_specificity_examples():
    one = np.zeros((4, 4))
    one[1, 2] = -3.0
    assert specificity(one) == pytest.approx(1e6, rel=1e-12)
    four = np.array([0.5, -0.5, 0.5, 0.5])
    assert abs(specificity(four) - 1 / (math.log(4) + 1e-6)) < TOL
    assert specificity(four) == pytest.approx(0.7213, abs=5e-5)
    assert abs(specificity(four, eps=1e-15) - 1 / math.log(4)) < TOL
    flat = np.full((64, 64), 0.01)
    assert specificity(flat) == pytest.approx(1 / math.log(4096), rel=1e-5)
    assert specificity(flat) == pytest.approx(0.1202, abs=5e-5)
    assert specificity_flagged(np.zeros(5)) == (0.0, True)
    with pytest.raises(ValueError):
        specificity(four, eps=0.0)


def test_specificity_from_traversal_counts_zero_deltas():
    m = random_model(2)
    x = tiny_images(2)
    z = capture(m, x[:1])["z"]
    # a grid holding item 0's own z_0 gives one exactly-zero delta
    tr = latent_traverse(m, x[:1], 0, grid=[z[0, 0], 1.5])
    s, zeros = specificity_from_traversal(tr)
    assert zeros == 1 and s == specificity(tr.deltas[1, 0])


# ------------------------------------------------------------- modularity

def test_modularity_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for i in range(CASES):
        k, n = rng.integers(2, 6), rng.integers(2, 9)
        d = rng.standard_normal((k, n))
        if i % 5 == 0:
            d[rng.integers(k)] = 1.5  # zero-variance row
        assert abs(modularity(d) - modularity_loop(d)) < TOL


def test_modularity_examples():
    assert modularity([[1, 2, 3], [1, 2, 3]]) == 0.0
    assert modularity([[1, 0, 1, 0], [1, 1, 0, 0]]) == 1.0
    m3 = modularity([[1, 0, 1, 0], [1, 0, 1, 0], [1, 1, 0, 0]])
    assert abs(m3 - 2 / 3) < TOL
    res = modularity_details([[1, 1, 1], [1, 2, 3], [3, 1, 2]])
    assert res.degenerate_pairs == 2 and res.pairs == 3
    for bad in ([[1, 2]], [[1], [2]], [[1, np.nan], [1, 2]], [1, 2, 3]):
        with pytest.raises(ValueError):
            modularity(bad)


# ------------------------------------------------------ response profiles

def test_factor_response_matches_loop_oracle():
    for seed in range(CASES):
        m = random_model(seed)
        rng = np.random.default_rng(seed)
        site = ["encoder_conv_0", "encoder_conv_2", "mu", "decoder_conv_1"][seed % 4]
        pairs, ax, axt = {}, {}, {}
        for f in ("a", "b", "c")[: 2 + seed % 2]:
            x = rng.random((2, 1, 16, 16))
            xt = rng.random((2, 1, 16, 16))
            pairs[f] = (x, xt)
            ax[f], axt[f] = capture(m, x)[site], capture(m, xt)[site]
        prof = factor_response(m, pairs, site)
        ref = np.array(response_loop(ax, axt))
        assert prof.R.shape == ref.shape
        assert np.max(np.abs(prof.R - ref)) < TOL


def test_factor_response_examples():
    m = random_model(0)
    x = tiny_images(3)
    xt = tiny_images(3, seed=4)
    prof = factor_response(m, {"same": (x, x), "diff": (x, xt)}, "encoder_conv_1")
    assert np.all(prof.R[:, 0] == 0) and np.all(prof.R >= 0)
    with pytest.raises(ValueError, match="no intervention pairs"):
        factor_response(m, {"f": (x[:0], x[:0])}, "mu")
    with pytest.raises(ValueError):
        ResponseProfile("mu", ["a", "b"], np.array([[1.0, -1.0]]))


def test_toy_response_single_pair_by_hand():
    m = toy(3)
    rng = np.random.default_rng(0)
    x, xt = rng.random((1, 1, 4, 4)), rng.random((1, 1, 4, 4))
    p = {k: v.data for k, v in m.params.items()}
    a = vae_forward_loop(p, m.config, x)["mu"]
    b = vae_forward_loop(p, m.config, xt)["mu"]
    prof = factor_response(m, {"f": (x, xt), "g": (x, x)}, "mu")
    for n in range(2):
        assert abs(prof.R[n, 0] - abs(a[0, n] - b[0, n])) < 1e-12


# --------------------------------------------------------- polysemanticity

def test_polysemanticity_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(CASES):
        r = rng.random(rng.integers(2, 8))
        r[rng.random(r.size) < 0.3] = 0.0
        got, want = polysemanticity(r), ps_loop(list(r))
        assert (got is None) == (want is None)
        if want is not None:
            assert abs(got - want) < TOL


def test_polysemanticity_examples():
    # the formula is evaluated as written: one-hot gives |F|, uniform gives 1
    assert polysemanticity([1, 0, 0, 0]) == 4.0
    assert polysemanticity([0.3] * 4) == pytest.approx(1.0, abs=TOL)
    assert abs(polysemanticity([2, 1, 1, 0]) - 1.5) < TOL
    assert polysemanticity([0, 0, 0]) is None
    with pytest.raises(ValueError):
        polysemanticity([1])
    with pytest.raises(ValueError):
        polysemanticity([1, -1])


def test_monosemantic_fraction_examples():
    assert monosemantic_fraction([1.0] * 5) == 1.0
    assert monosemantic_fraction([4.0] * 3, threshold=1.5) == 0.0
    assert monosemantic_fraction([1.0, 1.4, 2.0, 3.9], 1.5) == 0.5
    assert monosemantic_fraction([1.0, None, 3.0]) == 0.5
    with pytest.raises(ValueError, match="inactive"):
        monosemantic_fraction([None, None])


def test_monosemantic_fraction_matches_count_oracle():
    rng = np.random.default_rng(3)
    for _ in range(CASES):
        ps = list(rng.uniform(1, 4, rng.integers(1, 12)))
        t = rng.uniform(1, 4)
        assert monosemantic_fraction(ps, t) == sum(p <= t for p in ps) / len(ps)


# ---------------------------------------------------------------- coherence

def test_coherence_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(CASES):
        n = rng.integers(1, 15)
        labels = rng.integers(0, 3, n).tolist()
        primary = rng.integers(0, 4, n).tolist()
        assert abs(cluster_coherence(labels, primary) - coherence_loop(labels, primary)) < TOL


def test_coherence_examples():
    assert cluster_coherence([0, 0, 1, 1], [2, 2, 0, 0]) == 1.0
    assert cluster_coherence([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
    assert abs(cluster_coherence([0, 0, 0, 1, 1], [0, 0, 1, 1, 1]) - 0.8) < TOL
    with pytest.raises(ValueError):
        cluster_coherence([], [])
    with pytest.raises(ValueError):
        cluster_coherence([0, 1], [0])


def test_primary_factor_is_row_argmax():
    prof = ResponseProfile("s", ["a", "b", "c"], np.array([[0.1, 0.5, 0.2], [3, 1, 1.0]]))
    assert primary_factors(prof).tolist() == [1, 0]


# ---------------------------------------------------------- MI proxy

def test_mi_matches_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(CASES):
        n = rng.integers(5, 60)
        a, b = rng.integers(0, 4, n), rng.integers(0, 3, n)
        assert abs(discrete_mutual_info(a, b) - mi_loop(a.tolist(), b.tolist())) < TOL


def test_proxy_matches_loop_oracle():
    rng = np.random.default_rng(6)
    for i in range(CASES):
        n, d, k = rng.integers(10, 50), rng.integers(1, 4), rng.integers(1, 3)
        z = rng.standard_normal((n, d))
        y = rng.integers(0, 3, (n, k))
        if i % 7 == 0:
            z[:, 0] = 0.25  # constant latent
        bins = int(rng.integers(2, 21))
        assert abs(disentanglement_proxy(z, y, bins) - mig_loop(z, y, bins)) < TOL


def test_proxy_examples():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 4, (20000, 3))
    perfect = y + rng.uniform(-0.1, 0.1, y.shape)
    assert disentanglement_proxy(perfect, y) == pytest.approx(1.0, abs=1e-2)
    noise = rng.standard_normal((20000, 3))
    assert disentanglement_proxy(noise, y) < 0.01
    for _ in range(20):
        s = disentanglement_proxy(rng.standard_normal((50, 3)), rng.integers(0, 3, (50, 2)))
        assert 0.0 <= s <= 1.0
    with pytest.raises(ValueError):
        disentanglement_proxy(np.zeros((5, 2)), np.zeros((4, 1)))


def test_discretize_and_label_matrix():
    assert discretize(np.array([0.0, 0.5, 1.0]), 2).tolist() == [0, 1, 1]
    assert discretize(np.full(4, 3.0)).tolist() == [0, 0, 0, 0]
    cols = {"shape": np.array([2, 0, 2]), "pos": np.linspace(0, 1, 3)}
    lab = factor_label_matrix(cols)
    assert lab[:, 0].tolist() == [1, 0, 1] and lab[:, 1].tolist() == [0, 1, 2]


def test_metrics_config_validation():
    assert MetricsConfig().eps == 1e-6 and len(MetricsConfig().grid) == 13
    for kw in (dict(eps=0.0), dict(grid=()), dict(mi_bins=1)):
        with pytest.raises(ValueError):
            MetricsConfig(**kw)
