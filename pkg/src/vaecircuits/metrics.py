"""Causal effect strength, specificity, modularity, polysemanticity and friends.

Entropies use the natural log throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .interventions import DEFAULT_GRID, LATENT_SITES, Traversal, capture, latent_traverse
from .models import ModelBundle


@dataclass
class MetricsConfig:
    eps: float = 1e-6
    grid: tuple[float, ...] = DEFAULT_GRID
    mono_threshold: float = 1.5
    mi_bins: int = 20

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        self.grid = tuple(float(g) for g in self.grid)
        if not self.grid:
            raise ValueError("traversal grid must be nonempty")
        if self.mi_bins < 2:
            raise ValueError("mi_bins must be >= 2")


# ------------------------------------------------------- effect strength

def l2_per_item(delta: np.ndarray) -> np.ndarray:
    """L2 norm over all non-leading axes."""
    return np.sqrt((delta.reshape(delta.shape[0], -1) ** 2).sum(axis=1))


def ces_from_traversal(tr: Traversal) -> float:
    d = tr.deltas
    g, b = d.shape[:2]
    return float(np.sqrt((d.reshape(g, b, -1) ** 2).sum(axis=2)).mean())


def ces(model: ModelBundle, x, dim: int, values: Sequence[float] = DEFAULT_GRID) -> float:
    """Mean over items and values of ||D(z) - D(z with z_dim = v)||_2."""
    x = np.asarray(x)
    if x.size == 0 or (x.ndim == 4 and len(x) == 0):
        raise ValueError("ces: empty sample")
    return ces_from_traversal(latent_traverse(model, x, dim, values))


def specificity(delta: np.ndarray, eps: float = 1e-6) -> float:
    """1 / (H(p) + eps), p = squared deltas normalised to sum 1; 0 for an all-zero delta."""
    return specificity_flagged(delta, eps)[0]


def specificity_flagged(delta: np.ndarray, eps: float = 1e-6) -> tuple[float, bool]:
    if eps <= 0:
        raise ValueError("eps must be > 0")
    a = np.abs(np.asarray(delta, dtype=np.float64)).ravel()
    if not np.isfinite(a).all():
        raise ValueError("specificity: delta has non-finite entries")
    peak = a.max() if a.size else 0.0
    if peak == 0.0:
        return 0.0, True
    sq = np.square(a / peak)  # p is scale-free; rescaling avoids underflow in the squares
    total = sq.sum()
    p = sq[sq > 0] / total
    h = float(-(p * np.log(p)).sum())
    return 1.0 / (max(h, 0.0) + eps), False


def specificity_from_traversal(tr: Traversal, eps: float = 1e-6) -> tuple[float, int]:
    """Mean specificity over nonzero (value, item) deltas, plus the count of zero deltas."""
    d = tr.deltas
    vals, zeros = [], 0
    for g in range(d.shape[0]):
        for b in range(d.shape[1]):
            s, z = specificity_flagged(d[g, b], eps)
            if z:
                zeros += 1
            else:
                vals.append(s)
    return (float(np.mean(vals)) if vals else 0.0), zeros


# ------------------------------------------------------------ modularity

@dataclass
class ModularityResult:
    value: float
    degenerate_pairs: int
    pairs: int


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if (a == a[0]).all() or (b == b[0]).all():
        return None  # checked before centring, which can leave rounding residue
    a = a - a.mean()
    b = b - b.mean()
    pa, pb = np.abs(a).max(), np.abs(b).max()
    if pa == 0.0 or pb == 0.0:
        return None
    a, b = a / pa, b / pb
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        return None
    # one square root keeps identical rows at exactly 1
    return float(np.clip((a @ b) / math.sqrt(saa * sbb), -1.0, 1.0))


def modularity_details(deltas: np.ndarray) -> ModularityResult:
    """M = 1 - mean_{i<j} |rho(delta_i, delta_j)| over rows (interventions).

    A pair involving a zero-variance row counts as |rho| = 0 and is tallied
    in ``degenerate_pairs``.
    """
    d = np.asarray(deltas, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"delta matrix must be 2-D, got {d.shape}")
    k, n = d.shape
    if n < 2:
        raise ValueError(f"modularity needs >= 2 units, got {n}")
    if k < 2:
        raise ValueError(f"modularity needs >= 2 interventions, got {k}")
    if not np.isfinite(d).all():
        raise ValueError("delta matrix has non-finite entries")
    total, degenerate, pairs = 0.0, 0, 0
    for i in range(k):
        for j in range(i + 1, k):
            r = _pearson(d[i], d[j])
            pairs += 1
            if r is None:
                degenerate += 1
            else:
                total += abs(r)
    m = 1.0 - total / pairs
    return ModularityResult(float(min(max(m, 0.0), 1.0)), degenerate, pairs)


def modularity(deltas: np.ndarray) -> float:
    return modularity_details(deltas).value


# ------------------------------------------------------ response profiles

@dataclass
class ResponseProfile:
    site: str
    factors: list[str]
    R: np.ndarray  # (units, factors), nonnegative

    def __post_init__(self):
        if self.R.ndim != 2 or self.R.shape[1] != len(self.factors):
            raise ValueError(f"profile shape {self.R.shape} vs {len(self.factors)} factors")
        if (self.R < 0).any():
            raise ValueError("response profile must be nonnegative")

    @property
    def n_units(self) -> int:
        return self.R.shape[0]

    def delta_matrix(self) -> np.ndarray:
        """Interventions x units matrix used for modularity."""
        return self.R.T


def unit_abs_delta(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(items, units) |A_n(a) - A_n(b)|; conv channels average |delta| over positions."""
    d = np.abs(a - b)
    if d.ndim > 2:
        d = d.reshape(d.shape[0], d.shape[1], -1).mean(axis=2)
    return d


def factor_response(model: ModelBundle, pairs: Mapping[str, tuple[np.ndarray, np.ndarray]],
                    site: str, traces: Mapping[str, tuple] | None = None) -> ResponseProfile:
    """R[n, f] = mean over items of |A_n(x) - A_n(x_tilde_f)|.

    ``pairs`` maps factor -> (x batch, x_tilde batch). Precomputed traces may
    be supplied as factor -> (trace_x, trace_x_tilde).
    """
    cols = []
    factors = list(pairs)
    for f in factors:
        x, xt = pairs[f]
        if len(x) == 0:
            raise ValueError(f"factor {f!r} has no intervention pairs")
        if traces is not None and f in traces:
            ta, tb = traces[f]
        else:
            ta, tb = capture(model, x), capture(model, xt)
        cols.append(unit_abs_delta(ta[site], tb[site]).mean(axis=0))
    return ResponseProfile(site, factors, np.stack(cols, axis=1))


def polysemanticity(r: Sequence[float]) -> float | None:
    """(sum r^2) / (sum r)^2 * |F|. None marks an inactive (all-zero) unit.

    Evaluated literally: a one-hot row gives |F| and a uniform row gives 1.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("polysemanticity needs a row over >= 2 factors")
    if not np.isfinite(r).all() or (r < 0).any():
        raise ValueError("responses must be finite and nonnegative")
    peak = r.max()
    if peak == 0.0:
        return None
    r = r / peak
    s = r.sum()
    ps = (r * r).sum() / (s * s) * len(r)
    return float(min(max(ps, 1.0), len(r)))  # the bounds hold exactly; clip rounding only


def profile_polysemanticity(profile: ResponseProfile) -> list[float | None]:
    return [polysemanticity(row) for row in profile.R]


def monosemantic_fraction(ps_values: Sequence[float | None], threshold: float = 1.5) -> float:
    active = [p for p in ps_values if p is not None]
    if not active:
        raise ValueError("monosemantic_fraction: every unit is inactive")
    return sum(1 for p in active if p <= threshold) / len(active)


def primary_factors(profile: ResponseProfile) -> np.ndarray:
    return np.argmax(profile.R, axis=1)


def cluster_coherence(labels: Sequence[int], primary: Sequence[int]) -> float:
    """Size-weighted mean over clusters of (modal primary-factor count / cluster size)."""
    labels = np.asarray(labels)
    primary = np.asarray(primary)
    if labels.size == 0:
        raise ValueError("cluster_coherence: no clusters")
    if labels.shape != primary.shape:
        raise ValueError("labels and primary factors must align")
    hit = 0
    for c in np.unique(labels):
        members = primary[labels == c]
        hit += np.bincount(members).max()
    return hit / labels.size


# ------------------------------------------------- disentanglement proxy

def discretize(values: np.ndarray, bins: int = 20) -> np.ndarray:
    """Equal-width bins over the observed range; a constant column maps to bin 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.int64)
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def discrete_entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def discrete_mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in MI of two discrete label arrays."""
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(max((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum(), 0.0))


def disentanglement_proxy(latents: np.ndarray, factor_labels: np.ndarray, bins: int = 20
                          ) -> float:
    """Mutual-information-gap style score in [0, 1].

    ``latents`` is (N, D) continuous, ``factor_labels`` (N, K) discrete. For
    each factor with nonzero entropy, the gap between the largest and second
    largest MI over binned latent dims is normalised by the factor entropy;
    the score is the mean over those factors.
    """
    z = np.asarray(latents, dtype=np.float64)
    y = np.asarray(factor_labels)
    if z.ndim != 2 or y.ndim != 2 or len(z) != len(y):
        raise ValueError(f"latents {z.shape} and factors {y.shape} must be (N, D) and (N, K)")
    zb = [discretize(z[:, j], bins) for j in range(z.shape[1])]
    gaps = []
    for k in range(y.shape[1]):
        h = discrete_entropy(y[:, k])
        if h <= 0:
            continue
        mi = sorted((discrete_mutual_info(zj, y[:, k]) for zj in zb), reverse=True)
        second = mi[1] if len(mi) > 1 else 0.0
        gaps.append(min(max((mi[0] - second) / h, 0.0), 1.0))
    return float(np.mean(gaps)) if gaps else 0.0


def factor_label_matrix(columns: Mapping[str, np.ndarray], bins: int = 20) -> np.ndarray:
    """Stack factor columns into discrete labels; columns with > ``bins`` levels are binned."""
    out = []
    for v in columns.values():
        v = np.asarray(v)
        if np.issubdtype(v.dtype, np.integer) or len(np.unique(v)) <= bins:
            out.append(np.unique(v, return_inverse=True)[1])
        else:
            out.append(discretize(v, bins))
    return np.stack(out, axis=1)


@dataclass
class SitePolysemanticity:
    values: list[float | None]
    inactive_count: int = 0
    mean: float | None = None
    notes: list[str] = field(default_factory=list)

    @classmethod
    def from_profile(cls, profile: ResponseProfile) -> "SitePolysemanticity":
        vals = profile_polysemanticity(profile)
        active = [v for v in vals if v is not None]
        return cls(vals, len(vals) - len(active), float(np.mean(active)) if active else None)


__all__ = [
    "LATENT_SITES", "MetricsConfig", "ModularityResult", "ResponseProfile",
    "SitePolysemanticity", "ces", "ces_from_traversal", "cluster_coherence", "discretize",
    "discrete_entropy", "discrete_mutual_info", "disentanglement_proxy", "factor_label_matrix",
    "factor_response", "l2_per_item", "modularity", "modularity_details",
    "monosemantic_fraction", "polysemanticity", "primary_factors", "profile_polysemanticity",
    "specificity", "specificity_flagged", "specificity_from_traversal", "unit_abs_delta",
]
