"""Unit clustering, top-channel ranking, latent-to-factor causal graphs.

Probe statistics map a batch of reconstructions to one summary per
generative factor so that latent traversals can be scored factor by factor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .engine import SeededRNG
from .interventions import Traversal
from .metrics import ResponseProfile


# ------------------------------------------------------------- clustering

@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    history: list[float]
    iterations: int
    converged: bool


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None]
    return np.maximum(d, 0.0)


def _plusplus(x: np.ndarray, k: int, rng: SeededRNG) -> np.ndarray:
    n = len(x)
    idx = [rng.integers(n)]
    d2 = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen centre; pick the next unused one
            unused = [i for i in range(n) if i not in idx]
            idx.append(unused[0])
        else:
            u = rng.uniform() * total
            j = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            idx.append(min(j, n - 1))
        d2 = np.minimum(d2, _sq_dists(x, x[idx[-1:]])[:, 0])
    return x[idx].copy()


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Ties in assignment go to the lowest centroid index. An emptied cluster
    keeps its previous centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"kmeans expects a 2-D array, got {x.shape}")
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must be in [1, {len(x)}]")
    c = _plusplus(x, k, SeededRNG(seed, stream=0xC1))
    history: list[float] = []
    labels = np.full(len(x), -1)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, c)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if np.array_equal(new, labels):
            converged = True
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return KMeansResult(labels, c, history, it, converged)


def row_normalize(R: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(R, axis=1, keepdims=True)
    return np.divide(R, norms, out=np.zeros_like(R, dtype=np.float64), where=norms > 0)


@dataclass
class CircuitClusters:
    site: str
    labels: np.ndarray
    centroids: np.ndarray
    history: list[float]
    converged: bool


def cluster_units(profile: ResponseProfile, k: int = 3, seed: int = 0,
                  max_iter: int = 100) -> CircuitClusters:
    """k-means on the L2-normalised rows of R."""
    if not 1 <= k <= profile.n_units:
        raise ValueError(f"cluster_units: k={k} must be in [1, {profile.n_units}]")
    res = kmeans(row_normalize(profile.R), k, seed, max_iter)
    return CircuitClusters(profile.site, res.labels, res.centroids, res.history, res.converged)


def top_channels(profile: ResponseProfile, factor: str | int, top_k: int = 5) -> list[int]:
    """Channels ranked by R[:, f], descending; ties keep the lower index first."""
    f = profile.factors.index(factor) if isinstance(factor, str) else int(factor)
    order = np.argsort(-profile.R[:, f], kind="stable")
    return [int(i) for i in order[:top_k]]


# ---------------------------------------------------------- probe statistics

def _fg_weights(imgs: np.ndarray) -> np.ndarray:
    """Per-image foreground weights: intensity above the border mean, clipped at 0."""
    border = border_mean(imgs)
    w = np.clip(imgs[:, 0] - border[:, None, None], 0.0, None)
    return w


def border_mean(imgs: np.ndarray) -> np.ndarray:
    im = imgs[:, 0]
    edge = np.concatenate([im[:, 0, :], im[:, -1, :], im[:, 1:-1, 0], im[:, 1:-1, -1]], axis=1)
    return edge.mean(axis=1)


def probe_mass(imgs: np.ndarray) -> np.ndarray:
    s = imgs.shape[-1]
    return (_fg_weights(imgs).reshape(len(imgs), -1).sum(axis=1) / (s * s))[:, None]


def probe_centroid(imgs: np.ndarray) -> np.ndarray:
    """(B, 2) foreground centroid (x, y) in [0, 1] image coordinates."""
    w = _fg_weights(imgs)
    s = imgs.shape[-1]
    coords = (np.arange(s) + 0.5) / s
    tot = w.sum(axis=(1, 2))
    safe = np.where(tot > 0, tot, 1.0)
    cx = (w.sum(axis=1) * coords).sum(axis=1) / safe
    cy = (w.sum(axis=2) * coords).sum(axis=1) / safe
    cx = np.where(tot > 0, cx, 0.5)
    cy = np.where(tot > 0, cy, 0.5)
    return np.stack([cx, cy], axis=1)


def probe_orientation(imgs: np.ndarray) -> np.ndarray:
    """(B, 2) doubled-angle second-moment vector, scaled by anisotropy."""
    w = _fg_weights(imgs)
    s = imgs.shape[-1]
    coords = (np.arange(s) + 0.5) / s
    c = probe_centroid(imgs)
    dx = coords[None, None, :] - c[:, 0, None, None]
    dy = coords[None, :, None] - c[:, 1, None, None]
    mxx = (w * dx * dx).sum(axis=(1, 2))
    myy = (w * dy * dy).sum(axis=(1, 2))
    mxy = (w * dx * dy).sum(axis=(1, 2))
    tr = mxx + myy
    safe = np.where(tr > 0, tr, 1.0)
    return np.stack([(mxx - myy) / safe, 2.0 * mxy / safe], axis=1) * (tr > 0)[:, None]


def probe_border(imgs: np.ndarray) -> np.ndarray:
    return border_mean(imgs)[:, None]


def probe_contrast(imgs: np.ndarray) -> np.ndarray:
    """Mean foreground lift over the border, taken over pixels above half the peak lift."""
    w = _fg_weights(imgs).reshape(len(imgs), -1)
    peak = w.max(axis=1, keepdims=True)
    core = (w >= 0.5 * peak) & (peak > 0)
    n = core.sum(axis=1)
    return (np.where(core, w, 0.0).sum(axis=1) / np.maximum(n, 1))[:, None]


def probe_shape(imgs: np.ndarray) -> np.ndarray:
    """Compactness area / (2 pi trace of the second moment): 1 for a disc, lower otherwise.

    Area is measured on peak-normalised foreground weights, so neither
    contrast nor scale moves the statistic.
    """
    w = _fg_weights(imgs)
    s = imgs.shape[-1]
    coords = (np.arange(s) + 0.5) / s
    c = probe_centroid(imgs)
    dx = coords[None, None, :] - c[:, 0, None, None]
    dy = coords[None, :, None] - c[:, 1, None, None]
    tot = w.sum(axis=(1, 2))
    peak = w.reshape(len(w), -1).max(axis=1)
    ok = (tot > 0) & (peak > 0)
    tr = (w * (dx * dx + dy * dy)).sum(axis=(1, 2)) / np.where(ok, tot, 1.0)
    area = tot / np.where(ok, peak, 1.0) / (s * s)
    ok &= tr > 0
    return np.where(ok, area / (2 * np.pi * np.where(ok, tr, 1.0)), 0.0)[:, None]


PROBES = {
    "scale": probe_mass,
    "pos_x": lambda im: probe_centroid(im)[:, :1],
    "pos_y": lambda im: probe_centroid(im)[:, 1:],
    "orientation": probe_orientation,
    "shape": probe_shape,
    "contrast": probe_contrast,
    "background": probe_border,
}


def probe_change(factor: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image change in the factor's probe statistic between two recon batches."""
    if factor not in PROBES:
        raise KeyError(f"no probe statistic for factor {factor!r}")
    d = PROBES[factor](a) - PROBES[factor](b)
    return np.sqrt((d * d).sum(axis=1))


def traversal_effects(tr: Traversal, factors: Sequence[str]) -> np.ndarray:
    """Mean probe change per factor over grid values and items."""
    out = np.zeros(len(factors))
    for j, f in enumerate(factors):
        out[j] = np.mean([probe_change(f, r, tr.base).mean() for r in tr.recons])
    return out


# ------------------------------------------------------------ causal graph

@dataclass
class CausalGraph:
    factors: list[str]
    weights: np.ndarray          # (latent dims, factors), per-factor max-normalised
    raw: np.ndarray
    threshold: float = 0.5
    edges: list[tuple[int, str, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "factors": list(self.factors),
            "weights": self.weights.tolist(),
            "edges": [{"latent": i, "factor": f, "weight": w} for i, f, w in self.edges],
        }

    def to_dot(self) -> str:
        return graph_dot(self.to_json())

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def graph_dot(graph: Mapping) -> str:
    """DOT text for a graph in its JSON form."""
    lines = ["digraph causal {", "  rankdir=LR;"]
    lines += [f"  z{i} [shape=circle];" for i in range(len(graph["weights"]))]
    lines += [f'  "{f}" [shape=box];' for f in graph["factors"]]
    for e in graph["edges"]:
        w = e["weight"]
        lines.append(f'  z{e["latent"]} -> "{e["factor"]}" [label="{w:.2f}", '
                     f'penwidth={1 + 3 * w:.2f}];')
    return "\n".join(lines + ["}"]) + "\n"


def build_causal_graph(effects: np.ndarray, factors: Sequence[str], threshold: float = 0.5
                       ) -> CausalGraph:
    """Edge z_i -> f when E[i, f] / max_j E[j, f] is at least ``threshold``.

    A factor whose column is all zero gets no edges.
    """
    E = np.asarray(effects, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != len(factors):
        raise ValueError(f"effects {E.shape} vs {len(factors)} factors")
    if (E < 0).any():
        raise ValueError("effects must be nonnegative")
    col_max = E.max(axis=0, keepdims=True)
    W = np.divide(E, col_max, out=np.zeros_like(E), where=col_max > 0)
    edges = [(i, factors[f], float(W[i, f]))
             for f in range(E.shape[1]) for i in range(E.shape[0]) if W[i, f] >= threshold]
    return CausalGraph(list(factors), W, E, threshold, edges)


def top_dimension_share(effects: np.ndarray) -> np.ndarray:
    """Per factor, the largest effect divided by the column sum (0 for empty columns)."""
    E = np.asarray(effects, dtype=np.float64)
    s = E.sum(axis=0)
    return np.divide(E.max(axis=0), s, out=np.zeros_like(s), where=s > 0)


def modularity_effect_product(modularity: float, mean_ces: float) -> float:
    """M x mean CES, the combined diagnostic reported beside both factors."""
    if not (np.isfinite(modularity) and np.isfinite(mean_ces)):
        raise ValueError("modularity_effect_product: inputs must be finite")
    return float(modularity) * float(mean_ces)


__all__ = [
    "CausalGraph", "CircuitClusters", "KMeansResult", "PROBES", "border_mean",
    "build_causal_graph", "cluster_units", "graph_dot", "kmeans", "modularity_effect_product",
    "probe_centroid", "probe_change", "probe_contrast", "probe_mass", "probe_orientation",
    "probe_shape", "row_normalize", "top_channels", "top_dimension_share", "traversal_effects",
]
