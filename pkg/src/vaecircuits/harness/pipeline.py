"""generate -> train -> intervene -> analyze, plus run comparison."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .. import circuits, metrics
from ..data import (DSPRITES_COLUMNS, DSPRITES_SHAPES, RANGES, SYNTHETIC_SHAPES, DatasetHandle,
                    generate_synthetic, intervene_input, load_dsprites)
from ..engine import SeededRNG
from ..interventions import capture, capture_latent, latent_traverse, mediation_table
from ..models import ModelBundle, TrainingLog, frozen, train
from .config import RunConfig

log = logging.getLogger(__name__)

PS_NOTE = ("PS is (sum r^2)/(sum r)^2 * |F| taken literally: a unit driven by one factor scores "
           "|F| and a unit driven by all factors equally scores 1, the reverse of the usual "
           "reading; monosemantic_fraction counts PS <= threshold as configured; published "
           "latent-space PS values below 1 cannot arise from this formula")
PROXY_NOTE = "MI-gap proxy over 20-bin discretised latents; not a reproduction of any table value"
PREVIEW_ITEMS = 4


# ------------------------------------------------------------------- data

def build_dataset(cfg: RunConfig) -> DatasetHandle:
    ds = cfg.dataset
    if ds.source == "synthetic":
        return generate_synthetic(ds.scm.build(cfg.model.image_size), ds.n, cfg.seed)
    return load_dsprites(ds.path, stride=ds.stride, offset=ds.offset)


def training_images(cfg: RunConfig, handle: DatasetHandle) -> np.ndarray:
    """All synthetic images; a seeded subset of at most ``n`` dSprites images."""
    if handle.source == "synthetic" or len(handle) <= cfg.dataset.n:
        return handle.images
    idx = np.sort(SeededRNG(cfg.seed, stream=0xD5).choice(len(handle), cfg.dataset.n))
    return handle.images[idx]


def train_model(cfg: RunConfig, handle: DatasetHandle,
                on_step: Callable[[dict], None] | None = None) -> tuple[ModelBundle, TrainingLog]:
    return train(training_images(cfg, handle), cfg.model, on_step=on_step)


# ------------------------------------------------------------ intervention pairs

def _new_value(handle: DatasetHandle, i: int, factor: str, rng: SeededRNG):
    if handle.source == "synthetic":
        if factor == "shape":
            cur = SYNTHETIC_SHAPES.index(handle.factors[i].shape)
            return SYNTHETIC_SHAPES[(cur + 1 + rng.integers(len(SYNTHETIC_SHAPES) - 1))
                                    % len(SYNTHETIC_SHAPES)]
        scm = handle.scm
        lo, hi = {"pos_x": scm.pos_range, "pos_y": scm.pos_range,
                  "background": scm.background_range}.get(factor, RANGES[factor])
        return rng.uniform(None, lo, hi)
    col = DSPRITES_COLUMNS.index(factor)
    card = handle.cardinalities[col]
    cur = int(handle.classes[i, col])
    if card < 2:
        return cur
    c = (cur + 1 + rng.integers(card - 1)) % card
    if factor == "shape":
        return DSPRITES_SHAPES[c]
    hit = np.flatnonzero(handle.classes[:, col] == c)
    # a class missing from a subsampled load maps to its nearest loaded neighbour
    return float(handle.values[hit[0], col]) if len(hit) else float(c)


def intervention_pairs(handle: DatasetHandle, idx: np.ndarray, factors, seed: int
                       ) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    root = SeededRNG(seed, stream=0xA2)
    pairs = {}
    for k, f in enumerate(factors):
        rng = root.child(k)
        xs, xts = [], []
        for i in idx:
            x, xt = intervene_input(handle, int(i), f, _new_value(handle, int(i), f, rng))
            xs.append(x)
            xts.append(xt)
        pairs[f] = (np.stack(xs), np.stack(xts))
    return pairs


def probe_factors(handle: DatasetHandle) -> list[str]:
    return [f for f in handle.factor_names if f in circuits.PROBES]


# ----------------------------------------------------------------- analysis

@dataclass
class AnalysisResult:
    metrics: dict
    previews: dict = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.errors


def analyze(model: ModelBundle, handle: DatasetHandle, cfg: RunConfig,
            stage_log: Callable[[dict], None] | None = None) -> AnalysisResult:
    """Every metric and circuit analysis for one trained model.

    A failing stage leaves its fields null and is listed in ``errors``.
    """
    model = frozen(model)
    a = cfg.analysis
    mcfg = a.metrics()
    n = len(handle)
    idx = np.sort(SeededRNG(cfg.seed, stream=0xA1).choice(n, min(a.sample_size, n)))
    x = handle.images[idx]
    D = model.config.latent_dim
    pf = probe_factors(handle)
    out: dict[str, Any] = {
        "variant": model.config.variant, "seed": cfg.seed, "disentanglement_proxy": None,
        "ces": {"per_dim": None, "mean": None},
        "specificity": {"per_dim": None, "mean": None, "zero_deltas": None},
        "modularity": {"per_site": None, "degenerate_pairs": None},
        "polysemanticity": {"per_site": None, "note": PS_NOTE},
        "monosemantic_fraction": None,
        "cluster_labels": {"per_site": None},
        "cluster_coherence": None,
        "circuits": {"per_site": None},
        "response_profiles": {"factors": list(a.interventions), "per_site": None},
        "causal_graph": None,
        "diagnostics": None,
        "mediation": None,
        "m_times_ces": None,
        "proxy_note": PROXY_NOTE,
    }
    res = AnalysisResult(out)

    def stage(name):
        def wrap(fn):
            try:
                fn()
                if stage_log:
                    stage_log({"stage": name, "status": "ok"})
            except Exception as e:  # noqa: BLE001 - recorded and surfaced as a partial report
                log.exception("analysis stage %s failed", name)
                res.errors.append(f"{name}: {type(e).__name__}: {e}")
                if stage_log:
                    stage_log({"stage": name, "status": "error", "error": str(e)})
            return fn
        return wrap

    @stage("latent")
    def _latent():
        z = capture_latent(model, x)
        ces, spec, zeros, effects = [], [], 0, np.zeros((D, len(pf)))
        heat, strips = [], []
        for d in range(D):
            tr = latent_traverse(model, x, d, mcfg.grid, z=z)
            ces.append(metrics.ces_from_traversal(tr))
            s, zc = metrics.specificity_from_traversal(tr, mcfg.eps)
            spec.append(s)
            zeros += zc
            effects[d] = circuits.traversal_effects(tr, pf)
            heat.append(np.abs(tr.deltas).mean(axis=(0, 1))[0])
            strips.append(tr.recons[:, :PREVIEW_ITEMS, 0])
        out["ces"] = {"per_dim": ces, "mean": float(np.mean(ces))}
        out["specificity"] = {"per_dim": spec, "mean": float(np.mean(spec)),
                              "zero_deltas": zeros}
        g = circuits.build_causal_graph(effects, pf, a.graph_threshold)
        out["causal_graph"] = g.to_json()
        share = circuits.top_dimension_share(effects)
        sweep = {}
        for t in (0.25, 0.5, 0.75, 0.9):
            sweep[str(t)] = len(circuits.build_causal_graph(effects, pf, t).edges)
        out["diagnostics"] = {
            "effects_raw": effects.tolist(),
            "top_dimension": {f: int(np.argmax(effects[:, j])) for j, f in enumerate(pf)},
            "top_dimension_share": {f: float(share[j]) for j, f in enumerate(pf)},
            "graph_edges_by_threshold": sweep,
        }
        res.previews["heatmaps"] = heat
        res.previews["strips"] = strips
        res.previews["grid"] = list(mcfg.grid)

    @stage("recon")
    def _recon():
        tr = capture(model, x[:8])
        res.previews["recon_pairs"] = (x[:8, 0], tr["recon"][:, 0])

    pairs = {}

    @stage("units")
    def _units():
        pairs.update(intervention_pairs(handle, idx, a.interventions, cfg.seed))
        base = capture(model, x)
        traces = {f: (base, capture(model, xt)) for f, (_, xt) in pairs.items()}
        mod, deg, ps_site, labels, circ, profiles = {}, {}, {}, {}, {}, {}
        for s in a.sites:
            prof = metrics.factor_response(model, pairs, s, traces)
            profiles[s] = prof.R.tolist()
            m = metrics.modularity_details(prof.delta_matrix())
            mod[s], deg[s] = m.value, m.degenerate_pairs
            sp = metrics.SitePolysemanticity.from_profile(prof)
            try:
                frac = metrics.monosemantic_fraction(sp.values, mcfg.mono_threshold)
            except ValueError:
                frac = None
            ps_site[s] = {"mean": sp.mean, "values": sp.values,
                          "inactive_count": sp.inactive_count, "monosemantic_fraction": frac}
            cl = circuits.cluster_units(prof, a.cluster_k, cfg.seed)
            labels[s] = [int(v) for v in cl.labels]
            prim = metrics.primary_factors(prof)
            circ[s] = {
                "coherence": metrics.cluster_coherence(cl.labels, prim),
                "k": int(cl.centroids.shape[0]),
                "kmeans_converged": bool(cl.converged),
                "primary_factor": [prof.factors[int(p)] for p in prim],
                "top_channels": {f: circuits.top_channels(prof, f, min(5, prof.n_units))
                                 for f in prof.factors},
            }
        out["modularity"] = {"per_site": mod, "degenerate_pairs": deg}
        out["polysemanticity"]["per_site"] = ps_site
        out["cluster_labels"] = {"per_site": labels}
        out["circuits"] = {"per_site": circ}
        out["response_profiles"]["per_site"] = profiles
        if "mu" in ps_site:
            out["monosemantic_fraction"] = ps_site["mu"]["monosemantic_fraction"]
            out["cluster_coherence"] = circ["mu"]["coherence"]

    @stage("mediation")
    def _mediation():
        if not pairs:
            raise RuntimeError("intervention pairs unavailable")
        k = min(a.mediation_items, len(idx))
        xm = np.concatenate([p[0][:k] for p in pairs.values()])
        xtm = np.concatenate([p[1][:k] for p in pairs.values()])
        t = mediation_table(model, xm, xtm, a.mediation_sites, a.mediation_probe, eps=1e-9)
        out["mediation"] = t

    @stage("disentanglement")
    def _proxy():
        m = min(a.proxy_sample, n)
        pidx = np.sort(SeededRNG(cfg.seed, stream=0xA3).choice(n, m))
        lat = np.concatenate([capture_latent(model, handle.images[pidx[i:i + 256]])
                              for i in range(0, m, 256)])
        cols = {f: handle.factor_labels(f)[pidx] for f in handle.factor_names}
        labels = metrics.factor_label_matrix(cols, mcfg.mi_bins)
        out["disentanglement_proxy"] = metrics.disentanglement_proxy(lat, labels, mcfg.mi_bins)

    mu_mod = (out["modularity"]["per_site"] or {}).get("mu")
    if mu_mod is not None and out["ces"]["mean"] is not None:
        out["m_times_ces"] = circuits.modularity_effect_product(mu_mod, out["ces"]["mean"])
    out["analysis_fingerprint"] = cfg.analysis_fingerprint()
    out["errors"] = list(res.errors)
    return res


# ----------------------------------------------------------------- comparison

HYPOTHESES = (
    {"name": "ces_mean: factor > standard > beta", "metric": "ces_mean", "kind": "chain",
     "order": ("factor", "standard", "beta")},
    {"name": "mu_modularity: beta highest", "metric": "mu_modularity", "kind": "argmax",
     "order": ("beta",)},
    {"name": "monosemantic_fraction: factor highest", "metric": "monosemantic_fraction",
     "kind": "argmax", "order": ("factor",)},
)

TABLE1_ROWS = ("disentanglement", "ces_mean", "specificity_mean", "mu_modularity",
               "monosemantic_fraction", "m_times_ces")


def summary_values(report: dict) -> dict[str, float | None]:
    mod = (report.get("modularity") or {}).get("per_site") or {}
    return {
        "disentanglement": report.get("disentanglement_proxy"),
        "ces_mean": (report.get("ces") or {}).get("mean"),
        "specificity_mean": (report.get("specificity") or {}).get("mean"),
        "mu_modularity": mod.get("mu"),
        "monosemantic_fraction": report.get("monosemantic_fraction"),
        "m_times_ces": report.get("m_times_ces"),
    }


def _verdict(h: dict, vals: dict[str, float | None]) -> str:
    if h["kind"] == "chain":
        involved = list(h["order"])
    else:
        involved = list(vals)
    if any(vals.get(v) is None for v in involved) or h["order"][0] not in vals:
        return "n/a"
    xs = [vals[v] for v in involved]
    if all(x == xs[0] for x in xs):
        return "tie"
    if h["kind"] == "chain":
        ok = all(xs[i] > xs[i + 1] for i in range(len(xs) - 1))
    else:
        top = vals[h["order"][0]]
        ok = all(top > vals[v] for v in involved if v != h["order"][0])
    return "pass" if ok else "fail"


@dataclass
class Comparison:
    rows: list[dict]                 # seed, variant, table-1 metrics
    verdicts: list[dict]             # hypothesis, seed, verdict
    majority: dict[str, str]

    def table_csv(self) -> list[list]:
        variants = sorted({r["variant"] for r in self.rows})
        seeds = sorted({r["seed"] for r in self.rows})
        out = [["seed", "metric", *variants]]
        for s in seeds:
            by_v = {r["variant"]: r for r in self.rows if r["seed"] == s}
            for m in TABLE1_ROWS:
                out.append([s, m, *[by_v.get(v, {}).get(m) for v in variants]])
        return out

    def verdict_csv(self) -> list[list]:
        out = [["hypothesis", "seed", "verdict"]]
        for v in self.verdicts:
            out.append([v["hypothesis"], v["seed"], v["verdict"]])
        for h, m in self.majority.items():
            out.append([h, "majority", m])
        return out


def majority_verdict(verdicts: list[str]) -> str:
    """Most frequent verdict among seeds; a tie between counts is inconclusive."""
    counted = [v for v in verdicts if v != "n/a"]
    if not counted:
        return "n/a"
    counts = {v: counted.count(v) for v in ("pass", "fail", "tie")}
    best = max(counts.values())
    winners = [v for v, c in counts.items() if c == best]
    return winners[0] if len(winners) == 1 else "inconclusive"


class ComparisonError(ValueError):
    pass


def compare_runs(reports: list[dict]) -> Comparison:
    """Side-by-side table plus per-seed and majority verdicts for each hypothesis."""
    if len(reports) < 2:
        raise ComparisonError("compare_runs needs at least two reports")
    fp = reports[0].get("analysis_fingerprint")
    for r in reports[1:]:
        if r.get("analysis_fingerprint") != fp:
            raise ComparisonError("reports were produced with different analysis configurations")
    rows = [{"seed": r["seed"], "variant": r["variant"], **summary_values(r)} for r in reports]
    seen = set()
    for r in rows:
        key = (r["seed"], r["variant"])
        if key in seen:
            raise ComparisonError(f"duplicate report for seed {key[0]} variant {key[1]}")
        seen.add(key)
    verdicts, majority = [], {}
    for h in HYPOTHESES:
        per_seed = []
        for s in sorted({r["seed"] for r in rows}):
            vals = {r["variant"]: r[h["metric"]] for r in rows if r["seed"] == s}
            v = _verdict(h, vals)
            per_seed.append(v)
            verdicts.append({"hypothesis": h["name"], "seed": s, "verdict": v})
        majority[h["name"]] = majority_verdict(per_seed)
    return Comparison(rows, verdicts, majority)


def epochs_monotone(epoch_losses: list[float], after: int = 1) -> bool:
    """Epoch-mean losses never increase from 0-based epoch ``after`` onward.

    The default checks epochs 3, 4, ... against their predecessors, starting
    from the second epoch.
    """
    tail = epoch_losses[after:]
    return all(b <= a for a, b in zip(tail, tail[1:]))


def finite(x) -> bool:
    return x is not None and math.isfinite(x)
