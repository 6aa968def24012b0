"""Report bundle: metrics.json, CSV tables, PGM previews, run log."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from ..circuits import graph_dot
from ..pgm import tile, write_pgm
from .pipeline import TABLE1_ROWS, AnalysisResult, Comparison, summary_values


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("metrics.schema.json").read_text())


def validate_metrics(doc: dict) -> None:
    """Raise jsonschema.ValidationError if ``doc`` breaks the published schema."""
    jsonschema.validate(doc, load_schema())


def dumps_metrics(doc: dict) -> str:
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def _write_csv(path: Path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def tables_from_metrics(m: dict) -> dict[str, list[list]]:
    """CSV tables derived purely from a metrics document."""
    t: dict[str, list[list]] = {}
    summary = summary_values(m)
    t["table1_summary.csv"] = [["metric", m["variant"]]] + [[k, summary[k]] for k in TABLE1_ROWS]
    ces, spec = m["ces"]["per_dim"] or [], m["specificity"]["per_dim"] or []
    t["table2_latent_dims.csv"] = [["dim", "ces", "specificity"]] + [
        [i, c, s] for i, (c, s) in enumerate(zip(ces, spec))]
    ps = m["polysemanticity"]["per_site"] or {}
    circ = (m.get("circuits") or {}).get("per_site") or {}
    rows = [["site", "mean_ps", "monosemantic_fraction", "inactive_count", "cluster_coherence"]]
    for s, v in ps.items():
        rows.append([s, v["mean"], v.get("monosemantic_fraction"), v["inactive_count"],
                     circ.get(s, {}).get("coherence")])
    t["table3_polysemanticity.csv"] = rows
    labels = m["cluster_labels"]["per_site"] or {}
    rows = [["site", "unit", "ps", "cluster", "primary_factor"]]
    for s, v in ps.items():
        prim = circ.get(s, {}).get("primary_factor", [None] * len(v["values"]))
        lab = labels.get(s, [None] * len(v["values"]))
        for u, p in enumerate(v["values"]):
            rows.append([s, u, p, lab[u], prim[u]])
    t["table3_units.csv"] = rows
    mod = m["modularity"]["per_site"] or {}
    t["table4_modularity.csv"] = [["site", "modularity"]] + [[s, v] for s, v in mod.items()]
    med = m.get("mediation") or {}
    per = med.get("per_layer_per_dim") or {}
    if per:
        width = len(next(iter(per.values())))
        rows = [["layer", *[f"dim_{i}" for i in range(width)]]]
        rows += [[s, *v] for s, v in per.items()]
    else:
        rows = [["layer"]]
    t["table5_mediation.csv"] = rows
    g = m.get("causal_graph") or {}
    t["causal_graph_edges.csv"] = [["latent", "factor", "weight"]] + [
        [e["latent"], e["factor"], e["weight"]] for e in g.get("edges", [])]
    return t


def _norm01(a: np.ndarray) -> np.ndarray:
    mx = float(a.max()) if a.size else 0.0
    return a / mx if mx > 0 else np.zeros_like(a)


def write_images(res: AnalysisResult, out: Path) -> list[Path]:
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    p = res.previews
    if "recon_pairs" in p:
        xs, rs = p["recon_pairs"]
        path = img_dir / "recon_grid.pgm"
        write_pgm(path, tile(list(xs) + list(rs), ncols=len(xs)))
        paths.append(path)
    for d, strip in enumerate(p.get("strips", [])):
        # rows are items, columns are grid values
        g, b = strip.shape[:2]
        path = img_dir / f"traversal_dim{d}.pgm"
        write_pgm(path, tile([strip[j, i] for i in range(b) for j in range(g)], ncols=g))
        paths.append(path)
    for d, h in enumerate(p.get("heatmaps", [])):
        path = img_dir / f"delta_dim{d}.pgm"
        write_pgm(path, _norm01(h))
        paths.append(path)
    return paths


@dataclass
class ReportBundle:
    out: Path
    metrics_path: Path
    tables: list[Path] = field(default_factory=list)
    images: list[Path] = field(default_factory=list)
    complete: bool = True


def emit_report(res: AnalysisResult, out_dir: str | Path, run_records: list[dict] | None = None
                ) -> ReportBundle:
    """Write the bundle; an incomplete analysis still yields a (null-filled) report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = res.metrics
    validate_metrics(doc)
    mpath = out / "metrics.json"
    mpath.write_text(dumps_metrics(doc))
    graph = doc.get("causal_graph")
    if graph:
        (out / "causal_graph.json").write_text(json.dumps(graph, indent=2) + "\n")
        (out / "causal_graph.dot").write_text(graph_dot(graph))
    tdir = out / "tables"
    tdir.mkdir(exist_ok=True)
    tables = []
    for name, rows in tables_from_metrics(doc).items():
        _write_csv(tdir / name, rows)
        tables.append(tdir / name)
    images = write_images(res, out)
    if run_records is not None:
        append_jsonl(out / "run.jsonl", run_records)
    return ReportBundle(out, mpath, tables, images, res.complete)


def append_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def write_comparison(cmp: Comparison, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a, b = out / "comparison_table1.csv", out / "comparison_verdicts.csv"
    _write_csv(a, cmp.table_csv())
    _write_csv(b, cmp.verdict_csv())
    return [a, b]
