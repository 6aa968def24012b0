"""Command line entry point.

Exit status: 0 success, 1 usage or validation error, 2 runtime failure
(including a partially completed analysis). Messages go to stderr; results
are written only to files under --out.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import DatasetError, export_synthetic, inspect_dsprites
from ..interventions import PatchSpec, capture, latent_traverse, mediation_table, patch
from ..models import ConfigError, ModelBundle, TrainingDiverged
from ..pgm import tile, write_pgm
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .pipeline import (ComparisonError, analyze, build_dataset, compare_runs, intervention_pairs,
                       train_model)
from .report import emit_report, write_comparison

log = logging.getLogger("vaecircuits")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
CHECKPOINT_NAME = "model.vcp"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="vaecircuits", description="Causal intervention analysis for small VAEs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="generate or inspect the dataset")
    sub.add_parser("train", parents=[common], help="train a model and save a checkpoint")

    ck = argparse.ArgumentParser(add_help=False)
    ck.add_argument("--checkpoint", help=f"checkpoint path (default: <out>/{CHECKPOINT_NAME})")

    t = sub.add_parser("traverse", parents=[common, ck], help="latent traversal images")
    t.add_argument("--dim", type=int, required=True)
    t.add_argument("--items", type=int, default=4)

    pa = sub.add_parser("patch", parents=[common, ck], help="patch one site or unit")
    pa.add_argument("--site", required=True)
    pa.add_argument("--unit", type=int, default=None)
    pa.add_argument("--base-index", type=int, default=0)
    pa.add_argument("--donor-index", type=int, default=1)

    me = sub.add_parser("mediate", parents=[common, ck], help="mediation table")
    me.add_argument("--factor", default=None, help="intervened factor (default: all configured)")

    sub.add_parser("metrics", parents=[common, ck], help="full analysis of a checkpoint")
    sub.add_parser("analyze", parents=[common], help="train, then run the full analysis")

    r = sub.add_parser("report", parents=[common], help="compare finished runs")
    r.add_argument("runs", nargs="+", help="run directories or metrics.json files")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    return cfg.with_overrides(seed=args.seed, out=args.out)


def _checkpoint(args, cfg: RunConfig) -> ModelBundle:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / CHECKPOINT_NAME
    return load_checkpoint(path)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def _train(cfg: RunConfig, out: Path):
    handle = build_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    run_log = out / "run.jsonl"
    run_log.write_text("")
    with open(run_log, "a") as fh:
        model, tlog = train_model(cfg, handle,
                                  on_step=lambda r: fh.write(json.dumps({"phase": "train", **r})
                                                             + "\n"))
    save_checkpoint(out / CHECKPOINT_NAME, model, extra={"seed": cfg.seed})
    _write_json(out / "training.json", {"epochs": tlog.epochs})
    _write_json(out / "config.json", cfg.to_dict())
    log.info("trained %s for %d epochs; checkpoint at %s", cfg.model.variant,
             cfg.model.epochs, out / CHECKPOINT_NAME)
    return model, handle


def _metrics(cfg: RunConfig, model: ModelBundle, handle, out: Path) -> int:
    if model.config.to_dict() | {"seed": 0} != cfg.model.to_dict() | {"seed": 0}:
        log.warning("checkpoint model config differs from --config; using the checkpoint's")
    records: list[dict] = []
    res = analyze(model, handle, cfg, stage_log=records.append)
    emit_report(res, out, run_records=[{"phase": "analysis", **r} for r in records])
    if not res.complete:
        for e in res.errors:
            log.error("analysis incomplete: %s", e)
        return EXIT_RUNTIME
    log.info("report written to %s", out)
    return EXIT_OK


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(cfg.out) / "data"
    if cfg.dataset.source == "dsprites":
        info = inspect_dsprites(cfg.dataset.path)
        handle = build_dataset(cfg)
        _write_json(out / "summary.json", {
            "arrays": {k: {"dtype": str(v[0]), "shape": list(v[1])} for k, v in info.items()},
            "loaded": len(handle), "cardinalities": list(handle.cardinalities)})
    else:
        export_synthetic(build_dataset(cfg), out)
    log.info("dataset written to %s", out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    _train(cfg, Path(cfg.out))
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    model, handle = _train(cfg, out)
    return _metrics(cfg, model, handle, out)


def cmd_metrics(args, cfg: RunConfig) -> int:
    model = _checkpoint(args, cfg)
    return _metrics(cfg, model, build_dataset(cfg), Path(cfg.out))


def cmd_traverse(args, cfg: RunConfig) -> int:
    model = _checkpoint(args, cfg)
    handle = build_dataset(cfg)
    x = handle.images[:max(1, min(args.items, len(handle)))]
    tr = latent_traverse(model, x, args.dim, cfg.analysis.grid)
    out = Path(cfg.out)
    g, b = tr.recons.shape[:2]
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_pgm(out / "images" / f"traversal_dim{args.dim}.pgm",
              tile([tr.recons[j, i, 0] for i in range(b) for j in range(g)], ncols=g))
    _write_json(out / f"traversal_dim{args.dim}.json",
                {"dim": args.dim, "grid": tr.grid.tolist(),
                 "step_l2_max": float(tr.step_l2().max()) if g > 1 else 0.0})
    return EXIT_OK


def cmd_patch(args, cfg: RunConfig) -> int:
    model = _checkpoint(args, cfg)
    handle = build_dataset(cfg)
    for i in (args.base_index, args.donor_index):
        if not 0 <= i < len(handle):
            raise ConfigError(f"item index {i} out of range [0, {len(handle)})")
    x1 = handle.images[args.base_index:args.base_index + 1]
    x2 = handle.images[args.donor_index:args.donor_index + 1]
    res = patch(model, x1, x2, PatchSpec(args.site, args.unit))
    r1, r2 = capture(model, x1)["recon"], capture(model, x2)["recon"]
    out = Path(cfg.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    tag = args.site if args.unit is None else f"{args.site}_u{args.unit}"
    write_pgm(out / "images" / f"patch_{tag}.pgm", tile([r1[0, 0], res.recon[0, 0], r2[0, 0]], 3))
    _write_json(out / f"patch_{tag}.json", {
        "site": args.site, "unit": args.unit, "base_index": args.base_index,
        "donor_index": args.donor_index,
        "l2_from_base": float(np.sqrt(((res.recon - r1) ** 2).sum())),
        "l2_from_donor": float(np.sqrt(((res.recon - r2) ** 2).sum()))})
    return EXIT_OK


def cmd_mediate(args, cfg: RunConfig) -> int:
    model = _checkpoint(args, cfg)
    handle = build_dataset(cfg)
    a = cfg.analysis
    factors = [args.factor] if args.factor else list(a.interventions)
    n = min(a.mediation_items, len(handle))
    pairs = intervention_pairs(handle, np.arange(n), factors, cfg.seed)
    x = np.concatenate([p[0] for p in pairs.values()])
    xt = np.concatenate([p[1] for p in pairs.values()])
    table = mediation_table(model, x, xt, a.mediation_sites, a.mediation_probe, eps=1e-9)
    _write_json(Path(cfg.out) / "mediation.json", {"factors": factors, **table})
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    docs = []
    for r in args.runs:
        p = Path(r)
        p = p / "metrics.json" if p.is_dir() else p
        if not p.is_file():
            raise ConfigError(f"no metrics.json at {p}")
        docs.append(json.loads(p.read_text()))
    cmp = compare_runs(docs)
    write_comparison(cmp, cfg.out)
    for h, v in cmp.majority.items():
        log.info("%s: %s", h, v)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "traverse": cmd_traverse,
    "patch": cmd_patch, "mediate": cmd_mediate, "metrics": cmd_metrics,
    "analyze": cmd_analyze, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DatasetError, CheckpointError, ComparisonError, FileNotFoundError,
            IndexError, KeyError) as e:
        log.error("%s", e)
        return EXIT_INVALID
    except TrainingDiverged as e:
        log.error("training diverged: %s", e)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("runtime failure: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
