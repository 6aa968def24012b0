import csv
import json
import math
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from conftest import random_model, tiny_config, tiny_images
from vaecircuits.harness.checkpoint import (CheckpointError, inspect_checkpoint, load_checkpoint,
                                            save_checkpoint)
from vaecircuits.harness.cli import main
from vaecircuits.harness.config import RunConfig
from vaecircuits.harness.pipeline import (ComparisonError, compare_runs, epochs_monotone,
                                          majority_verdict)
from vaecircuits.engine import SeededRNG
from vaecircuits.harness.report import tables_from_metrics, validate_metrics
from vaecircuits.models import ConfigError, init_discriminator, train
from vaecircuits.pgm import read_pgm


def small_run(out, **over) -> dict:
    d = {"seed": 0, "out": str(out), "dataset": {"n": 48},
         "model": {"image_size": 16, "conv_channels": [3, 4, 5], "latent_dim": 3,
                   "disc_hidden": [8, 8], "batch_size": 16, "epochs": 1},
         "analysis": {"sample_size": 8, "proxy_sample": 32, "mediation_items": 2,
                      "grid": [-1.0, 0.0, 1.0]}}
    for k, v in over.items():
        if isinstance(v, dict):
            d[k] = {**d.get(k, {}), **v}
        else:
            d[k] = v
    return d


def write_cfg(path: Path, d: dict) -> Path:
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def analyzed(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_cfg(root / "run.json", small_run(root / "out"))
    assert main(["analyze", "--config", str(cfg)]) == 0
    return root, root / "out"


# ------------------------------------------------------------- checkpoint

@pytest.mark.parametrize("variant", ["standard", "factor"])
def test_checkpoint_round_trip_bit_exact(tmp_path, variant):
    m = random_model(4, variant=variant)
    if variant == "factor":
        m.disc_params = init_discriminator(m.config, SeededRNG(9))
    p = save_checkpoint(tmp_path / "m.vcp", m, extra={"note": 1})
    back = load_checkpoint(p)
    assert back.config == m.config and back.site_names == m.site_names
    for group in ("params", "disc_params"):
        a, b = getattr(m, group), getattr(back, group)
        assert list(a) == list(b)
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_header_inspection(tmp_path):
    m = random_model(1)
    p = save_checkpoint(tmp_path / "m.vcp", m)
    h = inspect_checkpoint(p)
    assert [e["name"] for e in h["tensors"]] == list(m.params)
    assert h["payload_bytes"] == sum(t.data.size * 8 for t in m.params.values())
    assert h["site_names"] == m.site_names
    assert p.read_bytes()[:4] == b"VCP1"


def test_checkpoint_corruptions(tmp_path):
    p = save_checkpoint(tmp_path / "m.vcp", random_model(2))
    raw = p.read_bytes()
    cases = {"truncated": raw[:-8], "padded": raw + b"\0" * 8, "magic": b"XCP1" + raw[4:],
             "short": raw[:10], "version": raw[:4] + (9).to_bytes(4, "little") + raw[8:]}
    for name, blob in cases.items():
        q = tmp_path / f"{name}.vcp"
        q.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(q)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.vcp")


def test_checkpoint_partial_discriminator_rejected(tmp_path):
    m = random_model(5, variant="factor")
    assert load_checkpoint(save_checkpoint(tmp_path / "u.vcp", m)).disc_params == {}
    m.disc_params = init_discriminator(m.config, SeededRNG(1))
    m.disc_params.pop(next(iter(m.disc_params)))
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(save_checkpoint(tmp_path / "p.vcp", m))


def test_checkpoint_shape_mismatch(tmp_path):
    p = save_checkpoint(tmp_path / "m.vcp", random_model(3))
    raw = p.read_bytes()
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + hlen])
    header["config"]["latent_dim"] = 4
    hb = json.dumps(header, sort_keys=True).encode()
    q = tmp_path / "bad.vcp"
    q.write_bytes(raw[:8] + len(hb).to_bytes(8, "little") + hb + raw[16 + hlen:])
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(q)


# ----------------------------------------------------------------- config

def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig.from_dict(small_run(tmp_path))
    assert cfg.model.seed == 0 and cfg.dataset.n == 48
    again = cfg.with_overrides(seed=5, out="elsewhere")
    assert again.seed == 5 and again.model.seed == 5 and again.out == "elsewhere"
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("bad", [
    {"colour": 1},
    {"dataset": {"n": 0}},
    {"dataset": {"source": "mnist"}},
    {"dataset": {"source": "dsprites"}},
    {"dataset": {"scm": {"base_size": {"square": 0.6}}}},
    {"dataset": {"scm": {"background_range": [0.5, 0.1]}}},
    {"model": {"latent_dim": 0}},
    {"model": {"seed": 3}},
    {"model": {"variant": "vq"}},
    {"analysis": {"sites": ["encoder_conv_7"]}},
    {"analysis": {"interventions": ["shape"]}},
    {"analysis": {"interventions": ["shape", "colour"]}},
    {"analysis": {"cluster_k": 4}},  # mu has only 3 units
    {"analysis": {"grid": []}},
    {"analysis": {"mediation_probe": "z"}},
    {"analysis": {"mediation_probe": "mu", "mediation_sites": ["decoder_conv_0"]}},
    {"analysis": {"sample_size": "many"}},
    {"seed": -1},
])
def test_config_rejects(tmp_path, bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(small_run(tmp_path, **bad))


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(tmp_path / "bad.json")


# -------------------------------------------------------------------- cli

def test_cli_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "missing.json"
    assert main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_cli_validation_error_is_exit_1(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", small_run(tmp_path, model={"latent_dim": -2}))
    assert main(["train", "--config", str(cfg)]) == 1


def test_cli_runtime_failure_is_exit_2(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", small_run(tmp_path / "o", model={"lr": 1e6}))
    assert main(["train", "--config", str(cfg)]) == 2


def test_cli_no_stdout(analyzed, capsys):
    root, out = analyzed
    assert main(["traverse", "--config", str(root / "run.json"), "--dim", "0",
                 "--items", "2"]) == 0
    assert capsys.readouterr().out == ""


def test_analyze_bundle_contents(analyzed):
    _, out = analyzed
    for name in ("metrics.json", "model.vcp", "run.jsonl", "training.json", "config.json",
                 "causal_graph.json", "causal_graph.dot", "images/recon_grid.pgm",
                 "images/traversal_dim0.pgm", "tables/table1_summary.csv",
                 "tables/table5_mediation.csv"):
        assert (out / name).is_file(), name
    doc = json.loads((out / "metrics.json").read_text())
    validate_metrics(doc)
    assert doc["errors"] == [] and doc["variant"] == "standard"
    recs = [json.loads(line) for line in (out / "run.jsonl").read_text().splitlines()]
    assert [r["phase"] for r in recs] == ["train"] * 3 + ["analysis"] * 5
    assert [r["stage"] for r in recs[3:]] == ["latent", "recon", "units", "mediation",
                                              "disentanglement"]


def test_delta_heatmap_matches_input_size(analyzed):
    _, out = analyzed
    for d in range(3):
        assert read_pgm(out / "images" / f"delta_dim{d}.pgm").shape == (16, 16)


def _numbers(obj):
    if isinstance(obj, bool):
        return
    if isinstance(obj, (int, float)):
        yield float(obj)
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _numbers(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _numbers(v)


def test_every_table_number_is_in_metrics(analyzed):
    _, out = analyzed
    doc = json.loads((out / "metrics.json").read_text())
    known = set(_numbers(doc))
    checked = 0
    for p in sorted((out / "tables").glob("*.csv")):
        rows = list(csv.reader(open(p)))
        for row in rows[1:]:
            for cell in row[1:]:  # first column is a label or index
                try:
                    v = float(cell)
                except ValueError:
                    continue
                if p.name == "table3_units.csv" and cell == row[1]:
                    continue  # unit index
                assert v in known, (p.name, row, cell)
                checked += 1
    assert checked > 20
    regenerated = tables_from_metrics(doc)
    for name, rows in regenerated.items():
        on_disk = list(csv.reader(open(out / "tables" / name)))
        assert on_disk == [[("" if c is None else str(c)) for c in r] for r in rows]


def test_schema_rejects_missing_fields(analyzed):
    _, out = analyzed
    doc = json.loads((out / "metrics.json").read_text())
    del doc["ces"]
    with pytest.raises(jsonschema.ValidationError):
        validate_metrics(doc)


def test_train_then_metrics_equals_analyze(analyzed, tmp_path):
    root, out = analyzed
    cfg = write_cfg(tmp_path / "c.json", small_run(tmp_path / "two"))
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["metrics", "--config", str(cfg), "--checkpoint",
                 str(tmp_path / "two" / "model.vcp")]) == 0
    assert (tmp_path / "two" / "metrics.json").read_bytes() == (out / "metrics.json").read_bytes()


def test_patch_mediate_gen_data_commands(analyzed, tmp_path):
    root, out = analyzed
    c = str(root / "run.json")
    assert main(["patch", "--config", c, "--site", "mu", "--unit", "1"]) == 0
    res = json.loads((out / "patch_mu_u1.json").read_text())
    assert res["l2_from_base"] >= 0 and math.isfinite(res["l2_from_donor"])
    assert main(["patch", "--config", c, "--site", "mu", "--base-index", "999"]) == 1
    assert main(["patch", "--config", c, "--site", "nowhere"]) == 1
    assert main(["mediate", "--config", c, "--factor", "shape"]) == 0
    med = json.loads((out / "mediation.json").read_text())
    assert med["factors"] == ["shape"] and "per_layer" in med
    assert main(["gen-data", "--config", c, "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "data").is_dir()
    assert main(["metrics", "--config", c, "--checkpoint", str(tmp_path / "none.vcp")]) == 1


def test_report_command(analyzed, tmp_path):
    root, out = analyzed
    doc = json.loads((out / "metrics.json").read_text())
    for v in ("beta", "factor"):
        d = tmp_path / v
        d.mkdir()
        (d / "metrics.json").write_text(json.dumps({**doc, "variant": v}))
    assert main(["report", "--out", str(tmp_path / "cmp"), str(out), str(tmp_path / "beta"),
                 str(tmp_path / "factor")]) == 0
    verdicts = list(csv.reader(open(tmp_path / "cmp" / "comparison_verdicts.csv")))
    assert all(r[2] == "tie" for r in verdicts[1:])
    assert main(["report", str(out)]) == 1
    assert main(["report", str(out), str(tmp_path / "missing")]) == 1


# -------------------------------------------------------------- comparison

def report(variant, seed, ces=1.0, mod=0.1, mono=0.5, fp=None):
    return {"variant": variant, "seed": seed, "disentanglement_proxy": 0.1,
            "ces": {"mean": ces}, "specificity": {"mean": 0.2},
            "modularity": {"per_site": {"mu": mod}}, "monosemantic_fraction": mono,
            "m_times_ces": mod * ces, "analysis_fingerprint": fp or {"a": 1}}


def test_identical_reports_tie():
    cmp = compare_runs([report(v, 0) for v in ("standard", "beta", "factor")])
    assert set(cmp.majority.values()) == {"tie"}


def test_published_values_pass_orderings():
    runs = [report("factor", 0, ces=4.59, mod=0.274, mono=0.587),
            report("standard", 0, ces=3.99, mod=0.051, mono=0.3),
            report("beta", 0, ces=3.43, mod=0.438, mono=0.4)]
    cmp = compare_runs(runs)
    assert set(cmp.majority.values()) == {"pass"}
    table = cmp.table_csv()
    assert table[0] == ["seed", "metric", "beta", "factor", "standard"]
    assert [r[1] for r in table[1:]][:4] == ["disentanglement", "ces_mean", "specificity_mean",
                                             "mu_modularity"]
    assert table[2][2:] == [3.43, 4.59, 3.99]


def test_per_seed_and_majority_verdicts():
    runs = []
    for seed, ces in ((0, (3, 2, 1)), (1, (3, 2, 1)), (2, (1, 2, 3))):
        for v, c in zip(("factor", "standard", "beta"), ces):
            runs.append(report(v, seed, ces=c))
    cmp = compare_runs(runs)
    per = [v["verdict"] for v in cmp.verdicts if v["hypothesis"].startswith("ces_mean")]
    assert per == ["pass", "pass", "fail"]
    assert cmp.majority["ces_mean: factor > standard > beta"] == "pass"


def test_majority_rule():
    assert majority_verdict(["pass", "fail", "pass"]) == "pass"
    assert majority_verdict(["pass", "fail"]) == "inconclusive"
    assert majority_verdict(["n/a", "fail"]) == "fail"
    assert majority_verdict(["n/a"]) == "n/a"


def test_compare_errors():
    with pytest.raises(ComparisonError):
        compare_runs([report("beta", 0)])
    with pytest.raises(ComparisonError, match="different analysis"):
        compare_runs([report("beta", 0), report("factor", 0, fp={"a": 2})])
    with pytest.raises(ComparisonError, match="duplicate"):
        compare_runs([report("beta", 0), report("beta", 0)])


def test_missing_values_are_not_applicable():
    runs = [report("factor", 0), report("standard", 0)]
    runs[0]["ces"]["mean"] = None
    cmp = compare_runs(runs)
    assert cmp.majority["ces_mean: factor > standard > beta"] == "n/a"


def test_epochs_monotone():
    assert epochs_monotone([5.0, 9.0, 4.0, 4.0, 3.0])
    assert not epochs_monotone([5.0, 4.0, 4.5])
    assert epochs_monotone([1.0])


def test_training_reproducible_through_checkpoint(tmp_path):
    imgs = tiny_images(32)
    m, _ = train(imgs, tiny_config(epochs=1))
    back = load_checkpoint(save_checkpoint(tmp_path / "m.vcp", m))
    for k in m.params:
        assert np.array_equal(m.params[k].data, back.params[k].data)


def test_shipped_configs_validate():
    root = Path(__file__).resolve().parents[1] / "configs"
    paths = sorted(root.glob("*.json"))
    assert len(paths) >= 4
    for p in paths:
        cfg = RunConfig.from_dict(json.loads(p.read_text()))
        assert cfg.out.startswith("runs/")
