import csv
import io
import json

import numpy as np
import pytest

from tsvit_peft.cli import main, merge_entries
from tsvit_peft.core import checkpoint
from tsvit_peft.core import tensor as tt
from tsvit_peft.data import SyntheticConfig, generate_synthetic
from tsvit_peft.model import TSViT, TSViTConfig
from tsvit_peft.peft import Lora, apply_peft, merge_lora

MODEL = dict(T=3, H=6, W=6, C=2, K=2, patch_size=3, dim=8, temporal_depth=1, spatial_depth=1, heads=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_synthetic(SyntheticConfig(tiles=10, T=3, H=6, W=6, C=2, parcel_side=(2, 4), parcels=(1, 2)), root)
    return root / "manifest.json"


def write_config(path, dataset, **over):
    doc = {
        "model": MODEL,
        "peft": {"method": "bitfit", "subset": "partial"},
        "hparams": {"lr": 0.01, "epochs": 2, "batch_size": 4},
        "dataset": str(dataset),
        "output": str(path.parent / "out"),
    }
    doc.update(over)
    path.write_text(json.dumps(doc))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- gen-data ---------------------------------------------------------------------


def test_gen_data(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "a", "--tiles", 5, "--seed", 1)
    assert code == 0
    assert out.strip().endswith("manifest.json")
    assert len(list((tmp_path / "a" / "tiles").glob("*.tsst"))) == 5
    run(capsys, "gen-data", "--out", tmp_path / "b", "--tiles", 5, "--seed", 1)
    for f in (tmp_path / "a" / "tiles").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "tiles" / f.name).read_bytes()


def test_gen_data_one_class_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--classes", 1)
    assert code == 2 and "classes" in err


# -- config handling --------------------------------------------------------------


def test_missing_config_exit_2(tmp_path, capsys):
    assert run(capsys, "train", "--config", tmp_path / "nope.json")[0] == 2


def test_unknown_config_key_exit_2(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.json", dataset, optimizer="sgd")
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 2 and "optimizer" in err


def test_invalid_override_exit_2(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.json", dataset)
    assert run(capsys, "train", "--config", cfg, "--lr", "-1")[0] == 2


def test_no_subcommand_exit_2(capsys):
    assert run(capsys)[0] == 2


# -- train / eval -----------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "c.json", dataset, peft={"method": "lora", "rt": 1, "rs": 1, "rr": 1, "alpha": 2.0})
    assert main(["train", "--config", str(cfg), "--run-id", "r1"]) == 0
    return cfg, root / "out" / "r1"


def test_train_outputs(trained):
    _, run_dir = trained
    assert {p.name for p in run_dir.iterdir()} == {"config.json", "history.csv", "best.ptwt", "metrics.json"}
    saved = json.loads((run_dir / "config.json").read_text())
    assert saved["hparams"]["epochs"] == 2 and saved["peft"]["alpha"] == 2.0
    assert not list(run_dir.parent.glob(".*tmp*"))


def test_train_echoes_resolved_config(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.json", dataset, hparams={"epochs": 1})
    code, out, _ = run(capsys, "train", "--config", cfg, "--seed", 5)
    assert code == 0
    echoed = json.loads(out[: out.index("\n}\n") + 2])["config"]
    assert echoed["hparams"]["seed"] == 5 and echoed["hparams"]["batch_size"] == 16
    assert echoed["model"]["dim"] == 8


def test_train_twice_identical_history(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.json", dataset)
    for rid in ("x", "y"):
        assert run(capsys, "train", "--config", cfg, "--run-id", rid)[0] == 0
    out = tmp_path / "out"
    assert (out / "x" / "history.csv").read_bytes() == (out / "y" / "history.csv").read_bytes()


def test_eval_matches_history(trained, capsys):
    cfg, run_dir = trained
    rows = list(csv.DictReader(io.StringIO((run_dir / "history.csv").read_text())))
    best = next(r for r in rows if r["is_best"] == "1" and float(r["val_f1"]) == max(float(x["val_f1"]) for x in rows))
    code, out, _ = run(capsys, "eval", "--config", run_dir / "config.json", "--checkpoint", run_dir / "best.ptwt", "--split", "val")
    assert code == 0
    metrics = json.loads(out.strip().splitlines()[-1])
    assert metrics["f1"] == float(best["val_f1"]) and metrics["iou"] == float(best["val_iou"])


@pytest.mark.parametrize("split", ["train", "val", "test"])
def test_eval_splits(trained, split, capsys):
    cfg, run_dir = trained
    assert run(capsys, "eval", "--config", cfg, "--checkpoint", run_dir / "best.ptwt", "--split", split)[0] == 0


def test_eval_missing_checkpoint_exit_2(trained, tmp_path, capsys):
    cfg, _ = trained
    assert run(capsys, "eval", "--config", cfg, "--checkpoint", tmp_path / "none.ptwt")[0] == 2


def test_eval_corrupt_checkpoint_exit_1(trained, tmp_path, capsys):
    cfg, _ = trained
    (tmp_path / "bad.ptwt").write_bytes(b"PTWTjunk")
    assert run(capsys, "eval", "--config", cfg, "--checkpoint", tmp_path / "bad.ptwt")[0] == 1


# -- count ------------------------------------------------------------------------


def test_count_all_methods(capsys):
    code, out, _ = run(capsys, "count", "--all-methods", "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out[out.index("method,") :])))
    assert len(rows) == 8
    pct = [float(r["percent"]) for r in rows]
    assert pct == sorted(pct)
    assert rows[-1]["method"] == "full" and rows[-1]["percent"] == "100.00"


def test_count_table(capsys):
    code, out, _ = run(capsys, "count")
    assert code == 0 and "100.00" in out


# -- sweep ------------------------------------------------------------------------


def test_sweep_malformed_lrs(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.json", dataset)
    assert run(capsys, "sweep", "--config", cfg, "--lrs", "0.1,fast")[0] == 2
    assert run(capsys, "sweep", "--config", cfg, "--lrs", "0.1,-2")[0] == 2


def test_sweep_default_grid_in_help():
    from tsvit_peft.cli import build_parser

    args = build_parser().parse_args(["sweep", "--config", "c.json"])
    assert args.lrs == [0.0001, 0.005, 0.01, 0.05, 0.1]


def test_sweep_single_lr_equals_train(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.json", dataset, hparams={"epochs": 1, "batch_size": 4})
    code, _, _ = run(capsys, "sweep", "--config", cfg, "--lrs", "0.01", "--methods", "head,bitfit-partial", "--run-id", "s")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "out" / "s" / "sweep.csv").read_text())))
    assert [r["method"] for r in rows] == ["head", "bitfit-partial"]
    wide = (tmp_path / "out" / "s" / "sweep_wide.csv").read_text().splitlines()
    assert wide[0] == "learning_rate,head,bitfit-partial"
    assert run(capsys, "train", "--config", cfg, "--run-id", "t")[0] == 0
    metrics = json.loads((tmp_path / "out" / "t" / "metrics.json").read_text())
    assert float(rows[1]["best_val_f1"]) == pytest.approx(metrics["best_val_f1"], abs=1e-5)


def test_sweep_unknown_method(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.json", dataset)
    assert run(capsys, "sweep", "--config", cfg, "--lrs", "0.01", "--methods", "prefix")[0] == 2


# -- merge ------------------------------------------------------------------------


def test_merge_lora_checkpoint(trained, tmp_path, capsys):
    cfg, run_dir = trained
    code, out, _ = run(capsys, "merge", "--checkpoint", run_dir / "best.ptwt", "--out", tmp_path / "m.ptwt")
    assert code == 0 and '"merged_layers": 10' in out
    plain = TSViT(TSViTConfig(**MODEL))
    checkpoint.load_into(plain, tmp_path / "m.ptwt")

    lora, _ = apply_peft(TSViT(TSViTConfig(**MODEL)), Lora(1, 1, 1, alpha=2.0))
    checkpoint.load_into(lora, run_dir / "best.ptwt")
    rng = np.random.default_rng(0)
    tiles = rng.standard_normal((2, 3, 6, 6, 2)).astype(np.float32)
    days = np.array([[10, 100, 200]] * 2)
    with tt.no_grad():
        a = lora(tiles, days).data.astype(np.float64)
        b = plain(tiles, days).data.astype(np.float64)
    assert np.abs(a - b).max() / np.abs(a).max() < 1e-5


def test_merge_twice_equals_once(trained, tmp_path, capsys):
    _, run_dir = trained
    run(capsys, "merge", "--checkpoint", run_dir / "best.ptwt", "--out", tmp_path / "once.ptwt")
    code, _, err = run(capsys, "merge", "--checkpoint", tmp_path / "once.ptwt", "--out", tmp_path / "twice.ptwt")
    assert code == 0 and "no LoRA" in err
    assert (tmp_path / "once.ptwt").read_bytes() == (tmp_path / "twice.ptwt").read_bytes()


def test_merge_entries_matches_model_merge():
    model, _ = apply_peft(TSViT(TSViTConfig(**MODEL)), Lora(2, 1, 1, alpha=3.0))
    for p in model.parameters():
        p.data = p.data + np.random.default_rng(1).standard_normal(p.shape).astype(np.float32) * 0.1
    entries = [checkpoint.Entry(p, prm.trainable, prm.data) for p, prm in model.named_parameters()]
    merged, n = merge_entries(entries, 3.0)
    merge_lora(model)
    want = {p: prm.data for p, prm in model.named_parameters()}
    assert n == 10 and [e.path for e in merged] == list(want)
    for e in merged:
        np.testing.assert_allclose(e.data, want[e.path], rtol=1e-6, atol=1e-7)


def test_merge_missing_checkpoint_exit_2(tmp_path, capsys):
    assert run(capsys, "merge", "--checkpoint", tmp_path / "x", "--out", tmp_path / "y")[0] == 2
