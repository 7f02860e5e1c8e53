"""``tsvit-peft`` command line: data generation, training, counting, sweeps, eval, LoRA merge.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .accounting import count_params, rows_to_csv, rows_to_table
from .core import checkpoint
from .core.tensor import ContractViolation
from .data import DataError, DatasetManifest, SyntheticConfig, generate_synthetic
from .model import TSViT, TSViTConfig
from .peft import (
    AdaptFormer,
    BitFit,
    FullFineTune,
    HeadTune,
    Lora,
    PeftSpec,
    Scratch,
    TokenTune,
    Vpt,
    apply_peft,
    spec_from_dict,
    spec_label,
)
from .training import DEFAULT_LRS, HParams, evaluate, lr_sweep, sweep_to_csv, sweep_to_wide_csv, train

log = logging.getLogger("tsvit_peft")


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


# Named specs for --methods and count --all-methods.
PRESETS: dict[str, PeftSpec] = {
    "head": HeadTune(),
    "bitfit-partial": BitFit("partial"),
    "bitfit-full": BitFit("full"),
    "vpt-16-16-ext-deep": Vpt(16, 16),
    "lora-4-4-4": Lora(4, 4, 4),
    "adaptformer-8-8": AdaptFormer(8, 8),
    "token-full": TokenTune("full"),
    "full": FullFineTune(),
    "scratch": Scratch(),
}
COUNT_METHODS = (
    "head", "bitfit-partial", "bitfit-full", "vpt-16-16-ext-deep",
    "lora-4-4-4", "adaptformer-8-8", "token-full", "full",
)  # fmt: skip


# -- experiment config ------------------------------------------------------------

CONFIG_KEYS = ("model", "peft", "hparams", "dataset", "output", "pretrained")


@dataclass
class ExperimentConfig:
    model: TSViTConfig = field(default_factory=TSViTConfig)
    peft: PeftSpec = field(default_factory=FullFineTune)
    hparams: HParams = field(default_factory=HParams)
    dataset: str | None = None
    output: str = "out"
    pretrained: str | None = None
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(doc) - set(CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        hp = dict(doc.get("hparams", {}))
        hp_unknown = set(hp) - {f.name for f in fields(HParams)}
        if hp_unknown:
            raise UsageError(f"unknown hparams keys: {sorted(hp_unknown)}")
        try:
            cfg = cls(
                model=TSViTConfig.from_dict(doc.get("model", {})).validate(),
                peft=spec_from_dict(doc.get("peft", {"method": "full"})),
                hparams=HParams(**hp),
                dataset=doc.get("dataset"),
                output=doc.get("output", "out"),
                pretrained=doc.get("pretrained"),
                base_dir=base_dir,
            )
        except (ContractViolation, TypeError, ValueError) as e:
            raise UsageError(str(e)) from None
        cfg.hparams.validate()
        return cfg

    @classmethod
    def load(cls, path: str | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config not found: {path}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(doc, p.parent)

    def resolve(self, rel: str | None) -> Path | None:
        """Relative paths in a config file are taken relative to that file."""
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        """Full config with defaults filled and file paths made absolute."""

        def absolute(rel):
            return None if rel is None else str(self.resolve(rel).resolve())

        doc = {
            "model": self.model.to_dict(),
            "peft": self.peft.to_dict(),
            "hparams": dict(self.hparams.__dict__),
            "dataset": absolute(self.dataset),
            "output": absolute(self.output),
        }
        if self.pretrained is not None:
            doc["pretrained"] = absolute(self.pretrained)
        return doc

    def manifest(self) -> DatasetManifest:
        path = self.resolve(self.dataset)
        if path is None:
            raise UsageError("config has no 'dataset' entry")
        if not path.is_file():
            raise UsageError(f"dataset manifest not found: {path}")
        m = DatasetManifest.load(path)
        if m.num_classes != self.model.K:
            raise UsageError(f"dataset has {m.num_classes} classes but model.K={self.model.K}")
        return m

    def base_model(self) -> TSViT:
        """Freshly initialised model, with pretrained weights loaded where shapes match."""
        model = TSViT(self.model, seed=self.hparams.seed)
        src = self.resolve(self.pretrained)
        if src is not None:
            if not src.is_file():
                raise UsageError(f"pretrained checkpoint not found: {src}")
            skipped = checkpoint.load_into(model, src, strict=False)
            if skipped:
                log.warning("pretrained: %d tensors kept at init (%s)", len(skipped), ", ".join(skipped[:4]))
        return model


def echo_config(cfg: ExperimentConfig) -> None:
    print(json.dumps({"config": cfg.to_dict()}, indent=2, sort_keys=True))


def run_id(cfg: ExperimentConfig) -> str:
    return f"{spec_label(cfg.peft)}_lr{cfg.hparams.lr:g}_seed{cfg.hparams.seed}"


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    for name in ("seed", "lr", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.hparams, name, value)
    try:
        cfg.hparams.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    if getattr(args, "out", None):
        cfg.output = str(Path(args.out).resolve())  # flags are relative to the cwd
    return cfg


def _output_root(cfg: ExperimentConfig) -> Path:
    return cfg.resolve(cfg.output)


class _StagedDir:
    """Build a run directory under a temp name; publish it with a rename on success."""

    def __init__(self, final: Path):
        self.final = final
        self.tmp = final.with_name(f".{final.name}.tmp-{os.getpid()}")

    def __enter__(self) -> Path:
        shutil.rmtree(self.tmp, ignore_errors=True)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def _write_json(path: Path, doc) -> None:
    checkpoint.atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise UsageError(f"--classes must be >= 2, got {args.classes}")
    if args.tiles < 1:
        raise UsageError(f"--tiles must be >= 1, got {args.tiles}")
    cfg = SyntheticConfig(tiles=args.tiles, num_classes=args.classes, seed=args.seed, noise=args.noise)
    print(json.dumps({"config": {"out": str(args.out), **cfg.__dict__}}, indent=2, default=str))
    generate_synthetic(cfg, args.out)
    print(Path(args.out) / "manifest.json")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    echo_config(cfg)
    manifest = cfg.manifest()
    model, report = apply_peft(cfg.base_model(), cfg.peft, copy=False)
    log.info("%s: %d / %d trainable (%.2f%%)", report.method, report.trainable, report.total, report.percent)
    final = _output_root(cfg) / (args.run_id or run_id(cfg))
    with _StagedDir(final) as tmp:
        _write_json(tmp / "config.json", cfg.to_dict())
        hist = train(model, manifest, cfg.hparams, out_dir=tmp)
        test = evaluate(model, manifest, "test", cfg.hparams.batch_size)
        _write_json(tmp / "metrics.json", {"best_epoch": hist.best_epoch, "best_val_f1": hist.best_val_f1, "test": test.to_dict()})
    print(json.dumps({"run_dir": str(final), "best_epoch": hist.best_epoch, "best_val_f1": hist.best_val_f1, "test_f1": test.f1}))
    return 0


def cmd_count(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    echo_config(cfg)
    base = TSViT(cfg.model, seed=cfg.hparams.seed)
    specs = [(m, PRESETS[m]) for m in COUNT_METHODS] if args.all_methods else [(spec_label(cfg.peft), cfg.peft)]
    rows = []
    for name, spec in specs:
        model, _ = apply_peft(base, spec)
        rows.append((name, count_params(model)))
    rows.sort(key=lambda r: (r[1].trainable / r[1].total, r[0]))
    print(rows_to_csv(rows) if args.format == "csv" else rows_to_table(rows), end="")
    return 0


def _parse_lrs(text: str) -> list[float]:
    try:
        lrs = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed learning-rate list: {text!r}") from None
    if not lrs or any(not (lr > 0 and np.isfinite(lr)) for lr in lrs):
        raise argparse.ArgumentTypeError(f"learning rates must be positive numbers: {text!r}")
    return lrs


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    echo_config(cfg)
    if args.methods:
        unknown = [m for m in args.methods.split(",") if m not in PRESETS]
        if unknown:
            raise UsageError(f"unknown methods {unknown}; choose from {sorted(PRESETS)}")
        specs = [PRESETS[m] for m in args.methods.split(",")]
    else:
        specs = [cfg.peft]
    manifest = cfg.manifest()
    base = cfg.base_model()
    rows = []
    for spec in specs:
        rows += lr_sweep(base.clone, manifest, spec, args.lrs, cfg.hparams, jobs=args.jobs)
    final = _output_root(cfg) / (args.run_id or f"sweep_seed{cfg.hparams.seed}")
    with _StagedDir(final) as tmp:
        _write_json(tmp / "config.json", {**cfg.to_dict(), "lrs": args.lrs, "methods": [spec_label(s) for s in specs]})
        checkpoint.atomic_write_bytes(tmp / "sweep.csv", sweep_to_csv(rows).encode())
        checkpoint.atomic_write_bytes(tmp / "sweep_wide.csv", sweep_to_wide_csv(rows).encode())
    print(sweep_to_csv(rows), end="")
    print(final / "sweep.csv")
    return 0


def _model_for_checkpoint(cfg: ExperimentConfig, path: Path) -> TSViT:
    """Match the checkpoint layout: surgered model first, plain (e.g. merged) second."""
    base = TSViT(cfg.model, seed=cfg.hparams.seed)
    surgered, _ = apply_peft(base, cfg.peft)
    for model in (surgered, base):
        try:
            checkpoint.load_into(model, path, strict=True)
            return model
        except KeyError:
            continue
    raise UsageError(f"checkpoint {path} does not match the configured model")


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    echo_config(cfg)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = _model_for_checkpoint(cfg, ckpt)
    metrics = evaluate(model, cfg.manifest(), args.split, cfg.hparams.batch_size)
    doc = {"checkpoint": str(ckpt), "split": args.split, **metrics.to_dict()}
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps(doc))
    return 0


def merge_entries(entries: list[checkpoint.Entry], alpha: float | None) -> tuple[list[checkpoint.Entry], int]:
    """Fold ``lora_A``/``lora_B`` pairs into their base weight; returns (entries, merged count)."""
    by_path = {e.path: e for e in entries}
    prefixes = [e.path[: -len(".lora_A")] for e in entries if e.path.endswith(".lora_A")]
    drop = set()
    merged = {}
    for pre in prefixes:
        a, b, w = by_path[f"{pre}.lora_A"], by_path.get(f"{pre}.lora_B"), by_path.get(f"{pre}.weight")
        if b is None or w is None:
            raise ValueError(f"incomplete LoRA triple at {pre}")
        rank = a.data.shape[0]
        scale = 1.0 if alpha is None else alpha / rank
        delta = scale * (a.data.astype(np.float64).T @ b.data.astype(np.float64).T)
        merged[w.path] = checkpoint.Entry(w.path, w.trainable, (w.data + delta).astype(np.float32))
        drop |= {a.path, b.path}
    out = [merged.get(e.path, e) for e in entries if e.path not in drop]
    return out, len(prefixes)


def cmd_merge(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg_path = args.config or (ckpt.parent / "config.json" if (ckpt.parent / "config.json").is_file() else None)
    cfg = ExperimentConfig.load(str(cfg_path) if cfg_path else None)
    echo_config(cfg)
    alpha = cfg.peft.alpha if isinstance(cfg.peft, Lora) else None
    entries, n = merge_entries(checkpoint.read(ckpt), alpha)
    if n == 0:
        print(f"warning: {ckpt} has no LoRA layers; copying through unchanged", file=sys.stderr)
    checkpoint.atomic_write_bytes(args.out, checkpoint.encode(entries))
    print(json.dumps({"merged_layers": n, "out": str(args.out)}))
    return 0


# -- entry point ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsvit-peft", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--tiles", type=int, default=200)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_data)

    def overrides(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", help="output root (overrides config 'output')")
        sp.add_argument("--run-id")

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    overrides(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("count", help="trainable-parameter table")
    c.add_argument("--config")
    c.add_argument("--all-methods", action="store_true")
    c.add_argument("--format", choices=("table", "csv"), default="table")
    c.set_defaults(func=cmd_count)

    s = sub.add_parser("sweep", help="learning-rate sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--lrs", type=_parse_lrs, default=list(DEFAULT_LRS))
    s.add_argument("--methods", help=f"comma list from: {','.join(PRESETS)}")
    s.add_argument("--jobs", type=int, default=1)
    overrides(s)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="fold LoRA weights into a plain checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--config")
    m.set_defaults(func=cmd_merge)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError) as e:
        print(f"tsvit-peft: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"tsvit-peft: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
