"""Trainable-parameter accounting and a closed-form forward MAC estimate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .model import TSViT, TSViTConfig

GROUP_PREFIXES = ("embed.", "temporal.", "spatial.", "head.")


@dataclass
class ParamReport:
    total: int
    trainable: int
    groups: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def percent(self) -> float:
        return 100.0 * self.trainable / self.total

    @property
    def percent_display(self) -> str:
        return format_percent(self.trainable, self.total)


def format_percent(trainable: int, total: int, places: int = 2) -> str:
    """Exact integer ratio, rounded half-up."""
    value = Decimal(100 * trainable) / Decimal(total)
    return str(value.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def count_params(model: TSViT) -> ParamReport:
    params = list(model.named_parameters())
    if not params:
        raise ValueError("model has no parameters")
    groups = []
    for prefix in GROUP_PREFIXES:
        sel = [p for path, p in params if path.startswith(prefix)]
        groups.append((prefix.rstrip("."), sum(p.size for p in sel), sum(p.n_trainable for p in sel)))
    other = [p for path, p in params if not path.startswith(GROUP_PREFIXES)]
    if other:
        groups.append(("other", sum(p.size for p in other), sum(p.n_trainable for p in other)))
    total = sum(p.size for _, p in params)
    if total == 0:
        raise ValueError("model has no parameters")
    return ParamReport(total, sum(p.n_trainable for _, p in params), groups)


# -- MACs -------------------------------------------------------------------------


@dataclass
class FlopReport:
    """Forward multiply-accumulates per input tile, by stage."""

    patch_embed: int
    temporal: int
    spatial: int
    head: int

    @property
    def total(self) -> int:
        return self.patch_embed + self.temporal + self.spatial + self.head

    @property
    def flops(self) -> int:
        return 2 * self.total


def block_macs(seq: int, dim: int, mlp_ratio: int, extra_kv: int = 0, include_scores: bool = True) -> int:
    """One pre-norm block on one sequence: qkv, scores, weighted sum, proj, MLP."""
    keys = seq + extra_kv
    macs = seq * dim * 3 * dim + extra_kv * dim * 3 * dim + seq * dim * dim + 2 * seq * dim * mlp_ratio * dim
    if include_scores:
        macs += 2 * seq * keys * dim
    return macs


def estimate_flops(cfg: TSViTConfig, model: TSViT | None = None, include_scores: bool = True) -> FlopReport:
    """Closed-form MACs for the base architecture plus any attached LoRA, adapter or prompt modules.

    Softmax, normalisation and activations are not counted.
    """
    from .peft import LoraLinear  # local: peft imports model

    d, N, K, T = cfg.dim, cfg.num_patches, cfg.K, cfg.T
    pp = cfg.patch_size * cfg.patch_size
    lt, ls = cfg.temporal_depth, cfg.spatial_depth
    extra = {"embed": 0, "temporal": 0, "spatial": 0, "head": 0}
    prompt = {"temporal": (0, False, False), "spatial": (0, False, False)}
    adapters = {"temporal": 0, "spatial": 0}
    lora_blocks = {"temporal": 0, "spatial": 0}

    if model is not None:
        lt, ls = len(model.temporal.blocks), len(model.spatial.blocks)
        for name in ("temporal", "spatial"):
            enc = getattr(model, name)
            if enc.prompt is not None:
                prompt[name] = (enc.prompt.tokens.shape[1], enc.prompt.deep, enc.prompt.external)
            for blk in enc.blocks:
                if blk.adapter is not None:
                    adapters[name] += 2 * d * blk.adapter.down.d_out
        for path, m in model.named_modules():
            if isinstance(m, LoraLinear):
                per_tok = m.rank * (m.d_in + m.d_out)
                stage = path.split(".")[0]
                if stage in ("temporal", "spatial"):
                    lora_blocks[stage] += per_tok
                else:
                    extra[stage] += per_tok * (N * T if stage == "embed" else K * N)

    def stage_macs(name, n_seq, seq_len, depth):
        plen, deep, external = prompt[name]
        ext = plen if external else 0
        total = 0
        for i in range(depth):
            kv = plen if not external and (deep or i == 0) else 0
            total += n_seq * block_macs(seq_len + ext, d, cfg.mlp_ratio, kv, include_scores)
        # adapter and LoRA costs are summed over blocks already
        total += n_seq * (seq_len + ext) * (adapters[name] + lora_blocks[name])
        return total

    return FlopReport(
        patch_embed=N * T * cfg.patch_features * d + extra["embed"],
        temporal=stage_macs("temporal", N, K + T, lt),
        spatial=stage_macs("spatial", K, N, ls),
        head=K * N * d * pp + extra["head"],
    )


# -- emitters ---------------------------------------------------------------------


def rows_to_csv(rows: list[tuple[str, ParamReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "trainable", "total", "percent"])
    for name, rep in rows:
        w.writerow([name, rep.trainable, rep.total, rep.percent_display])
    return buf.getvalue()


def rows_to_table(rows: list[tuple[str, ParamReport]]) -> str:
    header = ("method", "trainable", "total", "percent")
    body = [(name, str(r.trainable), str(r.total), r.percent_display) for name, r in rows]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(4)]
    lines = []
    for row in [header, *body]:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
