"""Model surgery: freeze a pretrained TSViT and attach exactly one tuning method."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import ClassVar, Union

import numpy as np

from .core import tensor as tt
from .core.nn import Linear, Module, Parameter
from .core.rng import Rng
from .core.tensor import ContractViolation, Tensor
from .model import TSViT


class PeftError(ContractViolation):
    pass


# -- specs ----------------------------------------------------------------------


@dataclass(frozen=True)
class _Spec:
    method: ClassVar[str] = ""
    unfreeze_head: bool = field(default=True, kw_only=True)

    def validate(self) -> None:
        pass

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return {"method": self.method, **d}


@dataclass(frozen=True)
class BitFit(_Spec):
    method: ClassVar[str] = "bitfit"
    subset: str = "full"

    def validate(self):
        if self.subset not in ("full", "partial"):
            raise PeftError(f"BitFit subset must be 'full' or 'partial', got {self.subset!r}")


@dataclass(frozen=True)
class Vpt(_Spec):
    method: ClassVar[str] = "vpt"
    temporal_len: int = 8
    spatial_len: int = 8
    external: bool = True
    deep: bool = True

    def validate(self):
        if self.temporal_len < 0 or self.spatial_len < 0:
            raise PeftError("prompt lengths must be >= 0")
        if self.temporal_len == 0 and self.spatial_len == 0:
            raise PeftError("VPT with both prompt lengths 0 is a no-op")


@dataclass(frozen=True)
class Lora(_Spec):
    method: ClassVar[str] = "lora"
    rt: int = 4
    rs: int = 4
    rr: int = 4
    alpha: float | None = None

    def validate(self):
        if min(self.rt, self.rs, self.rr) < 0:
            raise PeftError("LoRA ranks must be >= 0")

    def scale(self, rank: int) -> float:
        return 1.0 if self.alpha is None else self.alpha / rank


@dataclass(frozen=True)
class AdaptFormer(_Spec):
    method: ClassVar[str] = "adaptformer"
    dt: int = 8
    ds: int = 8
    placement: str = "parallel"
    scale: float = 1.0

    def validate(self):
        if self.dt < 0 or self.ds < 0:
            raise PeftError("adapter dims must be >= 0")
        if self.dt == 0 and self.ds == 0:
            raise PeftError("AdaptFormer with both dims 0 is a no-op")
        if self.placement not in ("parallel", "series"):
            raise PeftError(f"placement must be 'parallel' or 'series', got {self.placement!r}")


@dataclass(frozen=True)
class HeadTune(_Spec):
    method: ClassVar[str] = "head"


@dataclass(frozen=True)
class TokenTune(_Spec):
    method: ClassVar[str] = "token"
    mode: str = "full"
    classes: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))

    def validate(self):
        if self.mode not in ("full", "partial"):
            raise PeftError(f"token mode must be 'full' or 'partial', got {self.mode!r}")
        if self.mode == "partial" and not self.classes:
            raise PeftError("partial token tuning needs a non-empty class list")
        if any(c < 0 for c in self.classes):
            raise PeftError("class indices must be >= 0")


@dataclass(frozen=True)
class FullFineTune(_Spec):
    method: ClassVar[str] = "full"


@dataclass(frozen=True)
class Scratch(_Spec):
    method: ClassVar[str] = "scratch"


PeftSpec = Union[BitFit, Vpt, Lora, AdaptFormer, HeadTune, TokenTune, FullFineTune, Scratch]
SPEC_TYPES: dict[str, type] = {
    cls.method: cls for cls in (BitFit, Vpt, Lora, AdaptFormer, HeadTune, TokenTune, FullFineTune, Scratch)
}


def spec_from_dict(d: dict) -> PeftSpec:
    d = dict(d)
    try:
        cls = SPEC_TYPES[d.pop("method")]
    except KeyError as e:
        raise PeftError(f"unknown or missing peft method: {e}") from None
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise PeftError(f"unknown keys for {cls.method}: {sorted(unknown)}")
    spec = cls(**d)
    spec.validate()
    return spec


def spec_label(spec: PeftSpec) -> str:
    """Short human-readable name, e.g. ``lora-4-4-4`` or ``bitfit-partial``."""
    if isinstance(spec, BitFit):
        return f"bitfit-{spec.subset}"
    if isinstance(spec, Vpt):
        kind = ("ext" if spec.external else "int") + ("-deep" if spec.deep else "-shallow")
        return f"vpt-{spec.temporal_len}-{spec.spatial_len}-{kind}"
    if isinstance(spec, Lora):
        return f"lora-{spec.rt}-{spec.rs}-{spec.rr}"
    if isinstance(spec, AdaptFormer):
        return f"adaptformer-{spec.dt}-{spec.ds}"
    if isinstance(spec, TokenTune):
        return "token-full" if spec.mode == "full" else "token-partial"
    return spec.method


# -- added modules --------------------------------------------------------------


class LoraLinear(Module):
    """Frozen ``x @ W0 + b`` plus a rank-r update ``scale * x @ A^T @ B^T``."""

    def __init__(self, base: Linear, rank: int, scale: float, rng: Rng):
        super().__init__()
        if rank > min(base.d_in, base.d_out):
            raise PeftError(f"LoRA rank {rank} exceeds min({base.d_in}, {base.d_out})")
        self.d_in, self.d_out = base.d_in, base.d_out
        self.rank = rank
        self.scale = scale
        self.weight = base.weight
        self.bias = base.bias
        bound = 1.0 / math.sqrt(base.d_in)
        self.lora_A = Parameter(rng.child("lora_A").uniform(-bound, bound, (rank, base.d_in)))
        self.lora_B = Parameter(np.zeros((base.d_out, rank), np.float32))

    def forward(self, x: Tensor) -> Tensor:
        base = tt.matmul(x, self.weight.tensor) + self.bias.tensor
        low = tt.matmul(tt.matmul(x, tt.transpose(self.lora_A.tensor, (1, 0))), tt.transpose(self.lora_B.tensor, (1, 0)))
        return base + low * self.scale

    def merged_weight(self) -> np.ndarray:
        return self.weight.data + self.scale * (self.lora_A.data.T @ self.lora_B.data.T)


class Adapter(Module):
    """Bottleneck down -> ReLU -> up, scaled, beside (parallel) or after (series) the MLP."""

    def __init__(self, dim: int, hidden: int, scale: float, placement: str, rng: Rng):
        super().__init__()
        self.scale = scale
        self.placement = placement
        self.down = Linear(dim, hidden, rng.child("down"))
        self.up = Linear(hidden, dim)  # zero-init: identity at attach time

    def forward(self, x: Tensor) -> Tensor:
        return self.up(tt.relu(self.down(x))) * self.scale

    def combine(self, x: Tensor, mlp_out: Tensor) -> Tensor:
        if self.placement == "parallel":
            return mlp_out + self(x)
        return mlp_out + self(mlp_out)


class PromptSet(Module):
    """Learned prompt tokens for one transformer.

    Deep prompts hold one set per block and replace the previous block's
    prompt outputs; shallow prompts are inserted once before the first block.
    External prompts extend the sequence; internal ones act only as extra
    attention keys/values.
    """

    def __init__(self, length: int, dim: int, depth: int, deep: bool, external: bool, rng: Rng):
        super().__init__()
        self.deep = deep
        self.external = external
        self.tokens = Parameter(rng.child("tokens").normal(0.02, (depth if deep else 1, length, dim)))

    def tokens_for(self, block: int) -> Tensor | None:
        if self.deep:
            return self.tokens.tensor[block]
        return self.tokens.tensor[0] if block == 0 else None


# -- report ---------------------------------------------------------------------


@dataclass
class SurgeryReport:
    method: str
    frozen: list[str]
    unfrozen: list[str]
    added: list[str]
    trainable: int
    total: int

    @property
    def percent(self) -> float:
        return 100.0 * self.trainable / self.total


# -- rules ------------------------------------------------------------------------


def _blocks(model: TSViT):
    for enc in ("temporal", "spatial"):
        for i, blk in enumerate(getattr(model, enc).blocks):
            yield f"{enc}.block{i}", blk


def bitfit_rule(model: TSViT, subset: str) -> dict[str, np.ndarray | None]:
    """Paths to unfreeze, mapped to an element mask (``None`` = whole tensor)."""
    if subset == "full":
        return {p: None for p, _ in model.named_parameters() if p.endswith(".bias")}
    if subset != "partial":
        raise PeftError(f"unknown bias subset {subset!r}")
    d = model.cfg.dim
    rule: dict[str, np.ndarray | None] = {}
    for prefix, _ in _blocks(model):
        q_only = np.zeros(3 * d, dtype=bool)
        q_only[:d] = True
        rule[f"{prefix}.attn.qkv.bias"] = q_only
        rule[f"{prefix}.mlp.fc1.bias"] = None
    rule["head.bias"] = None
    return rule


def token_tune_rule(model: TSViT, mode: str, classes=()) -> dict[str, np.ndarray | None]:
    K = model.cfg.K
    if mode == "full":
        return {"temporal.cls_tokens": None}
    if not classes:
        raise PeftError("partial token tuning needs a non-empty class list")
    bad = [c for c in classes if not 0 <= c < K]
    if bad:
        raise PeftError(f"class indices {bad} out of range for K={K}")
    mask = np.zeros((K, model.cfg.dim), dtype=bool)
    mask[list(classes)] = True
    return {"temporal.cls_tokens": mask}


def _replace_child(model: Module, path: str, new: Module) -> None:
    parent_path, _, name = path.rpartition(".")
    parent = model
    for part in parent_path.split(".") if parent_path else ():
        parent = getattr(parent, part)
    setattr(parent, name, new)


def add_lora(model: TSViT, rt: int, rs: int, rr: int, alpha: float | None = None) -> list[LoraLinear]:
    """Wrap every linear map: temporal blocks with rank rt, spatial with rs, patch projection and head with rr."""
    spec = Lora(rt, rs, rr, alpha)
    spec.validate()
    rng = Rng(model.seed).child("peft.lora")
    targets = []
    for prefix, blk in _blocks(model):
        rank = rt if prefix.startswith("temporal") else rs
        for name in ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"):
            targets.append((f"{prefix}.{name}", rank))
    targets += [("embed.patch", rr), ("head", rr)]
    # validate every rank before touching the model
    for path, rank in targets:
        base = _resolve(model, path)
        if rank > min(base.d_in, base.d_out):
            raise PeftError(f"LoRA rank {rank} at {path} exceeds min({base.d_in}, {base.d_out})")
    wrapped = []
    for path, rank in targets:
        if rank == 0:
            continue
        layer = LoraLinear(_resolve(model, path), rank, spec.scale(rank), rng.child(path))
        _replace_child(model, path, layer)
        wrapped.append(layer)
    model.refresh_paths()
    return wrapped


def _resolve(model: Module, path: str):
    obj = model
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def merge_lora(model: TSViT) -> TSViT:
    """Fold every LoRA update into its base weight, in place; returns ``model``."""
    found = [(p, m) for p, m in model.named_modules() if isinstance(m, LoraLinear)]
    if not found:
        warnings.warn("merge_lora: model has no LoRA layers; nothing to merge", stacklevel=2)
        return model
    for path, layer in found:
        plain = Linear(layer.d_in, layer.d_out)
        plain.weight = layer.weight
        plain.bias = layer.bias
        plain.weight.tensor.data = layer.merged_weight().astype(layer.weight.data.dtype)
        _replace_child(model, path, plain)
    model.refresh_paths()
    return model


def add_adaptformer(model: TSViT, dt: int, ds: int, placement: str = "parallel", scale: float = 1.0) -> list[Adapter]:
    AdaptFormer(dt, ds, placement, scale).validate()
    rng = Rng(model.seed).child("peft.adapter")
    added = []
    for prefix, blk in _blocks(model):
        width = dt if prefix.startswith("temporal") else ds
        if width == 0:
            continue
        blk.adapter = Adapter(model.cfg.dim, width, scale, placement, rng.child(prefix))
        added.append(blk.adapter)
    model.refresh_paths()
    return added


def add_vpt(model: TSViT, temporal_len: int, spatial_len: int, external: bool = True, deep: bool = True) -> None:
    Vpt(temporal_len, spatial_len, external, deep).validate()
    rng = Rng(model.seed).child("peft.vpt")
    d = model.cfg.dim
    for name, length in (("temporal", temporal_len), ("spatial", spatial_len)):
        if length == 0:
            continue
        enc = getattr(model, name)
        enc.prompt = PromptSet(length, d, len(enc.blocks), deep, external, rng.child(name))
    model.refresh_paths()


# -- driver -----------------------------------------------------------------------


def apply_peft(model: TSViT, spec: PeftSpec, copy: bool = True) -> tuple[TSViT, SurgeryReport]:
    """Freeze ``model`` and apply ``spec``; returns the modified model and a report.

    The input model is left untouched unless ``copy=False``.
    """
    spec.validate()
    if copy:
        model = model.clone()
    base_paths = [p for p, _ in model.named_parameters()]

    if isinstance(spec, Scratch):
        fresh = TSViT(model.cfg, seed=model.seed)
        for (_, dst), (_, src) in zip(model.named_parameters(), fresh.named_parameters()):
            dst.data = src.data
    if isinstance(spec, (Scratch, FullFineTune)):
        for p in model.parameters():
            p.set_mask(None)
            p.trainable = True
        return model, _report(model, spec, base_paths)

    for p in model.parameters():
        p.trainable = False

    unfreeze: dict[str, np.ndarray | None] = {}
    if isinstance(spec, BitFit):
        unfreeze = bitfit_rule(model, spec.subset)
    elif isinstance(spec, TokenTune):
        unfreeze = token_tune_rule(model, spec.mode, spec.classes)
    elif isinstance(spec, HeadTune):
        unfreeze = {p: None for p in base_paths if p.startswith("head.")}
    elif isinstance(spec, Lora):
        add_lora(model, spec.rt, spec.rs, spec.rr, spec.alpha)
    elif isinstance(spec, AdaptFormer):
        add_adaptformer(model, spec.dt, spec.ds, spec.placement, spec.scale)
    elif isinstance(spec, Vpt):
        add_vpt(model, spec.temporal_len, spec.spatial_len, spec.external, spec.deep)
    else:  # pragma: no cover
        raise PeftError(f"unsupported spec {spec!r}")

    params = model.parameter_dict()
    base = set(base_paths)
    for path, prm in params.items():
        if path not in base:
            prm.trainable = True
    for path, mask in unfreeze.items():
        params[path].trainable = True
        params[path].set_mask(mask)

    if spec.unfreeze_head and not isinstance(spec, (TokenTune, HeadTune)):
        lora_weights = {
            f"{p}.weight" for p, m in model.named_modules() if isinstance(m, LoraLinear)
        }
        for path, prm in params.items():
            if path.startswith("head.") and path not in lora_weights and path in base:
                prm.set_mask(None)
                prm.trainable = True

    return model, _report(model, spec, base_paths)


def _report(model: TSViT, spec: PeftSpec, base_paths: list[str]) -> SurgeryReport:
    params = model.parameter_dict()
    base = set(base_paths)
    frozen = [p for p in base_paths if not params[p].trainable]
    unfrozen = [p for p in base_paths if params[p].trainable]
    added = [p for p in params if p not in base]
    trainable = sum(p.n_trainable for p in params.values())
    total = sum(p.size for p in params.values())
    return SurgeryReport(spec.method, frozen, unfrozen, added, trainable, total)


def attached_lora(model: TSViT) -> bool:
    return any(isinstance(m, LoraLinear) for _, m in model.named_modules())
