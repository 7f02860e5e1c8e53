"""TSViT: per-location temporal encoding with class tokens, then spatial mixing per class."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .core import tensor as tt
from .core.nn import LayerNorm, Linear, Module, Parameter
from .core.rng import Rng
from .core.tensor import ContractViolation, Tensor

DOY_TABLE_SIZE = 366


@dataclass(frozen=True)
class TSViTConfig:
    T: int = 9
    H: int = 24
    W: int = 24
    C: int = 10
    K: int = 2
    patch_size: int = 3
    dim: int = 128
    temporal_depth: int = 4
    spatial_depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def validate(self) -> "TSViTConfig":
        problems = []
        if min(self.T, self.H, self.W, self.C, self.patch_size, self.dim, self.heads, self.mlp_ratio) < 1:
            problems.append("all extents must be positive")
        elif self.H % self.patch_size or self.W % self.patch_size:
            problems.append(f"H={self.H}, W={self.W} not divisible by patch size {self.patch_size}")
        if self.heads >= 1 and self.dim % self.heads:
            problems.append(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.K < 2:
            problems.append(f"K={self.K} < 2")
        if self.temporal_depth < 1 or self.spatial_depth < 1:
            problems.append("depths must be >= 1")
        if problems:
            raise ContractViolation("invalid TSViTConfig: " + "; ".join(problems))
        return self

    @property
    def num_patches(self) -> int:
        return (self.H // self.patch_size) * (self.W // self.patch_size)

    @property
    def patch_features(self) -> int:
        return self.patch_size * self.patch_size * self.C

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TSViTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


REFERENCE_CONFIG = TSViTConfig()


def munich_config() -> TSViTConfig:
    return replace(REFERENCE_CONFIG, K=27)


def patchify(tiles: np.ndarray, cfg: TSViTConfig) -> np.ndarray:
    """(B, T, H, W, C) -> (B, N, T, P*P*C); patches row-major, features (row, col, channel)."""
    B, T, H, W, C = tiles.shape
    if (T, H, W, C) != (cfg.T, cfg.H, cfg.W, cfg.C):
        raise ContractViolation(f"tile shape {(T, H, W, C)} does not match config {(cfg.T, cfg.H, cfg.W, cfg.C)}")
    P = cfg.patch_size
    h, w = H // P, W // P
    x = tiles.reshape(B, T, h, P, w, P, C).transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x).reshape(B, h * w, T, P * P * C)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: Rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng.child("fc1"))
        self.fc2 = Linear(hidden, dim, rng.child("fc2"))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(tt.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng):
        super().__init__()
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng.child("qkv"))
        self.proj = Linear(dim, dim, rng.child("proj"))

    def forward(self, x: Tensor, prefix: Tensor | None = None) -> Tensor:
        kv = self.qkv(prefix) if prefix is not None else None
        return self.proj(tt.attention(self.qkv(x), self.heads, kv))


class Block(Module):
    """Pre-norm transformer block; ``adapter`` is attached by AdaptFormer surgery."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: Rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng.child("attn"))
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng.child("mlp"))
        self.adapter = None

    def forward(self, x: Tensor, prefix: Tensor | None = None) -> Tensor:
        pn = self.norm1(prefix) if prefix is not None else None
        x = x + self.attn(self.norm1(x), pn)
        h = self.mlp(self.norm2(x))
        if self.adapter is not None:
            h = self.adapter.combine(x, h)
        return x + h


class Encoder(Module):
    """A stack of blocks with a final norm; optional prompts are attached by VPT surgery."""

    def __init__(self, cfg: TSViTConfig, depth: int, rng: Rng):
        super().__init__()
        self.blocks: list[Block] = []
        for i in range(depth):
            blk = Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng.child(f"block{i}"))
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)
        self.norm = LayerNorm(cfg.dim)
        self.prompt = None

    def run(self, x: Tensor, keep: int) -> Tensor:
        """Run all blocks over (S, L, d) and return the normed first ``keep`` positions."""
        S, L, d = x.shape
        for i, blk in enumerate(self.blocks):
            prefix = None
            tokens = self.prompt.tokens_for(i) if self.prompt is not None else None
            if tokens is not None:
                tokens = tt.broadcast_to(tokens, (S, tokens.shape[0], d))
                if self.prompt.external:
                    base = x if x.shape[1] == L else x[:, :L]
                    x = tt.concat([base, tokens], axis=1)
                else:
                    prefix = tokens
            x = blk(x, prefix)
        if x.shape[1] != keep:
            x = x[:, :keep]
        return self.norm(x)


class TSViT(Module):
    def __init__(self, cfg: TSViTConfig = REFERENCE_CONFIG, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = Rng(seed)
        d = cfg.dim
        self.embed = Module()
        self.embed.patch = Linear(cfg.patch_features, d, rng.child("embed.patch"))
        self.embed.doy_table = Parameter(rng.child("embed.doy_table").normal(0.02, (DOY_TABLE_SIZE, d)))
        self.temporal = Encoder(cfg, cfg.temporal_depth, rng.child("temporal"))
        self.temporal.cls_tokens = Parameter(rng.child("temporal.cls_tokens").normal(1.0, (cfg.K, d)))
        self.spatial = Encoder(cfg, cfg.spatial_depth, rng.child("spatial"))
        self.spatial.pos_embed = Parameter(rng.child("spatial.pos_embed").normal(1.0, (cfg.num_patches, d)))
        self.head = Linear(d, cfg.patch_size * cfg.patch_size, rng.child("head"))
        self.refresh_paths()

    def refresh_paths(self) -> None:
        for _ in self.named_parameters():
            pass

    def clone(self) -> "TSViT":
        return copy.deepcopy(self)

    # -- stages -----------------------------------------------------------
    def patch_embed(self, tiles: np.ndarray, times: np.ndarray) -> Tensor:
        """(B, T, H, W, C), (B, T) -> (B, N, T, d) with day-of-year encoding added."""
        times = np.asarray(times)
        if times.min() < 1 or times.max() > DOY_TABLE_SIZE:
            raise ContractViolation(f"day-of-year out of [1, {DOY_TABLE_SIZE}]")
        B = tiles.shape[0]
        raw = Tensor(patchify(tiles, self.cfg))
        emb = self.embed.patch(raw)
        doy = tt.take(self.embed.doy_table.tensor, times - 1)
        return emb + doy.reshape(B, 1, self.cfg.T, self.cfg.dim)

    def temporal_encode(self, tokens: Tensor) -> Tensor:
        """(B, N, T, d) -> (B, N, K, d): class tokens prepended per location, first K outputs kept."""
        B, N, T, d = tokens.shape
        K = self.cfg.K
        x = tokens.reshape(B * N, T, d)
        cls = tt.broadcast_to(self.temporal.cls_tokens.tensor, (B * N, K, d))
        out = self.temporal.run(tt.concat([cls, x], axis=1), keep=K)
        return out.reshape(B, N, K, d)

    def spatial_encode(self, maps: Tensor) -> Tensor:
        """(B, N, K, d) -> (B, K, N, d): per class, position-embedded spatial attention."""
        B, N, K, d = maps.shape
        x = maps.transpose(0, 2, 1, 3).reshape(B * K, N, d) + self.spatial.pos_embed.tensor
        return self.spatial.run(x, keep=N).reshape(B, K, N, d)

    def segment(self, feats: Tensor) -> Tensor:
        """(B, K, N, d) -> logits (B, K, H, W)."""
        cfg = self.cfg
        B, K, N, d = feats.shape
        P = cfg.patch_size
        h, w = cfg.H // P, cfg.W // P
        y = self.head(feats)
        y = y.reshape(B, K, h, w, P, P).transpose(0, 1, 2, 4, 3, 5)
        return y.reshape(B, K, cfg.H, cfg.W)

    def forward(self, tiles, times) -> Tensor:
        """Logits (B, K, H, W) for a batch, or (K, H, W) for a single (T, H, W, C) tile."""
        tiles = np.asarray(tiles, dtype=self.embed.patch.weight.data.dtype)
        times = np.asarray(times, dtype=np.int64)
        single = tiles.ndim == 4
        if single:
            tiles, times = tiles[None], times[None]
        logits = self.segment(self.spatial_encode(self.temporal_encode(self.patch_embed(tiles, times))))
        return logits.reshape(logits.shape[1:]) if single else logits

    def cast(self, dtype) -> "TSViT":
        """Copy with every parameter in ``dtype`` (float64 for gradient checks)."""
        other = self.clone()
        for p in other.parameters():
            p.tensor.data = p.tensor.data.astype(dtype)
        return other
