"""Tile files, dataset manifests, splits, batching and a synthetic crop generator.

Tile format (little-endian)::

    "TSST" | u16 version=1 | u16 T | u16 H | u16 W | u16 C | u16 K
    | T x u16 day | f32 data (t, h, w, c) | u8 labels (h, w)

Synthetic acquisition days count from 1 November (day 1), so a
November-to-July season is strictly increasing and stays within [1, 366].
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core.checkpoint import atomic_write_bytes
from .core.rng import Rng

MAGIC = b"TSST"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHHH")
SPLITS = ("train", "val", "test")


class TileFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class DataError(ValueError):
    pass


@dataclass
class Tile:
    data: np.ndarray  # (T, H, W, C) float32
    times: np.ndarray  # (T,) day indices
    labels: np.ndarray  # (H, W) class indices
    num_classes: int

    def validate(self) -> "Tile":
        T, H, W, _ = self.data.shape
        if self.times.shape != (T,):
            raise DataError(f"times shape {self.times.shape} != ({T},)")
        if np.any(np.diff(self.times.astype(np.int64)) <= 0):
            raise DataError("acquisition times must be strictly increasing")
        if self.labels.shape != (H, W):
            raise DataError(f"labels shape {self.labels.shape} != {(H, W)}")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DataError("label index >= number of classes")
        if not np.isfinite(self.data).all():
            raise DataError("tile data contains non-finite values")
        return self


def encode_tile(tile: Tile) -> bytes:
    tile.validate()
    T, H, W, C = tile.data.shape
    return b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, T, H, W, C, tile.num_classes),
            np.asarray(tile.times, dtype="<u2").tobytes(),
            np.ascontiguousarray(tile.data, dtype="<f4").tobytes(),
            np.asarray(tile.labels, dtype=np.uint8).tobytes(),
        ]
    )


def decode_tile(buf: bytes) -> Tile:
    if len(buf) < _HEADER.size:
        raise TileFormatError("truncated header", len(buf))
    magic, version, T, H, W, C, K = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TileFormatError("bad magic", 0)
    if version != VERSION:
        raise TileFormatError(f"unsupported version {version}", 4)
    pos = _HEADER.size
    sizes = [("times", 2 * T), ("data", 4 * T * H * W * C), ("labels", H * W)]
    chunks = {}
    for name, n in sizes:
        if pos + n > len(buf):
            raise TileFormatError(f"truncated {name}", pos)
        chunks[name] = buf[pos : pos + n]
        pos += n
    if pos != len(buf):
        raise TileFormatError("trailing bytes", pos)
    return Tile(
        data=np.frombuffer(chunks["data"], dtype="<f4").reshape(T, H, W, C).astype(np.float32),
        times=np.frombuffer(chunks["times"], dtype="<u2").astype(np.int64),
        labels=np.frombuffer(chunks["labels"], dtype=np.uint8).reshape(H, W).copy(),
        num_classes=K,
    )


def write_tile(tile: Tile, path) -> None:
    atomic_write_bytes(path, encode_tile(tile))


def read_tile(path) -> Tile:
    return decode_tile(Path(path).read_bytes())


def tile_file_size(T: int, H: int, W: int, C: int) -> int:
    return _HEADER.size + 2 * T + 4 * T * H * W * C + H * W


# -- manifest ---------------------------------------------------------------------


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    channels: int
    tiles: list[dict]
    mean: list[float] = field(default_factory=list)
    std: list[float] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)
    root: Path = Path(".")

    def paths(self, split: str | None = None) -> list[Path]:
        return [self.root / t["path"] for t in self.tiles if split is None or t.get("split") == split]

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "num_classes": self.num_classes,
            "channels": self.channels,
            "class_names": self.class_names,
            "normalization": {"mean": self.mean, "std": self.std},
            "tiles": self.tiles,
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        atomic_write_bytes(path, self.to_json().encode("utf-8"))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        norm = doc.get("normalization", {})
        m = cls(
            name=doc["name"],
            num_classes=int(doc["num_classes"]),
            channels=int(doc["channels"]),
            tiles=list(doc["tiles"]),
            mean=list(norm.get("mean", [])),
            std=list(norm.get("std", [])),
            class_names=list(doc.get("class_names", [])),
            root=path.parent,
        )
        missing = [p for p in m.paths() if not p.exists()]
        if missing:
            raise DataError(f"manifest references missing tiles, e.g. {missing[0]}")
        return m


def split(manifest: DatasetManifest, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> DatasetManifest:
    """Assign train/val/test by a seeded shuffle; counts by largest remainder."""
    n = len(manifest.tiles)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    exact = [r * n for r in ratios]
    counts = [int(np.floor(x)) for x in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    perm = Rng(seed).child("split").permutation(n)
    labels = np.empty(n, dtype=object)
    start = 0
    for name, c in zip(SPLITS, counts):
        labels[perm[start : start + c]] = name
        start += c
    manifest.tiles = [{**t, "split": str(labels[i])} for i, t in enumerate(manifest.tiles)]
    return manifest


def compute_normalization(manifest: DatasetManifest, split_name: str = "train") -> DatasetManifest:
    """Per-channel mean/std over one split (float64 accumulation)."""
    paths = manifest.paths(split_name) or manifest.paths()
    s = np.zeros(manifest.channels)
    ss = np.zeros(manifest.channels)
    count = 0
    for p in paths:
        x = read_tile(p).data.reshape(-1, manifest.channels).astype(np.float64)
        s += x.sum(0)
        ss += (x * x).sum(0)
        count += x.shape[0]
    mean = s / count
    std = np.sqrt(np.maximum(ss / count - mean * mean, 0.0))
    manifest.mean = [float(v) for v in mean]
    manifest.std = [float(v) if v > 0 else 1.0 for v in std]
    return manifest


# -- batching ---------------------------------------------------------------------


@dataclass
class Batch:
    data: np.ndarray  # (B, T, H, W, C)
    times: np.ndarray  # (B, T)
    labels: np.ndarray  # (B, H, W)
    paths: list[str]

    def __len__(self) -> int:
        return self.data.shape[0]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return Rng(seed).child("batches").child(int(epoch)).permutation(n)


def batches(
    manifest: DatasetManifest,
    split_name: str,
    batch_size: int = 16,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    prefetch: int = 0,
) -> Iterator[Batch]:
    """Normalised batches of one split; the order depends only on (seed, epoch)."""
    paths = manifest.paths(split_name)
    if not paths:
        raise DataError(f"split {split_name!r} is empty")
    if shuffle:
        paths = [paths[i] for i in epoch_order(len(paths), seed, epoch)]
    mean = np.asarray(manifest.mean or [0.0] * manifest.channels, dtype=np.float32)
    std = np.asarray(manifest.std or [1.0] * manifest.channels, dtype=np.float32)

    def load(p):
        t = read_tile(p)
        return ((t.data - mean) / std).astype(np.float32), t.times, t.labels.astype(np.int64)

    def assemble(group, items):
        data, times, labels = zip(*items)
        return Batch(np.stack(data), np.stack(times), np.stack(labels), [str(p) for p in group])

    groups = [paths[i : i + batch_size] for i in range(0, len(paths), batch_size)]
    if prefetch > 0:
        with ThreadPoolExecutor(max_workers=prefetch) as pool:
            # map() yields in submission order whatever the completion order
            for group in groups:
                yield assemble(group, list(pool.map(load, group)))
    else:
        for group in groups:
            yield assemble(group, [load(p) for p in group])


# -- synthetic generator ----------------------------------------------------------


@dataclass
class SyntheticConfig:
    tiles: int = 200
    num_classes: int = 2
    T: int = 9
    H: int = 24
    W: int = 24
    C: int = 10
    parcels: tuple[int, int] = (2, 6)
    parcel_side: tuple[int, int] = (4, 12)
    noise: float = 0.1
    seed: int = 0
    peak_days: list[float] | None = None
    amplitudes: list[list[float]] | None = None
    widths: list[float] | None = None
    min_peak_separation: float = 30.0
    date_jitter: int = 7
    name: str = "synthetic"

    def validate(self) -> "SyntheticConfig":
        if self.num_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.num_classes}")
        if self.tiles < 1:
            raise DataError("need at least one tile")
        if self.noise < 0:
            raise DataError("noise must be >= 0")
        return self


@dataclass
class ClassProfiles:
    peak: np.ndarray  # (K,)
    width: np.ndarray  # (K,)
    amplitude: np.ndarray  # (K, C)
    base: np.ndarray  # (C,)

    def series(self, k: int, days: np.ndarray) -> np.ndarray:
        """(T, C) noiseless reflectance for class ``k``."""
        bump = np.exp(-0.5 * ((days - self.peak[k]) / self.width[k]) ** 2)
        return self.base[None, :] + bump[:, None] * self.amplitude[k][None, :]


def season_days(T: int) -> np.ndarray:
    """T roughly monthly acquisition days from mid-November to July."""
    return np.round(np.linspace(15, 255, T)).astype(np.int64)


def make_profiles(cfg: SyntheticConfig) -> ClassProfiles:
    rng = Rng(cfg.seed).child("profiles")
    K, C = cfg.num_classes, cfg.C
    if cfg.peak_days is not None:
        peak = np.asarray(cfg.peak_days, dtype=np.float64)
    else:
        peak = None
        for _ in range(1000):
            cand = rng.gen.uniform(40, 230, K)
            if K < 2 or np.min(np.diff(np.sort(cand))) >= cfg.min_peak_separation:
                peak = cand
                break
        if peak is None:
            # evenly spaced fallback when the separation constraint is too tight
            peak = np.linspace(40, 230, K)[rng.permutation(K)]
    width = np.asarray(cfg.widths, dtype=np.float64) if cfg.widths is not None else rng.gen.uniform(25, 45, K)
    if cfg.amplitudes is not None:
        amp = np.asarray(cfg.amplitudes, dtype=np.float64)
    else:
        amp = rng.gen.uniform(0.1, 0.5, (K, C))
    base = rng.gen.uniform(0.05, 0.2, C)
    return ClassProfiles(peak, width, amp, base)


def _synthetic_tile(cfg: SyntheticConfig, prof: ClassProfiles, rng: Rng) -> Tile:
    T, H, W, C, K = cfg.T, cfg.H, cfg.W, cfg.C, cfg.num_classes
    days = season_days(T) + rng.integers(-cfg.date_jitter, cfg.date_jitter + 1, size=T)
    labels = np.zeros((H, W), dtype=np.uint8)
    for _ in range(int(rng.integers(cfg.parcels[0], cfg.parcels[1] + 1))):
        h = int(rng.integers(cfg.parcel_side[0], cfg.parcel_side[1] + 1))
        w = int(rng.integers(cfg.parcel_side[0], cfg.parcel_side[1] + 1))
        r = int(rng.integers(0, H - h + 1))
        c = int(rng.integers(0, W - w + 1))
        labels[r : r + h, c : c + w] = int(rng.integers(1, K))
    data = np.empty((T, H, W, C), dtype=np.float64)
    for k in range(K):
        sel = labels == k
        if sel.any():
            data[:, sel, :] = prof.series(k, days.astype(np.float64))[:, None, :]
    if cfg.noise > 0:
        data += rng.gen.standard_normal(data.shape) * cfg.noise
    return Tile(data.astype(np.float32), days, labels, K)


def generate_synthetic(cfg: SyntheticConfig, out_dir, ratios=(0.6, 0.2, 0.2), split_seed: int | None = None) -> DatasetManifest:
    """Write ``cfg.tiles`` tiles plus ``manifest.json`` (split and normalised) under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    prof = make_profiles(cfg)
    root = Rng(cfg.seed).child("tiles")
    entries = []
    for i in range(cfg.tiles):
        rel = f"tiles/tile_{i:05d}.tsst"
        write_tile(_synthetic_tile(cfg, prof, root.child(i)), out / rel)
        entries.append({"path": rel})
    names = ["background"] + [f"crop{k}" for k in range(1, cfg.num_classes)]
    manifest = DatasetManifest(cfg.name, cfg.num_classes, cfg.C, entries, class_names=names, root=out)
    split(manifest, ratios, cfg.seed if split_seed is None else split_seed)
    compute_normalization(manifest)
    manifest.save(out / "manifest.json")
    return manifest
