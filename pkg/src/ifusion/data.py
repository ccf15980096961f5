"""Raster ingestion, window extraction, and the synthetic benchmark generator.

File formats (all little-endian, bit-exact):

* IFCUBE: magic ``IFC1``, u32 H, W, B, then H*W*B float32 values in
  band-major, row-major order (index = b*H*W + r*W + c).  Values are widened
  to float64 on load; cubes written by this package hold float32-representable
  values, so write -> read -> write round-trips are byte-identical.
* IFLBL: magic ``IFL1``, u32 H, W, then H*W int32 labels row-major;
  0 means unlabeled, 1..K are classes.
* Split JSON: {"classes": [{"id": int, "train": [[r, c], ...],
  "test": [[r, c], ...]}]}.

Sample windows are 3s x 3s, centered so the anchor pixel sits at offset
(side - 1) // 2; out-of-image positions mirror-reflect at the edges
(symmetric reflection, edge pixel included).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    MagicError,
    NonFiniteError,
    ShapeError,
    TruncatedError,
)
from .model import IfConfig, SampleWindow, make_center_input
from .rng import SplitMix64

CUBE_MAGIC = b"IFC1"
LABEL_MAGIC = b"IFL1"


@dataclass
class Cube:
    """Dense raster of shape (bands, height, width), float64 in memory."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeError(f"cube needs (bands, H, W) with all dims >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("cube holds non-finite values")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    """(H, W) int32 grid; 0 = unlabeled background."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise ShapeError(f"labels need (H, W), got {self.labels.shape}")
        if self.labels.min() < 0:
            raise FormatError("negative labels are not allowed")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class SplitClass:
    id: int
    train: list[tuple[int, int]]
    test: list[tuple[int, int]]


@dataclass
class SplitSpec:
    classes: list[SplitClass]

    def __post_init__(self):
        seen: set[tuple[int, int]] = set()
        for cls in self.classes:
            if cls.id < 1:
                raise ConfigError(f"class ids are 1-based, got {cls.id}")
            for px in list(cls.train) + list(cls.test):
                px = tuple(px)
                if px in seen:
                    raise ConfigError(f"pixel {px} listed twice in the split")
                seen.add(px)

    def train_count(self) -> int:
        return sum(len(c.train) for c in self.classes)

    def test_count(self) -> int:
        return sum(len(c.test) for c in self.classes)

    def validate_labels(self, labels: LabelMap) -> None:
        for cls in self.classes:
            for r, c in list(cls.train) + list(cls.test):
                got = int(labels.labels[r, c])
                if got == 0:
                    raise ContractError(f"split lists unlabeled pixel ({r}, {c})")
                if got != cls.id:
                    raise ContractError(
                        f"pixel ({r}, {c}) labeled {got} but listed under class {cls.id}"
                    )


@dataclass
class NormStats:
    """Per-band mean/std computed on training pixels only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_pixels(cls, cube: Cube, pixels: list[tuple[int, int]]) -> "NormStats":
        rows = np.array([p[0] for p in pixels])
        cols = np.array([p[1] for p in pixels])
        vals = cube.values[:, rows, cols]  # (bands, n)
        mean = vals.mean(axis=1)
        std = vals.std(axis=1)
        bad = np.nonzero(std == 0.0)[0]
        if bad.size:
            raise ConfigError(f"degenerate bands with zero std on training pixels: {bad.tolist()}")
        return cls(mean=mean, std=std)


# ---------------------------------------------------------------------------
# binary formats


def save_cube(cube: Cube, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<III", cube.height, cube.width, cube.bands))
        fh.write(cube.values.astype("<f4").tobytes())


def load_cube(path) -> Cube:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != CUBE_MAGIC:
        raise MagicError(f"{path}: expected magic {CUBE_MAGIC!r}")
    h, w, b = struct.unpack("<III", raw[4:16])
    if min(h, w, b) < 1:
        raise FormatError(f"{path}: header dims {h}x{w}x{b} invalid")
    expected = h * w * b * 4
    payload = raw[16:]
    if len(payload) < expected:
        raise TruncatedError(
            f"{path}: payload holds {len(payload) // 4} floats, header wants {h * w * b}"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    vals = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(b, h, w)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError(f"{path}: cube holds non-finite values")
    return Cube(vals)


def save_labels(labels: LabelMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<II", labels.height, labels.width))
        fh.write(labels.labels.astype("<i4").tobytes())


def load_labels(path) -> LabelMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != LABEL_MAGIC:
        raise MagicError(f"{path}: expected magic {LABEL_MAGIC!r}")
    h, w = struct.unpack("<II", raw[4:12])
    expected = h * w * 4
    payload = raw[12:]
    if len(payload) < expected:
        raise TruncatedError(f"{path}: payload holds {len(payload) // 4} labels, header wants {h * w}")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    return LabelMap(np.frombuffer(payload, dtype="<i4").reshape(h, w))


def save_split(split: SplitSpec, path) -> None:
    doc = {
        "classes": [
            {
                "id": c.id,
                "train": [[int(r), int(q)] for r, q in c.train],
                "test": [[int(r), int(q)] for r, q in c.test],
            }
            for c in split.classes
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_split(path) -> SplitSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: split is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"classes"}:
        raise FormatError(f"{path}: split JSON must be an object with one 'classes' key")
    classes = []
    for entry in doc["classes"]:
        if set(entry) != {"id", "train", "test"}:
            raise FormatError(f"{path}: split classes need exactly id/train/test")
        classes.append(
            SplitClass(
                id=int(entry["id"]),
                train=[(int(r), int(c)) for r, c in entry["train"]],
                test=[(int(r), int(c)) for r, c in entry["test"]],
            )
        )
    return SplitSpec(classes)


# ---------------------------------------------------------------------------
# raster operations


def concat_lidar(a: Cube, b: Cube) -> Cube:
    """Stack two co-registered rasters along the band axis, a's bands first."""
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeError(
            f"lidar cubes differ spatially: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    return Cube(np.concatenate([a.values, b.values], axis=0))


def _reflect_indices(start: int, count: int, n: int) -> np.ndarray:
    """Symmetric mirror reflection (edge included): -1 -> 0, n -> n-1."""
    idx = np.arange(start, start + count)
    period = 2 * n
    idx = idx % period
    return np.where(idx < n, idx, period - 1 - idx)


def extract_window(cube: Cube, row: int, col: int, side: int) -> np.ndarray:
    """(bands, side, side) window anchored at (row, col); edges mirror."""
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise ContractError(f"pixel ({row}, {col}) outside {cube.height}x{cube.width} raster")
    r0 = row - (side - 1) // 2
    c0 = col - (side - 1) // 2
    rows = _reflect_indices(r0, side, cube.height)
    cols = _reflect_indices(c0, side, cube.width)
    return np.ascontiguousarray(cube.values[:, rows[:, None], cols[None, :]])


def normalize(cube: Cube, stats: NormStats) -> Cube:
    if stats.mean.shape != (cube.bands,):
        raise ShapeError(f"stats cover {stats.mean.shape[0]} bands, cube has {cube.bands}")
    return Cube((cube.values - stats.mean[:, None, None]) / stats.std[:, None, None])


def make_samples(
    hsi: Cube,
    lidar: Cube,
    split: SplitSpec,
    cfg: IfConfig,
    labels: LabelMap | None = None,
) -> tuple[list[SampleWindow], list[SampleWindow]]:
    """Cut train/test windows out of (already normalized) cubes."""
    if (hsi.height, hsi.width) != (lidar.height, lidar.width):
        raise ShapeError("HSI and LiDAR rasters differ spatially")
    if labels is not None:
        split.validate_labels(labels)
    side = cfg.window_side

    def build(pixels: list[tuple[int, int]], cls_id: int) -> list[SampleWindow]:
        out = []
        for r, c in pixels:
            x_h1 = extract_window(hsi, r, c, side)
            out.append(
                SampleWindow(
                    x_h1=x_h1,
                    x_h2=make_center_input(x_h1),
                    x_l=extract_window(lidar, r, c, side),
                    label=cls_id - 1,
                )
            )
        return out

    train: list[SampleWindow] = []
    test: list[SampleWindow] = []
    for cls in split.classes:
        train.extend(build(cls.train, cls.id))
        test.extend(build(cls.test, cls.id))
    return train, test


def prepare_samples(
    hsi: Cube, lidar: Cube, labels: LabelMap, split: SplitSpec, cfg: IfConfig
) -> tuple[list[SampleWindow], list[SampleWindow], NormStats, NormStats]:
    """Normalize with train-pixel statistics only, then extract windows."""
    train_px = [px for cls in split.classes for px in cls.train]
    stats_h = NormStats.from_pixels(hsi, train_px)
    stats_l = NormStats.from_pixels(lidar, train_px)
    train, test = make_samples(
        normalize(hsi, stats_h), normalize(lidar, stats_l), split, cfg, labels
    )
    return train, test, stats_h, stats_l


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SynthSpec:
    """Recipe for a desk-scale labeled scene.

    The image splits into K horizontal stripes, one class each.  HSI pixels
    are the class signature plus noise; LiDAR pixels are the class altitude
    plus noise.  Classes may share a spectral signature (altitude-only pairs)
    but (signature, altitude) combinations must be distinct.
    """

    classes: int
    height: int
    width: int
    hsi_bands: int
    lidar_bands: int
    signatures: list[list[float]]
    altitudes: list[float]
    noise_std: float
    seed: int
    train_per_class: int
    test_per_class: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if len(self.signatures) != self.classes or len(self.altitudes) != self.classes:
            raise ConfigError("signatures and altitudes must list one entry per class")
        if any(len(s) != self.hsi_bands for s in self.signatures):
            raise ConfigError("each signature needs one value per HSI band")
        # quantize to float32 so generated cubes survive IFCUBE round-trips
        # bit-exactly and noise-free pixels equal their signature verbatim
        self.signatures = [[float(np.float32(v)) for v in s] for s in self.signatures]
        self.altitudes = [float(np.float32(a)) for a in self.altitudes]
        combos = {(tuple(s), a) for s, a in zip(self.signatures, self.altitudes)}
        if len(combos) != self.classes:
            raise ConfigError("(signature, altitude) pairs must be pairwise distinct")
        if isinstance(self.test_per_class, int):
            self.test_per_class = [self.test_per_class] * self.classes
        if len(self.test_per_class) != self.classes:
            raise ConfigError("test_per_class needs one count per class")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    def spectral_pairs(self) -> list[tuple[int, int]]:
        """Class pairs that only altitude can separate."""
        out = []
        for a in range(self.classes):
            for b in range(a + 1, self.classes):
                if self.signatures[a] == self.signatures[b]:
                    out.append((a, b))
        return out


def default_synth_spec(seed: int = 2024) -> SynthSpec:
    """Four stripes, 12 HSI bands; classes 3 and 4 differ only in altitude."""

    def band_block(lo: int, hi: int) -> list[float]:
        return [1.0 if lo <= b < hi else 0.0 for b in range(12)]

    return SynthSpec(
        classes=4,
        height=48,
        width=48,
        hsi_bands=12,
        lidar_bands=1,
        signatures=[band_block(0, 4), band_block(4, 8), band_block(8, 12), band_block(8, 12)],
        altitudes=[0.0, 0.3, 0.2, 1.2],
        noise_std=0.15,
        seed=seed,
        train_per_class=100,
        test_per_class=[250, 250, 150, 350],
    )


def _round_f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def gen_synth(spec: SynthSpec) -> tuple[Cube, Cube, LabelMap, SplitSpec]:
    """Deterministically synthesize (hsi, lidar, labels, split) from a spec.

    Draw order: HSI noise for the whole cube (band-major, row-major), then
    LiDAR noise, then one shuffle of each class's region pixels for the
    train/test split.
    """
    k, h, w = spec.classes, spec.height, spec.width
    if k > h:
        raise ConfigError(f"{k} classes need at least {k} rows, image has {h}")
    base = h // k
    extra = h % k
    stripe_rows: list[tuple[int, int]] = []
    r0 = 0
    for c in range(k):
        r1 = r0 + base + (1 if c < extra else 0)
        stripe_rows.append((r0, r1))
        r0 = r1
    for c, (a, b) in enumerate(stripe_rows):
        capacity = (b - a) * w
        needed = spec.train_per_class + spec.test_per_class[c]
        if needed > capacity:
            raise ConfigError(
                f"class {c + 1} needs {needed} pixels but its stripe holds {capacity}"
            )

    labels = np.zeros((h, w), dtype=np.int32)
    sig_map = np.zeros((spec.hsi_bands, h, w))
    alt_map = np.zeros((spec.lidar_bands, h, w))
    for c, (a, b) in enumerate(stripe_rows):
        labels[a:b, :] = c + 1
        sig_map[:, a:b, :] = np.array(spec.signatures[c])[:, None, None]
        alt_map[:, a:b, :] = spec.altitudes[c]

    rng = SplitMix64(spec.seed)
    hsi_noise = rng.normal(spec.hsi_bands * h * w).reshape(spec.hsi_bands, h, w)
    lidar_noise = rng.normal(spec.lidar_bands * h * w).reshape(spec.lidar_bands, h, w)
    hsi = Cube(_round_f32(sig_map + spec.noise_std * hsi_noise))
    lidar = Cube(_round_f32(alt_map + spec.noise_std * lidar_noise))

    classes = []
    for c, (a, b) in enumerate(stripe_rows):
        pixels = [(r, q) for r in range(a, b) for q in range(w)]
        rng.shuffle(pixels)
        n_train = spec.train_per_class
        n_test = spec.test_per_class[c]
        classes.append(
            SplitClass(id=c + 1, train=pixels[:n_train], test=pixels[n_train:n_train + n_test])
        )
    return hsi, lidar, LabelMap(labels), SplitSpec(classes)


def pair_confusion_bound(spec: SynthSpec, split: SplitSpec) -> float:
    """Smallest test-OA deficit any HSI-only classifier must incur.

    Classes sharing a spectral signature have identically distributed HSI
    inputs, so within each such group no spectral rule beats assigning every
    sample to the group's largest class; the rest are lost.
    """
    groups: dict[tuple, list[int]] = {}
    for c, sig in enumerate(spec.signatures):
        groups.setdefault(tuple(sig), []).append(c)
    counts = {c.id: len(c.test) for c in split.classes}
    lost = 0
    for members in groups.values():
        if len(members) > 1:
            sizes = [counts[c + 1] for c in members]
            lost += sum(sizes) - max(sizes)
    return lost / split.test_count()
