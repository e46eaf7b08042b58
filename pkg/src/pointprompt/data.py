"""Synthetic indoor point-cloud domains, label spaces and dataset I/O.

Each domain is a collection of box-shaped rooms populated with labelled
primitives.  A category's appearance (colour, height band, footprint) is a
function of its *name* alone, so a category shared by two domains looks the
same in both up to that domain's colour shift, jitter and global scale.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

LAYOUTS = ("rooms", "corridors", "open")

MAGIC = b"PPTD"
VERSION = 1


@dataclass(frozen=True)
class DomainId:
    index: int
    name: str


@dataclass(frozen=True)
class CategorySpace:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ConfigError("category space must not be empty")
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise ConfigError(f"duplicate category names: {dupes}")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True, eq=False)
class UnifiedLabelSpace:
    """Ordered union of several category spaces.

    ``maps[d][l]`` is the unified index of domain ``d``'s local label ``l``;
    ``masks[d, u]`` tells whether unified category ``u`` belongs to domain ``d``.
    """

    names: tuple[str, ...]
    maps: tuple[np.ndarray, ...]
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.names)

    @property
    def num_domains(self) -> int:
        return len(self.maps)

    def to_unified(self, domain: int, local_labels) -> np.ndarray:
        return self.maps[domain][np.asarray(local_labels, dtype=np.int64)]


def build_unified_label_space(spaces: Sequence[CategorySpace]) -> UnifiedLabelSpace:
    if not spaces:
        raise ConfigError("need at least one category space")
    index: dict[str, int] = {}
    for space in spaces:
        for name in space:
            index.setdefault(name, len(index))
    names = tuple(index)
    maps = []
    masks = np.zeros((len(spaces), len(names)), dtype=bool)
    for d, space in enumerate(spaces):
        m = np.array([index[n] for n in space], dtype=np.int64)
        m.setflags(write=False)
        maps.append(m)
        masks[d, m] = True
    masks.setflags(write=False)
    return UnifiedLabelSpace(names, tuple(maps), masks)


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True, eq=False)
class Scene:
    positions: np.ndarray  # (N, 3) float32
    features: np.ndarray  # (N, 3) float32, pseudo-colour in [0, 1]
    labels: np.ndarray  # (N,) int64, domain-local

    def __post_init__(self):
        for arr in (self.positions, self.features, self.labels):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class Dataset:
    """One split of one domain."""

    domain: DomainId
    categories: CategorySpace
    scenes: tuple[Scene, ...]
    split: str = ""

    def __len__(self) -> int:
        return len(self.scenes)

    def label_histogram(self) -> np.ndarray:
        counts = np.zeros(len(self.categories), dtype=np.int64)
        for s in self.scenes:
            counts += np.bincount(s.labels, minlength=len(self.categories))
        return counts

    def with_domain_index(self, index: int) -> Dataset:
        return Dataset(DomainId(index, self.domain.name), self.categories, self.scenes, self.split)


class SplitDataset(NamedTuple):
    train: Dataset
    val: Dataset


@dataclass
class Batch:
    """Points drawn from one domain; ``offsets`` delimit the source scenes."""

    domain: DomainId
    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.positions, self.features], axis=1)


def make_batch(ds: Dataset, scene_indices, max_points: int, seed: int) -> Batch:
    scene_indices = list(scene_indices)
    if not scene_indices:
        raise DataError("make_batch: empty scene selection")
    if max_points < 1:
        raise ConfigError("max_points must be positive")
    rng = np.random.default_rng(seed)
    pos, feat, lab, offsets = [], [], [], [0]
    for i in scene_indices:
        if not 0 <= i < len(ds.scenes):
            raise DataError(f"make_batch: scene index {i} out of range for {len(ds.scenes)} scenes")
        s = ds.scenes[i]
        if len(s) > max_points:
            keep = np.sort(rng.choice(len(s), size=max_points, replace=False))
            pos.append(s.positions[keep])
            feat.append(s.features[keep])
            lab.append(s.labels[keep])
        else:
            pos.append(s.positions)
            feat.append(s.features)
            lab.append(s.labels)
        offsets.append(offsets[-1] + len(lab[-1]))
    return Batch(
        ds.domain,
        np.concatenate(pos).astype(np.float64),
        np.concatenate(feat).astype(np.float64),
        np.concatenate(lab).astype(np.int64),
        np.asarray(offsets, dtype=np.int64),
    )


def full_scene_batch(ds: Dataset, index: int) -> Batch:
    s = ds.scenes[index]
    return Batch(
        ds.domain,
        s.positions.astype(np.float64),
        s.features.astype(np.float64),
        s.labels.astype(np.int64),
        np.array([0, len(s)], dtype=np.int64),
    )


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class SyntheticDomainConfig:
    name: str
    category_space: CategorySpace
    scenes: int = 10
    points_per_scene: int = 1500
    density_factor: float = 1.0
    noise_sigma: float = 0.0
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    global_scale: float = 1.0
    layout_style: str = "rooms"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "color_shift", tuple(float(c) for c in self.color_shift))
        if not isinstance(self.category_space, CategorySpace):
            object.__setattr__(self, "category_space", CategorySpace(tuple(self.category_space)))

    def validate(self) -> None:
        if self.scenes < 2:
            raise ConfigError(f"{self.name}: scenes must be >= 2 so a train/val split exists (got {self.scenes})")
        if self.points_per_scene < 1:
            raise ConfigError(f"{self.name}: points_per_scene must be positive")
        if not self.density_factor > 0:
            raise ConfigError(f"{self.name}: density_factor must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError(f"{self.name}: noise_sigma must be >= 0")
        if not self.global_scale > 0:
            raise ConfigError(f"{self.name}: global_scale must be > 0")
        if len(self.color_shift) != 3:
            raise ConfigError(f"{self.name}: color_shift needs 3 components")
        if self.layout_style not in LAYOUTS:
            raise ConfigError(f"{self.name}: layout_style must be one of {LAYOUTS}")
        if len(self.category_space) < 2:
            raise ConfigError(f"{self.name}: segmentation needs at least 2 categories")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"{self.name}: seed must fit in 64 bits")


# kind, z band (fraction of room height or metres), footprint in metres
_STRUCTURE = {"floor", "ceiling", "wall"}
_ON_WALL = {
    "door": (0.0, 2.1, 0.9),
    "window": (0.9, 2.2, 1.2),
    "picture": (1.3, 1.9, 0.7),
    "curtain": (0.3, 2.4, 1.0),
    "mirror": (1.0, 1.9, 0.6),
    "board": (0.9, 2.0, 1.6),
    "showercurtain": (0.2, 2.0, 1.0),
    "television": (1.0, 1.6, 1.0),
}
_ON_FLOOR = {
    "cabinet": (0.0, 0.9, 0.6),
    "bed": (0.0, 0.55, 1.8),
    "chair": (0.0, 0.95, 0.5),
    "sofa": (0.0, 0.8, 1.6),
    "table": (0.55, 0.75, 1.1),
    "desk": (0.6, 0.78, 1.2),
    "bookshelf": (0.0, 1.9, 0.9),
    "bookcase": (0.0, 1.9, 0.9),
    "shelves": (0.0, 1.7, 0.8),
    "counter": (0.8, 0.95, 1.5),
    "refrigerator": (0.0, 1.8, 0.7),
    "toilet": (0.0, 0.45, 0.5),
    "sink": (0.75, 0.9, 0.5),
    "bathtub": (0.0, 0.55, 1.6),
    "dresser": (0.0, 1.1, 0.9),
    "nightstand": (0.0, 0.6, 0.45),
    "lamp": (0.5, 1.6, 0.3),
    "pillow": (0.5, 0.7, 0.5),
    "otherfurniture": (0.0, 1.0, 0.8),
    "otherprop": (0.3, 1.2, 0.4),
    "otherstructure": (0.0, 2.5, 0.5),
    "clutter": (0.0, 1.2, 0.6),
}


def _name_rng(name: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(("category:" + name).encode()).digest()[:8], "little")
    return np.random.default_rng(key)


@dataclass(frozen=True)
class CategoryLook:
    kind: str
    color: np.ndarray
    z_low: float
    z_high: float
    footprint: float
    weight: float


def category_look(name: str) -> CategoryLook:
    """Name-determined appearance shared by every domain using ``name``."""
    rng = _name_rng(name)
    color = rng.uniform(0.1, 0.9, size=3)
    weight = float(rng.uniform(0.6, 1.6))
    if name in _STRUCTURE:
        return CategoryLook(name, color, 0.0, 0.0, 0.0, weight)
    if name == "beam":
        return CategoryLook("beam", color, -0.35, 0.0, 0.35, weight)
    if name == "column":
        return CategoryLook("column", color, 0.0, 0.0, 0.45, weight)
    if name in _ON_WALL:
        lo, hi, w = _ON_WALL[name]
        return CategoryLook("wall_item", color, lo, hi, w, weight)
    if name in _ON_FLOOR:
        lo, hi, w = _ON_FLOOR[name]
    else:
        lo = float(rng.uniform(0.0, 0.8))
        hi = lo + float(rng.uniform(0.2, 1.0))
        w = float(rng.uniform(0.3, 1.2))
    return CategoryLook("furniture", color, lo, hi, w, weight)


_COLOR_SIGMA = 0.04


def _room_extent(style: str, rng: np.random.Generator) -> tuple[float, float, float]:
    if style == "rooms":
        return float(rng.uniform(4.0, 7.0)), float(rng.uniform(4.0, 6.0)), 2.8
    if style == "corridors":
        return float(rng.uniform(9.0, 13.0)), float(rng.uniform(2.2, 3.0)), 2.6
    return float(rng.uniform(8.0, 12.0)), float(rng.uniform(7.0, 10.0)), 3.2


def _allocate(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    rest = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    # every category keeps at least one point
    counts = np.maximum(counts, 1)
    return counts


def _sample_primitive(look: CategoryLook, n: int, lx: float, ly: float, h: float, rng) -> np.ndarray:
    if look.kind == "floor":
        return np.column_stack([rng.uniform(0, lx, n), rng.uniform(0, ly, n), np.zeros(n)])
    if look.kind == "ceiling":
        return np.column_stack([rng.uniform(0, lx, n), rng.uniform(0, ly, n), np.full(n, h)])
    if look.kind == "wall":
        side = rng.integers(0, 4, n)
        t = rng.uniform(0, 1, n)
        z = rng.uniform(0, h, n)
        x = np.where(side < 2, t * lx, np.where(side == 2, 0.0, lx))
        y = np.where(side < 2, np.where(side == 0, 0.0, ly), t * ly)
        return np.column_stack([x, y, z])
    if look.kind == "beam":
        y0 = rng.uniform(0.2 * ly, 0.8 * ly)
        return np.column_stack(
            [
                rng.uniform(0, lx, n),
                y0 + rng.uniform(-look.footprint / 2, look.footprint / 2, n),
                h + rng.uniform(look.z_low, look.z_high, n),
            ]
        )
    if look.kind == "column":
        cx = float(rng.choice([look.footprint / 2, lx - look.footprint / 2]))
        cy = float(rng.choice([look.footprint / 2, ly - look.footprint / 2]))
        half = look.footprint / 2
        return np.column_stack(
            [cx + rng.uniform(-half, half, n), cy + rng.uniform(-half, half, n), rng.uniform(0, h, n)]
        )
    z_hi = min(look.z_high, h - 0.05)
    z_lo = min(look.z_low, z_hi)
    if look.kind == "wall_item":
        side = int(rng.integers(0, 4))
        length = lx if side < 2 else ly
        w = min(look.footprint, 0.9 * length)
        start = rng.uniform(0, length - w)
        t = start + rng.uniform(0, w, n)
        z = rng.uniform(z_lo, z_hi, n)
        inset = 0.05
        if side == 0:
            return np.column_stack([t, np.full(n, inset), z])
        if side == 1:
            return np.column_stack([t, np.full(n, ly - inset), z])
        if side == 2:
            return np.column_stack([np.full(n, inset), t, z])
        return np.column_stack([np.full(n, lx - inset), t, z])
    half = min(look.footprint, 0.4 * min(lx, ly)) / 2
    cx = rng.uniform(half + 0.1, lx - half - 0.1)
    cy = rng.uniform(half + 0.1, ly - half - 0.1)
    return np.column_stack(
        [cx + rng.uniform(-half, half, n), cy + rng.uniform(-half, half, n), rng.uniform(z_lo, z_hi, n)]
    )


def _generate_scene(cfg: SyntheticDomainConfig, index: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, index])
    lx, ly, h = _room_extent(cfg.layout_style, rng)
    looks = [category_look(n) for n in cfg.category_space]
    total = max(len(looks), int(round(cfg.points_per_scene * cfg.density_factor)))
    weights = np.array([lk.weight for lk in looks]) * rng.uniform(0.7, 1.3, len(looks))
    for i, lk in enumerate(looks):
        if lk.kind in _STRUCTURE:
            weights[i] *= 3.0
    counts = _allocate(weights, total)

    pos, col, lab = [], [], []
    for label, (lk, n) in enumerate(zip(looks, counts)):
        pos.append(_sample_primitive(lk, int(n), lx, ly, h, rng))
        col.append(lk.color + rng.normal(0.0, _COLOR_SIGMA, size=(n, 3)))
        lab.append(np.full(n, label, dtype=np.int64))
    # rooms are centred on the origin in plan view; the floor stays at z=0
    positions = np.concatenate(pos) - np.array([lx / 2, ly / 2, 0.0])
    colors = np.concatenate(col)
    labels = np.concatenate(lab)

    if cfg.noise_sigma > 0:
        positions = positions + rng.normal(0.0, cfg.noise_sigma, size=positions.shape)
    positions = positions * cfg.global_scale
    colors = np.clip(colors + np.asarray(cfg.color_shift), 0.0, 1.0)

    order = rng.permutation(len(labels))
    return Scene(
        positions[order].astype(np.float32),
        colors[order].astype(np.float32),
        labels[order],
    )


def split_sizes(scenes: int) -> tuple[int, int]:
    n_val = max(1, int(round(0.2 * scenes)))
    return scenes - n_val, n_val


def generate_domain(cfg: SyntheticDomainConfig, index: int = 0) -> SplitDataset:
    """Build a deterministic train/val pair for one synthetic domain.

    The first 80% of scenes (by index) form the train split.
    """
    cfg.validate()
    scenes = [_generate_scene(cfg, i) for i in range(cfg.scenes)]
    n_train, _ = split_sizes(cfg.scenes)
    domain = DomainId(index, cfg.name)
    return SplitDataset(
        Dataset(domain, cfg.category_space, tuple(scenes[:n_train]), "train"),
        Dataset(domain, cfg.category_space, tuple(scenes[n_train:]), "val"),
    )


# ---------------------------------------------------------------- presets

SYNTH_A_CATEGORIES = CategorySpace(
    (
        "wall", "floor", "cabinet", "bed", "chair", "sofa", "table", "door", "window",
        "picture", "desk", "shelves", "curtain", "dresser", "pillow", "mirror", "ceiling",
        "refrigerator", "television", "nightstand", "sink", "lamp", "otherstructure",
        "otherfurniture", "otherprop",
    )
)  # fmt: skip
REAL_B_CATEGORIES = CategorySpace(
    (
        "wall", "floor", "cabinet", "bed", "chair", "sofa", "table", "door", "window",
        "bookshelf", "picture", "counter", "desk", "curtain", "refrigerator",
        "showercurtain", "toilet", "sink", "bathtub", "otherfurniture",
    )
)  # fmt: skip
REAL_C_CATEGORIES = CategorySpace(
    (
        "ceiling", "floor", "wall", "beam", "column", "window", "door", "table", "chair",
        "sofa", "bookcase", "board", "clutter",
    )
)  # fmt: skip

PRESETS: dict[str, SyntheticDomainConfig] = {
    "synth-A": SyntheticDomainConfig(
        name="synth-A",
        category_space=SYNTH_A_CATEGORIES,
        scenes=30,
        points_per_scene=1600,
        density_factor=1.0,
        noise_sigma=0.0,
        color_shift=(0.0, 0.0, 0.0),
        global_scale=1.0,
        layout_style="rooms",
        seed=101,
    ),
    "real-B": SyntheticDomainConfig(
        name="real-B",
        category_space=REAL_B_CATEGORIES,
        scenes=15,
        points_per_scene=1200,
        density_factor=1.0,
        noise_sigma=0.05,
        color_shift=(0.12, 0.06, -0.1),
        global_scale=1.0,
        layout_style="corridors",
        seed=202,
    ),
    "real-C": SyntheticDomainConfig(
        name="real-C",
        category_space=REAL_C_CATEGORIES,
        scenes=5,
        points_per_scene=1000,
        density_factor=2.0,
        noise_sigma=0.01,
        color_shift=(-0.1, 0.1, 0.12),
        global_scale=0.8,
        layout_style="open",
        seed=303,
    ),
}


def preset(name: str) -> SyntheticDomainConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- binary I/O


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"string too long to serialise: {s[:20]}...")
    return struct.pack("<H", len(raw)) + raw


def dataset_bytes(ds: Dataset) -> bytes:
    n_cat = len(ds.categories)
    if n_cat > 0xFFFF:
        raise DataError("too many categories for the PPTD format")
    parts = [MAGIC, struct.pack("<H", VERSION), _pack_str(ds.domain.name), struct.pack("<H", n_cat)]
    parts += [_pack_str(n) for n in ds.categories]
    parts.append(struct.pack("<I", len(ds.scenes)))
    for s in ds.scenes:
        parts.append(struct.pack("<I", len(s)))
        parts.append(np.ascontiguousarray(s.positions, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.features, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.labels, dtype="<u2").tobytes())
    return b"".join(parts)


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(ds))
    return path


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"{self.source}: truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]

    def string(self, what: str) -> str:
        n = self.unpack("<H", what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"{self.source}: {what} is not valid UTF-8") from None


def parse_dataset(buf: bytes, domain_index: int = 0, split: str = "", source: str = "<bytes>") -> Dataset:
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ParseError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.unpack("<H", "version")
    if version != VERSION:
        raise ParseError(f"{source}: unsupported version {version}, expected {VERSION}")
    name = r.string("domain name")
    n_cat = r.unpack("<H", "category count")
    cats = [r.string(f"category {i}") for i in range(n_cat)]
    try:
        space = CategorySpace(tuple(cats))
    except ConfigError as exc:
        raise DataError(f"{source}: {exc}") from None
    n_scenes = r.unpack("<I", "scene count")
    scenes = []
    for i in range(n_scenes):
        n = r.unpack("<I", f"scene {i} size")
        pos = np.frombuffer(r.take(12 * n, f"scene {i} positions"), dtype="<f4").reshape(n, 3).astype(np.float32)
        feat = np.frombuffer(r.take(12 * n, f"scene {i} features"), dtype="<f4").reshape(n, 3).astype(np.float32)
        lab = np.frombuffer(r.take(2 * n, f"scene {i} labels"), dtype="<u2").astype(np.int64)
        if n == 0:
            raise DataError(f"{source}: scene {i} has no points")
        if lab.max() >= n_cat:
            raise DataError(f"{source}: scene {i} has label {int(lab.max())} >= category count {n_cat}")
        if not np.all(np.isfinite(pos)):
            raise DataError(f"{source}: scene {i} has non-finite positions")
        scenes.append(Scene(pos, feat, lab))
    if r.pos != len(buf):
        raise ParseError(f"{source}: {len(buf) - r.pos} trailing bytes after last scene")
    return Dataset(DomainId(domain_index, name), space, tuple(scenes), split)


def load_dataset(path, domain_index: int = 0) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    split = path.stem.rsplit("_", 1)[-1] if "_" in path.stem else ""
    return parse_dataset(buf, domain_index, split, source=str(path))


def dataset_filename(domain_name: str, split: str) -> str:
    return f"{domain_name}_{split}.pptd"
