"""Named parameter registry and the PPTC checkpoint format."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError, ParseError
from .tensor import Tensor

GROUPS = ("backbone", "prompt", "buffer")
CKPT_MAGIC = b"PPTC"
CKPT_VERSION = 1


def init_rng(seed: int, name: str) -> np.random.Generator:
    # Keyed by name so adding or removing parameters never shifts the
    # initial values of the others.
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


class ParamStore:
    """Flat, ordered registry of trainable tensors and non-trainable buffers.

    Every trainable tensor carries exactly one group tag (``backbone`` or
    ``prompt``); buffers (running statistics, frozen text anchors) use
    ``buffer`` and are never touched by the optimizer.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, tuple[Tensor, str]] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def _check_new(self, name: str) -> None:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name {name!r}")

    def add(self, name: str, value: np.ndarray, group: str = "backbone") -> Tensor:
        if group not in ("backbone", "prompt"):
            raise ValueError(f"bad group {group!r}")
        self._check_new(name)
        t = Tensor(value, requires_grad=True)
        self._params[name] = (t, group)
        return t

    def normal(self, name: str, shape, std: float, group: str = "backbone") -> Tensor:
        return self.add(name, init_rng(self.seed, name).normal(0.0, std, size=shape), group)

    def zeros(self, name: str, shape, group: str = "backbone") -> Tensor:
        return self.add(name, np.zeros(shape), group)

    def ones(self, name: str, shape, group: str = "backbone") -> Tensor:
        return self.add(name, np.ones(shape), group)

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._check_new(name)
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        # in place so holders of the array see the update
        self._buffers[name][...] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._buffers

    def __len__(self) -> int:
        return len(self._params)

    def group_of(self, name: str) -> str:
        return self._params[name][1] if name in self._params else "buffer"

    def named_parameters(self, group: str | None = None) -> Iterator[tuple[str, Tensor]]:
        for name, (t, g) in self._params.items():
            if group is None or g == group:
                yield name, t

    def parameters(self, group: str | None = None) -> list[Tensor]:
        return [t for _, t in self.named_parameters(group)]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self._buffers.items()

    def zero_grad(self) -> None:
        for t, _ in self._params.values():
            t.grad = np.zeros_like(t.data)

    def state(self) -> dict[str, np.ndarray]:
        out = {n: t.data.copy() for n, (t, _) in self._params.items()}
        out.update({n: b.copy() for n, b in self._buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        names = set(self._params) | set(self._buffers)
        if strict:
            missing = sorted(names - set(state))
            extra = sorted(set(state) - names)
            if missing or extra:
                raise DataError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            if name not in names:
                continue
            target = self._params[name][0].data if name in self._params else self._buffers[name]
            value = np.asarray(value, dtype=np.float64)
            if value.size != target.size:
                raise DataError(f"checkpoint entry {name!r} has {value.size} values, model expects {target.size}")
            target[...] = value.reshape(target.shape)

    # ------------------------------------------------------------ checkpoint

    def to_bytes(self) -> bytes:
        entries = [(n, self.group_of(n), t.data) for n, (t, _) in self._params.items()]
        entries += [(n, "buffer", b) for n, b in self._buffers.items()]
        parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(entries))]
        for name, group, arr in entries:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<BI", GROUPS.index(group), arr.size))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


def read_checkpoint(path) -> dict[str, tuple[str, np.ndarray]]:
    """Decode a PPTC file into ``{name: (group, flat float64 values)}``."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return parse_checkpoint(buf, str(path))


def parse_checkpoint(buf: bytes, source: str = "<bytes>") -> dict[str, tuple[str, np.ndarray]]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"{source}: truncated checkpoint while reading {what}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise ParseError(f"{source}: not a PPTC checkpoint")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != CKPT_VERSION:
        raise ParseError(f"{source}: unsupported checkpoint version {version}")
    out: dict[str, tuple[str, np.ndarray]] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "name").decode("utf-8")
        tag, length = struct.unpack("<BI", take(5, f"{name} header"))
        if tag >= len(GROUPS):
            raise ParseError(f"{source}: bad group tag {tag} for {name}")
        values = np.frombuffer(take(8 * length, f"{name} values"), dtype="<f8").astype(np.float64)
        if name in out:
            raise ParseError(f"{source}: duplicate entry {name}")
        out[name] = (GROUPS[tag], values)
    if pos != len(buf):
        raise ParseError(f"{source}: trailing bytes after checkpoint")
    return out
