"""Label-space alignment heads: decoupled, unionized and language-guided.

Every head produces logits whose columns outside the batch domain's own
category space are either absent (decoupled) or filled with a large negative
sentinel, so other datasets' categories never act as negatives.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import UnifiedLabelSpace
from .errors import ConfigError, DataError, ParseError, UnknownDomainError
from .params import ParamStore
from .tensor import MASK_SENTINEL, Tensor

HEAD_KINDS = ("decoupled", "unionized", "language_guided")
CRITERIA = ("infonce_ce", "l2")
PLACEHOLDER = "[class]"
DEFAULT_TEMPLATE = PLACEHOLDER
DEFAULT_LOGIT_SCALE = 100.0


def template_expand(name: str, template: str = DEFAULT_TEMPLATE) -> str:
    if PLACEHOLDER not in template:
        raise ConfigError(f"template {template!r} lacks the {PLACEHOLDER} placeholder")
    return template.replace(PLACEHOLDER, name)


def hash_embedding(text: str, dim: int) -> np.ndarray:
    """Unit-norm Gaussian vector drawn from a Philox stream keyed by ``text``."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype="<u8")
    v = np.random.Generator(np.random.Philox(key=key)).standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class TextEmbeddingTable:
    names: tuple[str, ...]
    vectors: np.ndarray  # (U, t), unit rows, read-only
    provider: str = "deterministic_hash"

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_hash(cls, names: Sequence[str], dim: int = 64, template: str = DEFAULT_TEMPLATE) -> TextEmbeddingTable:
        vecs = np.stack([hash_embedding(template_expand(n, template), dim) for n in names])
        vecs.setflags(write=False)
        return cls(tuple(names), vecs, "deterministic_hash")

    @classmethod
    def from_file(cls, path, names: Sequence[str]) -> TextEmbeddingTable:
        """Read ``category<TAB>v1 v2 ... vt`` lines; rows are L2-normalised."""
        path = Path(path)
        rows: dict[str, np.ndarray] = {}
        dim = None
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError(f"{path}:{lineno}: expected 'category<TAB>values'")
            name, values = line.split("\t", 1)
            try:
                vec = np.array([float(v) for v in values.split()], dtype=np.float64)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric embedding value") from None
            if name in rows:
                raise DataError(f"{path}:{lineno}: duplicate category {name!r}")
            if dim is None:
                dim = vec.size
            if vec.size != dim or dim == 0:
                raise ParseError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            norm = np.linalg.norm(vec)
            if norm == 0:
                raise DataError(f"{path}:{lineno}: zero embedding for {name!r}")
            rows[name] = vec / norm
        missing = [n for n in names if n not in rows]
        if missing:
            raise DataError(f"{path}: no embedding for categories {missing}")
        vecs = np.stack([rows[n] for n in names])
        vecs.setflags(write=False)
        return cls(tuple(names), vecs, "file")


def write_embedding_file(table: TextEmbeddingTable, path) -> Path:
    path = Path(path)
    lines = [n + "\t" + " ".join(repr(float(v)) for v in row) for n, row in zip(table.names, table.vectors)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class AlignmentHead:
    """Maps point embeddings to per-category logits for one domain at a time."""

    def __init__(
        self,
        store: ParamStore,
        kind: str,
        embed_dim: int,
        unified: UnifiedLabelSpace,
        domain_names: Sequence[str],
        text: TextEmbeddingTable | None = None,
        logit_scale: float = DEFAULT_LOGIT_SCALE,
    ):
        if kind not in HEAD_KINDS:
            raise ConfigError(f"head kind must be one of {HEAD_KINDS}, got {kind!r}")
        if not logit_scale > 0:
            raise ConfigError("logit_scale must be positive")
        self.kind = kind
        self.unified = unified
        self.domain_names = list(domain_names)
        self.logit_scale = float(logit_scale)
        self.text = None
        std = 1.0 / math.sqrt(embed_dim)
        if kind == "decoupled":
            self.heads = []
            for d, name in enumerate(self.domain_names):
                k = len(unified.maps[d])
                self.heads.append(
                    (store.normal(f"head.{name}.weight", (embed_dim, k), std), store.zeros(f"head.{name}.bias", (k,)))
                )
        elif kind == "unionized":
            u = len(unified)
            self.weight = store.normal("head.union.weight", (embed_dim, u), std)
            self.bias = store.zeros("head.union.bias", (u,))
        else:
            if text is None:
                raise ConfigError("language_guided head needs a text embedding table")
            if tuple(text.names) != tuple(unified.names):
                raise ConfigError("text embedding table does not match the unified label space")
            self.text = text
            self.weight = store.normal("head.proj.weight", (embed_dim, text.dim), std)
            self.bias = store.zeros("head.proj.bias", (text.dim,))
            # stored for self-contained checkpoints; never trained
            store.add_buffer("head.text_embeddings", text.vectors)

    def _domain(self, domain) -> int:
        if isinstance(domain, (int, np.integer)):
            d = int(domain)
            if not 0 <= d < len(self.domain_names):
                raise UnknownDomainError(f"alignment head has no domain index {d}")
            return d
        name = domain if isinstance(domain, str) else domain.name
        if name not in self.domain_names:
            raise UnknownDomainError(f"alignment head has no domain {name!r}")
        return self.domain_names.index(name)

    def active(self, domain) -> np.ndarray:
        """Logit columns of the domain's categories, in domain-local order."""
        d = self._domain(domain)
        if self.kind == "decoupled":
            return np.arange(len(self.unified.maps[d]))
        return self.unified.maps[d]

    def project(self, emb: Tensor) -> Tensor:
        """Unit-norm projection used by the language-guided head."""
        return T.l2_normalize(T.add(T.matmul(emb, self.weight), self.bias))

    def logits(self, emb: Tensor, domain) -> tuple[Tensor, np.ndarray]:
        d = self._domain(domain)
        if self.kind == "decoupled":
            w, b = self.heads[d]
            return T.add(T.matmul(emb, w), b), self.active(d)
        if self.kind == "unionized":
            raw = T.add(T.matmul(emb, self.weight), self.bias)
        else:
            sims = T.matmul(self.project(emb), Tensor(self.text.vectors.T))
            raw = T.mul(sims, self.logit_scale)
        return T.masked_fill(raw, ~self.unified.masks[d], MASK_SENTINEL), self.active(d)

    def targets(self, labels, domain) -> np.ndarray:
        d = self._domain(domain)
        labels = np.asarray(labels, dtype=np.int64)
        k = len(self.unified.maps[d])
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise DataError(f"label outside the {k}-category space of domain {self.domain_names[d]!r}")
        return labels if self.kind == "decoupled" else self.unified.maps[d][labels]

    def loss(self, emb: Tensor, labels, domain, criterion: str = "infonce_ce") -> Tensor:
        """Mean per-point alignment loss on domain-local ``labels``."""
        if criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
        target = self.targets(labels, domain)
        if criterion == "l2":
            if self.kind != "language_guided":
                raise ConfigError("the l2 criterion needs a language_guided head")
            diff = T.sub(self.project(emb), Tensor(self.text.vectors[target]))
            return T.mean(T.sum(T.mul(diff, diff), axis=1))
        logits, _ = self.logits(emb, domain)
        return cross_entropy(logits, target)

    def predict(self, emb: Tensor, domain) -> np.ndarray:
        logits, active = self.logits(emb, domain)
        return np.argmax(logits.data[:, active], axis=1)


def cross_entropy(logits: Tensor, target) -> Tensor:
    return T.mul(T.mean(T.gather(T.log_softmax(logits), target)), -1.0)
