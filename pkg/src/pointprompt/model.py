"""The full segmentation model: prompts + backbone + alignment head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import DEFAULT_PROMPT_DIM, PromptBank
from .alignment import (
    CRITERIA,
    DEFAULT_TEMPLATE,
    HEAD_KINDS,
    AlignmentHead,
    TextEmbeddingTable,
)
from .backbone import Backbone, BackboneConfig
from .data import Batch, CategorySpace, DomainId, build_unified_label_space
from .errors import ConfigError, DataError, UnknownDomainError
from .params import ParamStore, read_checkpoint
from .tensor import Tensor


@dataclass
class ModelConfig:
    domains: list[str]
    category_spaces: list[list[str]]
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: str = "language_guided"
    criterion: str = "infonce_ce"
    prompt_dim: int = DEFAULT_PROMPT_DIM
    use_prompts: bool = True
    zero_init: bool = True
    text_dim: int = 64
    text_template: str = DEFAULT_TEMPLATE
    text_provider: str = "deterministic_hash"
    text_file: str | None = None
    logit_scale: float = 100.0
    seed: int = 0

    def validate(self) -> None:
        if not self.domains:
            raise ConfigError("model needs at least one domain")
        if len(set(self.domains)) != len(self.domains):
            raise ConfigError(f"duplicate domain names in {self.domains}")
        if len(self.category_spaces) != len(self.domains):
            raise ConfigError("one category space per domain is required")
        self.backbone.validate()
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}")
        if self.criterion == "l2" and self.head != "language_guided":
            raise ConfigError("the l2 criterion is only valid with the language_guided head")
        if self.backbone.adapter_kind != "none" and not self.use_prompts:
            raise ConfigError(f"adapter {self.backbone.adapter_kind!r} needs use_prompts=true")
        if self.prompt_dim < 1 or self.text_dim < 1:
            raise ConfigError("prompt_dim and text_dim must be positive")
        if self.text_provider not in ("deterministic_hash", "file"):
            raise ConfigError("text_provider must be 'deterministic_hash' or 'file'")
        if self.text_provider == "file" and not self.text_file:
            raise ConfigError("text_provider 'file' needs text_file")
        if not self.logit_scale > 0:
            raise ConfigError("logit_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


class SegmentationModel:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(cfg.seed)
        self.domains = [DomainId(i, n) for i, n in enumerate(cfg.domains)]
        self.spaces = [CategorySpace(tuple(s)) for s in cfg.category_spaces]
        self.unified = build_unified_label_space(self.spaces)
        self.prompts = PromptBank(self.store, self.domains, cfg.prompt_dim) if cfg.use_prompts else None
        self.backbone = Backbone(self.store, cfg.backbone, cfg.domains, cfg.prompt_dim, cfg.zero_init)
        text = None
        if cfg.head == "language_guided":
            if cfg.text_provider == "file":
                text = TextEmbeddingTable.from_file(cfg.text_file, self.unified.names)
            else:
                text = TextEmbeddingTable.from_hash(self.unified.names, cfg.text_dim, cfg.text_template)
        self.head = AlignmentHead(
            self.store,
            cfg.head,
            cfg.backbone.embed_dim,
            self.unified,
            cfg.domains,
            text=text,
            logit_scale=cfg.logit_scale,
        )

    def domain(self, name_or_id) -> DomainId:
        name = name_or_id if isinstance(name_or_id, str) else name_or_id.name
        for d in self.domains:
            if d.name == name:
                return d
        raise UnknownDomainError(f"model has no domain {name!r}; known: {self.cfg.domains}")

    def embed(self, batch: Batch, train: bool = False) -> Tensor:
        domain = self.domain(batch.domain)
        prompt = self.prompts[domain] if self.prompts is not None else None
        return self.backbone.forward(batch.inputs, domain, prompt, train)

    def loss(self, batch: Batch, train: bool = True) -> Tensor:
        emb = self.embed(batch, train)
        return self.head.loss(emb, batch.labels, self.domain(batch.domain), self.cfg.criterion)

    def predict(self, batch: Batch) -> np.ndarray:
        emb = self.embed(batch, train=False)
        return self.head.predict(emb, self.domain(batch.domain))

    # ------------------------------------------------------------ persistence

    def save(self, path) -> Path:
        """Write the PPTC checkpoint plus a ``.json`` sidecar holding the config."""
        path = Path(path)
        self.store.save(path)
        path.with_suffix(".json").write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True))
        return path

    def load_state(self, entries: dict[str, tuple[str, np.ndarray]]) -> None:
        for name, (group, _) in entries.items():
            if name in self.store and self.store.group_of(name) != group:
                raise DataError(f"checkpoint entry {name!r} has group {group!r}, model expects {self.store.group_of(name)!r}")
        self.store.load_state({n: v for n, (_, v) in entries.items()})
        if self.head.text is not None:
            vecs = self.store.buffer("head.text_embeddings").copy()
            vecs.setflags(write=False)
            self.head.text = TextEmbeddingTable(self.head.text.names, vecs, self.head.text.provider)

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> SegmentationModel:
        path = Path(path)
        if cfg is None:
            sidecar = path.with_suffix(".json")
            try:
                cfg = ModelConfig.from_dict(json.loads(sidecar.read_text()))
            except (OSError, ValueError, TypeError) as exc:
                raise DataError(f"cannot read model config {sidecar}: {exc}") from None
        model = cls(cfg)
        model.load_state(read_checkpoint(path))
        return model


def model_config_for(
    spaces: Sequence[CategorySpace],
    names: Sequence[str],
    **overrides,
) -> ModelConfig:
    return ModelConfig(domains=list(names), category_spaces=[list(s.names) for s in spaces], **overrides)
