"""Staged per-point encoder with a batch-mean context pathway.

Each stage is ``linear -> norm -> relu -> [adapter] -> + context(mean)``:
points are processed independently except for the context term, which adds
a linear map of the batch-mean feature to every point.  That keeps the
network permutation-equivariant while still letting points (and prompts)
influence one another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapters import CrossAttention, DirectInjection, DomainPrompt, PDNorm
from .data import DomainId
from .errors import ConfigError
from .params import ParamStore
from .tensor import Tensor

NORM_KINDS = ("plain_batch_norm", "pdnorm")
ADAPTER_KINDS = ("none", "direct_injection", "cross_attention", "pdnorm")
INPUT_DIM = 6


@dataclass
class BackboneConfig:
    stage_dims: list[int] = field(default_factory=lambda: [32, 64, 128, 64])
    norm_kind: str = "plain_batch_norm"
    adapter_kind: str = "none"
    adapter_stages: list[int] | None = None  # None: every stage
    embed_dim: int = 64
    norm_style: str = "batch"
    momentum: float = 0.9
    eps: float = 1e-5
    attention_slices: int = 4

    def stages_with_adapter(self) -> list[int]:
        if self.adapter_kind == "none":
            return []
        if self.adapter_stages is None:
            return list(range(len(self.stage_dims)))
        return sorted(set(self.adapter_stages))

    def validate(self) -> None:
        if not self.stage_dims or any(d < 1 for d in self.stage_dims):
            raise ConfigError("stage_dims must be a non-empty list of positive widths")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter_kind must be one of {ADAPTER_KINDS}, got {self.adapter_kind!r}")
        if self.adapter_stages is not None:
            bad = [s for s in self.adapter_stages if not 0 <= s < len(self.stage_dims)]
            if bad:
                raise ConfigError(f"adapter_stages {bad} outside 0..{len(self.stage_dims) - 1}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("norm momentum must lie in [0, 1)")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")


class Backbone:
    def __init__(
        self,
        store: ParamStore,
        cfg: BackboneConfig,
        domains: Sequence[str],
        prompt_dim: int,
        zero_init: bool = True,
    ):
        cfg.validate()
        self.cfg = cfg
        self.domains = list(domains)
        adapter_at = set(cfg.stages_with_adapter())
        self.needs_prompt = bool(adapter_at)
        self.stages = []
        width = INPUT_DIM
        for i, dim in enumerate(cfg.stage_dims):
            p = f"backbone.stage{i}"
            w = store.normal(f"{p}.linear.weight", (width, dim), std=math.sqrt(2.0 / width))
            b = store.zeros(f"{p}.linear.bias", (dim,))
            modulated = cfg.adapter_kind == "pdnorm" and i in adapter_at
            norm = PDNorm(
                store,
                f"{p}.norm",
                dim,
                self.domains,
                per_domain=cfg.norm_kind == "pdnorm" or modulated,
                modulated=modulated,
                prompt_dim=prompt_dim,
                momentum=cfg.momentum,
                eps=cfg.eps,
                zero_init=zero_init,
                style=cfg.norm_style,
            )
            adapter = None
            if i in adapter_at and cfg.adapter_kind == "direct_injection":
                adapter = DirectInjection(store, f"{p}.inject", prompt_dim, dim, zero_init)
            elif i in adapter_at and cfg.adapter_kind == "cross_attention":
                adapter = CrossAttention(store, f"{p}.attn", prompt_dim, dim, cfg.attention_slices, zero_init)
            ctx = store.normal(f"{p}.context.weight", (dim, dim), std=0.5 / math.sqrt(dim))
            self.stages.append((w, b, norm, adapter, ctx))
            width = dim
        self.out_w = self.out_b = None
        if width != cfg.embed_dim:
            self.out_w = store.normal("backbone.out.weight", (width, cfg.embed_dim), std=math.sqrt(1.0 / width))
            self.out_b = store.zeros("backbone.out.bias", (cfg.embed_dim,))

    @property
    def norms(self) -> list[PDNorm]:
        return [s[2] for s in self.stages]

    def forward(
        self,
        inputs,
        domain: DomainId,
        prompt: DomainPrompt | None = None,
        train: bool = False,
    ) -> Tensor:
        """Map an ``N x 6`` array of (xyz, rgb) to ``N x embed_dim`` embeddings."""
        if self.needs_prompt:
            if prompt is None:
                raise ConfigError(f"adapter {self.cfg.adapter_kind!r} needs a domain prompt")
            if prompt.domain.name != domain.name:
                raise ConfigError(f"prompt for {prompt.domain.name!r} passed with a {domain.name!r} batch")
        h = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=np.float64))
        if h.ndim != 2 or h.shape[1] != INPUT_DIM:
            raise ConfigError(f"backbone expects N x {INPUT_DIM} inputs, got {h.shape}")
        for w, b, norm, adapter, ctx in self.stages:
            h = T.add(T.matmul(h, w), b)
            h = norm(h, domain, prompt, train)
            h = T.relu(h)
            if adapter is not None:
                h = adapter(h, prompt)
            h = T.add(h, T.matmul(T.mean(h, axis=0, keepdims=True), ctx))
        if self.out_w is not None:
            h = T.add(T.matmul(h, self.out_w), self.out_b)
        return h
