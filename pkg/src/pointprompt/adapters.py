"""Domain prompts and the layers that inject them into the backbone.

All three adapters start as exact identities: their prompt-facing
projections are zero-initialised, so at step 0 the network behaves as if it
had no prompts at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import DomainId
from .errors import ConfigError, UnknownDomainError
from .params import ParamStore
from .tensor import Tensor

DEFAULT_PROMPT_DIM = 256


@dataclass(frozen=True)
class DomainPrompt:
    domain: DomainId
    vector: Tensor

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]

    def row(self) -> Tensor:
        return T.reshape(self.vector, (1, self.dim))


class PromptBank:
    """One learnable context vector per registered domain, shared by all blocks."""

    def __init__(self, store: ParamStore, domains: Sequence[DomainId], dim: int = DEFAULT_PROMPT_DIM):
        if dim < 1:
            raise ConfigError("prompt dim must be positive")
        self.dim = dim
        self._prompts: dict[str, DomainPrompt] = {}
        for d in domains:
            # unit expected norm keeps SGD step sizes independent of dim
            vec = store.normal(f"prompt.{d.name}", (dim,), std=1.0 / math.sqrt(dim), group="prompt")
            self._prompts[d.name] = DomainPrompt(d, vec)

    def __getitem__(self, domain: DomainId | str) -> DomainPrompt:
        name = domain if isinstance(domain, str) else domain.name
        try:
            return self._prompts[name]
        except KeyError:
            raise UnknownDomainError(f"no prompt registered for domain {name!r}") from None

    def __contains__(self, domain) -> bool:
        name = domain if isinstance(domain, str) else domain.name
        return name in self._prompts

    def __len__(self) -> int:
        return len(self._prompts)

    def domains(self) -> list[str]:
        return list(self._prompts)


def _projection(store: ParamStore, name: str, shape, zero_init: bool, std: float = 1.0) -> Tensor:
    if zero_init:
        return store.zeros(name, shape)
    return store.normal(name, shape, std=std)


class PDNorm:
    """Normalisation with per-domain statistics and optional prompt modulation.

    ``per_domain`` keeps an independent running mean/var bank for each
    domain (otherwise one shared bank).  With ``modulated`` the output is
    ``x_hat * (1 + gamma(c)) + beta(c)`` where gamma and beta are linear maps
    of the domain prompt; without it a plain per-channel affine is used.

    ``style="batch"`` normalises each channel over the points of the batch;
    ``style="layer"`` normalises each point over its channels and keeps no
    running statistics.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        channels: int,
        domains: Sequence[str],
        *,
        per_domain: bool = True,
        modulated: bool = True,
        prompt_dim: int = DEFAULT_PROMPT_DIM,
        momentum: float = 0.9,
        eps: float = 1e-5,
        zero_init: bool = True,
        style: str = "batch",
    ):
        if style not in ("batch", "layer"):
            raise ConfigError(f"norm style must be 'batch' or 'layer', got {style!r}")
        self.name = name
        self.channels = channels
        self.per_domain = per_domain
        self.modulated = modulated
        self.momentum = momentum
        self.eps = eps
        self.style = style
        self._store = store
        self.banks = list(domains) if per_domain else ["shared"]
        for bank in self.banks:
            store.add_buffer(f"{name}.running_mean.{bank}", np.zeros(channels))
            store.add_buffer(f"{name}.running_var.{bank}", np.ones(channels))
        if modulated:
            self.gamma_w = _projection(store, f"{name}.gamma_proj.weight", (prompt_dim, channels), zero_init)
            self.gamma_b = _projection(store, f"{name}.gamma_proj.bias", (channels,), zero_init)
            self.beta_w = _projection(store, f"{name}.beta_proj.weight", (prompt_dim, channels), zero_init)
            self.beta_b = _projection(store, f"{name}.beta_proj.bias", (channels,), zero_init)
        else:
            self.weight = store.ones(f"{name}.weight", (channels,))
            self.bias = store.zeros(f"{name}.bias", (channels,))

    def _bank(self, domain: DomainId | str) -> str:
        if not self.per_domain:
            return "shared"
        name = domain if isinstance(domain, str) else domain.name
        if name not in self.banks:
            raise UnknownDomainError(f"{self.name}: no statistics bank for domain {name!r}")
        return name

    def running_stats(self, domain: DomainId | str) -> tuple[np.ndarray, np.ndarray]:
        bank = self._bank(domain)
        return (
            self._store.buffer(f"{self.name}.running_mean.{bank}"),
            self._store.buffer(f"{self.name}.running_var.{bank}"),
        )

    def normalize(self, x: Tensor, domain: DomainId | str, train: bool) -> Tensor:
        if self.style == "layer":
            mu = T.mean(x, axis=1, keepdims=True)
            var = T.var(x, axis=1, keepdims=True)
            return T.div(T.sub(x, mu), T.sqrt(T.add(var, self.eps)))
        run_mean, run_var = self.running_stats(domain)
        if train:
            mu = T.mean(x, axis=0, keepdims=True)
            var = T.var(x, axis=0, keepdims=True)
            m = self.momentum
            run_mean[...] = m * run_mean + (1.0 - m) * mu.data[0]
            run_var[...] = m * run_var + (1.0 - m) * var.data[0]
            return T.div(T.sub(x, mu), T.sqrt(T.add(var, self.eps)))
        scale = 1.0 / np.sqrt(run_var + self.eps)
        return T.mul(T.sub(x, run_mean), scale)

    def __call__(self, x: Tensor, domain: DomainId | str, prompt: DomainPrompt | None, train: bool) -> Tensor:
        x_hat = self.normalize(x, domain, train)
        if not self.modulated:
            return T.add(T.mul(x_hat, self.weight), self.bias)
        if prompt is None:
            raise ConfigError(f"{self.name}: prompt-driven normalisation needs a domain prompt")
        c = prompt.row()
        gamma = T.add(T.matmul(c, self.gamma_w), self.gamma_b)
        beta = T.add(T.matmul(c, self.beta_w), self.beta_b)
        return T.add(T.mul(x_hat, T.add(gamma, 1.0)), beta)


class DirectInjection:
    """``x + W c``: the prompt, linearly projected, is added to every point."""

    def __init__(self, store: ParamStore, name: str, prompt_dim: int, channels: int, zero_init: bool = True):
        self.weight = _projection(store, f"{name}.proj", (prompt_dim, channels), zero_init)

    def __call__(self, x: Tensor, prompt: DomainPrompt) -> Tensor:
        return T.add(x, T.matmul(prompt.row(), self.weight))


class CrossAttention:
    """Points attend over ``k`` slices of the prompt; the result is added back.

    Queries come from each point's features, keys and values from the prompt
    slices.  The output projection is zero-initialised.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        prompt_dim: int,
        channels: int,
        k: int = 4,
        zero_init: bool = True,
    ):
        if k < 1 or prompt_dim % k:
            raise ConfigError(f"prompt dim {prompt_dim} is not divisible into {k} slices")
        self.k = k
        self.slice_dim = prompt_dim // k
        self.attn_dim = channels
        self.w_q = store.normal(f"{name}.query", (channels, channels), std=1.0 / math.sqrt(channels))
        self.w_k = store.normal(f"{name}.key", (self.slice_dim, channels), std=1.0 / math.sqrt(self.slice_dim))
        self.w_v = store.normal(f"{name}.value", (self.slice_dim, channels), std=1.0 / math.sqrt(self.slice_dim))
        self.w_o = _projection(store, f"{name}.out", (channels, channels), zero_init, 1.0 / math.sqrt(channels))

    def attention(self, x: Tensor, prompt: DomainPrompt) -> tuple[Tensor, Tensor]:
        """Return the attention weights (N x k) and attended values (N x channels)."""
        slices = T.reshape(prompt.vector, (self.k, self.slice_dim))
        q = T.matmul(x, self.w_q)
        keys = T.matmul(slices, self.w_k)
        values = T.matmul(slices, self.w_v)
        scores = T.mul(T.matmul(q, T.transpose(keys)), 1.0 / math.sqrt(self.attn_dim))
        weights = T.softmax(scores)
        return weights, T.matmul(weights, values)

    def __call__(self, x: Tensor, prompt: DomainPrompt) -> Tensor:
        _, attended = self.attention(x, prompt)
        return T.add(x, T.matmul(attended, self.w_o))
