"""Experiment configuration: one YAML document per experiment.

A document looks like::

    name: ppt
    seed: 0
    domains:
      - {preset: synth-A, iters: 400, ratio: 4}
      - {preset: real-B, iters: 200, ratio: 2}
      - name: toy                       # custom domain
        categories: [floor, wall, chair]
        scenes: 6
        iters: 100
    model: {head: language_guided, backbone: {norm_kind: pdnorm, adapter_kind: pdnorm}}
    train: {base_lr: 0.01, batch_scenes: 2}
    finetune: {iters: null, base_lr: null}
    transfer: {variants: [naive, ppt], naive: {...}, ppt: {...}}

Everything is parsed and validated before any compute; errors name the
file and the offending key.  ``overrides`` take ``dotted.path=value``
strings whose values are parsed as YAML (``domains.2.scenes=1``).
"""

from __future__ import annotations

import copy
import dataclasses
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .backbone import BackboneConfig
from .data import (
    PRESETS,
    CategorySpace,
    SplitDataset,
    SyntheticDomainConfig,
    dataset_filename,
    generate_domain,
    load_dataset,
)
from .errors import ConfigError, DataError
from .model import ModelConfig
from .trainer import TrainConfig
from .transfer import NAIVE_OVERRIDES, PPT_OVERRIDES


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-5`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+][0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)  # noqa: S506 - SafeLoader subclass


_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SyntheticDomainConfig)} - {"name", "category_space"}
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)} - {"domains", "category_spaces", "seed"}
_BACKBONE_FIELDS = {f.name for f in dataclasses.fields(BackboneConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "sampling_ratios"}
_TOP_FIELDS = {"name", "seed", "domains", "model", "train", "finetune", "transfer", "output_dir", "data_dir"}


@dataclass
class DomainSpec:
    synth: SyntheticDomainConfig
    iters: int = 100
    ratio: int = 1

    @property
    def name(self) -> str:
        return self.synth.name


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    domains: list[DomainSpec]
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    output_dir: str | None = None
    data_dir: str | None = None
    source: str = "<config>"
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    @property
    def budgets(self) -> dict[str, int]:
        return {d.name: d.iters for d in self.domains}

    @property
    def ratios(self) -> dict[str, int]:
        return {d.name: d.ratio for d in self.domains}

    def model_config(self) -> ModelConfig:
        m = copy.deepcopy(self.model)
        m["backbone"] = BackboneConfig(**m.get("backbone", {}))
        return ModelConfig(
            domains=self.domain_names,
            category_spaces=[list(d.synth.category_space.names) for d in self.domains],
            seed=self.seed,
            **m,
        )

    def train_config(self) -> TrainConfig:
        t = dict(self.train)
        if t.get("total_iters") is None:
            t["total_iters"] = sum(self.budgets.values())
        return TrainConfig(seed=self.seed, sampling_ratios=self.ratios, **t)

    def finetune_config(self, target: str) -> TrainConfig:
        base = self.train_config()
        iters = self.finetune.get("iters")
        lr = self.finetune.get("base_lr")
        return dataclasses.replace(
            base,
            total_iters=self.budgets[target] if iters is None else iters,
            base_lr=base.base_lr if lr is None else lr,
            sampling_ratios={target: 1},
        )

    def spec(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise ConfigError(f"{self.source}: no domain named {name!r}; configured: {self.domain_names}")

    def splits(self, names: Sequence[str] | None = None) -> dict[str, SplitDataset]:
        """Train/val data for each domain: PPTD files from ``data_dir`` when set, else generated."""
        out = {}
        for i, d in enumerate(self.domains):
            if names is not None and d.name not in names:
                continue
            if self.data_dir:
                root = Path(self.data_dir)
                tr = load_dataset(root / dataset_filename(d.name, "train"), i)
                va = load_dataset(root / dataset_filename(d.name, "val"), i)
                if tr.domain.name != d.name or va.domain.name != d.name:
                    raise DataError(f"{root}: dataset files for {d.name!r} carry domain {tr.domain.name!r}")
                out[d.name] = SplitDataset(tr, va)
            else:
                out[d.name] = generate_domain(d.synth, i)
        return out

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


# ---------------------------------------------------------------- overrides


def _parse_scalar(text: str) -> Any:
    try:
        return _yaml(text)
    except yaml.YAMLError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    """Set ``a.b.0.c=value`` inside ``doc`` in place; list indices are integers."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like dotted.path=value")
    path, value = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {assignment!r} has an empty path")
    node: Any = doc
    for i, key in enumerate(keys):
        last = i == len(keys) - 1
        if isinstance(node, list):
            try:
                idx = int(key)
                node[idx]
            except (ValueError, IndexError):
                raise ConfigError(f"override {path!r}: {key!r} is not a valid index") from None
            if last:
                node[idx] = _parse_scalar(value)
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[key] = _parse_scalar(value)
            else:
                if node.get(key) is None:
                    node[key] = {}
                node = node[key]
        else:
            raise ConfigError(f"override {path!r}: cannot descend into {type(node).__name__}")


# ---------------------------------------------------------------- parsing


def _unknown(where: str, keys, allowed) -> None:
    extra = sorted(set(keys) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}")


def _mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
    return dict(value)


def _domain(entry, where: str) -> DomainSpec:
    entry = _mapping(entry, where)
    iters = entry.pop("iters", 100)
    ratio = entry.pop("ratio", 1)
    if "preset" in entry:
        base = PRESETS.get(entry.pop("preset"))
        if base is None:
            raise ConfigError(f"{where}.preset: unknown preset; available: {sorted(PRESETS)}")
    else:
        if "name" not in entry or "categories" not in entry:
            raise ConfigError(f"{where}: custom domains need 'name' and 'categories' (or use 'preset')")
        base = SyntheticDomainConfig(name=str(entry.pop("name")), category_space=CategorySpace(tuple(entry.pop("categories"))))
    if "name" in entry:
        base = dataclasses.replace(base, name=str(entry.pop("name")))
    if "categories" in entry:
        base = dataclasses.replace(base, category_space=CategorySpace(tuple(entry.pop("categories"))))
    _unknown(where, entry, _SYNTH_FIELDS)
    try:
        synth = dataclasses.replace(base, **entry)
        synth.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if not isinstance(iters, int) or iters < 0:
        raise ConfigError(f"{where}.iters: must be a non-negative integer")
    if not isinstance(ratio, int) or isinstance(ratio, bool) or ratio < 1:
        raise ConfigError(f"{where}.ratio: must be a positive integer")
    return DomainSpec(synth, iters, ratio)


def parse_config(doc: Mapping, source: str = "<config>") -> ExperimentConfig:
    doc = _mapping(doc, source)
    raw = copy.deepcopy(doc)
    _unknown(source, doc, _TOP_FIELDS)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"{source}: seed must be a non-negative integer")

    entries = doc.get("domains")
    if entries is None:
        entries = [{"preset": n} for n in PRESETS]
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{source}: domains must be a non-empty list")
    domains = [_domain(e, f"{source}: domains[{i}]") for i, e in enumerate(entries)]

    model = _mapping(doc.get("model"), f"{source}: model")
    _unknown(f"{source}: model", model, _MODEL_FIELDS)
    model["backbone"] = _mapping(model.get("backbone"), f"{source}: model.backbone")
    _unknown(f"{source}: model.backbone", model["backbone"], _BACKBONE_FIELDS)
    train = _mapping(doc.get("train"), f"{source}: train")
    _unknown(f"{source}: train", train, _TRAIN_FIELDS)
    finetune = _mapping(doc.get("finetune"), f"{source}: finetune")
    _unknown(f"{source}: finetune", finetune, {"iters", "base_lr"})
    transfer = _mapping(doc.get("transfer"), f"{source}: transfer")
    _unknown(f"{source}: transfer", transfer, {"variants", "naive", "ppt"})
    transfer.setdefault("variants", ["naive", "ppt"])
    transfer.setdefault("naive", copy.deepcopy(NAIVE_OVERRIDES))
    transfer.setdefault("ppt", copy.deepcopy(PPT_OVERRIDES))

    cfg = ExperimentConfig(
        name=str(doc.get("name", Path(source).stem)),
        seed=seed,
        domains=domains,
        model=model,
        train=train,
        finetune=finetune,
        transfer=transfer,
        output_dir=doc.get("output_dir"),
        data_dir=doc.get("data_dir"),
        source=source,
        raw=raw,
    )
    validate(cfg)
    return cfg


def _check_numbers(obj, where: str) -> None:
    """Fields whose default is numeric must hold finite numbers."""
    for f in dataclasses.fields(obj):
        default = f.default if f.default is not dataclasses.MISSING else None
        value = getattr(obj, f.name)
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
            if isinstance(default, int) and not isinstance(default, bool) and not isinstance(value, int):
                ok = False
            if not ok:
                raise ConfigError(f"{where}.{f.name}: expected a finite {type(default).__name__}, got {value!r}")


def validate(cfg: ExperimentConfig) -> None:
    names = cfg.domain_names
    if len(set(names)) != len(names):
        raise ConfigError(f"{cfg.source}: duplicate domain names {names}")
    try:
        mc = cfg.model_config()
        _check_numbers(mc, f"{cfg.source}: model")
        _check_numbers(mc.backbone, f"{cfg.source}: model.backbone")
        mc.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg.source}: model: {exc}") from None
    try:
        tc = cfg.train_config()
        _check_numbers(tc, f"{cfg.source}: train")
        tc.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg.source}: train: {exc}") from None
    if tc.total_iters and tc.total_iters < sum(cfg.ratios.values()):
        raise ConfigError(f"{cfg.source}: train.total_iters {tc.total_iters} is below the ratio sum {sum(cfg.ratios.values())}")
    for variant in cfg.transfer["variants"]:
        if variant not in ("naive", "ppt"):
            raise ConfigError(f"{cfg.source}: transfer.variants: unknown variant {variant!r}")
    for variant in ("naive", "ppt"):
        _mapping(cfg.transfer[variant], f"{cfg.source}: transfer.{variant}")


def load_config(path, overrides: Sequence[str] = (), seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = _yaml(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for o in overrides:
        apply_override(doc, o)
    if seed is not None:
        doc["seed"] = seed
    return parse_config(doc, str(path))
