"""Cross-dataset transfer matrix: per-domain val mIoU for every data combination."""

from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .data import SplitDataset
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig, TrainResult, joint_train

NAIVE_OVERRIDES = {
    "head": "unionized",
    "use_prompts": False,
    "backbone": {"norm_kind": "plain_batch_norm", "adapter_kind": "none"},
}
PPT_OVERRIDES = {
    "head": "language_guided",
    "criterion": "infonce_ce",
    "use_prompts": True,
    "prompt_dim": 256,
    "backbone": {"norm_kind": "pdnorm", "adapter_kind": "pdnorm"},
}


def combo_label(members: Sequence[str]) -> str:
    return "+".join(members)


@dataclass
class TransferMatrix:
    domains: list[str]
    columns: list[str]
    cells: dict[str, dict[str, float]] = field(default_factory=dict)  # column -> domain -> mIoU

    def get(self, domain: str, column: str) -> float | None:
        return self.cells.get(column, {}).get(domain)

    def single(self, domain: str) -> float:
        return self.cells[domain][domain]

    def deltas(self, column: str) -> dict[str, float]:
        """Joint-minus-single for every member domain of ``column``."""
        return {d: v - self.single(d) for d, v in self.cells[column].items()}

    def to_dict(self) -> dict:
        return {"domains": self.domains, "columns": self.columns, "cells": self.cells}

    def table(self, digits: int = 1) -> str:
        """Rows = evaluated domain, columns = training data; mIoU in percent."""
        head = ["eval \\ train"] + self.columns
        rows = [head]
        for d in self.domains:
            row = [d]
            for c in self.columns:
                v = self.get(d, c)
                row.append("-" if v is None else f"{100 * v:.{digits}f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows)


def _merge(base: dict, overrides: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def model_config_for_members(base: ModelConfig, members: Sequence[str], overrides: Mapping) -> ModelConfig:
    d = base.to_dict()
    idx = [base.domains.index(m) for m in members]
    d["domains"] = [base.domains[i] for i in idx]
    d["category_spaces"] = [base.category_spaces[i] for i in idx]
    return ModelConfig.from_dict(_merge(d, overrides))


def train_config_for_members(base: TrainConfig, members: Sequence[str], budgets: Mapping[str, int], ratios: Mapping[str, int]) -> TrainConfig:
    return replace(
        base,
        total_iters=sum(budgets[m] for m in members),
        sampling_ratios={m: ratios[m] for m in members},
    )


def default_combinations(domains: Sequence[str]) -> list[tuple[str, ...]]:
    combos: list[tuple[str, ...]] = [(d,) for d in domains]
    if len(domains) > 2:
        combos += list(itertools.combinations(domains, 2))
    combos.append(tuple(domains))
    return combos


@dataclass
class TransferReport:
    matrix: TransferMatrix
    naive_all: str
    ppt_all: str | None
    runs: dict[str, TrainResult] = field(default_factory=dict, repr=False)

    def verdict(self) -> dict:
        cols = [c for c in self.matrix.columns if "+" in c and c != self.ppt_all]
        signs = {c: {d: ("negative" if v < 0 else "non-negative") for d, v in self.matrix.deltas(c).items()} for c in cols}
        out = {
            "per_cell": signs,
            "naive_all_below_single": sorted(d for d, v in self.matrix.deltas(self.naive_all).items() if v < 0),
        }
        if self.ppt_all is not None:
            ppt = self.matrix.cells[self.ppt_all]
            naive = self.matrix.cells[self.naive_all]
            out["ppt_ge_naive"] = sorted(d for d in ppt if ppt[d] >= naive[d])
            out["ppt_ge_single"] = sorted(d for d in ppt if ppt[d] >= self.matrix.single(d))
        out["negative_transfer"] = len(out["naive_all_below_single"]) >= 2
        return out

    def to_dict(self) -> dict:
        return {**self.matrix.to_dict(), "naive_all": self.naive_all, "ppt_all": self.ppt_all, "verdict": self.verdict()}

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "transfer.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        (out_dir / "transfer.txt").write_text(self.matrix.table() + "\n")
        return path


def run_transfer_matrix(
    splits: Mapping[str, SplitDataset],
    base_model: ModelConfig,
    base_train: TrainConfig,
    budgets: Mapping[str, int],
    ratios: Mapping[str, int],
    variants: Sequence[str] = ("naive", "ppt"),
    naive_overrides: Mapping = NAIVE_OVERRIDES,
    ppt_overrides: Mapping = PPT_OVERRIDES,
    combinations: Sequence[Sequence[str]] | None = None,
    keep_runs: bool = False,
) -> TransferReport:
    """Train every data combination from scratch and tabulate val mIoU.

    Single-domain and merged columns use the naive configuration; the
    ``ppt`` variant adds one more column with all domains under PPT.
    """
    domains = list(splits)
    if len(domains) < 2:
        raise ConfigError("a transfer matrix needs at least two domains")
    for v in variants:
        if v not in ("naive", "ppt"):
            raise ConfigError(f"unknown transfer variant {v!r}")
    if "naive" not in variants:
        raise ConfigError("the naive variant is required: it provides the baseline columns")
    combos = [tuple(c) for c in (combinations or default_combinations(domains))]
    if tuple(domains) not in combos:
        combos.append(tuple(domains))
    for d in domains:
        if (d,) not in combos:
            combos.insert(0, (d,))

    matrix = TransferMatrix(domains, [])
    runs: dict[str, TrainResult] = {}

    def run(members, overrides, label):
        mcfg = model_config_for_members(base_model, members, overrides)
        tcfg = train_config_for_members(base_train, members, budgets, ratios)
        result = joint_train({m: splits[m] for m in members}, mcfg, tcfg)
        matrix.columns.append(label)
        matrix.cells[label] = {m: result.final_miou(m) for m in members}
        if keep_runs:
            runs[label] = result

    for members in combos:
        run(members, naive_overrides, combo_label(members))
    naive_all = combo_label(domains)
    ppt_all = None
    if "ppt" in variants:
        ppt_all = naive_all + " (PPT)"
        run(tuple(domains), ppt_overrides, ppt_all)
    return TransferReport(matrix, naive_all, ppt_all, runs)
