"""``ppt`` command line: gen-data, train, finetune, eval, ablate, report.

Exit codes: 0 success, 1 other library error, 2 config error, 3 data/IO
error, 4 numeric failure.  The default output root is ``$PPT_OUTPUT_ROOT``
(``runs`` when unset).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import yaml

from .config import ExperimentConfig, apply_override, load_config, parse_config
from .data import dataset_filename, load_dataset, save_dataset
from .errors import ConfigError, DataError, NumericError, PPTError
from .model import SegmentationModel
from .trainer import evaluate, fine_tune, joint_train
from .transfer import run_transfer_matrix

log = logging.getLogger("pointprompt")

OUTPUT_ROOT_ENV = "PPT_OUTPUT_ROOT"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

CHECKPOINT = "model.pptc"
METRICS = "metrics.jsonl"
RESOLVED_CONFIG = "config.yaml"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def _out_dir(cfg: ExperimentConfig, explicit, *sub: str) -> Path:
    if explicit:
        base = Path(explicit)
    elif cfg.output_dir:
        base = Path(cfg.output_dir)
    else:
        base = output_root() / cfg.name
    path = base.joinpath(*sub)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from None
    return path


def _write_run(out: Path, model: SegmentationModel, cfg: ExperimentConfig) -> None:
    model.save(out / CHECKPOINT)
    (out / RESOLVED_CONFIG).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_gen_data(config, out_dir=None, overrides: Sequence[str] = (), seed=None) -> list[Path]:
    cfg = load_config(config, overrides, seed)
    out = Path(out_dir) if out_dir else (Path(cfg.data_dir) if cfg.data_dir else output_root() / "data")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    generated = dataclasses.replace(cfg, data_dir=None).splits()
    paths = []
    for name, pair in generated.items():
        for ds in pair:
            try:
                paths.append(save_dataset(ds, out / dataset_filename(name, ds.split)))
            except OSError as exc:
                raise DataError(f"cannot write {out}: {exc}") from None
    return paths


def cmd_train(config, out_dir=None, overrides: Sequence[str] = (), seed=None) -> Path:
    cfg = load_config(config, overrides, seed)
    out = _out_dir(cfg, out_dir)
    result = joint_train(cfg.splits(), cfg.model_config(), cfg.train_config(), out / METRICS)
    _write_run(out, result.model, cfg)
    return out


def cmd_finetune(config, checkpoint, target: str, out_dir=None, overrides: Sequence[str] = (), seed=None) -> Path:
    cfg = load_config(config, overrides, seed)
    model = SegmentationModel.load(checkpoint)
    model.domain(target)  # fail before generating any data
    out = Path(out_dir) if out_dir else Path(checkpoint).parent / f"finetune-{target}"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    pair = cfg.splits([target])[target]
    result = fine_tune(model, pair, cfg.finetune_config(target), out / METRICS)
    _write_run(out, result.model, cfg)
    return out


def cmd_eval(checkpoint, datasets: Sequence) -> dict[str, float]:
    model = SegmentationModel.load(checkpoint)
    scores = {}
    for path in datasets:
        ds = load_dataset(path)
        ev = evaluate(model, ds)
        scores[ds.domain.name] = ev["miou"]
    return scores


# ---------------------------------------------------------------- ablations

ABLATION_AXES = (
    "adapter",
    "zero_init",
    "lr_scale",
    "prompt_stages",
    "prompt_dim",
    "alignment",
    "criterion",
    "template",
    "ratios",
    "combos",
)


def ablation_variants(axis: str, cfg: ExperimentConfig) -> list[tuple[str, list[str]]]:
    """(label, dotted overrides) for each setting of ``axis``; others stay at the config's values."""
    if axis == "adapter":
        return [
            ("none", ["model.backbone.adapter_kind=none", "model.backbone.norm_kind=plain_batch_norm"]),
            ("direct_injection", ["model.backbone.adapter_kind=direct_injection", "model.backbone.norm_kind=plain_batch_norm"]),
            ("cross_attention", ["model.backbone.adapter_kind=cross_attention", "model.backbone.norm_kind=plain_batch_norm"]),
            ("pdnorm", ["model.backbone.adapter_kind=pdnorm", "model.backbone.norm_kind=pdnorm"]),
        ]
    if axis == "zero_init":
        return [("on", ["model.zero_init=true"]), ("off", ["model.zero_init=false"])]
    if axis == "lr_scale":
        return [(s, [f"train.prompt_lr_scale={s}"]) for s in ("1", "0.1", "0.01")]
    if axis == "prompt_stages":
        n = len(cfg.model_config().backbone.stage_dims)
        return [(f"last-{k}", [f"model.backbone.adapter_stages={list(range(n - k, n))}"]) for k in range(1, n + 1)]
    if axis == "prompt_dim":
        return [(str(d), [f"model.prompt_dim={d}"]) for d in (64, 256, 1024)]
    if axis == "alignment":
        return [(h, [f"model.head={h}", "model.criterion=infonce_ce"]) for h in ("decoupled", "unionized", "language_guided")]
    if axis == "criterion":
        return [(c, ["model.head=language_guided", f"model.criterion={c}"]) for c in ("l2", "infonce_ce")]
    if axis == "template":
        return [("class", ["model.text_template=[class]"]), ("a-point-of", ["model.text_template=A point of [class]."])]
    if axis == "ratios":
        n = len(cfg.domains)
        options = {
            ":".join(str(r) for r in cfg.ratios.values()): list(cfg.ratios.values()),
            ":".join(["1"] * n): [1] * n,
            ":".join(str(r) for r in reversed(list(cfg.ratios.values()))): list(reversed(list(cfg.ratios.values()))),
        }
        return [(label, [f"domains.{i}.ratio={r}" for i, r in enumerate(rs)]) for label, rs in options.items()]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def _ablation_run(doc: dict, source: str, overrides: list[str], out: str) -> dict:
    doc = json.loads(json.dumps(doc))
    for o in overrides:
        apply_override(doc, o)
    cfg = parse_config(doc, source)
    out_path = Path(out)
    out_path.mkdir(parents=True, exist_ok=True)
    result = joint_train(cfg.splits(), cfg.model_config(), cfg.train_config(), out_path / METRICS)
    _write_run(out_path, result.model, cfg)
    return {d: result.final_miou(d) for d in cfg.domain_names}


def cmd_ablate(axis: str, config, out_dir=None, overrides: Sequence[str] = (), seed=None, jobs: int = 1) -> Path:
    cfg = load_config(config, overrides, seed)
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = _out_dir(cfg, out_dir, f"ablate-{axis}")
    if axis == "combos":
        report = run_transfer_matrix(
            cfg.splits(),
            cfg.model_config(),
            cfg.train_config(),
            cfg.budgets,
            cfg.ratios,
            variants=cfg.transfer["variants"],
            naive_overrides=cfg.transfer["naive"],
            ppt_overrides=cfg.transfer["ppt"],
        )
        report.write(out)
        return out

    variants = ablation_variants(axis, cfg)
    # validate every variant before training anything
    for label, ov in variants:
        doc = cfg.to_dict()
        for o in ov:
            apply_override(doc, o)
        parse_config(doc, f"{cfg.source} [{axis}={label}]")
    args = [(cfg.to_dict(), f"{cfg.source} [{axis}={label}]", ov, str(out / label)) for label, ov in variants]
    if jobs == 1:
        scores = [_ablation_run(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_ablation_run, *zip(*args)))
    rows = [
        {"label": label, "miou": s, "mean": sum(s.values()) / len(s)}
        for (label, _), s in zip(variants, scores)
    ]
    summary = {"axis": axis, "domains": cfg.domain_names, "rows": rows}
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return out


# ---------------------------------------------------------------- report


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def ablation_table(summary: dict) -> str:
    domains = summary["domains"]
    rows = [[summary["axis"]] + domains + ["mean"]]
    for r in summary["rows"]:
        rows.append([r["label"]] + [f"{100 * r['miou'][d]:.1f}" for d in domains] + [f"{100 * r['mean']:.1f}"])
    return _table(rows)


def transfer_table(report: dict) -> str:
    domains, columns, cells = report["domains"], report["columns"], report["cells"]
    rows = [["eval \\ train"] + columns]
    for d in domains:
        rows.append([d] + [("-" if d not in cells[c] else f"{100 * cells[c][d]:.1f}") for c in columns])
    return _table(rows)


def _final_scores(metrics_path: Path) -> dict[str, float]:
    last: dict[str, float] = {}
    for line in metrics_path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            last[rec["domain"]] = rec["miou"]
    return last


def cmd_report(metrics_dir) -> str:
    root = Path(metrics_dir)
    if not root.is_dir():
        raise DataError(f"no runs found: {root} is not a directory")
    sections = []
    covered: set[Path] = set()
    for path in sorted(root.rglob("transfer.json")):
        rep = json.loads(path.read_text())
        v = rep.get("verdict", {})
        sections.append(
            f"== transfer: {path.parent}\n{transfer_table(rep)}\n"
            f"naive joint below single on: {', '.join(v.get('naive_all_below_single', [])) or 'none'}"
        )
        covered.add(path.parent)
    for path in sorted(root.rglob("ablation.json")):
        sections.append(f"== ablation: {path.parent}\n{ablation_table(json.loads(path.read_text()))}")
        covered.add(path.parent)
    loose = [
        p
        for p in sorted(root.rglob(METRICS))
        if not any(parent in covered for parent in p.parents)
    ]
    if loose:
        rows = [["run", "domain", "miou"]]
        for p in loose:
            for d, v in _final_scores(p).items():
                rows.append([str(p.parent.relative_to(root)) or ".", d, f"{100 * v:.1f}"])
        if len(rows) > 1:
            sections.append(f"== runs\n{_table(rows)}")
    if not sections:
        raise DataError(f"no runs found under {root}")
    return "\n\n".join(sections)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppt", description="Multi-domain point cloud segmentation with domain prompts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE", help="dotted-path config override (repeatable)")
        if out:
            sp.add_argument("--out", default=None, help="output directory")

    g = sub.add_parser("gen-data", help="write PPTD train/val files for every configured domain")
    g.add_argument("config")
    common(g)

    t = sub.add_parser("train", help="joint training on every configured domain")
    t.add_argument("config")
    common(t)

    f = sub.add_parser("finetune", help="continue training a checkpoint on one domain")
    f.add_argument("config")
    f.add_argument("checkpoint")
    f.add_argument("domain")
    common(f)

    e = sub.add_parser("eval", help="print val mIoU of a checkpoint on PPTD datasets")
    e.add_argument("checkpoint")
    e.add_argument("datasets", nargs="+")
    e.add_argument("--json", action="store_true", help="print a JSON object instead of a table")

    a = sub.add_parser("ablate", help="sweep one ablation axis")
    a.add_argument("axis", choices=ABLATION_AXES)
    a.add_argument("config")
    common(a)
    a.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")

    r = sub.add_parser("report", help="render transfer and ablation tables found under a directory")
    r.add_argument("metrics_dir")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "gen-data":
        for path in cmd_gen_data(args.config, args.out, args.overrides, args.seed):
            print(path)
    elif args.command == "train":
        print(cmd_train(args.config, args.out, args.overrides, args.seed))
    elif args.command == "finetune":
        print(cmd_finetune(args.config, args.checkpoint, args.domain, args.out, args.overrides, args.seed))
    elif args.command == "eval":
        scores = cmd_eval(args.checkpoint, args.datasets)
        if args.json:
            print(json.dumps(scores, sort_keys=True))
        else:
            for d, v in scores.items():
                print(f"{d}\t{v:.4f}")
    elif args.command == "ablate":
        out = cmd_ablate(args.axis, args.config, args.out, args.overrides, args.seed, args.jobs)
        print(cmd_report(out))
    elif args.command == "report":
        print(cmd_report(args.metrics_dir))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PPTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, KeyError) else EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
