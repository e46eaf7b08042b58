import json
from pathlib import Path

import pytest
import yaml

from pointprompt import cli
from pointprompt.config import apply_override, load_config, parse_config
from pointprompt.data import PRESETS, load_dataset
from pointprompt.errors import ConfigError
from pointprompt.params import read_checkpoint

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = {
    "name": "tiny",
    "seed": 0,
    "domains": [
        {"name": "a", "categories": ["floor", "wall", "chair"], "scenes": 3, "points_per_scene": 80, "seed": 1, "iters": 8, "ratio": 2},
        {"name": "b", "categories": ["wall", "table"], "scenes": 3, "points_per_scene": 80, "seed": 2, "iters": 4, "ratio": 1},
    ],
    "model": {
        "prompt_dim": 8,
        "text_dim": 8,
        "backbone": {"stage_dims": [8, 8], "embed_dim": 8, "norm_kind": "pdnorm", "adapter_kind": "pdnorm"},
    },
    "train": {"batch_scenes": 1, "max_points": 40, "base_lr": 0.01},
}


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


# ---------------------------------------------------------------- config


def test_checked_in_configs_parse():
    for path in sorted(CONFIGS.glob("*.yaml")):
        cfg = load_config(path)
        assert cfg.domain_names == list(PRESETS)
        assert cfg.train_config().total_iters == 700
        assert cfg.train_config().sampling_ratios == {"synth-A": 4, "real-B": 2, "real-C": 1}


def test_ppt_defaults():
    m = load_config(CONFIGS / "ppt.yaml").model_config()
    assert (m.head, m.criterion, m.prompt_dim, m.backbone.adapter_kind) == ("language_guided", "infonce_ce", 256, "pdnorm")
    assert load_config(CONFIGS / "ppt.yaml").train_config().prompt_lr_scale == 0.1


def test_dotted_overrides():
    doc = {"a": {"b": 1}, "l": [{"x": 1}, {"x": 2}]}
    apply_override(doc, "a.b=0.5")
    apply_override(doc, "l.1.x=[1, 2]")
    apply_override(doc, "new.key=text")
    assert doc == {"a": {"b": 0.5}, "l": [{"x": 1}, {"x": [1, 2]}], "new": {"key": "text"}}
    with pytest.raises(ConfigError):
        apply_override(doc, "l.7.x=1")
    with pytest.raises(ConfigError):
        apply_override(doc, "no-equals")


def test_seed_flag_and_overrides(tiny):
    cfg = load_config(tiny, ["model.head=unionized", "train.base_lr=0.2"], seed=5)
    assert cfg.seed == 5 and cfg.model_config().seed == 5 and cfg.train_config().seed == 5
    assert cfg.model_config().head == "unionized" and cfg.train_config().base_lr == 0.2


@pytest.mark.parametrize(
    "override, match",
    [
        ("domains.1.scenes=1", r"domains\[1\].*scenes must be >= 2"),
        ("model.head=mlp", "model"),
        ("model.colour=red", "unknown key"),
        ("train.prompt_lr_scale=2", "prompt_lr_scale"),
        ("model.criterion=l2", "l2"),
        ("domains.0.preset=nowhere", "unknown preset"),
        ("domains.0.ratio=0", "ratio"),
        ("model.backbone.adapter_stages=[7]", "adapter_stages"),
    ],
)
def test_invalid_configs_name_the_location(tiny, override, match):
    overrides = [override] + (["model.head=unionized"] if override == "model.criterion=l2" else [])
    with pytest.raises(ConfigError, match=match):
        load_config(tiny, overrides)


def test_every_ablation_enum_is_expressible():
    base = load_config(CONFIGS / "ppt.yaml")
    for axis in cli.ABLATION_AXES:
        if axis == "combos":
            continue
        for _, overrides in cli.ablation_variants(axis, base):
            doc = base.to_dict()
            for o in overrides:
                apply_override(doc, o)
            parse_config(doc)
    labels = [label for label, _ in cli.ablation_variants("adapter", base)]
    assert labels == ["none", "direct_injection", "cross_attention", "pdnorm"]
    assert [label for label, _ in cli.ablation_variants("prompt_stages", base)] == ["last-1", "last-2", "last-3", "last-4"]


# ---------------------------------------------------------------- commands


def test_gen_data_writes_six_identical_files(tmp_path):
    out1 = cli.cmd_gen_data(CONFIGS / "ppt.yaml", tmp_path / "d1")
    out2 = cli.cmd_gen_data(CONFIGS / "ppt.yaml", tmp_path / "d2")
    assert sorted(p.name for p in out1) == sorted(f"{d}_{s}.pptd" for d in PRESETS for s in ("train", "val"))
    for p, q in zip(out1, out2):
        assert p.read_bytes() == q.read_bytes()
    assert load_dataset(tmp_path / "d1" / "real-C_val.pptd").domain.name == "real-C"


def test_gen_data_scenes_error_exit_code(tmp_path, capsys):
    code = cli.main(["gen-data", str(CONFIGS / "ppt.yaml"), "--out", str(tmp_path), "--set", "domains.2.scenes=1"])
    assert code == cli.EXIT_CONFIG
    assert "domains[2]" in capsys.readouterr().err


def test_train_writes_run_artifacts(tiny, tmp_path):
    out = cli.cmd_train(tiny)
    assert out == tmp_path / "root" / "tiny"
    assert {p.name for p in out.iterdir()} == {"model.pptc", "model.json", "metrics.jsonl", "config.yaml"}
    recs = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["domain"] for r in recs] == ["a", "b"] and all(r["iter"] == 12 for r in recs)


def test_train_from_generated_files(tiny, tmp_path):
    cli.cmd_gen_data(tiny, tmp_path / "data")
    a = cli.cmd_train(tiny, tmp_path / "gen")
    b = cli.cmd_train(tiny, tmp_path / "files", [f"data_dir={tmp_path / 'data'}"])
    assert (a / "model.pptc").read_bytes() == (b / "model.pptc").read_bytes()


def test_seed_changes_outputs(tiny, tmp_path):
    a = cli.cmd_train(tiny, tmp_path / "s0", seed=0)
    b = cli.cmd_train(tiny, tmp_path / "s1", seed=1)
    assert (a / "model.pptc").read_bytes() != (b / "model.pptc").read_bytes()


def test_finetune_and_eval(tiny, tmp_path, capsys):
    run = cli.cmd_train(tiny)
    ft = cli.cmd_finetune(tiny, run / "model.pptc", "b")
    assert ft == run / "finetune-b"
    before, after = read_checkpoint(run / "model.pptc"), read_checkpoint(ft / "model.pptc")
    assert after["prompt.a"][1].tobytes() == before["prompt.a"][1].tobytes()
    cli.cmd_gen_data(tiny, tmp_path / "data")
    code = cli.main(["eval", str(ft / "model.pptc"), str(tmp_path / "data" / "b_val.pptd"), "--json"])
    assert code == 0
    scores = json.loads(capsys.readouterr().out)
    assert set(scores) == {"b"} and 0.0 <= scores["b"] <= 1.0


def test_finetune_unknown_domain_exit_code(tiny):
    run = cli.cmd_train(tiny)
    assert cli.main(["finetune", str(tiny), str(run / "model.pptc"), "zzz"]) == cli.EXIT_DATA


def test_eval_untrained_checkpoint_is_near_chance(tmp_path):
    cfg = CONFIGS / "ppt.yaml"
    run = cli.cmd_train(cfg, tmp_path / "untrained", ["train.total_iters=0"])
    cli.cmd_gen_data(cfg, tmp_path / "data")
    scores = cli.cmd_eval(run / "model.pptc", [tmp_path / "data" / "real-C_val.pptd"])
    assert scores["real-C"] < 0.15


def test_ablate_adapter_makes_four_runs(tiny, capsys):
    code = cli.main(["ablate", "adapter", str(tiny)])
    assert code == 0
    out = Path(cli.output_root()) / "tiny" / "ablate-adapter"
    assert len(list(out.glob("*/metrics.jsonl"))) == 4
    summary = json.loads((out / "ablation.json").read_text())
    assert [r["label"] for r in summary["rows"]] == ["none", "direct_injection", "cross_attention", "pdnorm"]
    assert "ablation" in capsys.readouterr().out


def test_ablate_parallel_matches_serial(tiny, tmp_path):
    a = cli.cmd_ablate("lr_scale", tiny, tmp_path / "serial")
    b = cli.cmd_ablate("lr_scale", tiny, tmp_path / "parallel", jobs=3)
    assert (a / "ablation.json").read_bytes() == (b / "ablation.json").read_bytes()
    for run in ("1", "0.1", "0.01"):
        assert (a / run / "model.pptc").read_bytes() == (b / run / "model.pptc").read_bytes()


def test_ablate_combos_and_report(tiny):
    out = cli.cmd_ablate("combos", tiny)
    report = json.loads((out / "transfer.json").read_text())
    assert report["columns"] == ["a", "b", "a+b", "a+b (PPT)"]
    assert set(report["cells"]["a"]) == {"a"}
    text = cli.cmd_report(out.parent)
    assert "transfer" in text and "a+b (PPT)" in text


def test_report_on_empty_dir(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_DATA
    assert "no runs found" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tiny, capsys):
    # one step of this size overflows the weights, the next loss is NaN
    assert cli.main(["train", str(tiny), "--set", "train.base_lr=1e300"]) == cli.EXIT_NUMERIC
    assert "non-finite loss" in capsys.readouterr().err


def test_non_finite_learning_rate_is_a_config_error(tiny):
    assert cli.main(["train", str(tiny), "--set", "train.base_lr=.nan"]) == cli.EXIT_CONFIG
    assert cli.main(["train", str(tiny), "--set", "train.base_lr=fast"]) == cli.EXIT_CONFIG


def test_missing_config_is_a_config_error(tmp_path):
    assert cli.main(["train", str(tmp_path / "nope.yaml")]) == cli.EXIT_CONFIG
