import pytest
from conftest import tiny_domain
from test_trainer import SPACES, model_cfg

from pointprompt.data import generate_domain
from pointprompt.errors import ConfigError
from pointprompt.trainer import TrainConfig, joint_train
from pointprompt.transfer import (
    NAIVE_OVERRIDES,
    TransferMatrix,
    TransferReport,
    default_combinations,
    model_config_for_members,
    run_transfer_matrix,
    train_config_for_members,
)

BUDGETS = {"a": 6, "b": 4, "c": 2}
RATIOS = {"a": 3, "b": 2, "c": 1}


@pytest.fixture(scope="module")
def splits():
    return {n: generate_domain(tiny_domain(n, SPACES[n], seed=i + 1), i) for i, n in enumerate(SPACES)}


def base_train():
    return TrainConfig(batch_scenes=1, max_points=48, base_lr=0.01)


def test_default_combinations():
    assert default_combinations(["a", "b"]) == [("a",), ("b",), ("a", "b")]
    assert default_combinations(["a", "b", "c"]) == [("a",), ("b",), ("c",), ("a", "b"), ("a", "c"), ("b", "c"), ("a", "b", "c")]


def test_matrix_columns_cells_and_single_column_equivalence(splits):
    report = run_transfer_matrix(splits, model_cfg(), base_train(), BUDGETS, RATIOS, keep_runs=True)
    m = report.matrix
    assert m.columns == ["a", "b", "c", "a+b", "a+c", "b+c", "a+b+c", "a+b+c (PPT)"]
    assert set(m.cells["a+c"]) == {"a", "c"} and m.get("b", "a+c") is None
    for col in m.columns:
        assert all(0.0 <= v <= 1.0 for v in m.cells[col].values())

    single = joint_train(
        {"b": splits["b"]},
        model_config_for_members(model_cfg(), ["b"], NAIVE_OVERRIDES),
        train_config_for_members(base_train(), ["b"], BUDGETS, RATIOS),
    )
    assert single.model.store.to_bytes() == report.runs["b"].model.store.to_bytes()
    assert single.final_miou("b") == m.single("b")
    assert report.runs["a+b+c"].schedule.count("a") == 6


def test_matrix_is_reproducible(splits):
    r1 = run_transfer_matrix(splits, model_cfg(), base_train(), BUDGETS, RATIOS, variants=("naive",))
    r2 = run_transfer_matrix(splits, model_cfg(), base_train(), BUDGETS, RATIOS, variants=("naive",))
    assert r1.to_dict() == r2.to_dict()
    assert r1.ppt_all is None and "ppt_ge_naive" not in r1.verdict()


def test_verdict_and_table():
    m = TransferMatrix(
        ["x", "y", "z"],
        ["x", "y", "z", "x+y+z", "x+y+z (PPT)"],
        {
            "x": {"x": 0.5},
            "y": {"y": 0.6},
            "z": {"z": 0.2},
            "x+y+z": {"x": 0.4, "y": 0.5, "z": 0.3},
            "x+y+z (PPT)": {"x": 0.55, "y": 0.5, "z": 0.35},
        },
    )
    v = TransferReport(m, "x+y+z", "x+y+z (PPT)").verdict()
    assert v["naive_all_below_single"] == ["x", "y"] and v["negative_transfer"]
    assert v["ppt_ge_naive"] == ["x", "y", "z"] and v["ppt_ge_single"] == ["x", "z"]
    assert v["per_cell"]["x+y+z"]["z"] == "non-negative"
    lines = m.table().splitlines()
    assert len(lines) == 4 and len({len(line) for line in lines}) == 1
    assert lines[1].split()[1:4] == ["50.0", "-", "-"]


def test_errors(splits):
    with pytest.raises(ConfigError):
        run_transfer_matrix({"a": splits["a"]}, model_cfg(), base_train(), BUDGETS, RATIOS)
    with pytest.raises(ConfigError):
        run_transfer_matrix(splits, model_cfg(), base_train(), BUDGETS, RATIOS, variants=("ppt",))
    with pytest.raises(ConfigError):
        run_transfer_matrix(splits, model_cfg(), base_train(), BUDGETS, RATIOS, variants=("naive", "best"))
