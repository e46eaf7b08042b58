import numpy as np
import pytest

from pointprompt.backbone import BackboneConfig
from pointprompt.data import (
    Batch,
    CategorySpace,
    DomainId,
    SyntheticDomainConfig,
)
from pointprompt.model import ModelConfig, SegmentationModel


def micro_config(**kw) -> ModelConfig:
    """Two domains with overlapping label spaces and a tiny backbone."""
    base = dict(
        domains=["a", "b"],
        category_spaces=[["floor", "wall", "chair"], ["wall", "table"]],
        backbone=BackboneConfig(stage_dims=[5, 4], embed_dim=3, norm_kind="pdnorm", adapter_kind="pdnorm"),
        prompt_dim=4,
        text_dim=3,
        zero_init=False,
    )
    base.update(kw)
    return ModelConfig(**base)


def random_batch(domain: DomainId, n: int, k: int, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        domain,
        rng.normal(size=(n, 3)),
        rng.uniform(size=(n, 3)),
        rng.integers(0, k, size=n),
    )


@pytest.fixture
def micro_model():
    return SegmentationModel(micro_config())


def tiny_domain(name: str, categories, seed: int, **kw):
    cfg = SyntheticDomainConfig(
        name=name,
        category_space=CategorySpace(tuple(categories)),
        scenes=kw.pop("scenes", 5),
        points_per_scene=kw.pop("points_per_scene", 120),
        seed=seed,
        **kw,
    )
    return cfg


# ---------------------------------------------------------------- acceptance summary

_AC_LINES: list[str] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    status = "PASS" if report.outcome == "passed" else "FAIL"
    _AC_LINES.append(f"{props['criterion']} {status}: {props.get('detail', '')}")


def pytest_terminal_summary(terminalreporter):
    if _AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_AC_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
