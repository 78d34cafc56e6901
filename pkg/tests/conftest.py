import numpy as np
import pytest

from protomoco import data
from protomoco.config import validate
from protomoco.models import EncoderConfig

TINY = {
    "data.image_size": 16,
    "synth.n_per_class": 16,
    "synth.groups_per_class": 4,
    "encoder.filters": (4, 8),
    "encoder.kernels": (3, 4),
    "encoder.dim_h": 8,
    "encoder.head_hidden": 16,
    "encoder.dim_z": 8,
    "pretrain.epochs": 2,
    "pretrain.batch": 8,
    "pretrain.queue_k": 16,
    "meta.episodes": 4,
    "meta.lr": 1e-3,
    "eval.folds": 4,
    "eval.episodes": 6,
    "gradcheck.instances": 2,
}


@pytest.fixture
def tiny_model() -> EncoderConfig:
    return EncoderConfig(image_size=16, filters=(4, 8), kernels=(3, 4), dim_h=8, head_hidden=16, dim_z=8)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-data")
    data.synth_dataset(root, n_per_class=16, image_size=16, groups_per_class=4, seed=3)
    return root


@pytest.fixture
def tiny_cfg(tiny_root, tmp_path):
    def make(**overrides):
        values = {**TINY, "data.root": str(tiny_root), "run.out": str(tmp_path / "out"), "run.seed": 5}
        values.update({k.replace("__", "."): v for k, v in overrides.items()})
        return validate(values)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE.append((criterion, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")


# -- seed-42 desk-scale run ------------------------------------------------------------

DESK = {
    "run.seed": 42,
    "pretrain.epochs": 30,
    "pretrain.batch": 16,
    "pretrain.queue_k": 256,
    "meta.ways": 2,
    "meta.shots": 1,
    "meta.episodes": 200,
    "eval.folds": 10,
}


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Synthesize, pretrain and evaluate (pretrained and random init) at seed 42."""
    import time

    from protomoco import pipeline

    work = tmp_path_factory.mktemp("desk")
    cfg = validate({**DESK, "data.root": str(work / "data"), "run.out": str(work / "pretrained")})
    start = time.perf_counter()
    pipeline.cmd_synth(cfg)
    pre = pipeline.cmd_pretrain(cfg)
    pretrained = pipeline.cmd_eval(cfg, pre.checkpoint)
    random_cfg = cfg.replace(run__out=str(work / "random"))
    random_init = pipeline.cmd_eval(random_cfg, None)
    seconds = time.perf_counter() - start
    return {"cfg": cfg, "pretrain": pre, "pretrained": pretrained, "random": random_init,
            "seconds": seconds, "work": work}
