import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# every property suite runs at least 100 generated cases
settings.register_profile(
    "default",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 known classes plus both unknowns, explicit train/val/test splits."""
    from llcvision.pipeline import make_toy_corpus

    root = tmp_path_factory.mktemp("small_corpus")
    return make_toy_corpus(root, classes=3, splits={"train": 12, "val": 6, "test": 6}, seed=3)


@pytest.fixture(scope="session")
def small_cfg():
    import dataclasses

    from llcvision.pipeline import PipelineConfig

    cfg = PipelineConfig().with_overrides(dict_size=64, seed=1)
    return cfg.replace(
        pool_target=20_000,
        kmeans=dataclasses.replace(cfg.kmeans, max_iters=20),
        svm=dataclasses.replace(cfg.svm, epochs=100),
        mlp=dataclasses.replace(cfg.mlp, hidden1=(32,), hidden2=(32,), epochs=150),
    )


@pytest.fixture(scope="session")
def small_bundle(small_corpus, small_cfg):
    from llcvision.pipeline import train_full

    return train_full(small_corpus, small_cfg)


# ---- acceptance reporting -------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[n] = (bool(ok), detail)
    return bool(ok)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    if call.excinfo is not None and (n not in ACCEPTANCE or ACCEPTANCE[n][0]):
        ACCEPTANCE[n] = (False, f"{call.excinfo.typename}: {call.excinfo.value}".splitlines()[0])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
