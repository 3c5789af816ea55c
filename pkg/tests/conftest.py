import numpy as np
import pytest

from msca import diffcore as dc


@pytest.fixture
def f64():
    with dc.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, requires_grad=False):
    return dc.Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------- desk training shared by several tests

DESK_SCENES = dict(n=32, classes=8, extent=64, seed=0)


def desk_config(**kw):
    """Self-reconstruction-only desk schedule: no adversarial term, G updated every step."""
    from msca.selfsup import TrainConfig

    base = dict(adv_weight=0.0, g_update_period=1, phase_switch=0, epochs=63, max_steps=500)
    base.update(kw)
    return TrainConfig.desk(**base)


@pytest.fixture(scope="session")
def desk_run():
    import time

    from msca.selfsup import gen_dataset, train

    scenes = gen_dataset(**DESK_SCENES)
    cfg = desk_config()
    t0 = time.perf_counter()
    result = train(scenes, cfg, seed=0)
    return {"scenes": scenes, "cfg": cfg, "result": result, "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    _CRITERIA[marker.args[0]] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
