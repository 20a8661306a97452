import os
import time

import numpy as np
import pytest

from dest.networks import VariantConfig
from dest.tensor import Tensor, default_dtype

TRIALS = 20

# A tiny four-stage network for end-to-end float64 checks.
MICRO = VariantConfig("micro", depths=(1, 1, 1, 1), widths=(4, 8, 8, 8), heads=(1, 2, 1, 2),
                      reduction_ratios=(2, 1, 1, 1), decoder_width=4, ffn_expansion=1)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


def leaf(shape, seed, lo=-1.0, hi=1.0):
    data = np.random.default_rng(seed).uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One 200-step B0-micro training run through the command line, shared by tests."""
    from dest.cli import main

    out = tmp_path_factory.mktemp("toy")
    config = out / "toy.json"
    config.write_text('{"variant": "B0-micro", "steps": 200, "seed": 0}')
    start = time.perf_counter()
    code = main(["train", "--config", str(config), "--out", str(out / "run")])
    return {"code": code, "dir": out / "run", "config": config,
            "seconds": time.perf_counter() - start,
            "checkpoint": os.path.join(out / "run", "checkpoint"),
            "log": out / "run" / "train_log.csv"}


# -- acceptance reporting ---------------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when == "setup" and rep.passed) or rep.when == "teardown":
        return
    number, name = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        reason = rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else ""
        detail = (detail + "; " if detail else "") + reason.splitlines()[0][:160]
    _CRITERIA[number] = (name, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} [{name}]: {status}  {detail}")
