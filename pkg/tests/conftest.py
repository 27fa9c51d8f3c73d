import numpy as np
import pytest

from deesco.config import ExperimentConfig, TrainSchedule
from deesco.data import SynthParams, synth_generate
from deesco.ensemble import branch_configs_from_preset


def tiny_config(dataset, arch="Rh+Ou+Fc", **kw):
    """A configuration small enough to train for a few steps in well under a second."""
    sched = TrainSchedule(base_lr=kw.pop("lr", 1e-3), total_steps=kw.pop("steps", 10),
                          batch_size=kw.pop("batch_size", 4))
    branches = branch_configs_from_preset(arch, crop_size=(16, 16), heatmap_size=16,
                                          conv_channels=[4, 8], fc_widths=[16])
    return ExperimentConfig(branches=branches, schedule=sched, dataset=str(dataset), **kw).validate()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny") / "ds"
    synth_generate(path, seed=0, n_subjects=3, samples_per_subject=16, params=SynthParams(crop_size=(16, 16)))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")
    config.stash[_ACCEPTANCE] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("acceptance")
    rep = outcome.get_result()
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    line = f"{'PASS' if rep.passed else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
    item.config.stash[_ACCEPTANCE].append((number, line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(config.stash.get(_ACCEPTANCE, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
