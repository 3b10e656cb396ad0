import os
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from perspectra import autodiff
from perspectra.data import Dataset, DatasetMeta, Instance

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def _checked_mode():
    with autodiff.checked(True):
        yield


def make_dataset(rows, k=3, annotators=("a1", "a2", "a3"), pairs=False):
    """rows: (split, text, {annotator: label}) tuples."""
    meta = DatasetMeta(k=k, labels=tuple(f"l{i}" for i in range(k)), annotators=tuple(annotators), language="en")
    counters = {}
    instances = []
    for split, text, ann in rows:
        i = counters.get(split, 0)
        counters[split] = i + 1
        instances.append(Instance(id=f"{split}{i}", split=split, text=text, annotations=dict(ann),
                                  text_pair="pair text" if pairs else None))
    return Dataset(meta, instances)


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(7)
    words = [f"t{i}" for i in range(12)]
    rows = []
    for split, count in (("train", 24), ("dev", 4), ("test", 12)):
        for _ in range(count):
            toks = rng.choice(words, size=5)
            label = int(("t0" in toks) + ("t1" in toks)) % 3
            ann = {"a1": label, "a2": (label + 1) % 3}
            if rng.random() < 0.7:
                ann["a3"] = label
            rows.append((split, " ".join(toks), ann))
    # make sure every annotator labels at least one train and test item
    rows.append(("train", "t0 t5", {"a1": 1, "a2": 2, "a3": 1}))
    rows.append(("test", "t1 t6", {"a1": 1, "a2": 2, "a3": 0}))
    return make_dataset(rows)


# ---------------------------------------------------------------------------
# one pass/fail line per acceptance criterion

_CRITERIA: "OrderedDict[str, list[str]]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test belongs to a named acceptance criterion")


def pytest_runtest_logreport(report):
    crit = _criterion_of.get(report.nodeid)
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "skipped" if report.skipped else report.outcome
        _CRITERIA.setdefault(crit, []).append(outcome)


_criterion_of: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _criterion_of[item.nodeid] = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _CRITERIA.items():
        if "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"{status}  {name}  ({len(outcomes)} checks)")
