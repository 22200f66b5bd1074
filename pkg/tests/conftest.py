import re
import numpy as np
import pytest

from fedcf.domain import ClientDataset, Example


def make_example(eid, client, split, label, group, probs, neighbors=None):
    return Example(str(eid), client, split, int(label), int(group), tuple(float(p) for p in probs), neighbors)


def dataset_from_arrays(client_id, labels, groups, probs, test=None, prefix=None):
    """Build a ClientDataset whose calibration rows are given column-wise."""
    prefix = prefix if prefix is not None else f"c{client_id}"
    calib = tuple(
        make_example(f"{prefix}-cal-{i}", client_id, "calib", y, g, p)
        for i, (y, g, p) in enumerate(zip(labels, groups, probs))
    )
    tests = ()
    if test is not None:
        tl, tg, tp = test
        tests = tuple(
            make_example(f"{prefix}-test-{i}", client_id, "test", y, g, p)
            for i, (y, g, p) in enumerate(zip(tl, tg, tp))
        )
    return ClientDataset(client_id, calib, tests)


def random_dataset(rng, client_id, n, num_classes=3, num_groups=2, n_test=0):
    probs = rng.dirichlet(np.ones(num_classes), size=n + n_test)
    labels = rng.integers(0, num_classes, size=n + n_test)
    groups = rng.integers(0, num_groups, size=n + n_test)
    test = None
    if n_test:
        test = (labels[n:], groups[n:], probs[n:])
    return dataset_from_arrays(client_id, labels[:n], groups[:n], probs[:n], test=test)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one PASS/FAIL line per criterion ------------------------

_CRITERIA = {
    1: "FCP coverage guarantee",
    2: "sandwich bounds",
    3: "single-client MLE identity",
    4: "protocol equivalence",
    5: "optimizer contract",
    6: "fairness-efficiency direction",
    7: "sketch fidelity",
    8: "DP layer",
    9: "communication accounting",
    10: "score oracles",
}
_outcomes: dict[int, list[bool]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed:
        _outcomes.setdefault(int(m.group(1)), []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {_CRITERIA.get(n, '')}")
