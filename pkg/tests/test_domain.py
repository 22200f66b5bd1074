import pytest

from fedcf.domain import (
    ClientDataset,
    FairnessMetric,
    FairnessSpec,
    ValidationError,
    normalize_probs,
    passes_filter,
    validate_federation,
)

from conftest import make_example


def _two_clients():
    rows0 = [("a0", 0, 0), ("a1", 1, 0), ("a2", 0, 1), ("a3", 1, 1)]
    rows1 = [("b0", 0, 0), ("b1", 1, 1), ("b2", 0, 1)]
    c0 = ClientDataset(0, tuple(make_example(i, 0, "calib", y, g, (0.5, 0.5)) for i, y, g in rows0))
    c1 = ClientDataset(1, tuple(make_example(i, 1, "calib", y, g, (0.7, 0.3)) for i, y, g in rows1))
    return [c0, c1]


def test_well_formed_federation_has_no_warnings():
    spec = FairnessSpec("eo", (0, 1), (0, 1), 0.1)
    report = validate_federation(_two_clients(), spec)
    assert report.ok
    assert report.warnings == ()
    assert report.client_sizes == {0: 4, 1: 3}
    assert report.pair_counts[(0, 0)] == {0: 1, 1: 1}
    assert report.pair_counts[(1, 0)] == {0: 1, 1: 1}


def test_empty_calibration_set_rejected():
    with pytest.raises(ValidationError, match="empty calibration set"):
        ClientDataset(3, ())


def test_group_only_in_test_split_warns_for_every_label():
    calib = (make_example("x0", 0, "calib", 0, 0, (0.5, 0.5)), make_example("x1", 0, "calib", 1, 0, (0.5, 0.5)))
    test = (make_example("t0", 0, "test", 0, 1, (0.5, 0.5)),)
    spec = FairnessSpec("eo", (0, 1), (0, 1), 0.1)
    report = validate_federation([ClientDataset(0, calib, test)], spec)
    assert set(report.warnings) == {
        "zero calibration support for (g=1, y~=0)",
        "zero calibration support for (g=1, y~=1)",
    }


def test_duplicate_ids_rejected():
    c0 = ClientDataset(0, (make_example("same", 0, "calib", 0, 0, (1.0, 0.0)),))
    c1 = ClientDataset(1, (make_example("same", 1, "calib", 0, 1, (1.0, 0.0)),))
    with pytest.raises(ValidationError, match="duplicate"):
        validate_federation([c0, c1], FairnessSpec("dp", (0, 1), (0,), 0.1))


def test_out_of_range_indices_rejected():
    with pytest.raises(ValidationError):
        make_example("z", 0, "calib", 2, 0, (0.5, 0.5))
    c0 = ClientDataset(0, (make_example("z", 0, "calib", 0, 5, (0.5, 0.5)),))
    with pytest.raises(ValidationError):
        validate_federation([c0], FairnessSpec("dp", (0, 1), (0,), 0.1))


def test_neighbor_must_be_same_client():
    c0 = ClientDataset(0, (make_example("p", 0, "calib", 0, 0, (0.5, 0.5), neighbors=("q",)),))
    c1 = ClientDataset(1, (make_example("q", 1, "calib", 0, 1, (0.5, 0.5)),))
    with pytest.raises(ValidationError, match="neighbor"):
        validate_federation([c0, c1], FairnessSpec("dp", (0, 1), (0,), 0.1))


def test_validate_is_pure():
    spec = FairnessSpec("pe", (0, 1), (0,), 0.2)
    clients = _two_clients()
    assert validate_federation(clients, spec) == validate_federation(clients, spec)


def test_probability_tolerance():
    assert normalize_probs([0.2, 0.8]) == (0.2, 0.8)
    drifted = normalize_probs([0.3, 0.7 + 5e-7])
    assert abs(sum(drifted) - 1.0) < 1e-15
    with pytest.raises(ValidationError):
        normalize_probs([0.3, 0.71])
    with pytest.raises(ValidationError):
        normalize_probs([1.2, -0.2])


def test_fairness_spec_invariants():
    with pytest.raises(ValidationError):
        FairnessSpec("dp", (0,), (0,), 0.1)
    with pytest.raises(ValidationError):
        FairnessSpec("dp", (0, 1), (), 0.1)
    with pytest.raises(ValidationError):
        FairnessSpec("dp", (0, 1), (0,), 0.0)
    assert FairnessSpec("equal-opportunity", (1, 0), (0,), 1.0).metric is FairnessMetric.EQUAL_OPPORTUNITY


@pytest.mark.parametrize(
    "metric, y, g, expected",
    [
        ("dp", 0, 0, True), ("dp", 1, 0, True), ("dp", 0, 1, False),
        ("eo", 0, 0, True), ("eo", 1, 0, False),
        ("pe", 0, 0, False), ("pe", 1, 0, True),
    ],
)
def test_filter_table(metric, y, g, expected):
    # filter for group 0 and positive label 0
    assert passes_filter(FairnessMetric.parse(metric), y, g, 0, 0) is expected


def test_client_dataset_rejects_foreign_examples():
    with pytest.raises(ValidationError):
        ClientDataset(0, (make_example("w", 1, "calib", 0, 0, (0.5, 0.5)),))
