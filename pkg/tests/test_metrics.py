import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillkit.baselines import average_real
from distillkit.data import make_blobs
from distillkit.metrics import (SizeCurve, distillation_ratio, distillation_size, evaluate, evaluate_trials,
                                original_accuracy)
from distillkit.models import InitSource, ModelSpec

SPEC = ModelSpec("mlp", (2,), 3, hidden=(8,))
BLOBS = make_blobs(30, seed=0)
DD = average_real(BLOBS).to_distilled(1.0)


def test_ratio_values():
    assert distillation_ratio(0.9613, 0.99, 10) == pytest.approx(97.1, abs=0.05)
    assert distillation_ratio(0.60, 0.80, 100) == 75.0
    with pytest.raises(ValueError):
        distillation_ratio(0.5, 0.0)


curves = st.lists(st.tuples(st.integers(1, 500), st.floats(0, 1)), min_size=1, max_size=12,
                  unique_by=lambda p: p[0]).map(sorted)


@settings(max_examples=100, deadline=None)
@given(curves, st.floats(0.05, 1), st.floats(0, 150), st.floats(0, 150))
def test_distillation_size_is_monotone_in_threshold(points, orig, a1, a2):
    lo, hi = sorted((a1, a2))
    d_lo, d_hi = distillation_size(points, orig, lo), distillation_size(points, orig, hi)
    if d_hi is not None:
        assert d_lo is not None and d_lo <= d_hi


@settings(max_examples=100, deadline=None)
@given(curves, st.floats(0.05, 1), st.floats(0, 150))
def test_distillation_size_matches_definition(points, orig, a):
    expected = next((m for m, acc in points if 100 * acc / orig >= a), None)
    assert distillation_size(SizeCurve(points), orig, a) == expected


def test_curve_requires_increasing_m(tmp_path):
    with pytest.raises(ValueError):
        SizeCurve([(2, 0.5), (2, 0.6)])
    c = SizeCurve([(1, 0.5), (3, 0.75)])
    c.write_csv(tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows == [["M", "accuracy"], ["1", "0.5"], ["3", "0.75"]]


def test_fixed_regime_evaluates_one_network():
    report = evaluate(DD, SPEC, InitSource("fixed", 0), BLOBS, trials=50, original_accuracy=0.9)
    assert report.networks == 1 and report.std == 0.0
    assert report.ratio == pytest.approx(100 * report.mean / 0.9)


def test_random_regime_honours_trials(tmp_path):
    report = evaluate(DD, SPEC, InitSource("random", 0), BLOBS, trials=12)
    assert report.networks == 12 and report.std >= 0
    accs = evaluate_trials(DD, SPEC, InitSource("random", 0), BLOBS, trials=12)
    assert report.mean == pytest.approx(accs.mean()) and report.std == pytest.approx(accs.std())
    report.write_json(tmp_path / "r.json")
    report.write_csv(tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text())["networks"] == 12
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 2


def test_worker_count_does_not_change_results(monkeypatch):
    serial = evaluate_trials(DD, SPEC, InitSource("random", 3), BLOBS, trials=10, workers=1)
    threaded = evaluate_trials(DD, SPEC, InitSource("random", 3), BLOBS, trials=10, workers=4)
    assert serial.tobytes() == threaded.tobytes()
    monkeypatch.setenv("DISTILLKIT_WORKERS", "3")
    assert evaluate_trials(DD, SPEC, InitSource("random", 3), BLOBS, trials=10).tobytes() == serial.tobytes()
    monkeypatch.setenv("DISTILLKIT_WORKERS", "many")
    with pytest.raises(ValueError):
        evaluate_trials(DD, SPEC, InitSource("random", 3), BLOBS, trials=2)


def test_original_accuracy_is_high_on_separable_data():
    assert original_accuracy(SPEC, InitSource("random", 0), BLOBS, make_blobs(30, seed=5)) > 0.9
