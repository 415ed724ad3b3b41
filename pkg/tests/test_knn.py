import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillkit.data import load_iris
from distillkit.knn import (Prototypes, best_points, best_selection, data_bounds, knn_accuracy, optimize_prototypes,
                            rasterize, read_prototypes_csv, select_prototypes, soft_knn_predict,
                            soft_knn_predict_batch, write_prototypes_csv, write_raster_csv, write_raster_pgm)
from distillkit.data import read_pgm

from oracles import nearest_prototype_classes

IRIS = load_iris()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(2, 4))
def test_hard_one_nn_matches_brute_force(seed, m, c):
    rng = np.random.default_rng(seed)
    locs = rng.normal(size=(m, 2))
    classes = rng.integers(0, c, size=m)
    queries = rng.normal(size=(50, 2)) * 2
    protos = Prototypes.hard(locs, classes, c)
    assert np.array_equal(soft_knn_predict_batch(protos, 1, queries), nearest_prototype_classes(locs, classes, queries))


def test_soft_labels_are_summed():
    protos = Prototypes([[0.0, 0.0], [1.0, 0.0]], [[0.6, 0.4, 0.0], [0.0, 0.4, 0.6]])
    # neither prototype favours class 1, but together they do
    assert soft_knn_predict(protos, 2, [0.5, 0.0]) == 1


def test_distance_weighting():
    protos = Prototypes([[0.0, 0.0], [3.0, 0.0]], [[1, 0], [0, 1]])
    assert soft_knn_predict(protos, 2, [1.0, 0.0]) == 0  # uniform tie -> lower class
    assert soft_knn_predict(protos, 2, [2.0, 0.0], "distance") == 1
    assert soft_knn_predict(protos, 2, [3.0, 0.0], "distance") == 1  # exact hit


def test_unweighted_two_prototypes_k2_is_constant():
    protos = Prototypes([[1.0, 0.5], [5.0, 2.0]], [[0.5, 0.5, 0], [0, 0.4, 0.6]])
    raster = rasterize(protos, 2, data_bounds(IRIS), (30, 30))
    assert len(raster.distinct()) == 1


def test_two_hard_prototypes_give_at_most_two_regions():
    for seed in range(10):
        p = select_prototypes(IRIS, 1, seed)
        two = Prototypes(p.locations[:2], p.labels[:2])
        assert len(rasterize(two, 1, data_bounds(IRIS), (40, 40)).distinct()) <= 2


def test_selection_uses_dataset_points():
    p = select_prototypes(IRIS, 2, 0)
    for loc in p.locations:
        assert np.any(np.all(IRIS.x == loc, axis=1))
    q, acc = best_points(IRIS, 2, 20, seed=1)
    assert len(q) == 2 and 0 <= acc <= 1
    for loc in q.locations:
        assert np.any(np.all(IRIS.x == loc, axis=1))


@pytest.mark.parametrize("regime", ["generation", "soft-labels", "combined"])
def test_optimizer_trace_never_decreases(regime):
    protos, trace = optimize_prototypes(IRIS, 3, regime, 150, seed=2)
    assert len(trace) == 150
    assert all(b >= a for a, b in zip(trace, trace[1:]))
    assert knn_accuracy(protos, 1, IRIS) == trace[-1]


def test_soft_label_regime_keeps_locations():
    init = select_prototypes(IRIS, 1, 0)
    protos, _ = optimize_prototypes(IRIS, 3, "soft-labels", 100, init=init, seed=0)
    assert np.array_equal(protos.locations, init.locations)


def test_combined_matches_or_beats_selection_at_equal_budget():
    _, trace = optimize_prototypes(IRIS, 3, "combined", 500, k=1, seed=0)
    _, sel_acc = best_selection(IRIS, 1, 500, k=1, seed=0)
    assert trace[-1] >= sel_acc


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_label_rescaling_does_not_change_predictions(seed, scale):
    rng = np.random.default_rng(seed)
    protos = Prototypes(rng.normal(size=(4, 2)), rng.uniform(0.1, 1, size=(4, 3)))
    scaled = protos.copy()
    scaled.labels[1] *= scale
    q = rng.normal(size=(40, 2))
    assert np.array_equal(soft_knn_predict_batch(protos, 3, q), soft_knn_predict_batch(scaled, 3, q))


def test_single_prototype_raster_is_uniform():
    raster = rasterize(Prototypes([[2.0, 1.0]], [[0, 0, 1]]), 1, data_bounds(IRIS), (15, 15))
    assert raster.distinct() == {2}


def test_errors():
    protos = Prototypes([[0.0, 0.0]], [[1.0, 0.0]])
    with pytest.raises(ValueError):
        soft_knn_predict(protos, 2, [0.0, 0.0])
    with pytest.raises(ValueError):
        Prototypes([[0.0, 0.0]], [[-1.0, 2.0]])
    with pytest.raises(ValueError):
        optimize_prototypes(IRIS, 2, "teleport", 10)
    with pytest.raises(ValueError):
        rasterize(Prototypes(np.zeros((1, 3)), [[1.0]]), 1, (0, 1, 0, 1))


def test_raster_outputs(tmp_path):
    protos = Prototypes([[1.0, 0.2], [4.0, 1.3], [6.0, 2.2]], np.eye(3))
    raster = rasterize(protos, 1, data_bounds(IRIS), (20, 10))
    assert raster.classes.shape == (10, 20) and raster.distinct() == {0, 1, 2}
    write_raster_pgm(tmp_path / "r.pgm", raster, 3)
    pix, maxval = read_pgm(tmp_path / "r.pgm")
    assert maxval == 2 and np.array_equal(pix, raster.classes[::-1])
    write_raster_csv(tmp_path / "r.csv", raster)
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == 1 + 200
    write_prototypes_csv(tmp_path / "p.csv", protos)
    back = read_prototypes_csv(tmp_path / "p.csv")
    assert back.locations.tobytes() == protos.locations.tobytes() and back.labels.tobytes() == protos.labels.tobytes()
