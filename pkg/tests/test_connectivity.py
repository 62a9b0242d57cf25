import math

import numpy as np
import pytest

from conftest import random_params
from oracles import dense_barrier, lerp_loss
from permalign.connectivity import (
    DegeneratePlaneError,
    Plane,
    alpha_grid,
    barrier_curve,
    barrier_from_values,
    bootstrap_threshold,
    evaluate,
    is_linearly_connected,
    landscape_projection,
    triplet_test,
)
from permalign.model import ArchitectureSpec, apply_permutation, build_mlp_spec


def test_alpha_grid():
    g = alpha_grid(25)
    assert g[0] == 0.0 and g[-1] == 1.0 and len(g) == 25
    assert g[12] == 0.5
    with pytest.raises(ValueError):
        alpha_grid(1)


def test_barrier_from_values_chord():
    al = alpha_grid(5)
    assert barrier_from_values(al, [1, 1, 1, 1, 1]) == 0.0
    # chord weights alpha on the alpha=1 value
    assert barrier_from_values(al, [0.0, 1.0, 1.0, 1.0, 2.0]) == pytest.approx(0.5)
    assert barrier_from_values(al, [0.0, 0.25, 0.5, 0.75, 1.0]) == 0.0
    assert barrier_from_values(al, [0.0, -1.0, -1.0, -1.0, 0.0]) == 0.0  # endpoints bound it below


def test_barrier_self_zero_and_symmetry(trained_pairs, tiny_data):
    a, b = trained_pairs[0]
    assert barrier_curve(a, a, tiny_data)["test"].barrier_loss == 0.0
    ab = barrier_curve(a, b, tiny_data)
    ba = barrier_curve(b, a, tiny_data)
    for split in ("train", "test"):
        assert abs(ab[split].barrier_loss - ba[split].barrier_loss) < 1e-9
        assert ab[split].loss_a == ba[split].loss_b


def test_joint_permutation_invariance(trained_pairs, tiny_data, small_arch):
    a, b = trained_pairs[1]
    spec = build_mlp_spec(small_arch)
    pi = spec.random(np.random.default_rng(0))
    plain = barrier_curve(a, b, tiny_data)
    perm = barrier_curve(apply_permutation(a, spec, pi), apply_permutation(b, spec, pi), tiny_data)
    assert np.max(np.abs(np.subtract(plain["test"].loss, perm["test"].loss))) < 1e-5


def test_grid_barrier_below_dense_oracle(trained_pairs, tiny_data, small_arch):
    a, b = trained_pairs[2]
    test = tiny_data.test
    coarse = barrier_curve(a, b, {"test": test})["test"].barrier_loss
    dense = dense_barrier(lerp_loss(a.tensors, b.tensors, small_arch, test.features, test.labels))
    assert coarse <= dense + 1e-12
    assert coarse > 0.5 * dense  # the coarse grid still sees the bump


def test_evaluate_matches_oracle(trained_pairs, tiny_data, small_arch):
    a, _ = trained_pairs[0]
    t = tiny_data.test
    r = evaluate(a, t)
    assert r.mean_cross_entropy == pytest.approx(lerp_loss(a.tensors, a.tensors, small_arch, t.features, t.labels)(1.0), rel=1e-12)
    assert 0.0 <= r.error_rate <= 1.0


def test_curve_csv_and_validation(trained_pairs, tiny_data):
    a, b = trained_pairs[0]
    curve = barrier_curve(a, b, tiny_data, n_alpha=3)
    lines = curve.to_csv().splitlines()
    assert lines[0] == "alpha,split,loss,error" and len(lines) == 1 + 3 * 2
    with pytest.raises(ValueError):
        barrier_curve(a, b, tiny_data, alphas=[0.0, 0.7, 0.5, 1.0])


def test_bootstrap_and_connectivity_decision(trained_pairs, tiny_data):
    a, b = trained_pairs[0]
    thr = bootstrap_threshold(a, tiny_data.test, seed=1)
    assert thr == bootstrap_threshold(a, tiny_data.test, seed=1) and thr > 0
    assert is_linearly_connected(a, a, tiny_data)
    assert is_linearly_connected(a, b, tiny_data, threshold=float("inf"))
    assert not is_linearly_connected(a, b, tiny_data, threshold=0.0) or \
        barrier_curve(a, b, tiny_data)["test"].barrier_error == 0.0
    with pytest.raises(ValueError):
        is_linearly_connected(a, b, tiny_data, threshold=-1.0)


def test_triplet_with_planted_permutations():
    # B and C are permuted copies of A, so direct and indirect paths both reach A exactly
    arch = ArchitectureSpec(6, (8, 5), 3)
    spec = build_mlp_spec(arch)
    rng = np.random.default_rng(0)
    a = random_params(arch, 0)
    b = apply_permutation(a, spec, spec.random(rng))
    c = apply_permutation(a, spec, spec.random(rng))
    x = rng.normal(size=(30, 6))
    from permalign.data import Dataset
    data = {"test": Dataset(x, rng.integers(0, 3, 30), 3, "test")}
    res = triplet_test(a, b, c, "weight", data)
    assert res.fp_fraction == 1.0 and res.fp_counts == (8, 5)
    assert res.direct_barrier() == pytest.approx(0.0, abs=1e-12)
    assert res.indirect_barrier() == pytest.approx(0.0, abs=1e-12)


def test_plane_projection_roundtrip():
    arch = ArchitectureSpec(4, (3,), 2)
    p0, p1, p2 = (random_params(arch, s) for s in range(3))
    plane = Plane(p0, p1, p2)
    assert plane.project(p0) == (0.0, 0.0)
    assert abs(np.dot(plane.u, plane.v)) < 1e-12
    x, y = plane.project(p2)
    assert plane.point(x, y).max_abs_diff(p2) < 1e-12


def test_plane_degenerate():
    arch = ArchitectureSpec(4, (3,), 2)
    p0, p1 = random_params(arch, 0), random_params(arch, 1)
    with pytest.raises(DegeneratePlaneError):
        Plane(p0, p0, p1)
    mid = type(p0).unflatten(arch, 0.5 * (p0.flatten() + p1.flatten()))
    with pytest.raises(DegeneratePlaneError):
        Plane(p0, p1, mid)


def test_landscape_grid(trained_pairs, tiny_data):
    (a, b), (c, _) = trained_pairs[0], trained_pairs[1]
    res = landscape_projection(a, b, c, tiny_data.test, grid=(4, 3), points=[a, b])
    assert res.loss.shape == (3, 4) and res.error.shape == (3, 4)
    np.testing.assert_allclose(res.projected, res.anchors[:2], atol=1e-9)
    assert len(res.to_csv().splitlines()) == 1 + 12


def test_xor_width4_barrier_against_dense_oracle():
    from permalign.data import Dataset
    from permalign.train import TrainConfig, train

    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(400, 2))
    y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
    data = Dataset(x, y, 2)
    arch = ArchitectureSpec(2, (4,), 2)
    nets = [train(TrainConfig(arch=arch, epochs=30, batch_size=32, init_seed=s, data_order_seed=s,
                              checkpoint_epochs=(30,)), data)[-1].params for s in (1, 2)]
    coarse = barrier_curve(*nets, {"test": data})["test"].barrier_loss
    dense = dense_barrier(lerp_loss(nets[0].tensors, nets[1].tensors, arch, x, y))
    # the coarse grid can only miss a peak falling between its points
    assert coarse <= dense + 1e-12 and dense - coarse < 0.05 * max(dense, 1e-3) + 1e-3


def test_triplet_same_network_indirect_zero(trained_pairs, tiny_data):
    (a, _), (c, _) = trained_pairs[0], trained_pairs[1]
    res = triplet_test(a, a, c, "weight", tiny_data)
    assert res.indirect_barrier() == pytest.approx(0.0, abs=1e-12)
    assert res.fp_fraction == 1.0


@pytest.mark.slow
def test_instability_trend_and_onset():
    from permalign.experiments import METRICS, Manifest, run_replicate, summarize

    m = Manifest.build("instability", {"epochs": "10", "hidden_dims": "128,128", "replicates": "2",
                                       "eval_limit": "2000", "spawn_epochs": "0,2,8"})
    rows = run_replicate(m, 0)[0] + run_replicate(m, 1)[0]
    s = {r["spawn_epoch"]: r for r in summarize(rows, METRICS["instability"]) if r["split"] == "test"}
    child = [s[t]["child_error_mean"] for t in (0, 2, 8)]
    assert child[2] <= child[1] <= child[0]
    # two standard deviations of a ~3% error estimate on 2000 test examples
    threshold = 2 * math.sqrt(0.03 * 0.97 / 2000)
    assert child[2] <= threshold
    # children of distinct parents keep a barrier even with P_end applied
    assert all(s[t]["cross_error_mean"] > 2 * s[t]["child_error_mean"] for t in (0, 2, 8))
