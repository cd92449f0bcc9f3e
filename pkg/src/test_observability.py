from fractions import Fraction

import numpy as np

from liegroup import so3_exp
from observability import (ESTIMATED, IDEAL, IMPERFECT, PERFECT, SUITE, AnalysisLayout,
                           DegenerateMotionError, ObservabilityCase, build_observability_matrix, gauge_invariance,
                           integrate_motion, null_space, random_motion, random_scene,
                           theoretical_null_basis, verify_case, verify_suite)
from propagation import GRAVITY
from state import INVARIANT, STANDARD, StateLayout

SEED = 7


def scenes(n=3, seed=SEED):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        motion = random_motion(rng)
        out.append((motion, random_scene(rng, motion)))
    return out


def exact_rank(rows):
    """Gaussian elimination over the rationals."""
    A = [[Fraction(int(x)) for x in row] for row in rows]
    rank, n_cols = 0, len(A[0])
    for c in range(n_cols):
        pivot = next((r for r in range(rank, len(A)) if A[r][c] != 0), None)
        if pivot is None:
            continue
        A[rank], A[pivot] = A[pivot], A[rank]
        for r in range(len(A)):
            if r != rank and A[r][c] != 0:
                f = A[r][c] / A[rank][c]
                A[r] = [a - f * b for a, b in zip(A[r], A[rank])]
        rank += 1
    return rank


# --- null space ---

def test_null_space_of_zero_matrix_is_everything():
    basis, dim = null_space(np.zeros((5, 4)))
    assert dim == 4
    assert np.allclose(basis.T @ basis, np.eye(4))


def test_null_space_of_full_rank_tall_matrix_is_empty():
    _, dim = null_space(np.random.default_rng(SEED).normal(size=(20, 6)))
    assert dim == 0


def test_null_space_matches_exact_rank():
    rng = np.random.default_rng(SEED)
    A = rng.integers(-3, 4, size=(20, 7)) @ rng.integers(-3, 4, size=(7, 12))
    basis, dim = null_space(A.astype(float))
    assert dim == 12 - exact_rank(A)
    assert np.allclose(A @ basis, 0.0, atol=1e-9)
    assert np.allclose(basis.T @ basis, np.eye(dim), atol=1e-12)


# --- closed-form bases ---

def origin_and_layout(system):
    motion, scene = scenes(1)[0]
    layout = AnalysisLayout(len(scene.local_features), len(scene.map_features),
                            len(scene.keyframes), system == IMPERFECT)
    return scene.point(motion, 0), layout


def test_standard_ideal_basis_carries_position_cross_gravity():
    point, layout = origin_and_layout(PERFECT)
    N = theoretical_null_basis(ObservabilityCase(PERFECT, STANDARD, IDEAL), point, layout)
    assert N.shape == (layout.dim, 4)
    assert np.allclose(N[StateLayout.P_LI, 0], -np.cross(point.p_LI, GRAVITY))
    assert np.allclose(N[StateLayout.V_LI, 0], -np.cross(point.v_LI, GRAVITY))


def test_invariant_perfect_basis_is_constant():
    point, layout = origin_and_layout(PERFECT)
    N = theoretical_null_basis(ObservabilityCase(PERFECT, INVARIANT, IDEAL), point, layout)
    expected = np.zeros((layout.dim, 4))
    expected[StateLayout.THETA_LI, 0] = GRAVITY
    expected[StateLayout.THETA_LG, 0] = GRAVITY
    for s in [StateLayout.P_LI, StateLayout.P_LG] + [layout.local(i) for i in range(layout.n_local)]:
        expected[s, 1:] = np.eye(3)
    assert np.array_equal(N, expected)


def test_imperfect_estimated_bases_pad_the_perfect_ones():
    point, perfect = origin_and_layout(PERFECT)
    _, imperfect = origin_and_layout(IMPERFECT)
    for param in (STANDARD, INVARIANT):
        small = theoretical_null_basis(ObservabilityCase(PERFECT, param, ESTIMATED), point, perfect)
        big = theoretical_null_basis(ObservabilityCase(IMPERFECT, param, ESTIMATED), point, imperfect)
        assert np.array_equal(big[:perfect.dim], small)
        assert not big[perfect.dim:].any()


def test_oc_requires_imperfect_invariant():
    try:
        ObservabilityCase(PERFECT, STANDARD, ESTIMATED, oc=True)
    except ValueError:
        return
    raise AssertionError("expected ValueError")


# --- observability matrices ---

def test_suite_dimensions_on_random_trajectories():
    report = verify_suite(scenes())
    assert len(report) == 3 * len(SUITE)
    failed = report[~report["passed"]]
    assert failed.empty, failed.to_string()
    dims = report.groupby("label")["null_dim"].unique()
    assert list(dims["standard/perfect/ideal"]) == [4]
    assert list(dims["standard/perfect/estimated"]) == [3]
    assert list(dims["invariant/imperfect/ideal"]) == [10]
    assert list(dims["invariant/imperfect/estimated+oc"]) == [10]


def test_row_count_is_steps_times_rows_per_step():
    motion, scene = scenes(1)[0]
    om = build_observability_matrix(ObservabilityCase(IMPERFECT, INVARIANT, IDEAL), motion, scene, T=20)
    per_step = 3 * (len(scene.local_features) + len(scene.map_features)
                    + len(scene.map_features) * len(scene.keyframes))
    assert om.M.shape == (20 * per_step, om.layout.dim)
    assert om.rows_per_step == per_step


def test_perturbation_collapses_map_gauge_without_oc():
    motion, scene = scenes(1)[0]
    for param, expected in ((INVARIANT, 4), (STANDARD, 3)):
        report = verify_case(ObservabilityCase(IMPERFECT, param, ESTIMATED), motion, scene)
        assert report.null_dim == expected, report


def test_invariant_perfect_independent_of_perturbation_size():
    motion, scene = scenes(1)[0]
    for linearization, perturbation in ((IDEAL, 0.0), (ESTIMATED, 1e-3), (ESTIMATED, 1e-1)):
        case = ObservabilityCase(PERFECT, INVARIANT, linearization)
        report = verify_case(case, motion, scene, perturbation=perturbation)
        assert report.passed and report.null_dim == 4, report


def test_basis_lies_in_numerical_null_space():
    motion, scene = scenes(1)[0]
    for case in SUITE:
        assert verify_case(case, motion, scene).basis_residual <= 1e-6


def test_pure_translation_is_degenerate():
    dt, steps = 0.1, 50
    motion = integrate_motion(np.eye(3), np.zeros(3), np.zeros(3), np.zeros((steps, 3)),
                              np.tile([0.5, 0.0, 0.0], (steps, 1)), dt)
    scene = random_scene(np.random.default_rng(SEED), motion)
    try:
        build_observability_matrix(ObservabilityCase(PERFECT, INVARIANT, IDEAL), motion, scene)
    except DegenerateMotionError:
        return
    raise AssertionError("expected DegenerateMotionError")


def test_too_few_steps_rejected():
    motion, scene = scenes(1)[0]
    try:
        build_observability_matrix(ObservabilityCase(PERFECT, INVARIANT, IDEAL), motion, scene, T=5)
    except DegenerateMotionError:
        return
    raise AssertionError("expected DegenerateMotionError")


# --- gauge freedom ---

def test_local_gauge_leaves_observations_unchanged():
    motion, scene = scenes(1)[0]
    point = scene.point(motion, 10)
    moved = point.transform_local(0.7, [3.0, -1.0, 2.0])
    assert not np.allclose(moved.p_LI, point.p_LI)
    assert np.allclose(moved.predict(), point.predict(), atol=1e-9)


def test_map_gauge_leaves_observations_unchanged():
    motion, scene = scenes(1)[0]
    point = scene.point(motion, 10)
    moved = point.transform_map(so3_exp([0.2, -0.4, 1.1]), [10.0, 4.0, -2.0])
    assert not np.allclose(moved.map_features, point.map_features)
    assert np.allclose(moved.predict(), point.predict(), atol=1e-9)


def test_gauge_invariance_reports_pass():
    motion, scene = scenes(1)[0]
    reports = gauge_invariance(motion, scene, np.random.default_rng(SEED), k=5)
    assert [r.label for r in reports] == ["gauge/local-4dof", "gauge/map-6dof"]
    assert all(r.passed for r in reports)


if __name__ == "__main__":
    print("=== OBSERVABILITY TESTS ===")
    failures = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"✅ PASS: {name}")
            except AssertionError as e:
                failures += 1
                print(f"❌ FAIL: {name} {e}")
    print(f"\n{failures} failure(s)")
