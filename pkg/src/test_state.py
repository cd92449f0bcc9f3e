import numpy as np

from liegroup import GroupElement, compose, group_exp, se3_exp, so3_exp
from state import (INVARIANT, STANDARD, AugmentedState, ClonedPose, Extrinsic,
                   MapKeyframePose, NavState, StateError, StateLayout, augment_clone,
                   check_covariance, init_augmented_variable, insert_keyframes,
                   marginalize_oldest, retract, right_invariant_error, state_error)

RNG_SEED = 5


def random_rotation(rng, scale=1.0):
    return so3_exp(rng.normal(size=3) * scale)


def random_psd(rng, d, scale=0.01):
    A = rng.normal(size=(d, d))
    return A @ A.T * scale


def random_state(rng, n_clones=2, n_keyframes=2, error_param=INVARIANT):
    nav = NavState(random_rotation(rng), rng.normal(size=3), rng.normal(size=3) * 5,
                   rng.normal(size=3), random_rotation(rng), rng.normal(size=3) * 1e-3,
                   rng.normal(size=3) * 1e-2)
    clones = tuple(ClonedPose(random_rotation(rng), rng.normal(size=3), 0.1 * i)
                   for i in range(n_clones))
    kfs = tuple(MapKeyframePose(random_rotation(rng), rng.normal(size=3) * 10, 100 + j)
                for j in range(n_keyframes))
    layout = StateLayout(n_clones, n_keyframes)
    P = random_psd(rng, layout.dim)
    a = layout.active_dim
    return AugmentedState(nav, Extrinsic(random_rotation(rng, 0.1), rng.normal(size=3) * 0.1),
                          clones, kfs, P[:a, :a], P[:a, a:], P[a:, a:], error_param)


def expect_state_error(fn):
    try:
        fn()
    except StateError:
        return
    raise AssertionError("expected StateError")


def test_layout_dimensions():
    layout = StateLayout(n_clones=3, n_keyframes=2)
    assert layout.active_dim == 15 + 6 + 6 + 18
    assert layout.nuisance_dim == 12
    assert layout.clone(0) == slice(27, 33)
    assert layout.keyframe(1) == slice(layout.active_dim + 6, layout.active_dim + 12)


def test_layout_slots_tile_error_vector():
    layout = StateLayout(n_clones=2, n_keyframes=3)
    covered = np.concatenate([np.arange(s.start, s.stop) for _, s in layout.slots()])
    assert np.array_equal(covered, np.arange(layout.dim))


def test_identical_states_have_zero_error():
    rng = np.random.default_rng(RNG_SEED)
    for param in (INVARIANT, STANDARD):
        s = random_state(rng, error_param=param)
        assert np.allclose(state_error(s, s), 0.0, atol=1e-12)


def test_retract_then_error_recovers_correction():
    rng = np.random.default_rng(RNG_SEED)
    for param in (INVARIANT, STANDARD):
        truth = random_state(rng, error_param=param)
        corr = rng.normal(size=truth.layout.dim) * 1e-3
        est = retract(truth, corr, update_nuisance=True)
        assert np.allclose(state_error(truth, est), corr, atol=1e-6)


def test_layout_round_trip_every_slot():
    rng = np.random.default_rng(RNG_SEED)
    for param in (INVARIANT, STANDARD):
        truth = random_state(rng, error_param=param)
        for name, sl in truth.layout.slots():
            corr = np.zeros(truth.layout.dim)
            corr[sl] = rng.normal(size=3) * 1e-2
            est = retract(truth, corr, update_nuisance=True)
            assert np.allclose(state_error(truth, est), corr, atol=1e-10), name


def test_retract_zero_and_bias_exact():
    rng = np.random.default_rng(RNG_SEED)
    s = random_state(rng)
    same = retract(s, np.zeros(s.layout.active_dim))
    assert np.allclose(same.nav.R_LI, s.nav.R_LI) and np.allclose(same.nav.p_LI, s.nav.p_LI)
    corr = np.zeros(s.layout.active_dim)
    corr[StateLayout.B_G] = [1e-3, 2e-3, -1e-3]
    corr[StateLayout.B_A] = [0.1, 0.0, -0.2]
    moved = retract(s, corr)
    assert np.array_equal(moved.nav.b_g, s.nav.b_g + corr[StateLayout.B_G])
    assert np.array_equal(moved.nav.b_a, s.nav.b_a + corr[StateLayout.B_A])


def test_retract_leaves_keyframes_without_nuisance_flag():
    rng = np.random.default_rng(RNG_SEED)
    s = random_state(rng)
    corr = rng.normal(size=s.layout.dim) * 1e-2
    moved = retract(s, corr)
    for k_old, k_new in zip(s.keyframes, moved.keyframes):
        assert k_old.R_GKF is k_new.R_GKF and k_old.p_GKF is k_new.p_GKF


def test_keyframe_retract_matches_pose_composition():
    rng = np.random.default_rng(RNG_SEED)
    for param in (INVARIANT, STANDARD):
        s = random_state(rng, n_keyframes=4, error_param=param)
        corr = rng.normal(size=s.layout.dim) * 0.1
        moved = retract(s, corr, update_nuisance=True)
        for j, (k_old, k_new) in enumerate(zip(s.keyframes, moved.keyframes)):
            delta = corr[s.layout.keyframe(j)]
            if param == INVARIANT:
                T = compose(se3_exp(delta), GroupElement.pose(k_old.R_GKF, k_old.p_GKF))
                R, p = T.rotation, T.vectors[0]
            else:
                R, p = so3_exp(delta[:3]) @ k_old.R_GKF, k_old.p_GKF + delta[3:]
            assert np.allclose(k_new.R_GKF, R, atol=1e-12) and np.allclose(k_new.p_GKF, p, atol=1e-12)
            assert k_new.kf_id == k_old.kf_id
    empty = random_state(rng, n_keyframes=0)
    assert retract(empty, np.zeros(empty.layout.dim), update_nuisance=True).keyframes == ()


def test_invariant_error_is_right_invariant():
    rng = np.random.default_rng(RNG_SEED)
    truth = random_state(rng, n_clones=0, n_keyframes=0)
    est = retract(truth, rng.normal(size=truth.layout.dim) * 0.3)
    G = group_exp(rng.normal(size=15), K=0, M=1)
    shifted_truth = AugmentedState(truth.nav.with_group(compose(truth.nav.group(), G)),
                                   truth.extrinsic)
    shifted_est = AugmentedState(est.nav.with_group(compose(est.nav.group(), G)), est.extrinsic)
    nav = StateLayout.NAV
    assert np.allclose(right_invariant_error(shifted_truth, shifted_est)[nav],
                       right_invariant_error(truth, est)[nav], atol=1e-9)


def test_error_rejects_layout_mismatch():
    rng = np.random.default_rng(RNG_SEED)
    a = random_state(rng, n_clones=2)
    b = random_state(rng, n_clones=3)
    expect_state_error(lambda: state_error(a, b))


def test_unknown_error_param_rejected():
    expect_state_error(lambda: AugmentedState(
        NavState(np.eye(3), np.zeros(3), np.zeros(3)),
        Extrinsic(np.eye(3), np.zeros(3)), error_param="quaternion"))


def test_augment_clone_selection_covariance():
    rng = np.random.default_rng(RNG_SEED)
    s = random_state(rng, n_clones=1)
    out = augment_clone(s, timestamp=5.0)
    layout = out.layout
    new = layout.clone(layout.n_clones - 1)
    assert np.allclose(state_error(out, out), 0.0)
    # dense oracle: J = [I; S] with S selecting [theta_LI, p_LI]
    a = s.layout.active_dim
    S = np.zeros((6, a))
    S[:3, 0:3] = np.eye(3)
    S[3:, 6:9] = np.eye(3)
    J = np.vstack([np.eye(a), S])
    assert np.allclose(out.P_aa, J @ s.P_aa @ J.T, atol=1e-14)
    assert np.allclose(out.P_an, J @ s.P_an, atol=1e-14)
    pose = np.r_[0:3, 6:9]
    assert np.allclose(out.P_aa[pose, new], s.P_aa[np.ix_(pose, pose)])
    assert all(check_covariance(out.covariance))


def test_augment_clone_pose_matches_current():
    rng = np.random.default_rng(RNG_SEED)
    s = augment_clone(random_state(rng, n_clones=0), timestamp=1.0)
    assert np.array_equal(s.clones[-1].R_LI, s.nav.R_LI)
    assert np.array_equal(s.clones[-1].p_LI, s.nav.p_LI)


def test_augment_clone_errors():
    rng = np.random.default_rng(RNG_SEED)
    s = random_state(rng, n_clones=2)
    expect_state_error(lambda: augment_clone(s, s.clones[-1].timestamp))
    full = random_state(rng, n_clones=0)
    for i in range(full.max_clones):
        full = augment_clone(full, float(i + 1))
    expect_state_error(lambda: augment_clone(full, 100.0))


def test_marginalize_inverts_augment():
    rng = np.random.default_rng(RNG_SEED)
    s = random_state(rng, n_clones=0)
    grown = augment_clone(s, 1.0)
    grown = augment_clone(grown, 2.0)
    back = marginalize_oldest(marginalize_oldest(grown))
    assert back.layout.dim == s.layout.dim
    assert np.allclose(back.P_aa, s.P_aa)
    once = marginalize_oldest(grown)
    assert once.clones[0].timestamp == 2.0
    assert all(check_covariance(once.covariance))
    expect_state_error(lambda: marginalize_oldest(s))


def test_insert_keyframes():
    rng = np.random.default_rng(RNG_SEED)
    s = random_state(rng, n_clones=1, n_keyframes=1)
    assert insert_keyframes(s, [], np.eye(6)) is s
    prior = np.diag([1e-4] * 3 + [1e-2] * 3)
    kfs = [MapKeyframePose(np.eye(3), np.ones(3), 7), MapKeyframePose(np.eye(3), np.zeros(3), 8)]
    out = insert_keyframes(s, kfs, prior)
    assert out.layout.n_keyframes == 3
    j = out.keyframe_index(8)
    assert np.array_equal(out.P_nn[out.layout.keyframe_local(j), out.layout.keyframe_local(j)], prior)
    assert np.all(out.P_an[:, 6:] == 0.0)
    assert np.allclose(out.P_nn[:6, :6], s.P_nn, atol=1e-15)
    expect_state_error(lambda: insert_keyframes(out, [MapKeyframePose(np.eye(3), np.zeros(3), 7)], prior))


def test_init_augmented_variable():
    rng = np.random.default_rng(RNG_SEED)
    s = random_state(rng)
    s = AugmentedState(s.nav, s.extrinsic, s.clones, s.keyframes, s.P_aa, s.P_an, s.P_nn)
    R_LG = random_rotation(rng)
    cov = np.diag([0.09] * 3 + [np.deg2rad(1.0) ** 2] * 3)
    out = init_augmented_variable(s, R_LG, [5.0, -3.0, 1.0], cov)
    assert out.is_initialized and not s.is_initialized
    assert np.array_equal(out.oc_anchor, R_LG)
    assert np.array_equal(out.P_aa[StateLayout.AUGMENTED, StateLayout.AUGMENTED], cov)
    assert np.all(out.P_aa[StateLayout.AUGMENTED, :15][:, :9] == 0.0)
    expect_state_error(lambda: init_augmented_variable(out, R_LG, np.zeros(3), cov))


def test_pose_group_embedding():
    nav = NavState(so3_exp([0.1, 0.2, 0.3]), np.ones(3), np.arange(3.0), np.full(3, 2.0),
                   so3_exp([0.0, 0.0, 0.5]))
    X = nav.group()
    assert isinstance(X, GroupElement) and X.K == 0 and X.M == 1
    back = nav.with_group(X)
    assert np.array_equal(back.p_LG, nav.p_LG) and np.array_equal(back.R_LG, nav.R_LG)


if __name__ == "__main__":
    print("=== STATE TESTS ===")
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
