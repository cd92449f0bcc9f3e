import numpy as np
from scipy.integrate import trapezoid

from liegroup import (GroupElement, LieGroupError, adjoint, compose, group_exp,
                      group_hat, group_log, group_vee, inverse, nearest_rotation,
                      se3_exp, se3_log, skew, skew_batch, so3_exp, so3_exp_batch,
                      so3_left_jacobian, so3_left_jacobian_batch, so3_log, tangent_dim)

RNG_SEED = 11


def matrix_series(A, terms):
    """Truncated power series of exp(A), the oracle for the closed forms."""
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def random_element(rng, K=0, M=1, scale=1.0):
    n = 2 + K + M
    xi = rng.normal(size=tangent_dim(n, M))
    xi *= scale * rng.uniform(0.1, 1.0) / np.linalg.norm(xi)
    return group_exp(xi, K, M)


# --- SO(3) ---

def test_so3_exp_identity():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_so3_exp_quarter_turn_matches_series():
    R = so3_exp([0.0, 0.0, np.pi / 2])
    assert np.allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)
    assert np.allclose(R, matrix_series(skew([0.0, 0.0, np.pi / 2]), 20), atol=1e-12)


def test_so3_round_trip():
    rng = np.random.default_rng(RNG_SEED)
    for _ in range(100):
        axis = rng.normal(size=3)
        w = axis / np.linalg.norm(axis) * rng.uniform(0.0, np.pi - 1e-6)
        assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)


def test_so3_log_examples():
    assert np.allclose(so3_log(np.eye(3)), np.zeros(3))
    w = np.array([0.3, -0.2, 0.1])
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)
    R_pi = np.diag([-1.0, -1.0, 1.0])
    assert np.allclose(so3_log(R_pi), [0.0, 0.0, np.pi], atol=1e-12)


def test_so3_log_near_pi_uses_axis():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    w = axis * (np.pi - 1e-6)
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)


def test_so3_small_angle_taylor():
    w = np.array([1e-9, -2e-9, 3e-9])
    assert np.allclose(so3_exp(w), np.eye(3) + skew(w), atol=1e-17)
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-20)


def test_so3_log_rejects_non_rotation():
    bad = np.eye(3) * 1.01
    try:
        so3_log(bad)
    except LieGroupError:
        return
    raise AssertionError("expected LieGroupError")


def test_left_jacobian_is_integral_of_exp():
    w = np.array([0.4, -0.7, 0.2])
    s = np.linspace(0.0, 1.0, 2001)
    samples = np.array([so3_exp(si * w) for si in s])
    integral = trapezoid(samples, s, axis=0)
    assert np.allclose(so3_left_jacobian(w), integral, atol=1e-6)


def test_nearest_rotation_repairs_drift():
    R = so3_exp([0.2, 0.1, -0.3]) + 1e-6
    assert np.allclose(nearest_rotation(R).T @ nearest_rotation(R), np.eye(3), atol=1e-12)


def test_batched_exp_and_jacobian_match_single():
    rng = np.random.default_rng(RNG_SEED)
    W = np.vstack([rng.normal(size=(5, 3)), [[1e-9, -2e-9, 0.0]], np.zeros(3)])
    R, J = so3_exp_batch(W), so3_left_jacobian_batch(W)
    assert R.shape == J.shape == (7, 3, 3)
    for k, w in enumerate(W):
        assert np.allclose(R[k], so3_exp(w), atol=1e-14)
        assert np.allclose(J[k], so3_left_jacobian(w), atol=1e-14)
    assert np.array_equal(skew_batch(W)[2], skew(W[2]))
    assert so3_exp_batch(np.zeros((0, 3))).shape == (0, 3, 3)


# --- SE_{2+K}^M(3) ---

def test_group_exp_zero_is_identity():
    X = group_exp(np.zeros(tangent_dim(3, 1)), K=0, M=1)
    assert np.allclose(X.matrix(), GroupElement.identity(0, 1).matrix())


def test_group_exp_first_order():
    rng = np.random.default_rng(RNG_SEED)
    n, M = 4, 1
    xi = rng.normal(size=tangent_dim(n, M))
    xi *= 1e-6 / np.linalg.norm(xi)
    X = group_exp(xi, K=1, M=1)
    assert np.allclose(X.matrix(), np.eye(3 + n + 3 * M) + group_hat(xi, n, M), atol=1e-11, rtol=0)


def test_group_exp_matches_power_series():
    rng = np.random.default_rng(RNG_SEED)
    for K, M in [(0, 1), (1, 1), (2, 2)]:
        n = 2 + K + M
        for _ in range(10):
            xi = rng.normal(size=tangent_dim(n, M))
            xi *= rng.uniform(0.0, 1.0) / np.linalg.norm(xi)
            dense = matrix_series(group_hat(xi, n, M), 30)
            assert np.allclose(group_exp(xi, K, M).matrix(), dense, atol=1e-10)


def test_hat_vee_and_sparsity():
    rng = np.random.default_rng(RNG_SEED)
    n, M = 4, 1
    xi = rng.normal(size=tangent_dim(n, M))
    A = group_hat(xi, n, M)
    assert np.array_equal(group_vee(A, n, M), xi)
    # extended-pose block and extra-rotation block never couple
    assert np.all(A[:3 + n, 3 + n:] == 0.0)
    assert np.all(A[3 + n:, :3 + n] == 0.0)
    assert np.all(A[3:3 + n, :] == 0.0)


def test_group_log_round_trip():
    rng = np.random.default_rng(RNG_SEED)
    assert np.allclose(group_log(GroupElement.identity(0, 1)), 0.0)
    for _ in range(50):
        n, M = 3, 1
        xi = rng.normal(size=tangent_dim(n, M))
        xi *= rng.uniform(0.0, 3.0) / np.linalg.norm(xi)
        X = group_exp(xi, 0, 1)
        assert np.allclose(group_log(X), xi, atol=1e-9)
        assert np.allclose(group_exp(group_log(X), 0, 1).matrix(), X.matrix(), atol=1e-9)
        # extra-rotation component is the SO(3) log of the tail
        assert np.allclose(group_log(X)[-3:], so3_log(X.extra_rotations[0]), atol=1e-12)


def test_compose_matches_dense_product_and_axioms():
    rng = np.random.default_rng(RNG_SEED)
    for _ in range(20):
        X1, X2, X3 = (random_element(rng, K=1, M=1, scale=2.0) for _ in range(3))
        assert np.allclose(compose(X1, X2).matrix(), X1.matrix() @ X2.matrix(), atol=1e-9)
        assert np.allclose(compose(compose(X1, X2), X3).matrix(),
                           compose(X1, compose(X2, X3)).matrix(), atol=1e-9)
        I = GroupElement.identity(1, 1)
        assert np.allclose(compose(X1, I).matrix(), X1.matrix(), atol=1e-12)
        assert np.allclose(compose(X1, inverse(X1)).matrix(), I.matrix(), atol=1e-10)


def test_inverse_structure():
    rng = np.random.default_rng(RNG_SEED)
    X = random_element(rng, K=0, M=1, scale=2.0)
    Xi = inverse(X)
    assert np.allclose(Xi.rotation, X.rotation.T)
    assert np.allclose(Xi.vectors, -(X.rotation.T @ X.vectors.T).T)


def test_compose_shape_mismatch():
    try:
        compose(GroupElement.identity(0, 1), GroupElement.identity(1, 1))
    except LieGroupError:
        return
    raise AssertionError("expected LieGroupError")


def test_group_exp_dimension_mismatch():
    try:
        group_exp(np.zeros(10), K=0, M=1)
    except LieGroupError:
        return
    raise AssertionError("expected LieGroupError")


def test_adjoint_identity_and_defining_property():
    rng = np.random.default_rng(RNG_SEED)
    assert np.allclose(adjoint(GroupElement.identity(1, 1)), np.eye(18))
    for _ in range(20):
        X = random_element(rng, K=1, M=1, scale=2.0)
        n, M = X.n_vectors, X.M
        xi = rng.normal(size=tangent_dim(n, M))
        lhs = group_hat(adjoint(X) @ xi, n, M)
        T = X.matrix()
        rhs = T @ group_hat(xi, n, M) @ np.linalg.inv(T)
        assert np.allclose(lhs, rhs, atol=1e-9)


def test_adjoint_block_structure_one_feature():
    rng = np.random.default_rng(RNG_SEED)
    X = random_element(rng, K=1, M=1, scale=2.0)
    Ad = adjoint(X)
    R = X.rotation
    assert Ad.shape == (18, 18)
    for i in range(4):  # v, p, p_f, p_G
        o = 3 + 3 * i
        assert np.allclose(Ad[o:o + 3, :3], skew(X.vectors[i]) @ R)
        assert np.allclose(Ad[o:o + 3, o:o + 3], R)
    assert np.allclose(Ad[15:, 15:], X.extra_rotations[0])


def test_adjoint_only_extra_rotation():
    R_G = so3_exp([0.1, 0.5, -0.2])
    X = GroupElement(np.eye(3), np.zeros((3, 3)), R_G[None])
    expected = np.eye(15)
    expected[12:, 12:] = R_G
    assert np.allclose(adjoint(X), expected)


def test_adjoint_is_homomorphism():
    rng = np.random.default_rng(RNG_SEED)
    for _ in range(10):
        X1, X2 = random_element(rng, scale=2.0), random_element(rng, scale=2.0)
        assert np.allclose(adjoint(compose(X1, X2)), adjoint(X1) @ adjoint(X2), atol=1e-9)


def test_se3_round_trip():
    xi = np.array([0.3, -0.1, 0.2, 1.0, -2.0, 0.5])
    X = se3_exp(xi)
    assert X.n_vectors == 1 and X.M == 0
    assert np.allclose(se3_log(X), xi, atol=1e-12)


if __name__ == "__main__":
    print("=== LIE GROUP TESTS ===")
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
