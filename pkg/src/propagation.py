"""
IMU-driven propagation of the filter mean and of the error covariance,
for the right-invariant and the standard (additive) error charts.

Only the first 21 error slots [theta_LI, v, p_LI, p_LG, theta_LG, b_g, b_a]
evolve; extrinsic, clone and keyframe errors are static between images.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import block_diag, expm

from liegroup import adjoint, nearest_rotation, rotation_residual, skew, so3_exp
from state import INVARIANT, StateLayout, check_covariance, symmetrize

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.8])
PROPAGATED_DIM = StateLayout.PROPAGATED.stop
ORTHO_RESIDUAL = 1e-9


class PropagationError(ValueError):
    """Non-positive time step or an invalid covariance."""


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time densities: white noise per sqrt(Hz), random walks per sqrt(s)."""
    sigma_g: float = 1.6968e-4
    sigma_a: float = 2.0e-3
    sigma_bg: float = 1.9393e-5
    sigma_ba: float = 3.0e-3

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if getattr(self, name) < 0:
                raise PropagationError(f"{name} must be >= 0")

    def covariance(self):
        """Cov(w) over the 21 propagated slots; no noise enters p, p_LG, theta_LG."""
        diag = np.concatenate([np.full(3, self.sigma_g ** 2), np.full(3, self.sigma_a ** 2),
                               np.zeros(9),
                               np.full(3, self.sigma_bg ** 2), np.full(3, self.sigma_ba ** 2)])
        return np.diag(diag)


def propagate_mean(state, imu, dt, gravity=GRAVITY):
    """
    Integrates the kinematics over dt with (omega, a) held constant.
    Rotation uses the exact exponential, velocity and position use RK4.
    """
    if not dt > 0:
        raise PropagationError(f"non-positive time step {dt}")
    nav = state.nav
    w = np.asarray(imu.omega, dtype=float) - nav.b_g
    a = np.asarray(imu.accel, dtype=float) - nav.b_a

    def accel(tau):
        return nav.R_LI @ so3_exp(w * tau) @ a + gravity

    v0, p0 = nav.v_LI, nav.p_LI
    f0, f_half, f_end = accel(0.0), accel(dt / 2), accel(dt)
    k1v, k1p = f0, v0
    k2v, k2p = f_half, v0 + dt / 2 * k1v
    k3v, k3p = f_half, v0 + dt / 2 * k2v
    k4v, k4p = f_end, v0 + dt * k3v
    v1 = v0 + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    p1 = p0 + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)

    R1 = nav.R_LI @ so3_exp(w * dt)
    if rotation_residual(R1) > ORTHO_RESIDUAL:
        R1 = nearest_rotation(R1)
    return replace(state, nav=replace(nav, R_LI=R1, v_LI=v1, p_LI=p1),
                   timestamp=state.timestamp + dt)


def error_dynamics(state, gravity=GRAVITY):
    """
    (A, W) of the right-invariant error over the 21 propagated slots.
    The [theta, v, p] core of A is constant; only the bias columns depend
    on the estimate.
    """
    nav = state.nav
    R = nav.R_LI
    L = StateLayout
    A = np.zeros((PROPAGATED_DIM, PROPAGATED_DIM))
    A[L.V_LI, L.THETA_LI] = skew(gravity)
    A[L.P_LI, L.V_LI] = np.eye(3)
    A[L.THETA_LI, L.B_G] = -R
    A[L.V_LI, L.B_G] = -skew(nav.v_LI) @ R
    A[L.P_LI, L.B_G] = -skew(nav.p_LI) @ R
    A[L.P_LG, L.B_G] = -skew(nav.p_LG) @ R
    A[L.V_LI, L.B_A] = -R
    W = block_diag(adjoint(nav.group()), np.eye(6))
    return A, W


def std_ekf_error_dynamics(state, imu, gravity=GRAVITY):
    """Classical linearization for additive errors with left rotation perturbations."""
    nav = state.nav
    R = nav.R_LI
    a_hat = np.asarray(imu.accel, dtype=float) - nav.b_a
    L = StateLayout
    A = np.zeros((PROPAGATED_DIM, PROPAGATED_DIM))
    A[L.THETA_LI, L.B_G] = -R
    A[L.V_LI, L.THETA_LI] = -skew(R @ a_hat)
    A[L.V_LI, L.B_A] = -R
    A[L.P_LI, L.V_LI] = np.eye(3)
    W = block_diag(R, R, np.eye(15))
    return A, W


def discretize(A, W, noise, dt):
    """Phi = expm(A dt); Q_d by the trapezoid rule on Phi(tau) Q Phi(tau)^T."""
    if not dt > 0:
        raise PropagationError(f"non-positive time step {dt}")
    Phi = expm(A * dt)
    Q = W @ noise.covariance() @ W.T
    Qd = (Phi @ Q @ Phi.T + Q) * dt / 2.0
    return Phi, symmetrize(Qd)


def _apply_transition(P_aa, P_an, Phi, Qd):
    k = Phi.shape[0]
    P_aa = P_aa.copy()
    P_aa[:k, :] = Phi @ P_aa[:k, :]
    P_aa[:, :k] = P_aa[:, :k] @ Phi.T
    P_aa[:k, :k] += Qd
    P_an = P_an.copy()
    P_an[:k, :] = Phi @ P_an[:k, :]
    return symmetrize(P_aa), P_an


def propagate_covariance(P, A, W, noise, dt):
    """
    P' = Phi P Phi^T + Q_d on the leading propagated block of P; rows and
    columns past it are carried by the identity.
    """
    _, ok_psd = check_covariance(P, sym_tol=np.inf)
    if not ok_psd:
        raise PropagationError("covariance has an eigenvalue below -1e-9")
    Phi, Qd = discretize(A, W, noise, dt)
    P_new, _ = _apply_transition(np.asarray(P, dtype=float), np.zeros((len(P), 0)), Phi, Qd)
    return P_new


def propagate_state(state, imu, dt, noise, gravity=GRAVITY):
    """One IMU step: covariance linearized at the prior mean, then the mean."""
    if state.error_param == INVARIANT:
        A, W = error_dynamics(state, gravity)
    else:
        A, W = std_ekf_error_dynamics(state, imu, gravity)
    Phi, Qd = discretize(A, W, noise, dt)
    P_aa, P_an = _apply_transition(state.P_aa, state.P_an, Phi, Qd)
    state = replace(state, P_aa=P_aa, P_an=P_an)
    return propagate_mean(state, imu, dt, gravity)


def propagate_interval(state, samples, t_end, noise, gravity=GRAVITY):
    """
    Propagates through every sample in [state.timestamp, t_end), each held
    until the next sample or t_end.
    """
    samples = list(samples)
    for i, sample in enumerate(samples):
        t_next = samples[i + 1].t if i + 1 < len(samples) else t_end
        t_start = max(sample.t, state.timestamp)
        dt = min(t_next, t_end) - t_start
        if dt <= 1e-12:
            continue
        state = propagate_state(state, sample, dt, noise, gravity)
    return replace(state, timestamp=float(t_end))
