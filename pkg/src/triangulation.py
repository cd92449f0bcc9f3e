import logging

import numpy as np

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e4
MAX_ITERATIONS = 5


class TriangulationError(ValueError):
    """Ill-conditioned geometry or a point behind one of the cameras."""


def triangulate(camera, poses, uvs, max_condition=MAX_CONDITION, iterations=MAX_ITERATIONS):
    """
    Linear DLT followed by Gauss-Newton on the pixel reprojection error.

    poses: list of (R_WC, p_WC) camera poses in a common frame W
    uvs: matching pixel observations
    Returns the point in W.
    """
    if len(poses) < 2:
        raise TriangulationError("need at least two views")
    rows = []
    for (R, p), uv in zip(poses, uvs):
        x, y = camera.normalized(uv)
        P = np.hstack([R.T, (-R.T @ p)[:, None]])
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.array(rows))
    X = Vt[-1]
    if abs(X[3]) < 1e-12:
        raise TriangulationError("point at infinity")
    point = X[:3] / X[3]

    for _ in range(iterations):
        r, J = _reprojection(camera, poses, uvs, point)
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        point = point + step
        if np.linalg.norm(step) < 1e-10 * max(1.0, np.linalg.norm(point)):
            break

    _, J = _reprojection(camera, poses, uvs, point)
    s = np.linalg.svd(J, compute_uv=False)
    if s[-1] <= 0 or s[0] / s[-1] > max_condition:
        raise TriangulationError(f"condition number {s[0] / max(s[-1], 1e-300):.1e} "
                                 f"above {max_condition:.0e}")
    return point


def _reprojection(camera, poses, uvs, point):
    r, J = [], []
    for (R, p), uv in zip(poses, uvs):
        p_C = R.T @ (point - p)
        if p_C[2] <= camera.z_min:
            raise TriangulationError(f"non-positive depth {p_C[2]:.3f} m")
        pred, Jc = camera.project_with_jacobian(p_C)
        r.append(uv - pred)
        J.append(Jc @ R.T)
    return np.concatenate(r), np.vstack(J)
