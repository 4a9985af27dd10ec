r"""Exact-formula layer for Minkowski 3-space and the hyperboloid plane.

Everything here is closed-form linear algebra on vectors of R^{2,1}, the
real 3-space carrying the bilinear form

    <v, w> = v1*w1 + v2*w2 - v3*w3.

The hyperbolic plane is the upper hyperboloid H2 = {<x,x> = -1, x3 > 0}.
Points, translation parts and cocycle values are all plain numpy arrays of
shape (3,); linear isometries are 3x3 arrays.  Value semantics throughout:
no function mutates its arguments.

Sign conventions fixed here and inherited by every downstream module:

* box product:  <u (x) v, w> = det(u, v, w)  for all w (columns u, v, w);
* Lambda(t) x = t (x) x identifies R^{2,1} with the Lie algebra so(2,1);
* the induced rotation J at x in H2 is v -> x (x) v, a +pi/2 rotation in
  the oriented tangent plane.
"""

from __future__ import annotations

import dataclasses

import numpy as np

#: Gram matrix of the Minkowski form in the standard basis.
ETA = np.diag([1.0, 1.0, -1.0])

#: Base point of the hyperboloid (fixed point of the standard elliptic group).
BASEPOINT = np.array([0.0, 0.0, 1.0])

ISOM_TOL = 1e-12


def mink_dot(u, v):
    """Minkowski inner product u1*v1 + u2*v2 - u3*v3.

    Broadcasts over leading axes; the last axis must have length 3.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] - u[..., 2] * v[..., 2]


def mink_norm2(v):
    """Squared Minkowski norm <v, v> (negative on timelike vectors)."""
    return mink_dot(v, v)


def box_product(u, v):
    """Minkowski cross product, defined by <u (x) v, w> = det(u, v, w).

    Antisymmetric and bilinear; differs from the Euclidean cross product
    by the sign of the third component.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.stack(
        [
            u[..., 1] * v[..., 2] - u[..., 2] * v[..., 1],
            u[..., 2] * v[..., 0] - u[..., 0] * v[..., 2],
            -(u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]),
        ],
        axis=-1,
    )


def lambda_iso(t):
    """3x3 matrix of the infinitesimal isometry x -> t (x) x.

    The map t -> lambda_iso(t) is the equivariant identification of
    R^{2,1} with so(2,1): eta*L + L^T*eta = 0, lambda_iso(A t) =
    A lambda_iso(t) A^-1, and tr(lambda_iso(t) lambda_iso(s)) = 2 <t, s>.
    """
    t = np.asarray(t, dtype=float)
    t1, t2, t3 = t
    return np.array(
        [
            [0.0, -t3, t2],
            [t3, 0.0, -t1],
            [t2, -t1, 0.0],
        ]
    )


def is_mink_skew(X, tol=ISOM_TOL):
    """True when eta X + X^T eta = 0 within tol."""
    X = np.asarray(X, dtype=float)
    return float(np.max(np.abs(ETA @ X + X.T @ ETA))) <= tol


def isometry_defect(M):
    """Max-norm deviation of M^T eta M from eta."""
    M = np.asarray(M, dtype=float)
    return float(np.max(np.abs(M.T @ ETA @ M - ETA)))


def is_linear_isometry(M, tol=ISOM_TOL):
    """Validate membership in the identity component of SO(2,1).

    Checks M^T eta M = eta within tol, det M = 1 within tol, and M33 > 0
    (orientation- and time-orientation-preserving).
    """
    M = np.asarray(M, dtype=float)
    if isometry_defect(M) > tol:
        return False
    if abs(np.linalg.det(M) - 1.0) > max(tol, 1e-10):
        return False
    return M[2, 2] > 0.0


def check_linear_isometry(M, tol=ISOM_TOL, what="matrix"):
    """Raise ValueError unless M is in SO_0(2,1) within tol."""
    if not is_linear_isometry(M, tol=tol):
        raise ValueError(
            f"{what} is not an orthochronous linear isometry "
            f"(form defect {isometry_defect(M):.3e}, det {np.linalg.det(M):.17g})"
        )
    return np.asarray(M, dtype=float)


def mink_inverse(M):
    """Inverse of a linear isometry via eta M^T eta (no numerical solve)."""
    M = np.asarray(M, dtype=float)
    return ETA @ M.T @ ETA


@dataclasses.dataclass(frozen=True)
class AffIsom:
    """Affine isometry x -> linear @ x + translation of R^{2,1}."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", np.asarray(self.linear, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    def apply(self, x):
        return self.linear @ np.asarray(x, dtype=float) + self.translation

    def compose(self, other: "AffIsom") -> "AffIsom":
        """(A, a) o (B, b) = (A B, A b + a)."""
        return AffIsom(self.linear @ other.linear, self.linear @ other.translation + self.translation)

    def inverse(self) -> "AffIsom":
        inv = mink_inverse(self.linear)
        return AffIsom(inv, -(inv @ self.translation))

    @staticmethod
    def identity() -> "AffIsom":
        return AffIsom(np.eye(3), np.zeros(3))


# ---------------------------------------------------------------------------
# hyperboloid model
# ---------------------------------------------------------------------------


def on_hyperboloid(x, tol=1e-9):
    x = np.asarray(x, dtype=float)
    return abs(mink_dot(x, x) + 1.0) <= tol and x[2] > 0.0


def project_to_hyperboloid(x):
    """Rescale a timelike future vector onto the hyperboloid."""
    x = np.asarray(x, dtype=float)
    n2 = mink_dot(x, x)
    if n2 >= 0 or x[2] <= 0:
        raise ValueError("not a future timelike vector")
    return x / np.sqrt(-n2)


def hyp_distance(x, y):
    """Hyperbolic distance arccosh(-<x, y>), clamped against rounding."""
    c = np.maximum(-mink_dot(x, y), 1.0)
    return np.arccosh(c)


def tangent_part(v, x):
    """Component of v tangent to the hyperboloid at x (i.e. orthogonal to x)."""
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    return v + mink_dot(v, x)[..., None] * x if v.ndim > 1 else v + mink_dot(v, x) * x


def exp_map(p, v):
    """Geodesic exponential at p applied to a tangent vector v."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    n = np.sqrt(max(mink_dot(v, v), 0.0))
    if n < 1e-300:
        return p.copy()
    return np.cosh(n) * p + np.sinh(n) * (v / n)


def log_map(p, x):
    """Inverse of exp_map: tangent vector at p pointing to x with |v| = d(p, x)."""
    d = float(hyp_distance(p, x))
    if d < 1e-300:
        return np.zeros(3)
    w = tangent_part(np.asarray(x, dtype=float), p)
    nw = np.sqrt(mink_dot(w, w))
    return (d / nw) * w


def geodesic_point(p, q, s):
    """Point at parameter s in [0, 1] on the geodesic from p to q."""
    return exp_map(p, s * log_map(p, q))


def grad_distance(x, c):
    """Gradient at x of the distance from c: (cosh(r) x - c) / sinh(r)."""
    r = float(hyp_distance(x, c))
    if r < 1e-12:
        raise ValueError("gradient of distance undefined at the center")
    return (np.cosh(r) * np.asarray(x, dtype=float) - np.asarray(c, dtype=float)) / np.sinh(r)


def transport_to(p):
    """A linear isometry carrying BASEPOINT to p, smooth in p near BASEPOINT.

    Built from an orthonormal frame at p; columns are (spacelike, spacelike,
    p) so the matrix maps e1, e2 to a tangent frame and e3 to p.
    """
    p = np.asarray(p, dtype=float)
    if not on_hyperboloid(p, tol=1e-8):
        raise ValueError("base point must lie on the hyperboloid")
    seed = np.array([1.0, 0.0, 0.0])
    if abs(mink_dot(seed, p)) > 0.9 * np.sqrt(1.0 + p[0] ** 2):
        seed = np.array([0.0, 1.0, 0.0])
    u1 = tangent_part(seed, p)
    u1 = u1 / np.sqrt(mink_dot(u1, u1))
    u2 = box_product(p, u1)
    u2 = u2 / np.sqrt(mink_dot(u2, u2))
    M = np.column_stack([u1, u2, p])
    if np.linalg.det(M) < 0:
        M = np.column_stack([u2, u1, p])
    return M


def frame_from_segment(p, q):
    """Positively oriented Minkowski frame (u1, u2, p) with u1 pointing to q."""
    u1 = log_map(p, q)
    n = np.sqrt(mink_dot(u1, u1))
    if n < 1e-14:
        raise ValueError("degenerate segment")
    u1 = u1 / n
    u2 = box_product(p, u1)
    return np.column_stack([u1, u2, np.asarray(p, dtype=float)])


def isometry_from_segments(p, q, p2, q2):
    """The unique orientation-preserving isometry with p -> p2, q -> q2.

    Requires d(p, q) = d(p2, q2); the map is frame transport
    F(p2, q2) F(p, q)^{-1}.
    """
    if abs(hyp_distance(p, q) - hyp_distance(p2, q2)) > 1e-9:
        raise ValueError("segments have different lengths")
    F1 = frame_from_segment(p, q)
    F2 = frame_from_segment(p2, q2)
    return F2 @ mink_inverse(F1)


# ---------------------------------------------------------------------------
# Klein (projective) coordinates
# ---------------------------------------------------------------------------


def klein_project(x, p=None, transport=None):
    """Radial projection of x in H2 onto the affine tangent plane at p.

    Returns planar coordinates w with p at the origin.  The projection is
    computed after moving p to BASEPOINT by an isometry, so w = (y1/y3,
    y2/y3) for y = A^{-1} x.  Points with y3 <= 0 (unreachable from p) are
    rejected; this never happens for points of H2.
    """
    x = np.asarray(x, dtype=float)
    A = transport if transport is not None else (np.eye(3) if p is None else transport_to(p))
    y = mink_inverse(A) @ x
    if y[2] <= 0:
        raise ValueError("point not in the half-space reachable from the base point")
    return y[:2] / y[2]


def klein_unproject(w, p=None, transport=None):
    """Inverse of klein_project: planar coordinates back to the hyperboloid."""
    w = np.asarray(w, dtype=float)
    rho2 = w[0] ** 2 + w[1] ** 2
    if rho2 >= 1.0:
        raise ValueError("Klein coordinates must satisfy |w| < 1")
    y = np.array([w[0], w[1], 1.0]) / np.sqrt(1.0 - rho2)
    A = transport if transport is not None else (np.eye(3) if p is None else transport_to(p))
    return A @ y


def elliptic_rotation(p, theta):
    """Rotation by theta about the axis through p in H2: exp(theta Lambda(p))."""
    return so21_exp(theta * np.asarray(p, dtype=float))


def so21_exp(t):
    """exp(Lambda(t)) by the closed Rodrigues-type formula, split by <t, t>.

    Elliptic for timelike t, parabolic for null t, hyperbolic (a boost)
    for spacelike t; no power series.
    """
    t = np.asarray(t, dtype=float)
    n2 = mink_dot(t, t)
    L = lambda_iso(t)
    L2 = L @ L
    eye = np.eye(3)
    if abs(n2) < 1e-14:
        # parabolic: Lambda(t)^3 = 0 for null t (exact at n2 = 0)
        return eye + L + 0.5 * L2
    if n2 < 0:
        s = np.sqrt(-n2)
        return eye + (np.sin(s) / s) * L + ((1.0 - np.cos(s)) / (s * s)) * L2
    s = np.sqrt(n2)
    return eye + (np.sinh(s) / s) * L + ((np.cosh(s) - 1.0) / (s * s)) * L2
