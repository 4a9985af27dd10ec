r"""Self-adjoint Codazzi tensors: constructors, potentials and the class map.

Three families of tensors are built here:

* trivial tensors Hess u - u Id from scalar potentials, both sampled
  (finite differences, `fields.hess_minus_id`) and analytic (exact ambient
  derivatives of bump/linear/orbit-sum potentials);
* harmonic tensors dual to holomorphic quadratic differentials in a
  conformal overlay of the chart;
* class-carrying equivariant tensors obtained by blending linear
  potentials with a partition of unity over a group orbit.

The inverse direction is `potential_from_codazzi`: integrate the flat
Hessian of ubar = u / cosh r along grid sweeps (path-independence is
exactly the Codazzi property) and recover u.  On top of it sit the
cocycle extraction `delta_extract` and the flat-bundle one-form
`iota_star_form` with its closedness test.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import fields as fl
from . import holonomy as hl
from . import minkowski as mk

#: Under this library's orientation, composing a harmonic tensor with the
#: frame rotation J corresponds to q -> ROTATED_QDIFF_SIGN * i * q.
ROTATED_QDIFF_SIGN = -1.0


# ---------------------------------------------------------------------------
# analytic potentials (exact ambient derivatives)
# ---------------------------------------------------------------------------


def _sym_cross(a, b):
    """Bilinear-form matrix of v,w -> df(v)dg(w) + dg(v)df(w) on tangents."""
    ea = a @ mk.ETA
    eb = b @ mk.ETA
    return ea[..., :, None] * eb[..., None, :] + eb[..., :, None] * ea[..., None, :]


class AnalyticPotential:
    """Scalar on the hyperboloid with closed-form gradient and Hessian.

    `value(X)`, `grad(X)` (ambient, tangential) and `hess(X)` (ambient 3x3
    bilinear-form matrices, valid on tangent pairs) accept points of any
    leading shape (..., 3); subclasses implement the flat (N, 3) versions.
    """

    def value(self, X):
        X = np.asarray(X, dtype=float)
        lead = X.shape[:-1]
        return self._value(X.reshape(-1, 3)).reshape(lead)

    def grad(self, X):
        X = np.asarray(X, dtype=float)
        lead = X.shape[:-1]
        return self._grad(X.reshape(-1, 3)).reshape(lead + (3,))

    def hess(self, X):
        X = np.asarray(X, dtype=float)
        lead = X.shape[:-1]
        return self._hess(X.reshape(-1, 3)).reshape(lead + (3, 3))

    def _value(self, X):
        raise NotImplementedError

    def _grad(self, X):
        raise NotImplementedError

    def _hess(self, X):
        raise NotImplementedError

    def __add__(self, other):
        return _SumPotential([self, other])

    def __mul__(self, c):
        return _ScaledPotential(self, float(c))

    __rmul__ = __mul__

    def __sub__(self, other):
        return _SumPotential([self, -1.0 * other])

    # -- sampling helpers ---------------------------------------------------

    def operator_values(self, X, tangents, metric, metric_inv, frames):
        """Frame matrices of Hess u - u Id at points X with chart data."""
        u = self.value(X)
        M = self.hess(X) - u[..., None, None] * mk.ETA
        F = np.einsum("...ai,...ab,...bj->...ij", tangents, M, tangents)
        Bc = np.einsum("...ij,...jk->...ik", metric_inv, F)
        Einv = np.linalg.inv(frames)
        return np.einsum("...ij,...jk,...kl->...il", Einv, Bc, frames)

    def operator_field(self, chart: fl.KleinChart) -> fl.OperatorField:
        X, T = chart.embed()
        m = chart.mask
        Bf = np.full(chart.shape + (2, 2), np.nan)
        vals = self.operator_values(X[m], T[m], chart.metric[m],
                                    chart.metric_inv[m], chart.frames()[m])
        Bf[m] = 0.5 * (vals + np.swapaxes(vals, -1, -2))
        return fl.OperatorField(chart, Bf)

    def scalar_field(self, chart: fl.KleinChart) -> fl.ScalarField:
        m = chart.mask
        out = np.full(chart.shape, np.nan)
        out[m] = self.value(chart.points()[m])
        return fl.ScalarField(chart, out)


class _SumPotential(AnalyticPotential):
    def __init__(self, parts):
        self.parts = []
        for p in parts:
            if isinstance(p, _SumPotential):
                self.parts.extend(p.parts)
            else:
                self.parts.append(p)

    def _value(self, X):
        return sum(p._value(X) for p in self.parts)

    def _grad(self, X):
        return sum(p._grad(X) for p in self.parts)

    def _hess(self, X):
        return sum(p._hess(X) for p in self.parts)


class _ScaledPotential(AnalyticPotential):
    def __init__(self, base, c):
        self.base = base
        self.c = c

    def _value(self, X):
        return self.c * self.base._value(X)

    def _grad(self, X):
        return self.c * self.base._grad(X)

    def _hess(self, X):
        return self.c * self.base._hess(X)


class LinearPotential(AnalyticPotential):
    """v(x) = <t, x>; the kernel of u -> Hess u - u Id."""

    def __init__(self, t):
        self.t = np.asarray(t, dtype=float)

    def _value(self, X):
        return X @ mk.ETA @ self.t

    def _grad(self, X):
        v = self._value(X)
        return self.t + v[:, None] * X

    def _hess(self, X):
        return self._value(X)[:, None, None] * mk.ETA


class ConstantPotential(AnalyticPotential):
    """u = c; Hess u - u Id = -c Id (subtracting c adds c Id to the operator)."""

    def __init__(self, c):
        self.c = float(c)

    def _value(self, X):
        return np.full(len(X), self.c)

    def _grad(self, X):
        return np.zeros_like(X)

    def _hess(self, X):
        return np.zeros((len(X), 3, 3))


def _r_coth_r(r):
    """r * coth(r), stable near zero."""
    out = np.empty_like(r)
    small = r < 1e-4
    rs = r[small]
    out[small] = 1.0 + rs * rs / 3.0 - rs**4 / 45.0
    rb = r[~small]
    out[~small] = rb * np.cosh(rb) / np.sinh(rb)
    return out


def _rcoth_minus_1_over_r2(r):
    """(r coth r - 1) / r^2, stable near zero."""
    out = np.empty_like(r)
    small = r < 1e-3
    rs = r[small]
    out[small] = 1.0 / 3.0 - rs * rs / 45.0 + 2.0 * rs**4 / 945.0
    rb = r[~small]
    out[~small] = (rb * np.cosh(rb) / np.sinh(rb) - 1.0) / rb**2
    return out


def _r_over_sinh_r(r):
    out = np.empty_like(r)
    small = r < 1e-4
    rs = r[small]
    out[small] = 1.0 - rs * rs / 6.0
    rb = r[~small]
    out[~small] = rb / np.sinh(rb)
    return out


class _RadialKernel:
    """Compactly supported radial profile (1 - (r/rho)^2)^6.

    C^5 across the support boundary, so trivial tensors built from it stay
    differentiable enough for clean second-order finite differences.
    """

    def __init__(self, rho):
        self.rho = float(rho)

    def w(self, r):
        s2 = np.clip(1.0 - (r / self.rho) ** 2, 0.0, None)
        return s2**6

    def w1_over_r(self, r):
        s2 = np.clip(1.0 - (r / self.rho) ** 2, 0.0, None)
        return -12.0 * s2**5 / self.rho**2

    def w2(self, r):
        s2 = np.clip(1.0 - (r / self.rho) ** 2, 0.0, None)
        s = (r / self.rho) ** 2
        return (-12.0 * s2**5 + 120.0 * s * s2**4) / self.rho**2

    def hess_coeff_over_r2(self, r):
        """(w'' - w' coth r) / r^2, stable at the center."""
        s2 = np.clip(1.0 - (r / self.rho) ** 2, 0.0, None)
        return (12.0 / self.rho**2) * (
            s2**5 * _rcoth_minus_1_over_r2(r) + 10.0 * s2**4 / self.rho**2
        )


def _radial_terms(X, centers, kernel):
    """Per-center bump values and derivative data at flat points X (N, 3).

    Returns (w, gradw, hessw) with shapes (N, m), (N, m, 3), (N, m, 3, 3);
    centers outside the support contribute exact zeros.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    C = np.atleast_2d(centers)
    cosr = np.maximum(-(X @ mk.ETA @ C.T), 1.0)  # (N, m)
    r = np.arccosh(cosr)
    w = kernel.w(r)
    w1r = kernel.w1_over_r(r)
    inside = r < kernel.rho

    # unnormalized gradient direction: cosh(r) x - c  (norm sinh r)
    D = cosr[..., None] * X[:, None, :] - C[None, :, :]
    rh = _r_over_sinh_r(r)
    gradw = (w1r * rh)[..., None] * D  # w'(r) * unit radial

    # Hessian: (w'' - w' coth r) dr (x) dr + w' coth(r) h  on tangent pairs;
    # the radial covector is assembled from r * (unit radial), which stays
    # finite at the center, so the first coefficient carries the 1/r^2.
    q = w1r * _r_coth_r(r)
    coef = kernel.hess_coeff_over_r2(r)
    grad_scaled = (rh[..., None] * D) @ mk.ETA  # eta * (r * unit radial)
    hessw = coef[..., None, None] * (grad_scaled[..., :, None] * grad_scaled[..., None, :])
    hessw += q[..., None, None] * mk.ETA
    z = ~inside
    w[z] = 0.0
    gradw[z] = 0.0
    hessw[z] = 0.0
    return w, gradw, hessw


class OrbitBumpPotential(AnalyticPotential):
    """Group-invariant potential: sum of one bump over an orbit.

    Descends to the quotient surface, so its trivial tensor has vanishing
    class under the connecting map.
    """

    def __init__(self, G: hl.SurfaceGroup, site=None, radius=1.0, coeff=1.0,
                 word_length=4, reach=3.5):
        self.kernel = _RadialKernel(radius)
        site = mk.BASEPOINT if site is None else np.asarray(site, dtype=float)
        centers = []
        for _, M in G.elements_up_to(word_length):
            c = M @ site
            if mk.hyp_distance(mk.BASEPOINT, c) <= reach + radius:
                centers.append(c)
        self.centers = np.array(centers)
        self.coeff = float(coeff)

    def _value(self, X):
        w, _, _ = _radial_terms(X, self.centers, self.kernel)
        return self.coeff * np.sum(w, axis=1)

    def _grad(self, X):
        _, gw, _ = _radial_terms(X, self.centers, self.kernel)
        return self.coeff * np.sum(gw, axis=1)

    def _hess(self, X):
        _, _, hw = _radial_terms(X, self.centers, self.kernel)
        return self.coeff * np.sum(hw, axis=1)


class EquivariantPotential(AnalyticPotential):
    """Blend of linear potentials by a partition of unity on a group orbit.

    With bumps W_g centered at the orbit of the octagon center and a
    cocycle t, the function u = (sum_g W_g <t_g, x>) / (sum_g W_g)
    satisfies u(x) - u(g^{-1} x) = <t_g, x> identically, so its trivial
    tensor descends to the quotient and carries the class of t.
    """

    def __init__(self, G: hl.SurfaceGroup, t: hl.TransCocycle,
                 radius_factor=1.25, word_length=5, reach=3.6):
        self.G = G
        self.t = t
        rho0 = radius_factor * G.circumradius
        self.kernel = _RadialKernel(rho0)
        centers = []
        tvals = []
        for w, M in G.elements_up_to(word_length):
            c = M @ mk.BASEPOINT
            if mk.hyp_distance(mk.BASEPOINT, c) <= reach + rho0:
                centers.append(c)
                tvals.append(hl.cocycle_extend(t, w, G))
        self.centers = np.array(centers)
        self.tvals = np.array(tvals)
        self.reach = reach

    def _parts(self, X):
        w, gw, hw = _radial_terms(X, self.centers, self.kernel)
        S = np.sum(w, axis=-1)
        if np.any(S <= 1e-12):
            raise ValueError(
                "partition of unity support misconfiguration: uncovered "
                f"evaluation point (min weight sum {S.min():.3e})"
            )
        v = X @ mk.ETA @ self.tvals.T  # <t_g, x>, (N, m)
        gv = self.tvals[None, :, :] + v[..., None] * X[:, None, :]
        A = np.sum(w * v, axis=-1)
        gS = np.sum(gw, axis=-2)
        gA = np.sum(gw * v[..., None], axis=-2) + np.sum(w[..., None] * gv, axis=-2)
        hS = np.sum(hw, axis=-3)
        hA = (np.sum(hw * v[..., None, None], axis=-3)
              + np.sum(w[..., None, None] * (v[..., None, None] * mk.ETA), axis=-3))
        # cross terms dW x dv, summed over the orbit
        ew = gw @ mk.ETA
        ev = gv @ mk.ETA
        hA += np.einsum("nmi,nmj->nij", ew, ev) + np.einsum("nmi,nmj->nij", ev, ew)
        return A, S, gA, gS, hA, hS

    def _value(self, X):
        A, S, *_ = self._parts(X)
        return A / S

    def _grad(self, X):
        A, S, gA, gS, _, _ = self._parts(X)
        return gA / S[:, None] - (A / S**2)[:, None] * gS

    def _hess(self, X):
        A, S, gA, gS, hA, hS = self._parts(X)
        return (hA / S[:, None, None]
                - _sym_cross(gA, gS) / (S**2)[:, None, None]
                - (A / S**2)[:, None, None] * hS
                + (A / S**3)[:, None, None] * _sym_cross(gS, gS))


def linear_potential(t, chart: fl.KleinChart) -> fl.ScalarField:
    """Sampled v(x) = <t, dev(x)> on a chart."""
    return LinearPotential(t).scalar_field(chart)


def fit_linear_potential(values, points, anchors=None):
    """Recover t with values = <t, x> from >= 3 non-collinear sample points.

    Solves on 3 anchor points (chosen to maximize triangle area when not
    given) and returns (t, holdout residual) where the residual is the max
    error over the remaining points.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    n = len(points)
    if n < 3:
        raise ValueError("need at least 3 sample points")
    if anchors is None:
        anchors = _max_area_triple(points)
    A = points[list(anchors)] @ mk.ETA
    t = np.linalg.solve(A, values[list(anchors)])
    rest = [i for i in range(n) if i not in set(anchors)]
    resid = 0.0
    if rest:
        resid = float(np.max(np.abs(points[rest] @ mk.ETA @ t - values[rest])))
    return t, resid


def _max_area_triple(points):
    """Indices of three points spanning (nearly) the largest triangle."""
    n = len(points)
    idx = [0, n // 2, n - 1]
    best = -1.0
    import itertools

    cand = range(n) if n <= 24 else sorted(set(list(range(0, n, max(1, n // 12))) + [n - 1]))
    for tri in itertools.combinations(cand, 3):
        P = points[list(tri)]
        area = abs(np.linalg.det(np.column_stack([P[1] - P[0], P[2] - P[0]])[:2, :]))
        if area > best:
            best = area
            idx = list(tri)
    return idx


# ---------------------------------------------------------------------------
# harmonic tensors from quadratic differentials
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class QuadDiffLocal:
    """Finite Laurent series f(z) = sum c_k z^k describing q = f(z) dz^2."""

    coeffs: dict  # k -> complex

    def f(self, z):
        z = np.asarray(z, dtype=complex)
        out = np.zeros_like(z)
        for k, c in self.coeffs.items():
            out = out + c * z ** k
        return out

    def rotated(self, sign=1.0):
        """The differential i*q (times an orientation sign)."""
        return QuadDiffLocal({k: sign * 1j * c for k, c in self.coeffs.items()})

    def min_order(self):
        return min((k for k, c in self.coeffs.items() if c != 0), default=0)


def cauchy_riemann_defect(q: QuadDiffLocal, pts, h=1e-5):
    """max |d f / d zbar| estimated by central differences."""
    z = np.asarray(pts, dtype=complex)
    fx = (q.f(z + h) - q.f(z - h)) / (2 * h)
    fy = (q.f(z + 1j * h) - q.f(z - 1j * h)) / (2 * h)
    return float(np.max(np.abs(0.5 * (fx + 1j * fy))))


def poincare_from_klein(W):
    """Conformal overlay of a chart: Poincare coordinate of a Klein point."""
    W = np.asarray(W, dtype=float)
    rho2 = np.sum(W * W, axis=-1)
    g = 1.0 / (1.0 + np.sqrt(np.clip(1.0 - rho2, 0.0, None)))
    return W * g[..., None]


def _poincare_jacobian(W):
    """Real 2x2 Jacobian dz/dw of the Klein -> Poincare map."""
    W = np.asarray(W, dtype=float)
    rho2 = np.sum(W * W, axis=-1)
    s = np.sqrt(np.clip(1.0 - rho2, 1e-300, None))
    g = 1.0 / (1.0 + s)
    gp = g**2 / (2.0 * s)  # d g / d(rho^2)
    eye = np.eye(2)
    return g[..., None, None] * eye + 2.0 * gp[..., None, None] * (
        W[..., :, None] * W[..., None, :]
    )


def poincare_conformal_factor(Z):
    """eta with h = e^{2 eta} |dz|^2 on the Poincare disc."""
    r2 = np.sum(np.asarray(Z, dtype=float) ** 2, axis=-1)
    return np.log(2.0 / (1.0 - r2))


def harmonic_matrix_conformal(q: QuadDiffLocal, Z, eta):
    """Operator matrix of b_q in the conformal coordinate basis.

    For q = f dz^2 and h = e^{2 eta}|dz|^2 the real-coordinate matrix is
    e^{-2 eta} [[Re f, -Im f], [-Im f, -Re f]]; it is traceless and
    self-adjoint in any h-orthonormal conformal frame.
    """
    Z = np.asarray(Z, dtype=float)
    z = Z[..., 0] + 1j * Z[..., 1]
    f = q.f(z) * np.exp(-2.0 * eta)
    a = f.real
    b = f.imag
    B = np.empty(Z.shape[:-1] + (2, 2))
    B[..., 0, 0] = a
    B[..., 0, 1] = -b
    B[..., 1, 0] = -b
    B[..., 1, 1] = -a
    return B


def harmonic_tensor(q: QuadDiffLocal, chart: fl.KleinChart) -> fl.OperatorField:
    """Harmonic Codazzi tensor of q on a smooth chart (Poincare overlay)."""
    W = chart.W
    Z = poincare_from_klein(W)
    eta = poincare_conformal_factor(Z)
    Bz = harmonic_matrix_conformal(q, Z, eta)
    Jz = _poincare_jacobian(W)
    Jinv = np.linalg.inv(Jz)
    Bw = np.einsum("...ij,...jk,...kl->...il", Jinv, Bz, Jz)
    Bf = chart.operator_frame_from_coord(Bw)
    Bf = 0.5 * (Bf + np.swapaxes(Bf, -1, -2))
    return fl.OperatorField(chart, Bf)


class HarmonicTensorEvaluator:
    """Frame-matrix evaluator of b_q at arbitrary Klein points (for quadrature)."""

    def __init__(self, q: QuadDiffLocal):
        self.q = q

    def __call__(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        Z = poincare_from_klein(W)
        eta = poincare_conformal_factor(Z)
        Bz = harmonic_matrix_conformal(self.q, Z, eta)
        Jz = _poincare_jacobian(W)
        Bw = np.einsum("...ij,...jk,...kl->...il", np.linalg.inv(Jz), Bz, Jz)
        return _frame_from_coord_at(W, Bw)


def _frames_at(W):
    """Oriented h-orthonormal frames at arbitrary Klein points."""
    h = fl.klein_metric(W)
    e1 = np.zeros(W.shape[:-1] + (2,))
    e1[..., 0] = 1.0 / np.sqrt(h[..., 0, 0])
    v = np.zeros_like(e1)
    v[..., 0] = -h[..., 0, 1] / h[..., 0, 0]
    v[..., 1] = 1.0
    vn = np.sqrt(np.einsum("...i,...ij,...j->...", v, h, v))
    e2 = v / vn[..., None]
    return np.stack([e1, e2], axis=-1)


def _frame_from_coord_at(W, Bc):
    E = _frames_at(W)
    Einv = np.linalg.inv(E)
    return np.einsum("...ij,...jk,...kl->...il", Einv, Bc, E)


# ---------------------------------------------------------------------------
# potential reconstruction
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class PotentialOnChart:
    """Potential u with Hess u - u Id = b, plus its Klein-coordinate data.

    Stores ubar = u / cosh r and the flat gradient a = D ubar on the grid;
    `u_at`, `grad_ambient_at` and `sigma_at` evaluate off-grid through
    high-order interpolation of (ubar, a) and closed-form chart factors.
    """

    chart: fl.KleinChart
    ubar: np.ndarray
    a: np.ndarray            # (..., 2) flat gradient of ubar
    path_residual: float

    def __post_init__(self):
        order = 5
        self._i_u = fl.GridInterpolator(self.chart, self.ubar, order)
        self._i_a0 = fl.GridInterpolator(self.chart, self.a[..., 0], order)
        self._i_a1 = fl.GridInterpolator(self.chart, self.a[..., 1], order)

    @property
    def u(self):
        return self.ubar * self.chart.cosh_r

    def u_field(self):
        return fl.ScalarField(self.chart, self.u)

    def _klein_of_ambient(self, X):
        Ainv = mk.mink_inverse(self.chart.transport)
        Y = np.atleast_2d(X) @ Ainv.T
        return Y[:, :2] / Y[:, 2:3]

    def u_at(self, X):
        """u at ambient hyperboloid points (interpolated)."""
        Wp = self._klein_of_ambient(X)
        cr = fl.klein_cosh_r(Wp)
        ub = np.atleast_1d(self._i_u(Wp))
        return ub * cr

    def grad_ambient_at(self, X):
        """grad_h u as ambient vectors at hyperboloid points."""
        Wp = self._klein_of_ambient(X)
        ub = np.atleast_1d(self._i_u(Wp))
        a = np.column_stack([np.atleast_1d(self._i_a0(Wp)), np.atleast_1d(self._i_a1(Wp))])
        cr = fl.klein_cosh_r(Wp)
        du = cr[:, None] * a + (ub * cr**3)[:, None] * Wp
        ginv = fl.klein_metric_inverse(Wp)
        gradc = np.einsum("nij,nj->ni", ginv, du)
        # ambient tangents at Wp
        T = _tangents_at(Wp, self.chart.transport)
        return np.einsum("nai,ni->na", T, gradc)

    def sigma_at(self, X):
        """Immersion sigma = iota_* grad u - u iota at hyperboloid points."""
        X2 = np.atleast_2d(X)
        return self.grad_ambient_at(X2) - self.u_at(X2)[:, None] * X2


def _tangents_at(W, transport):
    W = np.atleast_2d(W)
    s = np.sqrt(np.clip(1.0 - np.sum(W * W, axis=-1), 1e-300, None))
    P = np.concatenate([W, np.ones(W.shape[:-1] + (1,))], axis=-1) / s[..., None]
    T = np.empty(W.shape[:-1] + (3, 2))
    for i in range(2):
        E = np.zeros(3)
        E[i] = 1.0
        T[..., :, i] = E / s[..., None] + P * (W[..., i] / (s * s))[..., None]
    return np.einsum("ab,...bi->...ai", transport, T)


def _sweep_integrate(F, chart, order, transpose):
    """Integrate dg = F (dg_i/dx_j = F[..., i, j]) from the origin node."""
    ci, cj = chart.origin
    dx = chart.spacing
    mask = chart.mask
    shape = chart.shape
    ncomp = F.shape[-2]
    g = np.full(shape + (ncomp,), np.nan)
    axis_line, axis_cross = (1, 0) if transpose else (0, 1)

    def run_line(values1d, center):
        out = np.full(len(values1d), np.nan)
        # forward and backward cumulative integrals from the center
        fwd = values1d[center:]
        valid = ~np.isnan(fwd)
        nf = int(np.argmin(valid)) if not valid.all() else len(fwd)
        if nf > 1:
            out[center:center + nf] = fl.cumulative_integral(fwd[:nf], dx, order)
        out[center + nf:] = np.nan
        bwd = values1d[center::-1]
        valid = ~np.isnan(bwd)
        nb = int(np.argmin(valid)) if not valid.all() else len(bwd)
        if nb > 1:
            out[center - nb + 1:center + 1] = -fl.cumulative_integral(bwd[:nb], dx, order)[::-1]
        out[:center - nb + 1] = np.nan
        return out

    # integrate along the central cross line first
    if transpose:
        line = np.where(mask[ci, :, None], F[ci, :, :, 1], np.nan)  # d/dy along row ci
        gc = np.stack([run_line(line[:, c], cj) for c in range(ncomp)], axis=-1)
        for j in range(shape[1]):
            if not np.isfinite(gc[j, 0]):
                continue
            col = np.where(mask[:, j, None], F[:, j, :, 0], np.nan)
            gcol = np.stack([run_line(col[:, c], ci) for c in range(ncomp)], axis=-1)
            g[:, j] = gcol + gc[j]
    else:
        line = np.where(mask[:, cj, None], F[:, cj, :, 0], np.nan)  # d/dx along column cj
        gc = np.stack([run_line(line[:, c], ci) for c in range(ncomp)], axis=-1)
        for i in range(shape[0]):
            if not np.isfinite(gc[i, 0]):
                continue
            row = np.where(mask[i, :, None], F[i, :, :, 1], np.nan)
            grow = np.stack([run_line(row[:, c], cj) for c in range(ncomp)], axis=-1)
            g[i, :] = grow + gc[i]
    g[~mask] = np.nan
    return g


def potential_from_codazzi(b: fl.OperatorField, order=6, codazzi_tol=None) -> PotentialOnChart:
    """Invert Hess u - u Id = b by flat-Hessian line integration.

    The flat Hessian W = (cosh r)^{-1} h(b ., .) is integrated to the flat
    gradient a of ubar along grid sweeps, then to ubar, normalized by
    ubar = 0, a = 0 at the chart origin.  The difference between the two
    sweep orders is returned as `path_residual`; when `codazzi_tol` is
    given, a residual above it raises ValueError("input not Codazzi ...").
    """
    chart = b.chart
    Bc = b.coord_values()
    Wf = np.einsum("...ij,...jk->...ik", chart.metric, Bc) / chart.cosh_r[..., None, None]
    Wf = 0.5 * (Wf + np.swapaxes(Wf, -1, -2))

    a_rc = _sweep_integrate(Wf, chart, order, transpose=False)
    a_cr = _sweep_integrate(Wf, chart, order, transpose=True)
    both = np.isfinite(a_rc[..., 0]) & np.isfinite(a_cr[..., 0])
    path_residual = float(np.max(np.abs(a_rc - a_cr)[both]))
    if codazzi_tol is not None and path_residual > codazzi_tol:
        raise ValueError(
            f"input not Codazzi: path-dependence residual {path_residual:.3e} "
            f"exceeds {codazzi_tol:.1e}"
        )
    a = a_rc

    ub_rc = _sweep_integrate(a[..., None, :], chart, order, transpose=False)[..., 0]
    ub_cr = _sweep_integrate(a[..., None, :], chart, order, transpose=True)[..., 0]
    ubar = np.where(np.isfinite(ub_rc), ub_rc, ub_cr)
    return PotentialOnChart(chart=chart, ubar=ubar, a=a, path_residual=path_residual)


# ---------------------------------------------------------------------------
# flat-bundle one-form
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class FValuedOneForm:
    """iota_* b as an R^{2,1}-valued 1-form: coordinate components per node."""

    chart: fl.KleinChart
    omega: np.ndarray  # (..., 3, 2): ambient value on d/dw_j

    def frame_values(self):
        E = self.chart.frames()
        return np.einsum("...aj,...ji->...ai", self.omega, E)


def iota_star_form(b: fl.OperatorField) -> FValuedOneForm:
    """(iota_* b)(v) = iota_*(b v) through the developing section."""
    chart = b.chart
    _, T = chart.embed()
    Bc = b.coord_values()
    omega = np.einsum("...aj,...ji->...ai", T, Bc)
    return FValuedOneForm(chart, omega)


def d_flat_residual_field(form: FValuedOneForm):
    """Ambient-valued d^D of the form by central differences: (..., 3).

    Scaled by 1/sqrt(det h) so it reads as the single frame component of
    the resulting 2-form.
    """
    chart = form.chart
    om = form.omega
    d = (fl.central_diff(om[..., 1], 0, chart.spacing)
         - fl.central_diff(om[..., 0], 1, chart.spacing))
    return d / chart.sqrt_det[..., None]


def closedness_residual(b: fl.OperatorField, collar=fl.COLLAR, region=None) -> float:
    """Max Euclidean norm of d^D(iota_* b); zero iff b self-adjoint Codazzi."""
    field = d_flat_residual_field(iota_star_form(b))
    m = b.chart.interior_mask(collar, region=region)
    return float(np.nanmax(np.linalg.norm(field[m], axis=-1)))


def closedness_splitting_prediction(b: fl.OperatorField):
    """Ambient prediction iota_*(d^nabla b) + (h(e1, b e2) - h(e2, b e1)) iota.

    Evaluated in the oriented frame so it compares directly with
    `d_flat_residual_field`.
    """
    chart = b.chart
    X, _ = chart.embed()
    E = chart.frame_vectors_ambient()
    Bc = b.coord_values()
    dB = np.stack([fl.central_diff(Bc, 0, chart.spacing),
                   fl.central_diff(Bc, 1, chart.spacing)], axis=-3)
    Gam = fl.klein_christoffel(chart.W)
    nab = (dB
           + np.einsum("...kim,...mj->...ikj", Gam, Bc)
           - np.einsum("...mij,...km->...ikj", Gam, Bc))
    Rcoord = nab[..., 0, :, 1] - nab[..., 1, :, 0]
    Rcoord = Rcoord / chart.sqrt_det[..., None]  # frame component of d^nabla b
    _, T = chart.embed()
    term1 = np.einsum("...ai,...i->...a", T, Rcoord)
    # skew part in the frame: h(e1, b e2) - h(e2, b e1) = Bf[0,1] - Bf[1,0]
    skew = b.values[..., 0, 1] - b.values[..., 1, 0]
    return term1 + skew[..., None] * X


def potential_one_form(u_values, chart: fl.KleinChart):
    """eta = iota_* grad u - u iota, ambient per node (FD gradient)."""
    X, T = chart.embed()
    du = fl.grad_coord(u_values, chart.spacing)
    gradc = np.einsum("...ij,...j->...i", chart.metric_inv, du)
    return np.einsum("...ai,...i->...a", T, gradc) - u_values[..., None] * X


def d_flat_of_section(eta_values, chart: fl.KleinChart):
    """d^D of an F-valued 0-form (ambient components): (..., 3, 2)."""
    return np.stack([fl.central_diff(eta_values, 0, chart.spacing),
                     fl.central_diff(eta_values, 1, chart.spacing)], axis=-1)


# ---------------------------------------------------------------------------
# equivariant generators and cocycle extraction
# ---------------------------------------------------------------------------


@dataclasses.dataclass(eq=False)
class EquivariantCodazzi:
    """Quotient Codazzi tensor carrying a prescribed translation class."""

    G: hl.SurfaceGroup
    cocycle: hl.TransCocycle
    potential: AnalyticPotential
    shift: float = 0.0  # adds shift * Id (potential gets -shift)

    def operator_field(self, chart: fl.KleinChart) -> fl.OperatorField:
        f = self.potential.operator_field(chart)
        if self.shift:
            f = f + self.shift * fl.identity_operator(chart)
        return f

    def frame_values_at(self, W, transport=None):
        """Frame matrices at arbitrary Klein coordinates of the center chart."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        A = np.eye(3) if transport is None else transport
        X = np.column_stack([W, np.ones(len(W))]) / np.sqrt(
            np.clip(1.0 - np.sum(W * W, axis=-1), 1e-300, None)
        )[:, None]
        X = X @ A.T
        T = _tangents_at(W, A)
        h = fl.klein_metric(W)
        hinv = fl.klein_metric_inverse(W)
        E = _frames_at(W)
        Bf = self.potential.operator_values(X, T, h, hinv, E)
        Bf = 0.5 * (Bf + np.swapaxes(Bf, -1, -2))
        if self.shift:
            Bf = Bf + self.shift * np.eye(2)
        return Bf

    def with_positive_shift(self, margin=0.5, probe=None):
        """Same class, shifted by M*Id so the operator is positive."""
        if probe is None:
            probe = fl.build_klein_chart(mk.BASEPOINT, 1.0 / 24, margin=0.08)
        f = self.operator_field(probe)
        m = probe.mask
        sym = 0.5 * (f.values + np.swapaxes(f.values, -1, -2))
        lam = np.linalg.eigvalsh(sym[m])
        M = float(max(0.0, margin - lam.min()))
        return EquivariantCodazzi(self.G, self.cocycle, self.potential, self.shift + M)


def equivariant_generator(t: hl.TransCocycle, G: hl.SurfaceGroup,
                          radius_factor=1.25, word_length=5) -> EquivariantCodazzi:
    """Quotient Codazzi tensor with class [t], by partition-of-unity blending.

    The underlying potential satisfies u(x) - u(g^{-1}x) = <t_g, x> exactly,
    so the trivial tensor of u is equivariant and extracts back to [t].
    """
    pot = EquivariantPotential(G, t, radius_factor=radius_factor, word_length=word_length)
    return EquivariantCodazzi(G, t, pot)


def _minimax_center(anchors, lo=0.0, hi=1.0):
    """Point minimizing the max hyperbolic distance to the anchor points.

    Searched on the geodesic from the first anchor toward the Karcher-ish
    mean of the others; adequate for the three-cluster layouts used here.
    """
    anchors = np.asarray(anchors, dtype=float)
    # crude mean point
    m = np.sum(anchors, axis=0)
    m = mk.project_to_hyperboloid(m)

    def maxdist(c):
        return max(float(mk.hyp_distance(c, a)) for a in anchors)

    best_c, best_d = m, maxdist(m)
    for a in anchors:
        v = mk.log_map(m, a)
        for s in np.linspace(-0.5, 0.9, 29):
            c = mk.exp_map(m, s * v)
            d = maxdist(c)
            if d < best_d:
                best_c, best_d = c, d
    return best_c, best_d


@dataclasses.dataclass
class DeltaDiagnostics:
    fit_residuals: dict
    gauge_shift: float
    z1_defect: float
    charts: dict


def _cloud_nodes(chart, center_ambient, radius_hyp, count=24):
    """Grid nodes within hyperbolic distance radius_hyp of an ambient point."""
    m = chart.mask
    X = chart.points()[m]
    W = chart.W[m]
    d = mk.hyp_distance(X, np.broadcast_to(center_ambient, X.shape))
    order = np.argsort(d)
    pick = order[: 6 * count]
    pick = pick[d[pick] <= radius_hyp]
    if len(pick) < 10:
        raise ValueError("sampling cloud does not fit in the chart")
    return W[pick[:count]]


def delta_extract(sampler, G: hl.SurfaceGroup, basis: hl.CocycleBasis = None,
                  spacing=fl.ACCEPTANCE_SPACING, cloud_radius=0.12,
                  fit_tol=1e-6, z1_tol=1e-5, order=6):
    """Translation cocycle class of an equivariant Codazzi tensor.

    `sampler(chart)` must return the OperatorField of the tensor on any
    requested chart (equivariant quotient fields are samplable anywhere).
    For each generator the potential is rebuilt numerically on a dedicated
    chart holding a sample cloud, its image cloud and the common gauge
    anchor (the octagon center); potentials are normalized to vanish to
    first order at the anchor so the four fitted vectors share one gauge.

    Returns (TransCocycle, DeltaDiagnostics); raises ValueError when a fit
    residual exceeds `fit_tol` (not an equivariant Codazzi tensor) or the
    result is too far from a cocycle.
    """
    if basis is None:
        basis = hl.cocycle_basis(G)
    p0 = G.center
    tvals = []
    fit_residuals = {}
    charts = {}
    anchor_resid = 0.0
    for gi, name in enumerate(hl.GENERATOR_NAMES):
        rho = G.generators[gi]
        rho_inv = mk.mink_inverse(rho)
        m = mk.geodesic_point(p0, rho @ p0, 0.5)
        m2 = rho_inv @ m
        c, reach = _minimax_center([p0, m, m2])
        extent = min(np.tanh(reach + cloud_radius + 0.02) + 9 * spacing, 0.985)
        chart = fl.build_klein_chart(c, spacing, margin=1.0 - extent - 1e-9, extent=extent)
        b = sampler(chart)
        pot = potential_from_codazzi(b, order=order)

        # gauge: subtract the linear potential matching value+gradient at p0
        up0 = float(pot.u_at(p0[None, :])[0])
        gp0 = pot.grad_ambient_at(p0[None, :])[0]
        s = gp0 - up0 * p0

        Wx = _cloud_nodes(chart, m, cloud_radius)
        Xx = np.column_stack([Wx, np.ones(len(Wx))]) / np.sqrt(1 - np.sum(Wx**2, -1))[:, None]
        Xx = Xx @ chart.transport.T
        X2 = Xx @ rho_inv.T
        D = pot.u_at(Xx) - pot.u_at(X2)
        D = D - (Xx @ mk.ETA @ s - X2 @ mk.ETA @ s)
        tfit, resid = fit_linear_potential(D, Xx)
        anchor_resid = max(anchor_resid, float(np.linalg.norm(s)))
        fit_residuals[name] = resid
        charts[name] = dict(center=c.tolist(), extent=float(extent),
                            path_residual=pot.path_residual)
        if resid > fit_tol:
            raise ValueError(
                f"not an equivariant Codazzi tensor: holdout residual "
                f"{resid:.3e} on generator {name}"
            )
        tvals.append(tfit)
    raw = hl.TransCocycle(np.array(tvals))
    defect = basis.z1_defect(raw)
    if defect > z1_tol:
        raise ValueError(f"extracted values are not a cocycle (defect {defect:.3e})")
    t = basis.project_z1(raw)
    diag = DeltaDiagnostics(fit_residuals=fit_residuals, gauge_shift=anchor_resid,
                            z1_defect=defect, charts=charts)
    return t, diag


def sampled_field_sampler(field: fl.OperatorField):
    """Adapt a single sampled OperatorField to the sampler protocol.

    Interpolates frame matrices; only valid when the requested chart sits
    inside the source chart. Used for fields with no analytic backing.
    """
    src = field.chart
    interps = [[fl.GridInterpolator(src, field.values[..., i, j], 5) for j in range(2)]
               for i in range(2)]
    Ainv_src = mk.mink_inverse(src.transport)

    def sampler(chart: fl.KleinChart) -> fl.OperatorField:
        X = chart.points()
        Y = X @ Ainv_src.T
        Wp = Y[..., :2] / Y[..., 2:3]
        shape = chart.shape
        flat = Wp.reshape(-1, 2)
        vals = np.empty((len(flat), 2, 2))
        for i in range(2):
            for j in range(2):
                vals[:, i, j] = interps[i][j](flat)
        # interpolated values are frame matrices of the source chart; rotate
        # them into the target chart frame through coordinates
        E_src = _frames_at(flat)
        Bc = np.einsum("nij,njk,nkl->nil", E_src, vals, np.linalg.inv(E_src))
        # coordinates of source chart -> ambient -> target chart coordinates
        # both charts use Klein coordinates of their own base; conjugate by
        # the differential of the transition map via ambient tangents
        T_src = _tangents_at(flat, src.transport)
        Wt = chart.W.reshape(-1, 2)
        T_tgt = _tangents_at(Wt, chart.transport)
        h_tgt = fl.klein_metric(Wt)
        # transition differential M = (T_tgt^+ T_src) using Minkowski pseudoinverse
        Gram = np.einsum("nai,ab,nbj->nij", T_tgt, mk.ETA, T_tgt)
        Cross = np.einsum("nai,ab,nbj->nij", T_tgt, mk.ETA, T_src)
        Trans = np.linalg.solve(Gram, Cross)
        Bt = np.einsum("nij,njk,nkl->nil", Trans, Bc, np.linalg.inv(Trans))
        Bf = _frame_from_coord_at(Wt, Bt).reshape(shape + (2, 2))
        Bf = 0.5 * (Bf + np.swapaxes(Bf, -1, -2))
        return fl.OperatorField(chart, Bf)

    return sampler
