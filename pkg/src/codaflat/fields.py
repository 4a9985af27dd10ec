r"""Discrete tensor calculus on Klein-coordinate charts of the hyperbolic plane.

A chart is a uniform Cartesian grid in the Klein (projective) coordinates
of a base point p: the hyperboloid point above w is (w, 1)/sqrt(1 - |w|^2)
transported by an isometry carrying (0,0,1) to p.  In these coordinates
geodesics are straight lines, the metric is

    h(w) = [(1 - |w|^2) Id + w w^T] / (1 - |w|^2)^2,

its Christoffel symbols are Gamma^k_ij = (delta^k_i w_j + delta^k_j w_i) /
(1 - |w|^2), and cosh of the distance from the base is (1-|w|^2)^{-1/2}.

Fields are sampled one value per node: scalars, frame components of
vectors, or 2x2 operator matrices in the local oriented h-orthonormal
frame.  Differential operators use central differences on the grid; every
residual reported here excludes a two-node boundary collar where one-sided
stencils would pollute the convergence order.

The frame orientation is tied to the box-product convention: the +pi/2
rotation J of the frame coincides with v -> x (x) v on the hyperboloid.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import minkowski as mk

DEFAULT_SPACING = 1.0 / 64
ACCEPTANCE_SPACING = 1.0 / 128
COLLAR = 2  # boundary nodes excluded from residual norms


# ---------------------------------------------------------------------------
# closed-form chart geometry
# ---------------------------------------------------------------------------


def _safe_s2(W):
    """1 - |w|^2 with NaN (quietly) outside the unit disc."""
    rho2 = np.sum(np.asarray(W, dtype=float) ** 2, axis=-1)
    return np.where(rho2 < 1.0, 1.0 - rho2, np.nan)


def klein_metric(W):
    """Metric matrices h(w) for an array of Klein coordinates (..., 2)."""
    W = np.asarray(W, dtype=float)
    s2 = _safe_s2(W)
    eye = np.eye(2)
    outer = W[..., :, None] * W[..., None, :]
    return (s2[..., None, None] * eye + outer) / (s2 ** 2)[..., None, None]


def klein_metric_inverse(W):
    W = np.asarray(W, dtype=float)
    s2 = _safe_s2(W)
    eye = np.eye(2)
    outer = W[..., :, None] * W[..., None, :]
    return s2[..., None, None] * (eye - outer)


def klein_sqrt_det(W):
    return _safe_s2(W) ** -1.5


def klein_christoffel(W):
    """Gamma[..., k, i, j] of the Klein metric."""
    W = np.asarray(W, dtype=float)
    s2 = _safe_s2(W)
    d = np.eye(2)
    G = (np.einsum("ki,...j->...kij", d, W) + np.einsum("kj,...i->...kij", d, W))
    return G / s2[..., None, None, None]


def klein_cosh_r(W):
    return _safe_s2(W) ** -0.5


@dataclasses.dataclass
class KleinChart:
    """Uniform grid in Klein coordinates of a base point on the hyperboloid."""

    base: np.ndarray
    spacing: float
    margin: float
    transport: np.ndarray = None
    extent: float = None  # Klein radius of the grid disc; default 1 - margin

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        if self.transport is None:
            self.transport = mk.transport_to(self.base)
        if self.extent is None:
            self.extent = 1.0 - self.margin
        if not 0 < self.extent < 1:
            raise ValueError("chart extent must be in (0, 1)")
        n = int(np.floor(self.extent / self.spacing))
        axis = self.spacing * np.arange(-n, n + 1)
        self.axis = axis
        X, Y = np.meshgrid(axis, axis, indexing="ij")
        self.W = np.stack([X, Y], axis=-1)          # (nx, ny, 2)
        rho2 = X ** 2 + Y ** 2
        self.mask = rho2 <= self.extent ** 2
        if (1.0 - rho2[self.mask].max()) < 1e-6:
            raise ValueError("margin too small: nodes degenerate at the ideal boundary")
        self.metric = klein_metric(self.W)
        self.metric_inv = klein_metric_inverse(self.W)
        self.sqrt_det = klein_sqrt_det(self.W)
        self.cosh_r = klein_cosh_r(self.W)
        self.origin = (n, n)
        self._frames = None
        self._embed = None

    # -- geometry ---------------------------------------------------------

    @property
    def shape(self):
        return self.mask.shape

    def interior_mask(self, collar=COLLAR, region=None):
        """Nodes whose full FD stencil of width `collar` stays in the chart.

        `region` optionally restricts further to a fixed indicator on Klein
        coordinates, which keeps grid-refinement comparisons on a common
        domain independent of the spacing.
        """
        m = self.mask.copy()
        for _ in range(collar):
            m2 = m.copy()
            m2[1:, :] &= m[:-1, :]
            m2[:-1, :] &= m[1:, :]
            m2[:, 1:] &= m[:, :-1]
            m2[:, :-1] &= m[:, 1:]
            m2[0, :] = m2[-1, :] = False
            m2[:, 0] = m2[:, -1] = False
            m = m2
        if region is not None:
            m = m & region(self.W)
        return m

    def frames(self):
        """Oriented h-orthonormal frame per node, columns in coordinates.

        e1 is the normalized first coordinate vector, e2 completes it by
        Gram-Schmidt; the orientation agrees with v -> x (x) v.
        """
        if self._frames is None:
            h = self.metric
            e1 = np.zeros(self.shape + (2,))
            e1[..., 0] = 1.0 / np.sqrt(h[..., 0, 0])
            h12 = h[..., 0, 1]
            v = np.zeros(self.shape + (2,))
            v[..., 0] = -h12 / h[..., 0, 0]
            v[..., 1] = 1.0
            vn = np.sqrt(np.einsum("...i,...ij,...j->...", v, h, v))
            e2 = v / vn[..., None]
            self._frames = np.stack([e1, e2], axis=-1)  # [..., coord, frame]
        return self._frames

    def embed(self):
        """Hyperboloid points X(w) and coordinate tangent vectors T1, T2."""
        if self._embed is None:
            W = self.W
            s = np.sqrt(np.where(self.mask, 1.0 - np.sum(W * W, axis=-1), np.nan))
            P = np.empty(self.shape + (3,))
            P[..., 0] = W[..., 0] / s
            P[..., 1] = W[..., 1] / s
            P[..., 2] = 1.0 / s
            T = np.empty(self.shape + (3, 2))
            for i in range(2):
                E = np.zeros(3)
                E[i] = 1.0
                T[..., :, i] = (E / s[..., None]
                                + P * (W[..., i] / (s * s))[..., None])
            A = self.transport
            P = P @ A.T
            T = np.einsum("ab,...bi->...ai", A, T)
            self._embed = (P, T)
        return self._embed

    def points(self):
        return self.embed()[0]

    def frame_vectors_ambient(self):
        """Frame vectors as vectors of R^{2,1} (..., 3, frame index)."""
        _, T = self.embed()
        E = self.frames()
        return np.einsum("...ai,...ij->...aj", T, E)

    def operator_coord_from_frame(self, Bf):
        E = self.frames()
        Einv = np.linalg.inv(E)
        return np.einsum("...ij,...jk,...kl->...il", E, Bf, Einv)

    def operator_frame_from_coord(self, Bc):
        E = self.frames()
        Einv = np.linalg.inv(E)
        return np.einsum("...ij,...jk,...kl->...il", Einv, Bc, E)


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ScalarField:
    chart: KleinChart
    values: np.ndarray

    def masked(self):
        v = self.values.copy()
        v[~self.chart.mask] = np.nan
        return v


@dataclasses.dataclass
class VectorField:
    """Frame components (..., 2)."""

    chart: KleinChart
    values: np.ndarray


@dataclasses.dataclass
class OperatorField:
    """2x2 matrix per node in the local oriented orthonormal frame."""

    chart: KleinChart
    values: np.ndarray
    selfadjoint: bool = False

    def __post_init__(self):
        if self.selfadjoint:
            d = self.symmetry_defect()
            if d > 1e-12:
                raise ValueError(f"operator claimed self-adjoint but |b - b^T| = {d:.3e}")

    def symmetry_defect(self):
        m = self.chart.mask
        v = self.values
        return float(np.nanmax(np.abs(v[m][..., 0, 1] - v[m][..., 1, 0])))

    def coord_values(self):
        return self.chart.operator_coord_from_frame(self.values)

    def trace(self):
        return ScalarField(self.chart, self.values[..., 0, 0] + self.values[..., 1, 1])

    def traceless_part(self):
        tr = 0.5 * (self.values[..., 0, 0] + self.values[..., 1, 1])
        out = self.values.copy()
        out[..., 0, 0] -= tr
        out[..., 1, 1] -= tr
        return OperatorField(self.chart, out)

    def __add__(self, other):
        return OperatorField(self.chart, self.values + other.values)

    def __sub__(self, other):
        return OperatorField(self.chart, self.values - other.values)

    def __mul__(self, c):
        return OperatorField(self.chart, self.values * float(c))

    __rmul__ = __mul__


#: +pi/2 rotation in the oriented frame; J e1 = e2.
J_FRAME = np.array([[0.0, -1.0], [1.0, 0.0]])


def identity_operator(chart) -> OperatorField:
    v = np.zeros(chart.shape + (2, 2))
    v[..., 0, 0] = 1.0
    v[..., 1, 1] = 1.0
    return OperatorField(chart, v, selfadjoint=True)


def apply_J(b: OperatorField) -> OperatorField:
    return OperatorField(b.chart, np.einsum("ij,...jk->...ik", J_FRAME, b.values))


def build_klein_chart(p, spacing, margin, extent=None) -> KleinChart:
    """Chart with metric, frames and weights; curvature sanity is a test hook."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if not 0 < margin < 1:
        raise ValueError("margin must be in (0, 1)")
    return KleinChart(base=np.asarray(p, dtype=float), spacing=spacing,
                      margin=margin, extent=extent)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def central_diff(values, axis, dx):
    """Second-order central difference along a grid axis; NaN at the rim."""
    out = np.full_like(values, np.nan, dtype=float)
    sl = [slice(None)] * values.ndim
    lo = [slice(None)] * values.ndim
    hi = [slice(None)] * values.ndim
    sl[axis] = slice(1, -1)
    hi[axis] = slice(2, None)
    lo[axis] = slice(None, -2)
    out[tuple(sl)] = (values[tuple(hi)] - values[tuple(lo)]) / (2.0 * dx)
    return out


def second_diff(values, axis, dx):
    out = np.full_like(values, np.nan, dtype=float)
    sl = [slice(None)] * values.ndim
    lo = [slice(None)] * values.ndim
    hi = [slice(None)] * values.ndim
    sl[axis] = slice(1, -1)
    hi[axis] = slice(2, None)
    lo[axis] = slice(None, -2)
    out[tuple(sl)] = (values[tuple(hi)] - 2.0 * values[tuple(sl)] + values[tuple(lo)]) / dx**2
    return out


def flat_hessian(values, dx):
    """Flat Hessian of a grid scalar by central differences: (..., 2, 2)."""
    H = np.empty(values.shape + (2, 2))
    H[..., 0, 0] = second_diff(values, 0, dx)
    H[..., 1, 1] = second_diff(values, 1, dx)
    Hxy = central_diff(central_diff(values, 0, dx), 1, dx)
    H[..., 0, 1] = Hxy
    H[..., 1, 0] = Hxy
    return H


def grad_coord(values, dx):
    return np.stack([central_diff(values, 0, dx), central_diff(values, 1, dx)], axis=-1)


# ---------------------------------------------------------------------------
# core operators
# ---------------------------------------------------------------------------


def hess_minus_id(u, chart: KleinChart = None) -> OperatorField:
    """Hess u - u Id through the flat-Hessian correspondence.

    Forms ubar = u / cosh r, takes its flat Hessian in Klein coordinates by
    central differences, and reads the operator off the identity
    D^2 ubar = (cosh r)^{-1} h((Hess u - u Id) . , .).  Boundary nodes have
    no trusted one-sided stencil and carry NaN.
    """
    if isinstance(u, ScalarField):
        chart = u.chart
        u = u.values
    ubar = u / chart.cosh_r
    D2 = flat_hessian(ubar, chart.spacing)
    Bform = chart.cosh_r[..., None, None] * D2
    Bcoord = np.einsum("...ij,...jk->...ik", chart.metric_inv, Bform)
    Bf = chart.operator_frame_from_coord(Bcoord)
    Bf = 0.5 * (Bf + np.swapaxes(Bf, -1, -2))  # drop rounding-level asymmetry
    return OperatorField(chart, Bf)


def codazzi_residual_field(b: OperatorField):
    """Nodewise h-norm of the single frame component of the Codazzi 2-form."""
    chart = b.chart
    Bc = b.coord_values()
    dB = np.stack([central_diff(Bc, 0, chart.spacing),
                   central_diff(Bc, 1, chart.spacing)], axis=-3)  # [..., i, k, j]
    Gam = klein_christoffel(chart.W)
    # (nabla_i b)^k_j = d_i B^k_j + Gam^k_im B^m_j - Gam^m_ij B^k_m
    nab = (dB
           + np.einsum("...kim,...mj->...ikj", Gam, Bc)
           - np.einsum("...mij,...km->...ikj", Gam, Bc))
    R = nab[..., 0, :, 1] - nab[..., 1, :, 0]    # vector valued, coordinates
    R = R / chart.sqrt_det[..., None]            # component on the unit frame area
    return np.sqrt(np.einsum("...i,...ij,...j->...", R, chart.metric, R))


def codazzi_residual(b: OperatorField, collar=COLLAR, region=None) -> float:
    """Max over interior nodes of the Codazzi residual."""
    field = codazzi_residual_field(b)
    m = b.chart.interior_mask(collar, region=region)
    return float(np.nanmax(field[m]))


def divergence_identity_residual(b: OperatorField, collar=COLLAR, region=None) -> float:
    """Max norm of delta_h b - d tr b (vanishes for Codazzi tensors)."""
    chart = b.chart
    Bc = b.coord_values()
    dB = np.stack([central_diff(Bc, 0, chart.spacing),
                   central_diff(Bc, 1, chart.spacing)], axis=-3)
    Gam = klein_christoffel(chart.W)
    nab = (dB
           + np.einsum("...kim,...mj->...ikj", Gam, Bc)
           - np.einsum("...mij,...km->...ikj", Gam, Bc))
    div = np.einsum("...iij->...j", nab)  # (delta_h b)_j = (nabla_i b)^i_j
    tr = Bc[..., 0, 0] + Bc[..., 1, 1]
    dtr = grad_coord(tr, chart.spacing)
    diff = div - dtr
    nrm = np.sqrt(np.einsum("...i,...ij,...j->...", diff, chart.metric_inv, diff))
    m = chart.interior_mask(collar + 1, region=region)
    return float(np.nanmax(nrm[m]))


def laplace_beltrami(u, chart: KleinChart):
    """Scalar Laplacian via divergence form, central differences."""
    gi = chart.metric_inv
    sd = chart.sqrt_det
    du = grad_coord(u, chart.spacing)
    flux = sd[..., None] * np.einsum("...ij,...j->...i", gi, du)
    div = central_diff(flux[..., 0], 0, chart.spacing) + central_diff(flux[..., 1], 1, chart.spacing)
    return div / sd


def one_form_divergence(omega, chart: KleinChart):
    """delta on 1-forms (coordinate components): g^{ij}(d_i w_j - Gam^k_ij w_k)."""
    dW = np.stack([central_diff(omega, 0, chart.spacing),
                   central_diff(omega, 1, chart.spacing)], axis=-2)  # [..., i, j]
    Gam = klein_christoffel(chart.W)
    cov = dW - np.einsum("...kij,...k->...ij", Gam, omega)
    return np.einsum("...ij,...ij->...", chart.metric_inv, cov)


def lichnerowicz_residual(b: OperatorField, collar=COLLAR + 2, region=None) -> float:
    """Max norm of L(b) - tr(b)/2 with L(b) = -(Lap - 1/2) tr b + delta delta b."""
    chart = b.chart
    tr = b.values[..., 0, 0] + b.values[..., 1, 1]
    Bc = b.coord_values()
    dB = np.stack([central_diff(Bc, 0, chart.spacing),
                   central_diff(Bc, 1, chart.spacing)], axis=-3)
    Gam = klein_christoffel(chart.W)
    nab = (dB
           + np.einsum("...kim,...mj->...ikj", Gam, Bc)
           - np.einsum("...mij,...km->...ikj", Gam, Bc))
    div = np.einsum("...iij->...j", nab)
    # lower the index: (delta_h b) as a 1-form in coordinates is already covariant
    dd = one_form_divergence(div, chart)
    lap = laplace_beltrami(tr, chart)
    L = -(lap - 0.5 * tr) + dd
    m = chart.interior_mask(collar, region=region)
    return float(np.nanmax(np.abs(L - 0.5 * tr)[m]))


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def _cell_fractions(chart: KleinChart, indicator, subdiv=8):
    """Fraction of each node cell lying inside the indicator region."""
    inside = indicator(chart.W) & chart.mask
    frac = inside.astype(float)
    # refine cells adjacent to the region boundary by subsampling
    boundary = np.zeros_like(inside)
    b = inside
    for shift in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        rolled = np.roll(b, shift, axis=(0, 1))
        boundary |= b != rolled
    offs = (np.arange(subdiv) + 0.5) / subdiv - 0.5
    OX, OY = np.meshgrid(offs, offs, indexing="ij")
    pts = np.stack([OX, OY], axis=-1).reshape(-1, 2) * chart.spacing
    idx = np.argwhere(boundary)
    for i, j in idx:
        w = chart.W[i, j][None, :] + pts
        ok = indicator(w) & (np.sum(w * w, axis=-1) <= chart.extent ** 2)
        frac[i, j] = float(np.mean(ok))
    return frac


def integrate(f, chart: KleinChart = None, indicator=None, subdiv=8) -> float:
    """Area integral of a scalar field over the chart or a sub-domain.

    Plain node sum weighted by the hyperbolic area element; cells crossing
    the domain boundary are weighted by their inside fraction estimated on
    a subdivided cell.  `indicator` takes an (..., 2) array of Klein
    coordinates and returns a boolean mask.
    """
    if isinstance(f, ScalarField):
        chart = f.chart
        f = f.values
    if indicator is None:
        indicator = lambda W: np.ones(W.shape[:-1], dtype=bool)
    frac = _cell_fractions(chart, indicator, subdiv=subdiv)
    vals = np.where(chart.mask, f, 0.0) * chart.sqrt_det * frac
    return float(np.nansum(vals) * chart.spacing ** 2)


def fixed_region(rho):
    """Indicator |w| <= rho, for spacing-independent residual domains."""

    def ind(W):
        return np.sum(np.asarray(W, dtype=float) ** 2, axis=-1) <= rho ** 2

    return ind


def disc_indicator(radius, center=None):
    """Indicator of the geodesic disc of given hyperbolic radius about the base."""
    rho = np.tanh(radius)
    if center is None:
        center = np.zeros(2)

    def ind(W):
        d = W - np.asarray(center)
        return np.sum(d * d, axis=-1) <= rho ** 2

    return ind


def integrate_octagon(fun, G, n_s=48, n_t=24):
    """Integral over the fundamental octagon by a triangulated fan.

    `fun` maps an (N, 2) array of Klein coordinates (chart at the octagon
    center) to values; each of the 8 center-vertex-vertex triangles is
    integrated with a tensor Gauss-Legendre rule, radial direction first.
    The hyperbolic area element is included here.
    """
    verts = np.array([mk.klein_project(v) for v in G.octagon_vertices])
    xs, ws = np.polynomial.legendre.leggauss(n_s)
    xt, wt = np.polynomial.legendre.leggauss(n_t)
    s = 0.5 * (xs + 1.0)
    t = 0.5 * (xt + 1.0)
    ws = 0.5 * ws
    wt = 0.5 * wt
    total = 0.0
    for k in range(8):
        v0 = verts[k]
        v1 = verts[(k + 1) % 8]
        P = (1.0 - t)[:, None] * v0[None, :] + t[:, None] * v1[None, :]  # (nt, 2)
        W = s[:, None, None] * P[None, :, :]                              # (ns, nt, 2)
        cross = P[:, 0] * (v1 - v0)[1] - P[:, 1] * (v1 - v0)[0]           # (nt,)
        jac = s[:, None] * np.abs(cross)[None, :]
        vals = fun(W.reshape(-1, 2)).reshape(n_s, n_t)
        dens = klein_sqrt_det(W)
        total += float(np.einsum("s,t,st,st,st->", ws, wt, vals, dens, jac))
    return total


def octagon_indicator(G):
    """Node indicator of the fundamental octagon in center-chart coordinates."""
    verts = np.array([mk.klein_project(v) for v in G.octagon_vertices])

    def ind(W):
        W = np.asarray(W, dtype=float)
        inside = np.ones(W.shape[:-1], dtype=bool)
        for k in range(8):
            v0, v1 = verts[k], verts[(k + 1) % 8]
            e = v1 - v0
            rel = W - v0
            cross = e[0] * rel[..., 1] - e[1] * rel[..., 0]
            inside &= cross >= 0.0
        return inside

    return ind


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------


def brioschi_curvature(metric, dx):
    """Gauss curvature of a sampled metric by the Brioschi formula.

    `metric` has shape (..., 2, 2) on a uniform grid with spacing dx; the
    result is NaN within two nodes of the boundary.
    """
    E = metric[..., 0, 0]
    F = metric[..., 0, 1]
    G = metric[..., 1, 1]
    Eu = central_diff(E, 0, dx); Ev = central_diff(E, 1, dx)
    Fu = central_diff(F, 0, dx); Fv = central_diff(F, 1, dx)
    Gu = central_diff(G, 0, dx); Gv = central_diff(G, 1, dx)
    Evv = second_diff(E, 1, dx)
    Guu = second_diff(G, 0, dx)
    Fuv = central_diff(central_diff(F, 0, dx), 1, dx)
    det = E * G - F * F
    M1 = np.stack([
        np.stack([-0.5 * Evv + Fuv - 0.5 * Guu, 0.5 * Eu, Fu - 0.5 * Ev], axis=-1),
        np.stack([Fv - 0.5 * Gu, E, F], axis=-1),
        np.stack([0.5 * Gv, F, G], axis=-1),
    ], axis=-2)
    M2 = np.stack([
        np.stack([np.zeros_like(E), 0.5 * Ev, 0.5 * Gu], axis=-1),
        np.stack([0.5 * Ev, E, F], axis=-1),
        np.stack([0.5 * Gu, F, G], axis=-1),
    ], axis=-2)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (np.linalg.det(M1) - np.linalg.det(M2)) / det ** 2


def chart_curvature_defect(chart: KleinChart, collar=COLLAR + 1, region=None) -> float:
    """Max |K + 1| of the chart metric over interior nodes."""
    K = brioschi_curvature(chart.metric, chart.spacing)
    m = chart.interior_mask(collar, region=region)
    return float(np.nanmax(np.abs(K + 1.0)[m]))


# ---------------------------------------------------------------------------
# cumulative line integration (orders 2/4/6) and interpolation
# ---------------------------------------------------------------------------

_GREGORY = {
    4: [-1.0 / 12.0, -1.0 / 24.0],
    6: [-1.0 / 12.0, -1.0 / 24.0, -19.0 / 720.0, -3.0 / 160.0],
}


def _poly_start_weights(m):
    """Integration weights of int_0^{n} p over samples 0..m-1, via Vandermonde."""
    V = np.vander(np.arange(m, dtype=float), increasing=True).T
    rows = []
    for n in range(m):
        mom = np.array([n ** (k + 1) / (k + 1) for k in range(m)], dtype=float)
        rows.append(np.linalg.solve(V, mom))
    return np.array(rows)


_START_CACHE = {}


def _start_weights(m):
    if m not in _START_CACHE:
        _START_CACHE[m] = _poly_start_weights(m)
    return _START_CACHE[m]


def cumulative_integral(f, dx, order=6):
    """Antiderivative samples F with F[0] = 0 for uniformly sampled f.

    Gregory end-corrected trapezoid of the requested order (2, 4 or 6);
    entries too close to the start come from exact polynomial starting
    weights of matching degree.
    """
    f = np.asarray(f, dtype=float)
    n = len(f)
    T = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * dx)])
    if order == 2 or n < 3:
        return T
    if n <= order + 1:
        # short run: integrate the single interpolating polynomial exactly
        return dx * (_start_weights(n) @ f)
    coeffs = _GREGORY[order]
    fwd = [f]
    for _ in range(len(coeffs)):
        fwd.append(np.diff(fwd[-1]))
    F = T.copy()
    for k, c in enumerate(coeffs, start=1):
        # correction c * (backward diff at the running end + (-1)^k forward diff at 0)
        bwd_at_n = np.zeros(n)
        bwd_at_n[k:] = fwd[k][: n - k]
        corr = dx * c * (bwd_at_n + ((-1.0) ** k) * fwd[k][0])
        corr[:k] = 0.0
        F += corr
    # first `order` entries: polynomial starting weights on order+1 samples
    Wst = _start_weights(order + 1)
    for k in range(1, min(order, n)):
        F[k] = dx * float(Wst[k] @ f[: order + 1])
    F[0] = 0.0
    return F


def interp_weights_1d(x, order):
    """Lagrange weights for interpolation at offset x in [0,1] between nodes.

    Returns (shift, weights) where the stencil covers nodes
    i0+shift .. i0+shift+order for the cell [i0, i0+1].
    """
    half = (order - 1) // 2
    shift = -half
    nodes = np.arange(order + 1) + shift
    w = np.ones(order + 1)
    for a in range(order + 1):
        for bb in range(order + 1):
            if a != bb:
                w[a] *= (x - nodes[bb]) / (nodes[a] - nodes[bb])
    return shift, w


class GridInterpolator:
    """Tensor-product Lagrange interpolation on the chart grid."""

    def __init__(self, chart: KleinChart, values, order=5):
        self.chart = chart
        self.values = np.asarray(values, dtype=float)
        self.order = order

    def __call__(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.empty(len(pts))
        ax = self.chart.axis
        dx = self.chart.spacing
        nmax = len(ax) - 1
        order = self.order
        half = (order - 1) // 2
        for k, (x, y) in enumerate(pts):
            fx = (x - ax[0]) / dx
            fy = (y - ax[0]) / dx
            i0 = int(np.floor(fx))
            j0 = int(np.floor(fy))
            i0 = min(max(i0 - half, 0), nmax - order)
            j0 = min(max(j0 - half, 0), nmax - order)
            tx = fx - i0
            ty = fy - j0
            nodes = np.arange(order + 1, dtype=float)
            wx = np.ones(order + 1)
            wy = np.ones(order + 1)
            for a in range(order + 1):
                for b in range(order + 1):
                    if a != b:
                        wx[a] *= (tx - nodes[b]) / (nodes[a] - nodes[b])
                        wy[a] *= (ty - nodes[b]) / (nodes[a] - nodes[b])
            block = self.values[i0:i0 + order + 1, j0:j0 + order + 1]
            if np.any(np.isnan(block)):
                raise ValueError("interpolation stencil leaves the chart")
            out[k] = wx @ block @ wy
        return out if len(out) > 1 else float(out[0])


# ---------------------------------------------------------------------------
# seeded smooth test fields
# ---------------------------------------------------------------------------


def random_polynomial_potential(seed, degree=4, scale=1.0):
    """Reproducible smooth potential: low-degree polynomial in Klein coords.

    Returns a callable W -> values usable on any chart; coefficients decay
    with total degree so derivatives stay tame.
    """
    rng = np.random.default_rng(seed)
    terms = []
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            c = rng.normal() * scale / (1.0 + i + j) ** 2
            terms.append((i, j, c))

    def fun(W):
        W = np.asarray(W, dtype=float)
        x = W[..., 0]
        y = W[..., 1]
        out = np.zeros(W.shape[:-1])
        for i, j, c in terms:
            out += c * x**i * y**j
        return out

    return fun


# ---------------------------------------------------------------------------
# CSV dump
# ---------------------------------------------------------------------------


def field_to_csv(path, chart: KleinChart, named_fields):
    """Write node coordinates and field values, gnuplot-ready.

    `named_fields` is a dict name -> array broadcastable to the chart shape;
    operator fields are flattened row-major per node.
    """
    cols = ["x", "y"]
    data = [chart.W[..., 0][chart.mask], chart.W[..., 1][chart.mask]]
    for name, arr in named_fields.items():
        arr = np.asarray(arr)
        if arr.shape == chart.shape:
            cols.append(name)
            data.append(arr[chart.mask])
        else:
            flat = arr.reshape(chart.shape + (-1,))
            for c in range(flat.shape[-1]):
                cols.append(f"{name}_{c}")
                data.append(flat[..., c][chart.mask])
    with open(path, "w") as fh:
        fh.write("# " + " ".join(cols) + "\n")
        for row in zip(*data):
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
