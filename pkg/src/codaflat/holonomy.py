r"""Genus-2 holonomy from a regular octagon, and translation-cocycle algebra.

The surface group is realized by side pairings of the regular hyperbolic
octagon with vertex angle pi/4 centered at (0,0,1): the four generators
a1, b1, a2, b2 identify sides in the canonical pattern whose vertex cycle
gives the relator [a1,b1][a2,b2].  The pairing matrices are computed once
in extended precision so that the relator closes to float64 roundoff.

Translation cocycles t: pi_1 -> R^{2,1} obey t_{vw} = rho(v) t_w + t_v and
are stored by their four generator values.  Z^1, the coboundaries B^1 and
an orthogonal complement realizing H^1 are obtained by dense linear
algebra on the 12 generator components (dimensions 9 / 3 / 6 for genus 2).
"""

from __future__ import annotations

import dataclasses
import functools
import json

import mpmath
import numpy as np

from . import minkowski as mk

GENERATOR_NAMES = ("a1", "b1", "a2", "b2")

#: Relator [a1,b1][a2,b2] as (generator index, exponent) letters.
RELATOR = (
    (0, 1), (1, 1), (0, -1), (1, -1),
    (2, 1), (3, 1), (2, -1), (3, -1),
)

RELATOR_TOL = 1e-10
ANGLE_TOL = 1e-8
SIDE_TOL = 1e-10


def reduce_word(letters):
    """Freely reduce a sequence of (generator index, exponent +-1) letters."""
    out = []
    for g, e in letters:
        if e not in (1, -1):
            raise ValueError("letters must carry exponent +1 or -1")
        if out and out[-1][0] == g and out[-1][1] == -e:
            out.pop()
        else:
            out.append((int(g), int(e)))
    return tuple(out)


@dataclasses.dataclass(frozen=True)
class Word:
    """Freely reduced word in the four generators."""

    letters: tuple

    def __init__(self, letters=()):
        object.__setattr__(self, "letters", reduce_word(letters))

    def __mul__(self, other):
        return Word(self.letters + other.letters)

    def inverse(self):
        return Word(tuple((g, -e) for g, e in reversed(self.letters)))

    def __len__(self):
        return len(self.letters)

    @staticmethod
    def generator(i, exponent=1):
        return Word(((i, exponent),))


# ---------------------------------------------------------------------------
# octagon construction (extended precision, done once)
# ---------------------------------------------------------------------------


def _mp_frame_transport(p, q):
    """mpmath analogue of minkowski.frame_from_segment."""
    dot = lambda u, v: u[0] * v[0] + u[1] * v[1] - u[2] * v[2]
    d = mpmath.acosh(-dot(p, q))
    w = [q[i] + dot(q, p) * p[i] for i in range(3)]
    nw = mpmath.sqrt(dot(w, w))
    u1 = [(d / nw) * w[i] / d for i in range(3)]  # unit tangent toward q
    u2 = [
        p[1] * u1[2] - p[2] * u1[1],
        p[2] * u1[0] - p[0] * u1[2],
        -(p[0] * u1[1] - p[1] * u1[0]),
    ]
    F = mpmath.matrix(3, 3)
    for i in range(3):
        F[i, 0], F[i, 1], F[i, 2] = u1[i], u2[i], p[i]
    return F


def _mp_isometry_from_segments(p, q, p2, q2):
    eta = mpmath.diag([1, 1, -1])
    F1 = _mp_frame_transport(p, q)
    F2 = _mp_frame_transport(p2, q2)
    return F2 * (eta * F1.T * eta)


@functools.lru_cache(maxsize=1)
def _octagon_matrices():
    """Vertices and side-pairing generators at 50-digit working precision."""
    with mpmath.workdps(50):
        coshR = 3 + 2 * mpmath.sqrt(2)
        sinhR = mpmath.sqrt(coshR**2 - 1)
        verts = []
        for k in range(8):
            ang = mpmath.pi * k / 4
            verts.append([sinhR * mpmath.cos(ang), sinhR * mpmath.sin(ang), coshR])

        def pairing(i, j):
            # side j -> side i with V_j -> V_{i+1}, V_{j+1} -> V_i
            return _mp_isometry_from_segments(
                verts[j], verts[(j + 1) % 8], verts[(i + 1) % 8], verts[i]
            )

        eta = mpmath.diag([1, 1, -1])
        inv = lambda M: eta * M.T * eta
        gens_mp = [pairing(4, 6), inv(pairing(5, 7)), pairing(0, 2), inv(pairing(1, 3))]
        gens = [np.array(M.tolist(), dtype=float) for M in gens_mp]
        vertices = np.array([[float(c) for c in v] for v in verts])
    return vertices, gens


@dataclasses.dataclass(frozen=True, eq=False)
class SurfaceGroup:
    """Genus-2 Fuchsian group with its fundamental octagon."""

    generators: tuple            # four 3x3 arrays (a1, b1, a2, b2)
    octagon_vertices: np.ndarray  # (8, 3) points on the hyperboloid
    center: np.ndarray
    circumradius: float
    inradius: float

    def rho(self, word: Word) -> np.ndarray:
        """Holonomy matrix of a word."""
        M = np.eye(3)
        for g, e in word.letters:
            M = M @ (self.generators[g] if e == 1 else mk.mink_inverse(self.generators[g]))
        return M

    def relator_defect(self) -> float:
        return float(np.max(np.abs(self.rho(Word(RELATOR)) - np.eye(3))))

    @functools.lru_cache(maxsize=8)
    def elements_up_to(self, length: int):
        """All distinct group elements of word length <= length.

        Returns a list of (Word, matrix) pairs; deduplication is by matrix
        entries, which is safe at this scale for a discrete group.
        """
        seen = {self._key(np.eye(3)): (Word(), np.eye(3))}
        frontier = [(Word(), np.eye(3))]
        for _ in range(length):
            nxt = []
            for w, M in frontier:
                for g in range(4):
                    for e in (1, -1):
                        w2 = w * Word.generator(g, e)
                        if len(w2) <= len(w):
                            continue
                        M2 = M @ (self.generators[g] if e == 1 else mk.mink_inverse(self.generators[g]))
                        k = self._key(M2)
                        if k not in seen:
                            seen[k] = (w2, M2)
                            nxt.append((w2, M2))
            frontier = nxt
        return list(seen.values())

    @staticmethod
    def _key(M):
        return tuple(np.round(M, 6).ravel())

    def side_pairing_defect(self) -> float:
        """Max endpoint mismatch of the four side identifications."""
        V = self.octagon_vertices
        worst = 0.0
        # generator k carries source side onto target side; the assignments
        # below mirror the construction in _octagon_matrices.
        jobs = [
            (self.generators[0], (6, 7), (5, 4)),
            (mk.mink_inverse(self.generators[1]), (7, 0), (6, 5)),
            (self.generators[2], (2, 3), (1, 0)),
            (mk.mink_inverse(self.generators[3]), (3, 4), (2, 1)),
        ]
        for M, (j0, j1), (i0, i1) in jobs:
            worst = max(worst, float(np.max(np.abs(M @ V[j0] - V[i0]))))
            worst = max(worst, float(np.max(np.abs(M @ V[j1] - V[i1]))))
        return worst

    def vertex_angles(self) -> np.ndarray:
        V = self.octagon_vertices
        angles = []
        for k in range(8):
            u = mk.log_map(V[k], V[(k - 1) % 8])
            v = mk.log_map(V[k], V[(k + 1) % 8])
            c = mk.mink_dot(u, v) / np.sqrt(mk.mink_dot(u, u) * mk.mink_dot(v, v))
            angles.append(np.arccos(np.clip(c, -1.0, 1.0)))
        return np.array(angles)

    def validate(self):
        """Raise ValueError if any construction invariant fails."""
        for i, g in enumerate(self.generators):
            mk.check_linear_isometry(g, tol=1e-11, what=f"generator {GENERATOR_NAMES[i]}")
        rd = self.relator_defect()
        if rd > RELATOR_TOL:
            raise ValueError(f"relator defect {rd:.3e} exceeds {RELATOR_TOL:.1e}")
        sp = self.side_pairing_defect()
        if sp > SIDE_TOL:
            raise ValueError(f"side pairing endpoint mismatch {sp:.3e}")
        ang = self.vertex_angles()
        if abs(float(np.sum(ang)) - 2 * np.pi) > ANGLE_TOL:
            raise ValueError("octagon vertex angles do not sum to 2*pi")
        return self


def build_genus2_octagon() -> SurfaceGroup:
    """Regular octagon (vertex angle pi/4) with canonical side pairings.

    The circumradius satisfies cosh R = 3 + 2*sqrt(2); the area is 4*pi by
    Gauss-Bonnet.  All construction invariants are checked before return.
    """
    vertices, gens = _octagon_matrices()
    R = float(np.arccosh(3 + 2 * np.sqrt(2.0)))
    rin = float(np.arctanh(np.tanh(R) * np.cos(np.pi / 8)))
    G = SurfaceGroup(
        generators=tuple(gens),
        octagon_vertices=vertices,
        center=mk.BASEPOINT.copy(),
        circumradius=R,
        inradius=rin,
    )
    return G.validate()


# ---------------------------------------------------------------------------
# translation cocycles
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class TransCocycle:
    """Translation part candidate: one vector of R^{2,1} per generator."""

    values: np.ndarray  # (4, 3)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (4, 3):
            raise ValueError("cocycle values must be a (4, 3) array")
        object.__setattr__(self, "values", v)

    def flat(self):
        return self.values.ravel().copy()

    @staticmethod
    def from_flat(x):
        return TransCocycle(np.asarray(x, dtype=float).reshape(4, 3))

    def __add__(self, other):
        return TransCocycle(self.values + other.values)

    def __sub__(self, other):
        return TransCocycle(self.values - other.values)

    def __mul__(self, c):
        return TransCocycle(self.values * float(c))

    __rmul__ = __mul__


def cocycle_extend(t: TransCocycle, w: Word, G: SurfaceGroup) -> np.ndarray:
    """Value of the cocycle on the group element represented by w.

    Uses t_{vw} = rho(v) t_w + t_v letter by letter; inverse letters get
    t_{g^-1} = -rho(g)^-1 t_g.  Well-defined on elements (not only words)
    exactly when t lies in Z^1.
    """
    acc = np.zeros(3)
    M = np.eye(3)
    for g, e in w.letters:
        rho_g = G.generators[g] if e == 1 else mk.mink_inverse(G.generators[g])
        t_g = t.values[g] if e == 1 else -(rho_g @ t.values[g])
        acc = acc + M @ t_g
        M = M @ rho_g
    return acc


def relator_extension_matrix(G: SurfaceGroup) -> np.ndarray:
    """3x12 matrix of t -> (extension of t over the relator)."""
    cols = []
    for k in range(12):
        t = TransCocycle.from_flat(np.eye(12)[k])
        cols.append(cocycle_extend(t, Word(RELATOR), G))
    return np.array(cols).T


def coboundary_cocycle(t0, G: SurfaceGroup) -> TransCocycle:
    """The coboundary alpha -> rho(alpha) t0 - t0."""
    t0 = np.asarray(t0, dtype=float)
    return TransCocycle(np.array([g @ t0 - t0 for g in G.generators]))


def coboundary_matrix(G: SurfaceGroup) -> np.ndarray:
    """12x3 matrix of t0 -> coboundary cocycle components."""
    return np.column_stack([coboundary_cocycle(e, G).flat() for e in np.eye(3)])


@dataclasses.dataclass(frozen=True)
class CocycleBasis:
    """Orthonormal bases of Z^1, B^1 and an H^1-realizing complement."""

    z1: np.ndarray      # (12, 9)
    b1: np.ndarray      # (12, 3)
    h1: np.ndarray      # (12, 6), orthogonal complement of B^1 inside Z^1

    def h1_project(self, t: TransCocycle) -> np.ndarray:
        """Coordinates of the class of t in the H^1 complement basis."""
        return self.h1.T @ t.flat()

    def h1_cocycle(self, coeffs) -> TransCocycle:
        return TransCocycle.from_flat(self.h1 @ np.asarray(coeffs, dtype=float))

    def z1_defect(self, t: TransCocycle) -> float:
        x = t.flat()
        return float(np.linalg.norm(x - self.z1 @ (self.z1.T @ x)))

    def project_z1(self, t: TransCocycle) -> TransCocycle:
        x = t.flat()
        return TransCocycle.from_flat(self.z1 @ (self.z1.T @ x))


def cocycle_basis(G: SurfaceGroup, rank_tol=1e-8) -> CocycleBasis:
    """Compute Z^1 (dim 9), B^1 (dim 3) and the H^1 complement (dim 6).

    The auxiliary inner product used for orthogonality is the Euclidean one
    on the 12 generator components; the Minkowski form is indefinite and
    unsuitable for this piece of linear algebra.
    """
    M = relator_extension_matrix(G)
    u, s, vt = np.linalg.svd(M)
    ker_dim = int(np.sum(s <= rank_tol * s[0])) + (12 - len(s))
    if ker_dim != 9:
        raise ValueError(f"rank deficiency: dim Z^1 = {ker_dim}, expected 9 "
                         f"(singular values {s})")
    z1 = vt[3:, :].T  # orthonormal kernel basis

    B = coboundary_matrix(G)
    ub, sb, vbt = np.linalg.svd(B, full_matrices=False)
    if int(np.sum(sb > rank_tol * sb[0])) != 3:
        raise ValueError("coboundary map is rank deficient; holonomy not irreducible?")
    b1 = ub[:, :3]

    # sanity: coboundaries are cocycles
    if float(np.max(np.abs(M @ b1))) > 1e-8:
        raise ValueError("coboundaries fail the relator constraint")

    # H^1 complement: part of Z^1 orthogonal to B^1
    proj = z1 @ (z1.T @ b1)           # B^1 expressed inside Z^1
    resid = z1 - b1 @ (b1.T @ z1)      # project B^1 out of the Z^1 basis
    uh, sh, vht = np.linalg.svd(resid, full_matrices=False)
    h1 = uh[:, :6]
    if sh[5] <= rank_tol or (len(sh) > 6 and sh[6] > 1e-6):
        raise ValueError(f"H^1 extraction rank check failed (spectrum {sh})")
    del proj
    return CocycleBasis(z1=z1, b1=b1, h1=h1)


def peripheral_reduction(t, R, p, theta, tol=1e-9):
    """Solve (R - Id) t0 = t on the plane orthogonal to the axis p.

    R must be the elliptic rotation of angle theta about p with theta not a
    multiple of 2*pi.  Returns (t0, defect) where defect = <t, p>/<p, p> is
    the axis component of t; t0 is None when |defect| > tol, signalling a
    peripherally non-trivial cocycle value.
    """
    theta = float(theta)
    if abs(np.sin(theta / 2.0)) < 1e-12:
        raise ValueError("rotation angle is a multiple of 2*pi; R - Id not invertible on p^perp")
    t = np.asarray(t, dtype=float)
    p = np.asarray(p, dtype=float)
    defect = float(mk.mink_dot(t, p) / mk.mink_dot(p, p))
    # orthonormal spacelike basis of p^perp
    A = mk.transport_to(mk.project_to_hyperboloid(p) if mk.mink_dot(p, p) != -1.0 else p)
    u1, u2 = A[:, 0], A[:, 1]
    R2 = np.array([[mk.mink_dot(u1, R @ u1), mk.mink_dot(u1, R @ u2)],
                   [mk.mink_dot(u2, R @ u1), mk.mink_dot(u2, R @ u2)]])
    rhs = np.array([mk.mink_dot(t, u1), mk.mink_dot(t, u2)])
    x = np.linalg.solve(R2 - np.eye(2), rhs)
    t0 = x[0] * u1 + x[1] * u2
    if abs(defect) > tol:
        return None, defect
    return t0, defect


# ---------------------------------------------------------------------------
# variation of holonomy families
# ---------------------------------------------------------------------------


def _skew_project(X):
    """Closest Minkowski-skew matrix (so(2,1) part) of X."""
    return 0.5 * (X - mk.ETA @ X.T @ mk.ETA)


def holonomy_variation(family, h, validate=True):
    """Central-difference derivative cocycle of a family of representations.

    ``family(s)`` must return the four generator matrices at parameter s;
    members are validated as isometries.  Returns the so(2,1)-valued
    cocycle tau_alpha ~ d/ds rho_s(alpha) rho_0(alpha)^{-1} per generator.
    """
    gp = family(+h)
    gm = family(-h)
    g0 = family(0.0)
    taus = []
    for i in range(4):
        if validate:
            for M in (gp[i], gm[i], g0[i]):
                mk.check_linear_isometry(M, tol=1e-8, what=f"family generator {GENERATOR_NAMES[i]}")
        dot = (gp[i] - gm[i]) / (2.0 * h)
        taus.append(_skew_project(dot @ mk.mink_inverse(g0[i])))
    return taus


def variation_cocycle_residual(family, h):
    """Residual of the Ad-cocycle condition on pairwise products.

    For each generator pair (alpha, beta) compares the derivative of
    rho(alpha beta) with tau_alpha + Ad(rho(alpha)) tau_beta; the result is
    O(h^2) for a differentiable family.
    """
    taus = holonomy_variation(family, h)
    g0 = family(0.0)
    worst = 0.0
    for i in range(4):
        for j in range(4):
            prod_family = lambda s, i=i, j=j: [family(s)[i] @ family(s)[j]] * 4
            tau_ij = holonomy_variation(prod_family, h, validate=False)[0]
            pred = taus[i] + g0[i] @ taus[j] @ mk.mink_inverse(g0[i])
            worst = max(worst, float(np.max(np.abs(tau_ij - pred))))
    return worst


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _fmt(x):
    return float(f"{float(x):.17g}")


def group_to_json(G: SurfaceGroup) -> str:
    """JSON document of the group (matrices row-major, 17 significant digits)."""
    doc = {
        "generators": {
            name: [_fmt(v) for v in np.asarray(g).ravel()]
            for name, g in zip(GENERATOR_NAMES, G.generators)
        },
        "relator": [[g, e] for g, e in RELATOR],
        "octagon_vertices": [[_fmt(c) for c in v] for v in G.octagon_vertices],
        "circumradius": _fmt(G.circumradius),
        "inradius": _fmt(G.inradius),
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def group_from_json(text: str) -> SurfaceGroup:
    doc = json.loads(text)
    gens = tuple(np.array(doc["generators"][n], dtype=float).reshape(3, 3)
                 for n in GENERATOR_NAMES)
    verts = np.array(doc["octagon_vertices"], dtype=float)
    return SurfaceGroup(
        generators=gens,
        octagon_vertices=verts,
        center=mk.BASEPOINT.copy(),
        circumradius=float(doc["circumradius"]),
        inradius=float(doc["inradius"]),
    ).validate()


def cocycle_to_json(t: TransCocycle) -> str:
    return json.dumps(
        {"values": {n: [_fmt(c) for c in t.values[i]] for i, n in enumerate(GENERATOR_NAMES)}},
        indent=2,
        sort_keys=True,
    )


def cocycle_from_json(text: str) -> TransCocycle:
    doc = json.loads(text)
    return TransCocycle(np.array([doc["values"][n] for n in GENERATOR_NAMES], dtype=float))
