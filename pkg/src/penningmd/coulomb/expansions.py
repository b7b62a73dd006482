"""Multipole and local expansions with the four translation operators.

These are the reference implementations: explicit loops, general
(arbitrary-direction) translation formulas, one expansion object at a
time.  The tree solver reimplements the hot paths (batched, rotation plus
axial shift) and is tested against this module.

Coefficients are stored in the orthonormal-harmonic convention described
in `harmonics`, nondimensionalized by a length `scale`: multipole entry
(n, m) holds M_n^m / scale^n and local entry (n, m) holds L_n^m scale^n.
Without this, coefficients of micron-sized sources underflow float64 near
n = 30.  The 1/(4 pi eps0) prefactor enters only at evaluation, so the
expansion algebra is pure charge geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..constants import KE
from .harmonics import (
    a_table,
    align_with_z,
    factorial_table,
    irregular_triangle,
    public_to_tilde,
    regular_triangle,
    rotate_coeffs,
    rotation_blocks,
    tilde_to_public,
    tri_get,
    tri_index,
    tri_size,
)

__all__ = [
    "MultipoleExpansion",
    "LocalExpansion",
    "p2m",
    "m2m",
    "m2l",
    "l2l",
    "eval_multipole",
    "eval_local",
]


def _check_fields(center, order, coefficients, scale):
    center = np.asarray(center, dtype=float)
    if center.shape != (3,):
        raise ValueError("center must be a 3-vector")
    if order < 0:
        raise ValueError("order must be >= 0")
    if coefficients.shape != ((order + 1) ** 2,):
        raise ValueError(
            f"expected {(order + 1) ** 2} coefficients for order {order}, "
            f"got {coefficients.shape}")
    if not scale > 0:
        raise ValueError("scale must be positive")
    return center


@dataclass(frozen=True)
class MultipoleExpansion:
    """Far-field expansion of a compact charge distribution.

    coefficients: flat (p+1)^2 complex array, entry (n, m) at n^2 + n + m,
    holding M_n^m / scale^n with M_n^m = sum_k q_k rho_k^n Y_n^{-m}.
    radius is the enclosing-sphere radius of the sources about center;
    evaluation converges for targets farther than that.
    """

    center: np.ndarray
    order: int
    coefficients: np.ndarray
    scale: float = 1.0
    radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "center",
            _check_fields(self.center, self.order, self.coefficients, self.scale))

    def coef(self, n: int, m: int) -> complex:
        if not (0 <= n <= self.order and abs(m) <= n):
            raise IndexError(f"(n, m) = ({n}, {m}) outside order {self.order}")
        return self.coefficients[n * n + n + m]


@dataclass(frozen=True)
class LocalExpansion:
    """Near-field expansion of the potential of distant charges.

    coefficients: flat (p+1)^2 complex array, entry (n, m) at n^2 + n + m,
    holding L_n^m scale^n with phi(x) = sum L_n^m rho^n Y_n^m(x - center).
    radius bounds the region around center where the expansion is valid.
    """

    center: np.ndarray
    order: int
    coefficients: np.ndarray
    scale: float = 1.0
    radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "center",
            _check_fields(self.center, self.order, self.coefficients, self.scale))

    def coef(self, n: int, m: int) -> complex:
        if not (0 <= n <= self.order and abs(m) <= n):
            raise IndexError(f"(n, m) = ({n}, {m}) outside order {self.order}")
        return self.coefficients[n * n + n + m]


# ---------------------------------------------------------------------------
# internal tilde-basis workhorses (scaled offsets, half-stored triangles)

def _p2m_tilde(positions, charges, center, p, scale):
    out = np.zeros(tri_size(p), dtype=np.complex128)
    for xk, qk in zip(positions, charges):
        r = regular_triangle((xk - center) / scale, p)
        out += qk * np.conj(r)
    return out


def _ipow_sign(a: int, b: int, c: int) -> float:
    """i^(|a|-|b|-|c|); the exponent is always even, so the value is +-1."""
    e = abs(a) - abs(b) - abs(c)
    return -1.0 if (e // 2) % 2 else 1.0


def _m2m_tilde(tri, p, d):
    """General multipole shift; d = old_center - new_center, scaled units."""
    atab = a_table(p)
    yt = regular_triangle(d, p)
    out = np.zeros(tri_size(p), dtype=np.complex128)
    for j in range(p + 1):
        for k in range(j + 1):
            acc = 0.0j
            for n in range(j + 1):
                for m in range(-n, n + 1):
                    if abs(k - m) > j - n:
                        continue
                    acc += (tri_get(tri, j - n, k - m) * _ipow_sign(k, m, k - m)
                            * atab[tri_index(n, abs(m))]
                            * atab[tri_index(j - n, abs(k - m))]
                            * tri_get(yt, n, -m))
            out[tri_index(j, k)] = acc / atab[tri_index(j, k)]
    return out


def _m2l_tilde(tri, ps, p, d):
    """General multipole-to-local; d = source_center - local_center, scaled."""
    atab = a_table(p + ps)
    it = irregular_triangle(d, p + ps)
    out = np.zeros(tri_size(p), dtype=np.complex128)
    for j in range(p + 1):
        for k in range(j + 1):
            acc = 0.0j
            for n in range(ps + 1):
                for m in range(-n, n + 1):
                    acc += (tri_get(tri, n, m) * _ipow_sign(k - m, k, m)
                            * atab[tri_index(n, abs(m))]
                            * atab[tri_index(j, k)]
                            * tri_get(it, j + n, m - k)
                            / ((-1.0) ** n * atab[tri_index(j + n, abs(m - k))]))
            out[tri_index(j, k)] = acc
    return out


def _l2l_tilde(tri, p, d):
    """General local shift; d = old_center - new_center, scaled units."""
    atab = a_table(p)
    yt = regular_triangle(d, p)
    out = np.zeros(tri_size(p), dtype=np.complex128)
    for j in range(p + 1):
        for k in range(j + 1):
            acc = 0.0j
            for n in range(j, p + 1):
                for m in range(-n, n + 1):
                    if abs(m - k) > n - j:
                        continue
                    acc += (tri_get(tri, n, m) * _ipow_sign(m, m - k, k)
                            * atab[tri_index(n - j, abs(m - k))]
                            * atab[tri_index(j, k)]
                            * tri_get(yt, n - j, m - k)
                            / ((-1.0) ** (n + j) * atab[tri_index(n, abs(m))]))
            out[tri_index(j, k)] = acc
    return out


def _eval_multipole_tilde(tri, p, u):
    """Scaled potential and gradient of a multipole triangle at offset u.

    Returns (sum_nm M_n^m I_n^m(u), gradient of the same); caller applies
    the 1/scale factors and 1/(4 pi eps0).
    """
    it = irregular_triangle(u, p + 1)
    phi = 0.0j
    gz = 0.0j
    gp = 0.0j
    for n in range(p + 1):
        for m in range(-n, n + 1):
            c = tri_get(tri, n, m)
            phi += c * tri_get(it, n, m)
            gz += -c * np.sqrt(float((n + 1) ** 2 - m * m)) * tri_get(it, n + 1, m)
            sgn = 1.0 if m >= 0 else -1.0
            gp += (c * sgn * np.sqrt(float((n + m + 1) * (n + m + 2)))
                   * tri_get(it, n + 1, m + 1))
    return phi.real, np.array([gp.real, gp.imag, gz.real])


def _eval_local_tilde(tri, p, u):
    """Scaled potential and gradient of a local triangle at offset u."""
    rt = regular_triangle(u, p)
    phi = 0.0j
    gz = 0.0j
    gp = 0.0j
    for n in range(p + 1):
        for m in range(-n, n + 1):
            c = tri_get(tri, n, m)
            phi += c * tri_get(rt, n, m)
            if n == 0:
                continue
            if abs(m) <= n - 1:
                gz += c * np.sqrt(float(n * n - m * m)) * tri_get(rt, n - 1, m)
            if abs(m + 1) <= n - 1:
                sgn = 1.0 if m >= 0 else -1.0
                gp += (c * sgn * np.sqrt(float((n - m) * (n - m - 1)))
                       * tri_get(rt, n - 1, m + 1))
    return phi.real, np.array([gp.real, gp.imag, gz.real])


# ---------------------------------------------------------------------------
# public operations

def p2m(positions, charges, center, order: int,
        scale: float | None = None) -> MultipoleExpansion:
    """Form the multipole expansion of point charges about a center.

    charges may be a scalar (all equal) or a length-N array.  scale
    defaults to the enclosing radius (1.0 for a single coincident point).
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    center = np.asarray(center, dtype=float)
    charges = np.broadcast_to(np.asarray(charges, dtype=float),
                              positions.shape[0])
    radius = float(np.max(np.linalg.norm(positions - center, axis=1)))
    if scale is None:
        scale = radius if radius > 0 else 1.0
    tri = _p2m_tilde(positions, charges, center, order, scale)
    return MultipoleExpansion(center, order,
                              tilde_to_public(tri, order, "multipole"),
                              scale=scale, radius=radius)


def m2m(exp: MultipoleExpansion, new_center) -> MultipoleExpansion:
    """Translate a multipole expansion to a new center (exact at fixed p)."""
    new_center = np.asarray(new_center, dtype=float)
    d = (exp.center - new_center) / exp.scale
    tri = public_to_tilde(exp.coefficients, exp.order, "multipole")
    out = _m2m_tilde(tri, exp.order, d)
    radius = exp.radius + float(np.linalg.norm(exp.center - new_center))
    return MultipoleExpansion(new_center, exp.order,
                              tilde_to_public(out, exp.order, "multipole"),
                              scale=exp.scale, radius=radius)


def m2l(exp: MultipoleExpansion, local_center,
        order: int | None = None) -> LocalExpansion:
    """Convert a multipole expansion to a local one about a distant center.

    Requires separation > 2x the source enclosing radius; violating that
    leaves the local expansion divergent inside its own box.
    """
    local_center = np.asarray(local_center, dtype=float)
    dist = float(np.linalg.norm(exp.center - local_center))
    if dist <= 2.0 * exp.radius:
        raise ValueError(
            f"not well-separated: center distance {dist:.3e} <= "
            f"2 x source radius {exp.radius:.3e}")
    p = exp.order if order is None else order
    d = (exp.center - local_center) / exp.scale
    tri = public_to_tilde(exp.coefficients, exp.order, "multipole")
    out = _m2l_tilde(tri, exp.order, p, d) / exp.scale
    return LocalExpansion(local_center, p,
                          tilde_to_public(out, p, "local"),
                          scale=exp.scale, radius=dist - exp.radius)


def l2l(exp: LocalExpansion, new_center) -> LocalExpansion:
    """Re-center a local expansion (exact at fixed p)."""
    new_center = np.asarray(new_center, dtype=float)
    shift = float(np.linalg.norm(exp.center - new_center))
    if exp.radius > 0 and shift > exp.radius:
        raise ValueError(
            f"new center {shift:.3e} away lies outside the expansion's "
            f"validity radius {exp.radius:.3e}")
    d = (exp.center - new_center) / exp.scale
    tri = public_to_tilde(exp.coefficients, exp.order, "local")
    out = _l2l_tilde(tri, exp.order, d)
    return LocalExpansion(new_center, exp.order,
                          tilde_to_public(out, exp.order, "local"),
                          scale=exp.scale, radius=exp.radius - shift)


def eval_multipole(exp: MultipoleExpansion, targets):
    """Potential (V) and field (V/m) of the expansion at target points.

    Targets must lie outside the source enclosing sphere.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    tri = public_to_tilde(exp.coefficients, exp.order, "multipole")
    phi = np.empty(targets.shape[0])
    efield = np.empty((targets.shape[0], 3))
    s = exp.scale
    for i, t in enumerate(targets):
        u = (t - exp.center) / s
        if exp.radius > 0 and np.linalg.norm(t - exp.center) <= exp.radius:
            raise ValueError(f"target {i} inside the source region")
        val, grad = _eval_multipole_tilde(tri, exp.order, u)
        phi[i] = KE * val / s
        efield[i] = -KE * grad / s**2
    return phi, efield


def eval_local(exp: LocalExpansion, targets):
    """Potential (V) and field (V/m) of the local expansion at targets."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    tri = public_to_tilde(exp.coefficients, exp.order, "local")
    phi = np.empty(targets.shape[0])
    efield = np.empty((targets.shape[0], 3))
    s = exp.scale
    for i, t in enumerate(targets):
        u = (t - exp.center) / s
        val, grad = _eval_local_tilde(tri, exp.order, u)
        phi[i] = KE * val
        efield[i] = -KE * grad / s
    return phi, efield


# rotation-based fast translations (axial shift after aligning with z) are
# exercised by the tree solver; kept here for reference and testing
def axial_m2m_matrix(p: int, t: float) -> np.ndarray:
    """Dense per-(j,k) -> (j-n,k) axial multipole shift factors.

    Returns F with out[j,k] = sum_n F[j,k,n] in[j-n,k] for a shift of the
    center by -t z (old center sits at +t z relative to the new one), in
    scaled units.
    """
    atab = a_table(p)
    fac = np.zeros((tri_size(p), p + 1))
    for j in range(p + 1):
        for k in range(j + 1):
            for n in range(j - k + 1):
                fac[tri_index(j, k), n] = (t ** n * atab[tri_index(n, 0)]
                                           * atab[tri_index(j - n, k)]
                                           / atab[tri_index(j, k)])
    return fac


def axial_m2l_matrix(p: int, ps: int, t: float) -> np.ndarray:
    """Axial multipole-to-local factors for a source center at +t z."""
    atab = a_table(max(p, ps))
    fac2 = factorial_table(p + ps)
    out = np.zeros((tri_size(p), ps + 1))
    for j in range(p + 1):
        for k in range(j + 1):
            for n in range(k, ps + 1):
                out[tri_index(j, k), n] = ((-1.0) ** (j + k)
                                           * atab[tri_index(j, k)]
                                           * atab[tri_index(n, k)]
                                           * fac2[j + n] / t ** (j + n + 1))
    return out


def axial_l2l_matrix(p: int, t: float) -> np.ndarray:
    """Axial local re-centering factors for an old center at +t z."""
    atab = a_table(p)
    out = np.zeros((tri_size(p), p + 1))
    for j in range(p + 1):
        for k in range(j + 1):
            for n in range(j, p + 1):
                if k > n:
                    continue
                out[tri_index(j, k), n] = (atab[tri_index(n - j, 0)]
                                           * atab[tri_index(j, k)]
                                           * t ** (n - j)
                                           / ((-1.0) ** (n + j)
                                              * atab[tri_index(n, k)]))
    return out
