"""Solid spherical harmonics, rotations, and coefficient conventions.

Two normalizations appear in this package:

* Internal ("quasi-normalized") harmonics used by every expansion and
  translation routine:

      Yq_n^m(theta, phi) = sqrt((n-|m|)! / (n+|m|)!) P_n^|m|(cos theta) e^{i m phi}

  with the Condon-Shortley phase inside P_n^m.  The regular and irregular
  solid harmonics are R_n^m = rho^n Yq_n^m and I_n^m = Yq_n^m / rho^{n+1},
  which satisfy the two-center identity

      1/|t - s| = sum_{n,m} R_n^{-m}(s) I_n^m(t)      for |s| < |t|.

  Both satisfy R_n^{-m} = conj(R_n^m), so only m >= 0 is stored, in a
  triangular layout indexed by tri_index(n, m).

* Public orthonormal harmonics Y_n^m = sqrt((2n+1)/(4 pi)) sigma_m Yq_n^m,
  sigma_m = 1 for m >= 0 and (-1)^m for m < 0.  Expansion objects expose
  their coefficients in this basis, where the reality constraint reads
  C_n^{-m} = (-1)^m conj(C_n^m).

Rotations of coefficient vectors are built per degree from Wigner matrices
D^n(alpha, beta, gamma) = exp(-i alpha Jz) exp(-i beta Jy) exp(-i gamma Jz),
computed by eigendecomposition of the tridiagonal angular momentum matrix
Jy.  In the quasi-normalized basis the transform picks up sigma factors:
T^n = sigma D^n sigma^{-1}.  T^n is unitary, so the inverse rotation is the
conjugate transpose.  All conventions here are pinned by the test suite
against brute-force least-squares fits and finite differences.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "tri_index",
    "tri_size",
    "regular_triangle",
    "irregular_triangle",
    "tri_get",
    "a_table",
    "factorial_table",
    "wigner_d",
    "rotation_blocks",
    "align_with_z",
    "rotate_coeffs",
    "tilde_to_public",
    "public_to_tilde",
]


def tri_index(n: int, m: int) -> int:
    """Flat index of (n, m) in the m >= 0 triangular layout."""
    return n * (n + 1) // 2 + m


def tri_size(p: int) -> int:
    """Number of (n, m) entries with 0 <= m <= n <= p."""
    return (p + 1) * (p + 2) // 2


def tri_get(tri: np.ndarray, n: int, m: int) -> complex:
    """Entry (n, m) of a half-stored Hermitian coefficient triangle."""
    if m >= 0:
        return tri[tri_index(n, m)]
    return np.conj(tri[tri_index(n, -m)])


def regular_triangle(offset, p: int) -> np.ndarray:
    """Regular solid harmonics R_n^m(offset) for 0 <= m <= n <= p.

    Stable three-term recurrences; no trig calls.  R_0^0 = 1, and the
    diagonal climbs as R_m^m = -sqrt((2m-1)/(2m)) (x+iy) R_{m-1}^{m-1}.
    """
    x, y, z = float(offset[0]), float(offset[1]), float(offset[2])
    out = np.zeros(tri_size(p), dtype=np.complex128)
    r2 = x * x + y * y + z * z
    xy = complex(x, y)
    out[0] = 1.0
    for m in range(1, p + 1):
        out[tri_index(m, m)] = (-np.sqrt((2 * m - 1) / (2.0 * m)) * xy
                                * out[tri_index(m - 1, m - 1)])
    for m in range(p):
        out[tri_index(m + 1, m)] = np.sqrt(2 * m + 1.0) * z * out[tri_index(m, m)]
    for m in range(p + 1):
        for n in range(m + 2, p + 1):
            out[tri_index(n, m)] = (
                (2 * n - 1) * z * out[tri_index(n - 1, m)]
                - np.sqrt(float((n - 1) ** 2 - m * m)) * r2 * out[tri_index(n - 2, m)]
            ) / np.sqrt(float((n + m) * (n - m)))
    return out


def irregular_triangle(offset, p: int) -> np.ndarray:
    """Irregular solid harmonics I_n^m(offset) for 0 <= m <= n <= p.

    Valid away from the origin; I_0^0 = 1/rho.
    """
    x, y, z = float(offset[0]), float(offset[1]), float(offset[2])
    out = np.zeros(tri_size(p), dtype=np.complex128)
    r2 = x * x + y * y + z * z
    if r2 == 0.0:
        raise ValueError("irregular solid harmonics are singular at the origin")
    xy = complex(x, y)
    out[0] = 1.0 / np.sqrt(r2)
    for m in range(1, p + 1):
        out[tri_index(m, m)] = (-np.sqrt((2 * m - 1) / (2.0 * m)) * xy / r2
                                * out[tri_index(m - 1, m - 1)])
    for m in range(p):
        out[tri_index(m + 1, m)] = (np.sqrt(2 * m + 1.0) * z / r2
                                    * out[tri_index(m, m)])
    for m in range(p + 1):
        for n in range(m + 2, p + 1):
            out[tri_index(n, m)] = (
                (2 * n - 1) * z * out[tri_index(n - 1, m)]
                - np.sqrt(float((n - 1) ** 2 - m * m)) * out[tri_index(n - 2, m)]
            ) / (r2 * np.sqrt(float((n + m) * (n - m))))
    return out


def factorial_table(nmax: int) -> np.ndarray:
    """[0!, 1!, ..., nmax!] as float64.  Overflows past 170."""
    t = np.ones(nmax + 1)
    t[1:] = np.cumprod(np.arange(1.0, nmax + 1))
    return t


def a_table(p: int) -> np.ndarray:
    """Translation coefficients A_n^m = (-1)^n / sqrt((n-m)! (n+m)!).

    Triangular m >= 0 storage up to degree p; A is even in m.
    """
    fac = factorial_table(2 * p)
    out = np.zeros(tri_size(p))
    for n in range(p + 1):
        for m in range(n + 1):
            out[tri_index(n, m)] = (-1.0) ** n / np.sqrt(fac[n - m] * fac[n + m])
    return out


_JY_EIG: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _jy_eig(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of Jy in the degree-n basis, cached."""
    hit = _JY_EIG.get(n)
    if hit is not None:
        return hit
    dim = 2 * n + 1
    jy = np.zeros((dim, dim), dtype=np.complex128)
    for m in range(-n, n + 1):
        if m < n:
            jy[m + 1 + n, m + n] += np.sqrt(n * (n + 1.0) - m * (m + 1.0)) / 2j
        if m > -n:
            jy[m - 1 + n, m + n] -= np.sqrt(n * (n + 1.0) - m * (m - 1.0)) / 2j
    lam, vec = np.linalg.eigh(jy)
    _JY_EIG[n] = (lam, vec)
    return lam, vec


def wigner_d(n: int, beta: float) -> np.ndarray:
    """Real Wigner little-d matrix d^n(beta), rows/cols ordered m = -n..n."""
    lam, vec = _jy_eig(n)
    d = (vec * np.exp(-1j * beta * lam)) @ vec.conj().T
    return d.real


def rotation_blocks(p: int, beta: float, gamma: float) -> list[np.ndarray]:
    """Per-degree coefficient transforms T^n for the rotation
    Q = Ry(beta) Rz(gamma) of the coordinate frame, quasi-normalized basis.

    A coefficient vector C (indexed m = -n..n) of an expansion in the old
    frame becomes T^n @ C in the rotated frame.  T^n is unitary.
    """
    blocks = []
    for n in range(p + 1):
        ms = np.arange(-n, n + 1)
        sig = np.where(ms >= 0, 1.0, (-1.0) ** ms)
        d = wigner_d(n, beta)
        t = (sig[:, None] / sig[None, :]) * d * np.exp(-1j * gamma * ms)[None, :]
        blocks.append(t)
    return blocks


def align_with_z(d) -> tuple[float, float, float]:
    """Euler angles (beta, gamma) with Ry(beta) Rz(gamma) mapping d to |d| z.

    Returns (beta, gamma, |d|); beta = -polar angle, gamma = -azimuth.
    """
    dx, dy, dz = float(d[0]), float(d[1]), float(d[2])
    rho = np.sqrt(dx * dx + dy * dy + dz * dz)
    if rho == 0.0:
        return 0.0, 0.0, 0.0
    beta = -np.arccos(min(1.0, max(-1.0, dz / rho)))
    gamma = -np.arctan2(dy, dx)
    return beta, gamma, rho


def rotate_coeffs(tri: np.ndarray, p: int, blocks: list[np.ndarray],
                  adjoint: bool = False) -> np.ndarray:
    """Apply per-degree rotation blocks to a half-stored triangle.

    adjoint=True applies the inverse rotation (blocks are unitary).
    """
    out = np.zeros_like(tri)
    for n in range(p + 1):
        full = np.empty(2 * n + 1, dtype=np.complex128)
        for m in range(-n, n + 1):
            full[m + n] = tri_get(tri, n, m)
        t = blocks[n]
        new = (t.conj().T @ full) if adjoint else (t @ full)
        for m in range(n + 1):
            out[tri_index(n, m)] = new[m + n]
    return out


def tilde_to_public(tri: np.ndarray, p: int, kind: str) -> np.ndarray:
    """Quasi-normalized half triangle -> orthonormal dense coefficients.

    Output is flat with (p+1)^2 entries, entry (n, m) at index n^2 + n + m.
    kind selects the public pairing convention:

    * "multipole": M_n^m = sum_k q_k rho_k^n Y_n^{-m}, so the public value
      is c_n sigma_{-m} times the internal one, c_n = sqrt((2n+1)/(4 pi)).
    * "local": phi(x) = sum L_n^m rho^n Y_n^m(x), public = internal
      divided by c_n sigma_m.

    Both satisfy C_n^{-m} = (-1)^m conj(C_n^m) for real sources.
    """
    if kind not in ("multipole", "local"):
        raise ValueError(f"unknown expansion kind {kind!r}")
    out = np.zeros((p + 1) ** 2, dtype=np.complex128)
    for n in range(p + 1):
        cn = np.sqrt((2 * n + 1) / (4.0 * np.pi))
        for m in range(-n, n + 1):
            val = tri_get(tri, n, m)
            if kind == "multipole":
                sig = 1.0 if m <= 0 else (-1.0) ** m
                out[n * n + n + m] = cn * sig * val
            else:
                sig = 1.0 if m >= 0 else (-1.0) ** m
                out[n * n + n + m] = val / (cn * sig)
    return out


def public_to_tilde(coeffs: np.ndarray, p: int, kind: str) -> np.ndarray:
    """Inverse of tilde_to_public; only m >= 0 entries are read."""
    if kind not in ("multipole", "local"):
        raise ValueError(f"unknown expansion kind {kind!r}")
    out = np.zeros(tri_size(p), dtype=np.complex128)
    for n in range(p + 1):
        cn = np.sqrt((2 * n + 1) / (4.0 * np.pi))
        for m in range(n + 1):
            sig = 1.0 if m == 0 else (-1.0) ** m
            val = coeffs[n * n + n + m]
            if kind == "multipole":
                out[tri_index(n, m)] = val / (cn * sig)
            else:
                out[tri_index(n, m)] = val * cn
    return out
