"""Solid-harmonic recurrences, rotations, and ladder identities.

Oracles: scipy Legendre functions, the 1/|t-s| addition identity, central
finite differences, and brute-force least-squares fits of the rotation
matrices from sampled directions.
"""

import numpy as np
import pytest
from scipy.special import lpmv

from penningmd.coulomb import harmonics as H


def _yq_direct(n, m, vec):
    """Quasi-normalized surface harmonic from scipy's Legendre functions."""
    from math import factorial
    rho = np.linalg.norm(vec)
    am = abs(m)
    norm = np.sqrt(factorial(n - am) / factorial(n + am))
    val = norm * lpmv(am, n, vec[2] / rho) * np.exp(
        1j * m * np.arctan2(vec[1], vec[0]))
    return val


def test_regular_against_scipy(rng):
    v = rng.normal(size=3)
    rho = np.linalg.norm(v)
    tri = H.regular_triangle(v, 7)
    for n in range(8):
        for m in range(-n, n + 1):
            ref = rho**n * _yq_direct(n, m, v)
            assert H.tri_get(tri, n, m) == pytest.approx(ref, abs=1e-12 * rho**n)


def test_irregular_against_scipy(rng):
    v = rng.normal(size=3)
    rho = np.linalg.norm(v)
    tri = H.irregular_triangle(v, 7)
    for n in range(8):
        for m in range(-n, n + 1):
            ref = _yq_direct(n, m, v) / rho ** (n + 1)
            assert H.tri_get(tri, n, m) == pytest.approx(ref, abs=1e-12 / rho**n)


def test_irregular_singular_origin():
    with pytest.raises(ValueError, match="singular"):
        H.irregular_triangle(np.zeros(3), 4)


def test_addition_identity(rng):
    """1/|t - s| = sum_nm R_n^{-m}(s) I_n^m(t) for |s| < |t|."""
    p = 24
    s = rng.normal(size=3) * 0.25
    t = rng.normal(size=3)
    t *= 4.0 / np.linalg.norm(t)
    r = H.regular_triangle(s, p)
    i = H.irregular_triangle(t, p)
    acc = 0.0j
    for n in range(p + 1):
        for m in range(-n, n + 1):
            acc += H.tri_get(r, n, -m) * H.tri_get(i, n, m)
    exact = 1.0 / np.linalg.norm(t - s)
    assert abs(acc.imag) < 1e-16 * exact
    assert acc.real == pytest.approx(exact, rel=1e-13)


def _rot_z(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def _rot_y(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def _fit_rotation(n, q_mat, rng):
    """Brute-force transform: Yq_n^m(Q^T u) = sum T[m', m] Yq_n^{m'}(u)."""
    k = 4 * (2 * n + 1)
    us = rng.normal(size=(k, 3))
    us /= np.linalg.norm(us, axis=1)[:, None]

    def yq_vec(u):
        tri = H.regular_triangle(u, n)
        return np.array([H.tri_get(tri, n, m) for m in range(-n, n + 1)])

    a = np.array([yq_vec(u) for u in us])
    b = np.array([yq_vec(q_mat.T @ u) for u in us])
    t, *_ = np.linalg.lstsq(a, b, rcond=None)
    return t


def test_rotation_blocks_match_bruteforce(rng):
    for n in range(1, 6):
        for beta_angle, gamma in [(0.7, 0.0), (-1.2, 0.4), (2.9, -2.0)]:
            q_mat = _rot_y(beta_angle) @ _rot_z(gamma)
            fitted = _fit_rotation(n, q_mat, rng)
            block = H.rotation_blocks(n, beta_angle, gamma)[n]
            assert np.abs(fitted - block).max() < 1e-8


def test_rotation_unitary_and_inverse(rng):
    blocks = H.rotation_blocks(6, 1.234, -0.77)
    for t in blocks:
        eye = np.eye(t.shape[0])
        assert np.abs(t @ t.conj().T - eye).max() < 1e-12


def test_rotate_coeffs_round_trip(rng):
    p = 8
    tri = rng.normal(size=H.tri_size(p)) + 1j * rng.normal(size=H.tri_size(p))
    # m = 0 entries of a Hermitian triangle are real
    for n in range(p + 1):
        tri[H.tri_index(n, 0)] = tri[H.tri_index(n, 0)].real
    blocks = H.rotation_blocks(p, 0.9, 2.1)
    out = H.rotate_coeffs(tri, p, blocks)
    back = H.rotate_coeffs(out, p, blocks, adjoint=True)
    assert np.abs(back - tri).max() < 1e-12 * np.abs(tri).max()


def test_align_with_z(rng):
    d = rng.normal(size=3)
    beta_angle, gamma, rho = H.align_with_z(d)
    q_mat = _rot_y(beta_angle) @ _rot_z(gamma)
    assert np.allclose(q_mat @ d, [0, 0, rho], atol=1e-12 * rho)
    assert rho == pytest.approx(np.linalg.norm(d))


def test_rotation_moves_physical_evaluation(rng):
    """Rotating coefficients matches evaluating at back-rotated points."""
    p = 6
    tri = rng.normal(size=H.tri_size(p)) + 1j * rng.normal(size=H.tri_size(p))
    for n in range(p + 1):
        tri[H.tri_index(n, 0)] = tri[H.tri_index(n, 0)].real
    beta_angle, gamma = -0.83, 1.41
    q_mat = _rot_y(beta_angle) @ _rot_z(gamma)
    rot_tri = H.rotate_coeffs(tri, p, H.rotation_blocks(p, beta_angle, gamma))

    x = rng.normal(size=3)

    def eval_tri(c, u):
        r = H.regular_triangle(u, p)
        return sum(H.tri_get(c, n, m) * H.tri_get(r, n, m)
                   for n in range(p + 1) for m in range(-n, n + 1))

    # f(x) = sum C R(x) = sum C' R(x') with x' = Q x
    a = eval_tri(tri, x)
    b = eval_tri(rot_tri, q_mat @ x)
    assert abs(a - b) < 1e-10 * max(1.0, abs(a))


def test_wigner_d_real_orthogonal():
    d = H.wigner_d(5, 0.613)
    assert d.dtype == np.float64
    assert np.abs(d @ d.T - np.eye(11)).max() < 1e-12


def test_public_conversion_round_trip(rng):
    p = 5
    tri = rng.normal(size=H.tri_size(p)) + 1j * rng.normal(size=H.tri_size(p))
    for n in range(p + 1):
        tri[H.tri_index(n, 0)] = tri[H.tri_index(n, 0)].real
    for kind in ("multipole", "local"):
        pub = H.tilde_to_public(tri, p, kind)
        back = H.public_to_tilde(pub, p, kind)
        assert np.abs(back - tri).max() < 1e-13 * np.abs(tri).max()
        # public symmetry C_n^{-m} = (-1)^m conj(C_n^m)
        for n in range(p + 1):
            for m in range(n + 1):
                lhs = pub[n * n + n - m]
                rhs = (-1.0) ** m * np.conj(pub[n * n + n + m])
                assert lhs == pytest.approx(rhs, rel=1e-12)
    with pytest.raises(ValueError):
        H.tilde_to_public(tri, p, "bogus")
