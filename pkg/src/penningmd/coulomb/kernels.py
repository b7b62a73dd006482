"""Numba kernels for pairwise sums and expansion translations.

Every kernel accumulates per-target sums in a fixed inner-loop order, so
results are bit-identical run to run regardless of the thread count.
"""

from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit, prange

# workqueue is portable and adds no dependency; thread count stays
# user-controllable through PENNING_THREADS
numba.config.THREADING_LAYER = "workqueue"
_threads = os.environ.get("PENNING_THREADS")
if _threads:
    numba.set_num_threads(max(1, int(_threads)))


@njit(cache=True, parallel=True)
def direct_sum(pos, q):
    """Raw pairwise sums: phi_i = sum q_j/r_ij, e_i = sum q_j (x_i-x_j)/r^3.

    Returns (phi, e, min_r2) with min_r2 the per-target minimum pair
    distance squared (for singular-pair detection by the caller).
    """
    n = pos.shape[0]
    phi = np.zeros(n)
    e = np.zeros((n, 3))
    min_r2 = np.full(n, np.inf)
    for i in prange(n):
        xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
        acc = 0.0
        ex = 0.0
        ey = 0.0
        ez = 0.0
        mr2 = np.inf
        for j in range(n):
            if j == i:
                continue
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            dz = zi - pos[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 < mr2:
                mr2 = r2
            inv_r = 1.0 / np.sqrt(r2)
            w = q[j] * inv_r
            acc += w
            w3 = w * inv_r * inv_r
            ex += dx * w3
            ey += dy * w3
            ez += dz * w3
        phi[i] = acc
        e[i, 0] = ex
        e[i, 1] = ey
        e[i, 2] = ez
        min_r2[i] = mr2
    return phi, e, min_r2


# ---------------------------------------------------------------------------
# solid-harmonic triangles (quasi-normalized, m >= 0 half storage)

@njit(cache=True, inline="always")
def _tix(n, m):
    return n * (n + 1) // 2 + m


@njit(cache=True)
def _regular_tri(x, y, z, p, out):
    """R_n^m(x, y, z) into out[:tri_size(p)] (complex128 buffer)."""
    r2 = x * x + y * y + z * z
    xy = complex(x, y)
    out[0] = 1.0 + 0.0j
    for m in range(1, p + 1):
        out[_tix(m, m)] = (-np.sqrt((2 * m - 1) / (2.0 * m)) * xy
                           * out[_tix(m - 1, m - 1)])
    for m in range(p):
        out[_tix(m + 1, m)] = np.sqrt(2 * m + 1.0) * z * out[_tix(m, m)]
    for m in range(p + 1):
        for n in range(m + 2, p + 1):
            out[_tix(n, m)] = (
                (2 * n - 1) * z * out[_tix(n - 1, m)]
                - np.sqrt(float((n - 1) ** 2 - m * m)) * r2 * out[_tix(n - 2, m)]
            ) / np.sqrt(float((n + m) * (n - m)))


@njit(cache=True)
def _irregular_tri(x, y, z, p, out):
    """I_n^m(x, y, z) into out[:tri_size(p)]; caller keeps r > 0."""
    r2 = x * x + y * y + z * z
    xy = complex(x, y)
    out[0] = complex(1.0 / np.sqrt(r2), 0.0)
    for m in range(1, p + 1):
        out[_tix(m, m)] = (-np.sqrt((2 * m - 1) / (2.0 * m)) * xy / r2
                           * out[_tix(m - 1, m - 1)])
    for m in range(p):
        out[_tix(m + 1, m)] = np.sqrt(2 * m + 1.0) * z / r2 * out[_tix(m, m)]
    for m in range(p + 1):
        for n in range(m + 2, p + 1):
            out[_tix(n, m)] = (
                (2 * n - 1) * z * out[_tix(n - 1, m)]
                - np.sqrt(float((n - 1) ** 2 - m * m)) * out[_tix(n - 2, m)]
            ) / (r2 * np.sqrt(float((n + m) * (n - m))))


# ---------------------------------------------------------------------------
# leaf operators

@njit(cache=True, parallel=True)
def p2m_leaves(leaf_ids, ion_start, ion_count, pos, q, centers, sides, p, mp):
    """Multipole coefficients of every leaf about its own center.

    mp[(node, tri)] accumulates sum_k q_k conj(R_n^m(u_k)) with u_k the ion
    offset in units of the box side.
    """
    ts = (p + 1) * (p + 2) // 2
    for li in prange(leaf_ids.shape[0]):
        b = leaf_ids[li]
        inv_s = 1.0 / sides[b]
        buf = np.empty(ts, dtype=np.complex128)
        for t in range(ion_start[b], ion_start[b] + ion_count[b]):
            ux = (pos[t, 0] - centers[b, 0]) * inv_s
            uy = (pos[t, 1] - centers[b, 1]) * inv_s
            uz = (pos[t, 2] - centers[b, 2]) * inv_s
            _regular_tri(ux, uy, uz, p, buf)
            qk = q[t]
            for idx in range(ts):
                mp[b, idx] += qk * np.conj(buf[idx])


@njit(cache=True, parallel=True)
def l2p_leaves(leaf_ids, ion_start, ion_count, pos, centers, sides, p, loc,
               phi, efield):
    """Evaluate each leaf's local expansion at its own ions.

    phi += sum_nm L_n^m R_n^m(u); the gradient descends one degree through
    the regular-harmonic ladders, with the extra 1/side from du/dx.
    """
    ts = (p + 1) * (p + 2) // 2
    for li in prange(leaf_ids.shape[0]):
        b = leaf_ids[li]
        inv_s = 1.0 / sides[b]
        buf = np.empty(ts, dtype=np.complex128)
        for t in range(ion_start[b], ion_start[b] + ion_count[b]):
            ux = (pos[t, 0] - centers[b, 0]) * inv_s
            uy = (pos[t, 1] - centers[b, 1]) * inv_s
            uz = (pos[t, 2] - centers[b, 2]) * inv_s
            _regular_tri(ux, uy, uz, p, buf)
            val = 0.0
            gz = 0.0
            gp = 0.0j
            for n in range(p + 1):
                c0 = loc[b, _tix(n, 0)]
                val += c0.real * buf[_tix(n, 0)].real
                for m in range(1, n + 1):
                    cm = loc[b, _tix(n, m)]
                    val += 2.0 * (cm * buf[_tix(n, m)]).real
                if n == 0:
                    continue
                # d/dz: sqrt(n^2 - m^2) R_{n-1}^m
                gz += c0.real * n * buf[_tix(n - 1, 0)].real
                for m in range(1, n):
                    cm = loc[b, _tix(n, m)]
                    gz += 2.0 * np.sqrt(float(n * n - m * m)) * (
                        cm * buf[_tix(n - 1, m)]).real
                # d/dx + i d/dy, m >= 0 branch: +sqrt((n-m)(n-m-1)) R_{n-1}^{m+1}
                if n >= 2:
                    gp += (np.sqrt(float(n * (n - 1))) * c0.real
                           * buf[_tix(n - 1, 1)])
                for m in range(1, n - 1):
                    gp += (np.sqrt(float((n - m) * (n - m - 1)))
                           * loc[b, _tix(n, m)] * buf[_tix(n - 1, m + 1)])
                # m < 0 branch: -sqrt((n+|m|)(n+|m|-1)) R_{n-1}^{1-|m|}
                for m in range(1, n + 1):
                    gp -= (np.sqrt(float((n + m) * (n + m - 1)))
                           * np.conj(loc[b, _tix(n, m)])
                           * _cget(buf, n - 1, 1 - m))
            phi[t] += val
            efield[t, 0] -= gp.real * inv_s
            efield[t, 1] -= gp.imag * inv_s
            efield[t, 2] -= gz * inv_s


@njit(cache=True, inline="always")
def _cget(buf, n, m):
    """tri_get for kernel buffers: negative m through conjugation."""
    if m >= 0:
        return buf[_tix(n, m)]
    return np.conj(buf[_tix(n, -m)])


@njit(cache=True, parallel=True)
def m2p_leaves(leaf_ids, w_lo, w_hi, w_src, w_ord, ion_start, ion_count,
               pos, centers, sides, mp, phi, efield):
    """Evaluate W-list multipoles directly at a leaf's ions.

    phi += (1/s) sum_nm M_n^m I_n^m(u); the gradient climbs one degree
    through the irregular-harmonic ladders with an extra 1/s.
    """
    for li in prange(leaf_ids.shape[0]):
        b = leaf_ids[li]
        lo = w_lo[li]
        hi = w_hi[li]
        if lo == hi:
            continue
        pmax = 0
        for e in range(lo, hi):
            if w_ord[e] > pmax:
                pmax = w_ord[e]
        buf = np.empty((pmax + 2) * (pmax + 3) // 2, dtype=np.complex128)
        for t in range(ion_start[b], ion_start[b] + ion_count[b]):
            for e in range(lo, hi):
                d = w_src[e]
                p = w_ord[e]
                inv_s = 1.0 / sides[d]
                ux = (pos[t, 0] - centers[d, 0]) * inv_s
                uy = (pos[t, 1] - centers[d, 1]) * inv_s
                uz = (pos[t, 2] - centers[d, 2]) * inv_s
                _irregular_tri(ux, uy, uz, p + 1, buf)
                val = 0.0
                gz = 0.0
                gp = 0.0j
                for n in range(p + 1):
                    c0r = mp[d, _tix(n, 0)].real
                    val += c0r * buf[_tix(n, 0)].real
                    gz -= c0r * (n + 1.0) * buf[_tix(n + 1, 0)].real
                    gp += c0r * np.sqrt(float((n + 1) * (n + 2))) * \
                        buf[_tix(n + 1, 1)]
                    for m in range(1, n + 1):
                        cm = mp[d, _tix(n, m)]
                        val += 2.0 * (cm * buf[_tix(n, m)]).real
                        gz -= 2.0 * np.sqrt(float((n + 1) ** 2 - m * m)) * (
                            cm * buf[_tix(n + 1, m)]).real
                        gp += (np.sqrt(float((n + m + 1) * (n + m + 2))) * cm
                               * buf[_tix(n + 1, m + 1)])
                        gp -= (np.sqrt(float((n - m + 1) * (n - m + 2)))
                               * np.conj(cm) * _cget(buf, n + 1, 1 - m))
                phi[t] += val * inv_s
                efield[t, 0] -= gp.real * inv_s * inv_s
                efield[t, 1] -= gp.imag * inv_s * inv_s
                efield[t, 2] -= gz * inv_s * inv_s


@njit(cache=True, parallel=True)
def p2l_nodes(dst_ids, x_lo, x_hi, x_src, x_ord, ion_start, ion_count,
              pos, q, centers, sides, loc):
    """Convert X-list source ions straight into a box's local expansion.

    loc[(d, (n, m))] += sum_k q_k conj(I_n^m(y_k)) / s with y_k the source
    offset in units of the box side s.
    """
    for di in prange(dst_ids.shape[0]):
        d = dst_ids[di]
        lo = x_lo[di]
        hi = x_hi[di]
        if lo == hi:
            continue
        pmax = 0
        for e in range(lo, hi):
            if x_ord[e] > pmax:
                pmax = x_ord[e]
        buf = np.empty((pmax + 1) * (pmax + 2) // 2, dtype=np.complex128)
        inv_s = 1.0 / sides[d]
        for e in range(lo, hi):
            b = x_src[e]
            p = x_ord[e]
            ts = (p + 1) * (p + 2) // 2
            for t in range(ion_start[b], ion_start[b] + ion_count[b]):
                ux = (pos[t, 0] - centers[d, 0]) * inv_s
                uy = (pos[t, 1] - centers[d, 1]) * inv_s
                uz = (pos[t, 2] - centers[d, 2]) * inv_s
                _irregular_tri(ux, uy, uz, p, buf)
                w = q[t] * inv_s
                for idx in range(ts):
                    loc[d, idx] += w * np.conj(buf[idx])


@njit(cache=True, parallel=True)
def p2p_pairs(leaf_ids, u_lo, u_hi, u_src, ion_start, ion_count, pos, q,
              phi, efield, min_r2):
    """Direct pairwise interaction over the U lists (leaf b vs its
    adjacent leaves, itself included).  Fixed inner order per target ion."""
    for li in prange(leaf_ids.shape[0]):
        b = leaf_ids[li]
        for i in range(ion_start[b], ion_start[b] + ion_count[b]):
            xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
            acc = 0.0
            ex = 0.0
            ey = 0.0
            ez = 0.0
            mr2 = min_r2[i]
            for e in range(u_lo[li], u_hi[li]):
                s = u_src[e]
                for j in range(ion_start[s], ion_start[s] + ion_count[s]):
                    if j == i:
                        continue
                    dx = xi - pos[j, 0]
                    dy = yi - pos[j, 1]
                    dz = zi - pos[j, 2]
                    r2 = dx * dx + dy * dy + dz * dz
                    if r2 < mr2:
                        mr2 = r2
                    inv_r = 1.0 / np.sqrt(r2)
                    w = q[j] * inv_r
                    acc += w
                    w3 = w * inv_r * inv_r
                    ex += dx * w3
                    ey += dy * w3
                    ez += dz * w3
            phi[i] += acc
            efield[i, 0] += ex
            efield[i, 1] += ey
            efield[i, 2] += ez
            min_r2[i] = mr2


# ---------------------------------------------------------------------------
# folded-rotation translation pipeline
#
# A Hermitian coefficient triangle (only m >= 0 stored) transforms under a
# z-rotation by per-m phases and under a y-rotation by a REAL block T^n that
# maps real and imaginary parts independently:
#
#   Re' = P_n Re,  Im' = Q_n Im
#
# with P/Q folded from T^n.  A general translation is then
# phases -> fold -> axial shift along z -> fold back -> phases back,
# costing O(p^3) with small constants.  Operator tables are packed flat:
#
#   rot:    per degree n, P_n ((n+1)^2 entries) then Q_n (n^2)
#   axial:  per order k, dense (p+1-k)^2 matrix out[j] = sum_g A[j-k, g-k] in[g]
#   phases: cos(m*gamma), sin(m*gamma) for m = 0..p

@njit(cache=True, inline="always")
def _phase_fwd(a, b, ph_c, ph_s, p):
    for n in range(1, p + 1):
        base = n * (n + 1) // 2
        for m in range(1, n + 1):
            c = ph_c[m]
            s = ph_s[m]
            ar = a[base + m]
            br = b[base + m]
            a[base + m] = ar * c + br * s
            b[base + m] = br * c - ar * s


@njit(cache=True, inline="always")
def _phase_back(a, b, ph_c, ph_s, p):
    for n in range(1, p + 1):
        base = n * (n + 1) // 2
        for m in range(1, n + 1):
            c = ph_c[m]
            s = ph_s[m]
            ar = a[base + m]
            br = b[base + m]
            a[base + m] = ar * c - br * s
            b[base + m] = br * c + ar * s


@njit(cache=True, inline="always")
def _fold_apply(a, b, rot, off, p, oa, ob):
    """Apply per-degree folded rotation: oa = P a, ob = Q b."""
    pos = off
    for n in range(p + 1):
        base = n * (n + 1) // 2
        for mp_ in range(n + 1):
            acc = 0.0
            row = pos + mp_ * (n + 1)
            for m in range(n + 1):
                acc += rot[row + m] * a[base + m]
            oa[base + mp_] = acc
        pos += (n + 1) * (n + 1)
        ob[base] = 0.0
        for mp_ in range(1, n + 1):
            acc = 0.0
            row = pos + (mp_ - 1) * n
            for m in range(1, n + 1):
                acc += rot[row + m - 1] * b[base + m]
            ob[base + mp_] = acc
        pos += n * n


@njit(cache=True, inline="always")
def _axial_apply(a, b, ax, off, p, oa, ob):
    """Apply the axial shift: per order k a dense (p+1-k)^2 block."""
    pos = off
    for k in range(p + 1):
        jdim = p + 1 - k
        for jo in range(jdim):
            acc_a = 0.0
            acc_b = 0.0
            row = pos + jo * jdim
            for go in range(jdim):
                f = ax[row + go]
                idx = _tix(k + go, k)
                acc_a += f * a[idx]
                acc_b += f * b[idx]
            idx_o = _tix(k + jo, k)
            oa[idx_o] = acc_a
            ob[idx_o] = acc_b
        pos += jdim * jdim


@njit(cache=True, inline="always")
def _load_half(src_row, ts, a, b):
    for idx in range(ts):
        v = src_row[idx]
        a[idx] = v.real
        b[idx] = v.imag


@njit(cache=True, parallel=True)
def translate_children(parent_ids, children, mp_in, mp_out, p,
                       ph_c8, ph_s8, rotf8, rotb8, ax8):
    """Shift every child's expansion to its parent center and accumulate
    (M2M when mp_in/mp_out are multipoles at child/parent levels; the same
    code shape works for any per-octant operator set)."""
    ts = (p + 1) * (p + 2) // 2
    for pi in prange(parent_ids.shape[0]):
        pa = parent_ids[pi]
        a0 = np.empty(ts, dtype=np.float64)
        b0 = np.empty(ts, dtype=np.float64)
        a1 = np.empty(ts, dtype=np.float64)
        b1 = np.empty(ts, dtype=np.float64)
        for o in range(8):
            ch = children[pa, o]
            if ch < 0:
                continue
            _load_half(mp_in[ch], ts, a0, b0)
            _phase_fwd(a0, b0, ph_c8[o], ph_s8[o], p)
            _fold_apply(a0, b0, rotf8[o], 0, p, a1, b1)
            _axial_apply(a1, b1, ax8[o], 0, p, a0, b0)
            _fold_apply(a0, b0, rotb8[o], 0, p, a1, b1)
            _phase_back(a1, b1, ph_c8[o], ph_s8[o], p)
            for idx in range(ts):
                mp_out[pa, idx] += complex(a1[idx], b1[idx])


@njit(cache=True, parallel=True)
def translate_to_children(child_ids, oct_ids, parent_of, loc, p,
                          ph_c8, ph_s8, rotf8, rotb8, ax8):
    """Shift every parent's local expansion onto its children (L2L)."""
    ts = (p + 1) * (p + 2) // 2
    for ci in prange(child_ids.shape[0]):
        ch = child_ids[ci]
        pa = parent_of[ci]
        o = oct_ids[ci]
        a0 = np.empty(ts, dtype=np.float64)
        b0 = np.empty(ts, dtype=np.float64)
        a1 = np.empty(ts, dtype=np.float64)
        b1 = np.empty(ts, dtype=np.float64)
        _load_half(loc[pa], ts, a0, b0)
        _phase_fwd(a0, b0, ph_c8[o], ph_s8[o], p)
        _fold_apply(a0, b0, rotf8[o], 0, p, a1, b1)
        _axial_apply(a1, b1, ax8[o], 0, p, a0, b0)
        _fold_apply(a0, b0, rotb8[o], 0, p, a1, b1)
        _phase_back(a1, b1, ph_c8[o], ph_s8[o], p)
        for idx in range(ts):
            loc[ch, idx] += complex(a1[idx], b1[idx])


@njit(cache=True, parallel=True)
def m2l_level(dst_ids, v_lo, v_hi, v_src, v_cls, mp, loc, inv_s, p_glob,
              cls_p, cls_ph_off, cls_rot_off, cls_ax_off,
              ph_c, ph_s, rotf, rotb, ax):
    """Multipole-to-local over the V lists of one level, grouped by
    destination so each local expansion is written by a single thread."""
    ts_max = (p_glob + 1) * (p_glob + 2) // 2
    for di in prange(dst_ids.shape[0]):
        d = dst_ids[di]
        lo = v_lo[di]
        hi = v_hi[di]
        if lo == hi:
            continue
        a0 = np.empty(ts_max, dtype=np.float64)
        b0 = np.empty(ts_max, dtype=np.float64)
        a1 = np.empty(ts_max, dtype=np.float64)
        b1 = np.empty(ts_max, dtype=np.float64)
        for e in range(lo, hi):
            src = v_src[e]
            c = v_cls[e]
            p = cls_p[c]
            ts = (p + 1) * (p + 2) // 2
            _load_half(mp[src], ts, a0, b0)
            po = cls_ph_off[c]
            _phase_fwd(a0, b0, ph_c[po:], ph_s[po:], p)
            _fold_apply(a0, b0, rotf, cls_rot_off[c], p, a1, b1)
            _axial_apply(a1, b1, ax, cls_ax_off[c], p, a0, b0)
            _fold_apply(a0, b0, rotb, cls_rot_off[c], p, a1, b1)
            _phase_back(a1, b1, ph_c[po:], ph_s[po:], p)
            for idx in range(ts):
                loc[d, idx] += complex(a1[idx] * inv_s, b1[idx] * inv_s)
