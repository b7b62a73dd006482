"""Adaptive octree and interaction lists for the fast multipole solver.

A box splits while it holds more than `leaf_min` ions (down to `max_depth`
levels).  Ions are permuted during construction so every node owns a
contiguous slice of the ion array, children in octant order inside their
parent's slice.  Nodes are stored level by level in flat arrays; empty
octants get no node.

Interaction lists follow the standard adaptive scheme.  With "adjacent"
meaning boxes whose closed cubes touch (faces, edges, or corners):

* colleagues: same-level adjacent boxes.
* V list (any box): children of the parent's colleagues that are not
  adjacent to the box.  Same level, lattice offset components in
  {-3..3} with max-norm >= 2; handled multipole-to-local.
* U list (leaf b): all adjacent leaves of any level, b itself included;
  handled by direct pairwise summation.
* W list (leaf b): boxes d below b's own level whose parent is adjacent
  to b but which are not adjacent themselves; d's multipole is evaluated
  directly at b's ions.  Such a box is at least its own side away, so the
  geometry ratio is at most sqrt(3)/3.
* X list (box d): the dual of W -- leaves b with d in W(b); b's ions are
  converted straight into d's local expansion.

Every (source ion, target ion) pair is covered exactly once by
U / V / W / X, which the test suite verifies by brute force.

Subdivision and colleague search are vectorized per level; the V and
U/W/X passes run as compiled two-phase (count, then fill) kernels so the
build stays a small fraction of a solve even at the smallest ion counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = ["FmmTree", "build_tree"]

DEFAULT_LEAF_MIN = 64
MAX_DEPTH = 10


@dataclass
class _Csr:
    """Ragged list-of-lists as (starts, items) arrays."""

    starts: np.ndarray  # (M+1,) int64
    items: np.ndarray   # int32

    def row(self, i: int) -> np.ndarray:
        return self.items[self.starts[i]:self.starts[i + 1]]

    @classmethod
    def from_lists(cls, lists) -> "_Csr":
        counts = np.fromiter((len(l) for l in lists), dtype=np.int64,
                             count=len(lists))
        starts = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum(counts, out=starts[1:])
        items = np.empty(starts[-1], dtype=np.int32)
        for i, l in enumerate(lists):
            items[starts[i]:starts[i + 1]] = l
        return cls(starts, items)


@dataclass
class FmmTree:
    """Octree over an ion configuration plus its interaction lists."""

    root_center: np.ndarray
    root_side: float
    leaf_min: int
    n_levels: int                 # number of populated levels (root = level 0)

    level: np.ndarray             # (M,) int8
    icoord: np.ndarray            # (M, 3) int32 lattice coords at own level
    center: np.ndarray            # (M, 3) float
    parent: np.ndarray            # (M,) int32, -1 at root
    children: np.ndarray          # (M, 8) int32, -1 where absent
    is_leaf: np.ndarray           # (M,) bool
    ion_start: np.ndarray         # (M,) int64 into the permuted ion array
    ion_count: np.ndarray         # (M,) int64
    level_start: np.ndarray       # (n_levels+1,) node-id range per level

    perm: np.ndarray              # (N,) original index of each sorted slot
    positions: np.ndarray         # (N, 3) permuted copy

    colleagues: _Csr
    u_list: _Csr                  # rows meaningful for leaves only
    v_list: _Csr
    v_offset: np.ndarray          # (len(v_items),) packed (dx+3)*49+(dy+3)*7+(dz+3)
    w_list: _Csr                  # rows meaningful for leaves only
    x_list: _Csr

    @property
    def n_nodes(self) -> int:
        return self.level.shape[0]

    @property
    def n_ions(self) -> int:
        return self.perm.shape[0]

    def side(self, lvl: int) -> float:
        return self.root_side / (1 << lvl)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.is_leaf)


_BITS8 = np.array([[(o >> 2) & 1, (o >> 1) & 1, o & 1] for o in range(8)],
                  dtype=np.int32)


def build_tree(positions: np.ndarray, leaf_min: int = DEFAULT_LEAF_MIN,
               max_depth: int = MAX_DEPTH) -> FmmTree:
    """Build the adaptive octree and all interaction lists."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n < 1:
        raise ValueError("need at least one ion")
    if leaf_min < 1:
        raise ValueError("leaf_min must be >= 1")

    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    root_center = 0.5 * (lo + hi)
    # pad so boundary ions stay strictly inside half-open octant tests
    root_side = float(np.max(hi - lo)) * (1 + 1e-12) or 1.0

    # ---- subdivision, one vectorized pass per level ----------------------
    perm = np.arange(n, dtype=np.int64)
    pos = positions.copy()

    lev_arrs = [np.zeros(1, dtype=np.int8)]
    ico_arrs = [np.zeros((1, 3), dtype=np.int32)]
    cen_arrs = [root_center[None, :].copy()]
    par_arrs = [np.full(1, -1, dtype=np.int32)]
    ist_arrs = [np.zeros(1, dtype=np.int64)]
    cnt_arrs = [np.full(1, n, dtype=np.int64)]
    level_start = [0, 1]
    child_links = []              # (parent ids, octants, child ids) per level

    cur_off = 0                   # id of the first node at the current level
    cur_ico, cur_cen = ico_arrs[0], cen_arrs[0]
    cur_ist, cur_cnt = ist_arrs[0], cnt_arrs[0]
    m = 1
    for lvl in range(max_depth):
        sel = np.flatnonzero(cur_cnt > leaf_min)
        if sel.size == 0:
            break
        side_child = root_side / (1 << (lvl + 1))
        starts = cur_ist[sel]
        cnts = cur_cnt[sel]
        tot = int(cnts.sum())
        # global slots of the ions in all splitting nodes, grouped by node
        within = np.arange(tot, dtype=np.int64) - np.repeat(
            np.cumsum(cnts) - cnts, cnts)
        gidx = np.repeat(starts, cnts) + within
        node_of = np.repeat(np.arange(sel.size, dtype=np.int64), cnts)
        cen_g = cur_cen[sel][node_of]
        gp = pos[gidx]
        key = ((gp[:, 0] >= cen_g[:, 0]).astype(np.int64) << 2 |
               (gp[:, 1] >= cen_g[:, 1]).astype(np.int64) << 1 |
               (gp[:, 2] >= cen_g[:, 2]).astype(np.int64))
        comp = node_of * 8 + key
        order = np.argsort(comp, kind="stable")
        pos[gidx] = gp[order]
        perm[gidx] = perm[gidx][order]
        counts8 = np.bincount(comp, minlength=sel.size * 8).reshape(-1, 8)
        excl = np.cumsum(counts8, axis=1) - counts8
        r, o = np.nonzero(counts8)          # row-major: (node, octant) order
        n_new = r.size
        cids = np.arange(m, m + n_new, dtype=np.int32)
        child_links.append(((cur_off + sel[r]).astype(np.int64), o, cids))
        lev_arrs.append(np.full(n_new, lvl + 1, dtype=np.int8))
        ico_arrs.append((cur_ico[sel[r]] * 2 + _BITS8[o]).astype(np.int32))
        cen_arrs.append(cur_cen[sel[r]] + side_child * (_BITS8[o] - 0.5))
        par_arrs.append((cur_off + sel[r]).astype(np.int32))
        ist_arrs.append((starts[r] + excl[r, o]).astype(np.int64))
        cnt_arrs.append(counts8[r, o].astype(np.int64))
        cur_off = m
        m += n_new
        level_start.append(m)
        cur_ico, cur_cen = ico_arrs[-1], cen_arrs[-1]
        cur_ist, cur_cnt = ist_arrs[-1], cnt_arrs[-1]

    level = np.concatenate(lev_arrs)
    icoord = np.concatenate(ico_arrs, axis=0)
    center = np.concatenate(cen_arrs, axis=0)
    parent = np.concatenate(par_arrs)
    ion_start = np.concatenate(ist_arrs)
    ion_count = np.concatenate(cnt_arrs)
    level_start = np.array(level_start, dtype=np.int64)
    children = np.full((m, 8), -1, dtype=np.int32)
    for pr, oc, ch in child_links:
        children[pr, oc] = ch
    is_leaf = (children < 0).all(axis=1)
    n_levels = len(level_start) - 1

    # ---- node lookup by (level, lattice coord) --------------------------
    kmax = np.int64(1) << (max_depth + 1)
    keys = ((level.astype(np.int64) * kmax + icoord[:, 0]) * kmax
            + icoord[:, 1]) * kmax + icoord[:, 2]
    key_order = np.argsort(keys)
    keys_sorted = keys[key_order]

    # ---- colleagues ------------------------------------------------------
    neigh = np.array([(i, j, k)
                      for i in (-1, 0, 1) for j in (-1, 0, 1)
                      for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)],
                     dtype=np.int32)
    col_counts = np.zeros(m, dtype=np.int64)
    col_parts = []
    for lvl in range(n_levels):
        a, b = int(level_start[lvl]), int(level_start[lvl + 1])
        cand = icoord[a:b, None, :] + neigh[None, :, :]         # (B, 26, 3)
        limit = 1 << lvl
        valid = ((cand >= 0) & (cand < limit)).all(axis=2)
        q = ((np.int64(lvl) * kmax + cand[..., 0]) * kmax
             + cand[..., 1]) * kmax + cand[..., 2]
        idx = np.minimum(np.searchsorted(keys_sorted, q), m - 1)
        hits = np.where(valid & (keys_sorted[idx] == q),
                        key_order[idx], -1).astype(np.int32)
        mask = hits >= 0
        col_counts[a:b] = mask.sum(axis=1)
        col_parts.append(hits[mask])        # row-major keeps per-row order
    col_starts = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(col_counts, out=col_starts[1:])
    col_items = (np.concatenate(col_parts) if col_parts
                 else np.empty(0, dtype=np.int32))
    colleagues = _Csr(col_starts, col_items)

    # ---- V lists (count, then fill) --------------------------------------
    icoord64 = icoord.astype(np.int64)
    v_counts = np.zeros(m, dtype=np.int64)
    _v_count(m, parent, children, icoord64, col_starts, col_items, v_counts)
    v_starts = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(v_counts, out=v_starts[1:])
    v_items = np.empty(v_starts[-1], dtype=np.int32)
    v_offset = np.empty(v_starts[-1], dtype=np.int32)
    _v_fill(m, parent, children, icoord64, col_starts, col_items,
            v_starts, v_items, v_offset)
    v_list = _Csr(v_starts, v_items)

    # ---- U / W / X by descent over colleague subtrees --------------------
    leaf_ids = np.flatnonzero(is_leaf)
    level64 = level.astype(np.int64)
    stack = np.empty(m + 8, dtype=np.int64)
    u_counts = np.zeros(m, dtype=np.int64)
    w_counts = np.zeros(m, dtype=np.int64)
    x_counts = np.zeros(m, dtype=np.int64)
    _uwx_count(leaf_ids, level64, icoord64, children, is_leaf,
               col_starts, col_items, u_counts, w_counts, x_counts, stack)
    u_starts = np.zeros(m + 1, dtype=np.int64)
    w_starts = np.zeros(m + 1, dtype=np.int64)
    x_starts = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(u_counts, out=u_starts[1:])
    np.cumsum(w_counts, out=w_starts[1:])
    np.cumsum(x_counts, out=x_starts[1:])
    u_items = np.empty(u_starts[-1], dtype=np.int32)
    w_items = np.empty(w_starts[-1], dtype=np.int32)
    x_items = np.empty(x_starts[-1], dtype=np.int32)
    _uwx_fill(leaf_ids, level64, icoord64, children, is_leaf,
              col_starts, col_items,
              u_starts.copy(), u_items, w_starts.copy(), w_items,
              x_starts.copy(), x_items, stack)
    u_list = _Csr(u_starts, u_items)
    w_list = _Csr(w_starts, w_items)
    x_list = _Csr(x_starts, x_items)

    return FmmTree(
        root_center=root_center, root_side=root_side, leaf_min=leaf_min,
        n_levels=n_levels, level=level, icoord=icoord, center=center,
        parent=parent, children=children, is_leaf=is_leaf,
        ion_start=ion_start, ion_count=ion_count, level_start=level_start,
        perm=perm, positions=pos, colleagues=colleagues, u_list=u_list,
        v_list=v_list, v_offset=v_offset, w_list=w_list, x_list=x_list)


@njit(cache=True)
def _v_count(m, parent, children, icoord, col_starts, col_items, cnt):
    for b in range(1, m):
        pb = parent[b]
        c = 0
        for ci in range(col_starts[pb], col_starts[pb + 1]):
            pc = col_items[ci]
            for o in range(8):
                k = children[pc, o]
                if k < 0:
                    continue
                dx = icoord[k, 0] - icoord[b, 0]
                dy = icoord[k, 1] - icoord[b, 1]
                dz = icoord[k, 2] - icoord[b, 2]
                if max(abs(dx), abs(dy), abs(dz)) >= 2:
                    c += 1
        cnt[b] = c


@njit(cache=True)
def _v_fill(m, parent, children, icoord, col_starts, col_items,
            starts, items, offs):
    for b in range(1, m):
        cur = starts[b]
        pb = parent[b]
        for ci in range(col_starts[pb], col_starts[pb + 1]):
            pc = col_items[ci]
            for o in range(8):
                k = children[pc, o]
                if k < 0:
                    continue
                dx = icoord[k, 0] - icoord[b, 0]
                dy = icoord[k, 1] - icoord[b, 1]
                dz = icoord[k, 2] - icoord[b, 2]
                if max(abs(dx), abs(dy), abs(dz)) >= 2:
                    items[cur] = k
                    offs[cur] = (dx + 3) * 49 + (dy + 3) * 7 + (dz + 3)
                    cur += 1


@njit(cache=True, inline="always")
def _adjacent(b, d, level, icoord):
    """Do the closed cubes of b and d touch?  Requires level[d] >= level[b]."""
    sh = level[d] - level[b]
    for ax in range(3):
        lo = icoord[b, ax] << sh
        hi = lo + (np.int64(1) << sh)
        cd = icoord[d, ax]
        if cd < lo - 1 or cd >= hi + 1:
            return False
    return True


@njit(cache=True)
def _uwx_count(leaf_ids, level, icoord, children, is_leaf,
               col_starts, col_items, u_cnt, w_cnt, x_cnt, stack):
    for li in range(leaf_ids.shape[0]):
        b = leaf_ids[li]
        u_cnt[b] += 1                       # the leaf itself
        for ci in range(col_starts[b], col_starts[b + 1]):
            top = 0
            stack[top] = col_items[ci]
            top += 1
            while top > 0:
                top -= 1
                d = stack[top]
                if _adjacent(b, d, level, icoord):
                    if is_leaf[d]:
                        u_cnt[b] += 1
                        if level[d] > level[b]:
                            u_cnt[d] += 1
                    else:
                        for o in range(8):
                            k = children[d, o]
                            if k >= 0:
                                stack[top] = k
                                top += 1
                else:
                    w_cnt[b] += 1
                    x_cnt[d] += 1


@njit(cache=True)
def _uwx_fill(leaf_ids, level, icoord, children, is_leaf,
              col_starts, col_items, u_cur, u_items, w_cur, w_items,
              x_cur, x_items, stack):
    for li in range(leaf_ids.shape[0]):
        b = leaf_ids[li]
        u_items[u_cur[b]] = b
        u_cur[b] += 1
        for ci in range(col_starts[b], col_starts[b + 1]):
            top = 0
            stack[top] = col_items[ci]
            top += 1
            while top > 0:
                top -= 1
                d = stack[top]
                if _adjacent(b, d, level, icoord):
                    if is_leaf[d]:
                        u_items[u_cur[b]] = d
                        u_cur[b] += 1
                        if level[d] > level[b]:
                            u_items[u_cur[d]] = b
                            u_cur[d] += 1
                    else:
                        for o in range(8):
                            k = children[d, o]
                            if k >= 0:
                                stack[top] = k
                                top += 1
                else:
                    w_items[w_cur[b]] = d
                    w_cur[b] += 1
                    x_items[x_cur[d]] = b
                    x_cur[d] += 1
