"""Compiled hot loops: field hashing, window scans and path tracing.

Everything here is a deterministic pure function of its arguments and is
bit-compatible with the scalar reference implementations in
:mod:`howardweb.rng_field` and :mod:`howardweb.network`; the test suite
asserts exact agreement.  All integer state is uint64 with explicit
wrapping semantics.

Scans are structured for throughput on one core: hash states come from
vectorizable row passes, perturbations from a packed direct-lookup table
(binary-search fallback for the rare buckets that straddle a threshold),
and emission uses masked advances instead of data-dependent branches.
The perturbation lookup is written out inline in each scan loop: hiding
it behind a helper function defeats the surrounding loop's optimization
and costs an order of magnitude.
"""

from __future__ import annotations

import numpy as np
from numba import njit

U = np.uint64
I = np.int64

_GOLD = U(0x9E3779B97F4A7C15)
_M1 = U(0xBF58476D1CE4E5B9)
_M2 = U(0x94D049BB133111EB)
_KX = U(0xD1B54A32D192ED03)
_KY = U(0x8CB92BA72F3D8DD7)
_S30 = U(30)
_S27 = U(27)
_S31 = U(31)
_S63 = U(63)

# premultiplied stream keys (tag * KTAG mod 2**64)
_OPENK = U((1 * 0x2545F4914F6CDD1D) & ((1 << 64) - 1))
_XYK = U((2 * 0x2545F4914F6CDD1D) & ((1 << 64) - 1))
_TIEK = U((3 * 0x2545F4914F6CDD1D) & ((1 << 64) - 1))

_DSHIFT = U(51)  # 64 - rng_field.DIRECT_BITS

_FAR = I(1) << I(62)

# trace_free modes
MODE_FIXED = 0
MODE_MERGE = 1
MODE_ENVELOPE = 2

# trace statuses
OK = 0
BOUNDARY = 1


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def _site(state, x, y):
    z = _mix(state ^ (U(x) * _KX))
    return _mix(z ^ (U(y) * _KY))


@njit(cache=True, inline="always")
def _tie_sign(state, x, y):
    u = _mix(_site(state, x, y) ^ _TIEK)
    if u >> _S63:
        return 1
    return -1


@njit(cache=True, inline="always")
def _col_states(state, sx_lo, ncols, out):
    for ai in range(ncols):
        out[ai] = _mix(state ^ (U(sx_lo + ai) * _KX))


@njit(cache=True, inline="always")
def _row_passes(colst, yk, thresh, st, om, uxy):
    """Vectorizable per-row hash passes: site state, open mask, xy uniform."""
    n = colst.shape[0]
    for ai in range(n):
        st[ai] = _mix(colst[ai] ^ yk)
    for ai in range(n):
        om[ai] = np.uint8(_mix(st[ai] ^ _OPENK) < thresh)
    for ai in range(n):
        uxy[ai] = _mix(st[ai] ^ _XYK)


@njit(cache=True, nogil=True)
def sample_variates(state, thresh, cum, dpack, jdx, jdy, x0, y0, n):
    """Variates at sites (x0+i, y0) for i < n, matching site_variates."""
    opens = np.empty(n, dtype=np.bool_)
    ties = np.empty(n, dtype=np.int64)
    dxs = np.empty(n, dtype=np.int64)
    dys = np.empty(n, dtype=np.int64)
    for i in range(n):
        st = _site(state, x0 + i, y0)
        opens[i] = _mix(st ^ _OPENK) < thresh
        ties[i] = 1 if (_mix(st ^ _TIEK) >> _S63) else -1
        u = _mix(st ^ _XYK)
        pk = I(dpack[u >> _DSHIFT])
        if pk < 0:
            lo = 0
            hi = cum.shape[0]
            while lo < hi:
                mid = (lo + hi) >> 1
                if cum[mid] > u:
                    hi = mid
                else:
                    lo = mid + 1
            if lo >= cum.shape[0]:
                lo = cum.shape[0] - 1
            pk = (I(jdy[lo]) << I(8)) | (I(jdx[lo]) + I(128))
        dxs[i] = (pk & I(0xFF)) - I(128)
        dys[i] = pk >> I(8)
    return opens, ties, dxs, dys


@njit(cache=True, nogil=True)
def scan_window(state, thresh, cum, dpack, jdx, jdy,
                ly_lo, ly_hi, lx_lo, lx_hi,
                x_cut, y_cut,
                want_up, up_center, up_halfspan):
    """Materialize the point process on rows [ly_lo, ly_hi] x [lx_lo, lx_hi].

    Scans every source site that can land in the window (the law's table
    support is bounded by x_cut/y_cut, so the scan is exhaustive).  Rows
    come back CSR-style, sorted and deduplicated, with a per-point flag
    marking zero-perturbation ("special") points.

    If ``want_up``, also returns every upward landing (dy >= 1) from the
    scanned sources that could ever sit inside a parabolic envelope whose
    apex stays within ``up_center +- up_halfspan``: a landing at distance
    d from an apex only matters at heights >= sqrt(d), which its
    perturbation reaches only if dy*dy + up_halfspan >= d.
    """
    n_rows = ly_hi - ly_lo + 1
    width = I(lx_hi - lx_lo + 1)
    sy_lo = ly_lo - y_cut
    sx_lo = lx_lo - x_cut
    sx_hi = lx_hi + x_cut
    ncols = sx_hi - sx_lo + 1

    colst = np.empty(ncols, dtype=np.uint64)
    _col_states(state, sx_lo, ncols, colst)
    st = np.empty(ncols, dtype=np.uint64)
    om = np.empty(ncols, dtype=np.uint8)
    uxy = np.empty(ncols, dtype=np.uint64)
    pks = np.empty(ncols, dtype=np.int64)

    # presence grid: bit0 point, bit1 special; last cell swallows
    # masked-out writes so the marking loop stays branch-free
    n_cells = I(n_rows) * width
    grid = np.zeros(n_cells + 1, dtype=np.uint8)

    if want_up:
        up_cap = (ly_hi - sy_lo + 1) * ncols
        up_x = np.empty(up_cap, dtype=np.int64)
        up_src = np.empty(up_cap, dtype=np.int64)
        up_land = np.empty(up_cap, dtype=np.int64)
    else:
        up_x = np.empty(0, dtype=np.int64)
        up_src = np.empty(0, dtype=np.int64)
        up_land = np.empty(0, dtype=np.int64)
    n_up = 0

    for b in range(sy_lo, ly_hi + 1):
        yk = U(b) * _KY
        _row_passes(colst, yk, thresh, st, om, uxy)
        for ai in range(ncols):
            u = uxy[ai]
            pk = I(dpack[u >> _DSHIFT])
            if pk < 0:
                lo = 0
                hi = cum.shape[0]
                while lo < hi:
                    mid = (lo + hi) >> 1
                    if cum[mid] > u:
                        hi = mid
                    else:
                        lo = mid + 1
                if lo >= cum.shape[0]:
                    lo = cum.shape[0] - 1
                pk = (I(jdy[lo]) << I(8)) | (I(jdx[lo]) + I(128))
            pks[ai] = pk
            lx = I(sx_lo + ai) + (pk & I(0xFF)) - I(128)
            ly = I(b) + (pk >> I(8))
            ok = (I(om[ai]) & I(ly >= ly_lo) & I(ly <= ly_hi)
                  & I(lx >= lx_lo) & I(lx <= lx_hi))
            cell = (ly - I(ly_lo)) * width + (lx - I(lx_lo))
            cell = cell * ok + n_cells * (I(1) - ok)
            mark = np.uint8(1) if pk != I(128) else np.uint8(3)
            grid[cell] |= mark
        if want_up:
            for ai in range(ncols):
                pk = pks[ai]
                dy = pk >> I(8)
                if om[ai] and dy >= 1:
                    lx = I(sx_lo + ai) + (pk & I(0xFF)) - I(128)
                    d = lx - I(up_center)
                    if d < 0:
                        d = -d
                    if dy * dy + I(up_halfspan) >= d:
                        up_x[n_up] = lx
                        up_src[n_up] = b
                        up_land[n_up] = I(b) + dy
                        n_up += 1

    offsets = np.zeros(n_rows + 1, dtype=np.int64)
    xs = np.empty(n_cells, dtype=np.int64)
    special = np.empty(n_cells, dtype=np.bool_)
    m = I(0)
    for r in range(n_rows):
        base = I(r) * width
        for xrel in range(width):
            v = grid[base + I(xrel)]
            xs[m] = I(xrel) + I(lx_lo)
            special[m] = v > 1
            m += I(v != 0)
        offsets[r + 1] = m
    return (offsets, xs[:m].copy(), special[:m].copy(),
            up_x[:n_up].copy(), up_src[:n_up].copy(), up_land[:n_up].copy())


@njit(cache=True, inline="always")
def _step_in_row(xs, a, b, x, glo, ghi, state, y):
    """One network step from (x, y) using the sorted row slice xs[a:b].

    Returns (new_x, ok): ok is False when the nearest point cannot be
    certified inside the guaranteed column interval [glo, ghi].
    """
    if a >= b:
        return I(0), False
    lo = a
    hi = b
    while lo < hi:
        mid = (lo + hi) >> 1
        if xs[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    dl = _FAR
    dr = _FAR
    if lo < b:
        dr = xs[lo] - x
    if lo > a:
        dl = x - xs[lo - 1]
    j = dl if dl < dr else dr
    if x - j < glo or x + j > ghi:
        return I(0), False
    if dl < dr:
        return xs[lo - 1], True
    if dr < dl:
        return xs[lo], True
    if _tie_sign(state, x, y) > 0:
        return xs[lo], True
    return xs[lo - 1], True


@njit(cache=True, nogil=True)
def trace_csr(offsets, xs, ly_lo, glo, ghi, state, pos0, y0, n_rows, positions):
    """Advance paths through pre-scanned CSR rows, recording positions.

    ``positions`` must be (n_rows+1, k); row r holds the positions at
    level y0+r.  Returns (status, steps_done): BOUNDARY means the step to
    level y0+steps_done+1 could not be certified.
    """
    k = pos0.shape[0]
    pos = pos0.copy()
    positions[0, :] = pos
    for r in range(n_rows):
        y = y0 + r
        row = y + 1 - ly_lo
        a = offsets[row]
        b = offsets[row + 1]
        for i in range(k):
            nx, ok = _step_in_row(xs, a, b, pos[i], glo, ghi, state, y)
            if not ok:
                return BOUNDARY, r
            pos[i] = nx
        positions[r + 1, :] = pos
    return OK, n_rows


@njit(cache=True, nogil=True)
def trace_free(state, thresh, cum, dpack, jdx, jdy, x_cut, y_cut,
               x0s, y0, n_steps, mode,
               block_h, clear0):
    """Self-materializing lockstep trace of k paths for n_steps levels.

    Paths start at level y0 from sorted columns ``x0s``.  Blocks of
    ``block_h`` rows are scanned around the current positions with
    ``clear0`` columns of clearance; when a step cannot be certified
    inside the scanned interval the block is rebuilt twice as wide, so
    results are exact regardless of the tuning values.

    mode MODE_FIXED     run exactly n_steps.
    mode MODE_MERGE     stop as soon as all paths coalesce.
    mode MODE_ENVELOPE  single path; stop when it leaves the parabolic
                        envelope of its start.

    Returns (status, steps_done, final_positions, merge_step, exit_step):
    ``merge_step`` is the first level offset at which one class remained
    (-1 if never), ``exit_step`` the first envelope violation (0 if none).
    """
    k = x0s.shape[0]
    pos = x0s.copy()
    x_anchor = x0s[0]
    y = y0
    step = 0
    merge_step = -1 if k > 1 else 0
    half = clear0

    while step < n_steps:
        h = block_h
        if step + h > n_steps:
            h = n_steps - step
        # retry loop: widen until the whole block traces soundly
        while True:
            span = pos[k - 1] - pos[0]
            center = (pos[0] + pos[k - 1]) // 2
            halfw = half + span // 2 + 1
            glo = center - halfw
            ghi = center + halfw
            sy_lo = y + 1 - y_cut
            sx_lo = glo - x_cut
            sx_hi = ghi + x_cut
            ncols = sx_hi - sx_lo + 1
            width = I(ghi - glo + 1)

            colst = np.empty(ncols, dtype=np.uint64)
            _col_states(state, sx_lo, ncols, colst)
            stbuf = np.empty(ncols, dtype=np.uint64)
            om = np.empty(ncols, dtype=np.uint8)
            uxy = np.empty(ncols, dtype=np.uint64)
            n_cells = I(h) * width
            grid = np.zeros(n_cells + 1, dtype=np.uint8)
            ylo1 = I(y + 1)
            yhi1 = I(y + h)
            for b in range(sy_lo, y + h + 1):
                yk = U(b) * _KY
                _row_passes(colst, yk, thresh, stbuf, om, uxy)
                for ai in range(ncols):
                    u = uxy[ai]
                    pk = I(dpack[u >> _DSHIFT])
                    if pk < 0:
                        lo = 0
                        hi = cum.shape[0]
                        while lo < hi:
                            mid = (lo + hi) >> 1
                            if cum[mid] > u:
                                hi = mid
                            else:
                                lo = mid + 1
                        if lo >= cum.shape[0]:
                            lo = cum.shape[0] - 1
                        pk = (I(jdy[lo]) << I(8)) | (I(jdx[lo]) + I(128))
                    lx = I(sx_lo + ai) + (pk & I(0xFF)) - I(128)
                    ly = I(b) + (pk >> I(8))
                    ok = (I(om[ai]) & I(ly >= ylo1) & I(ly <= yhi1)
                          & I(lx >= glo) & I(lx <= ghi))
                    cell = (ly - ylo1) * width + (lx - I(glo))
                    cell = cell * ok + n_cells * (I(1) - ok)
                    grid[cell] = np.uint8(1)
            offsets = np.zeros(h + 1, dtype=np.int64)
            rxs = np.empty(n_cells, dtype=np.int64)
            m = I(0)
            for r in range(h):
                base = I(r) * width
                for xrel in range(width):
                    v = grid[base + I(xrel)]
                    rxs[m] = I(xrel) + I(glo)
                    m += I(v)
                offsets[r + 1] = m

            # trace inside the block
            trial = pos.copy()
            kk_live = k
            ok_all = True
            done_step = -1
            exit_step = 0
            local_merge = merge_step
            for r in range(h):
                a = offsets[r]
                b = offsets[r + 1]
                yy = y + r
                for i in range(kk_live):
                    nx, ok = _step_in_row(rxs, a, b, trial[i], glo, ghi,
                                          state, yy)
                    if not ok:
                        ok_all = False
                        break
                    trial[i] = nx
                if not ok_all:
                    break
                # compress coalesced paths (order is preserved)
                w = 1
                for i in range(1, kk_live):
                    if trial[i] != trial[w - 1]:
                        trial[w] = trial[i]
                        w += 1
                kk_live = w
                if kk_live == 1 and local_merge < 0:
                    local_merge = step + r + 1
                    if mode == MODE_MERGE:
                        done_step = step + r + 1
                        break
                if mode == MODE_ENVELOPE:
                    t = I(step + r + 1)
                    d = trial[0] - x_anchor
                    if d < 0:
                        d = -d
                    if d > t * t:
                        exit_step = step + r + 1
                        done_step = step + r + 1
                        break
            if not ok_all:
                half *= 2
                if half > clear0 * 65536:
                    return BOUNDARY, step, pos[:k], merge_step, 0
                continue
            # block accepted
            if done_step >= 0:
                return OK, done_step, trial[:kk_live], local_merge, exit_step
            pos = trial[:kk_live]
            k = kk_live
            merge_step = local_merge
            step += h
            y += h
            break

    return OK, step, pos[:k], merge_step, 0


@njit(cache=True, nogil=True)
def box_count(state, thresh, cum, dpack, jdx, jdy, x_cut, y_cut, side):
    """Open sources landing inside [0, side) x [0, side), with multiplicity.

    Counting the landing measure (rather than the deduplicated point
    set) is what makes the independent-source cancellation exact: the
    count variance is a sum of per-source Bernoulli variances, which
    vanish in the bulk and survive only near the boundary.  Collision
    events would contribute area-order variance if merged away.
    """
    count = 0
    sx_lo = -x_cut
    ncols = side + 2 * x_cut
    colst = np.empty(ncols, dtype=np.uint64)
    _col_states(state, sx_lo, ncols, colst)
    st = np.empty(ncols, dtype=np.uint64)
    om = np.empty(ncols, dtype=np.uint8)
    uxy = np.empty(ncols, dtype=np.uint64)
    for b in range(-y_cut, side):
        yk = U(b) * _KY
        _row_passes(colst, yk, thresh, st, om, uxy)
        for ai in range(ncols):
            if not om[ai]:
                continue
            u = uxy[ai]
            pk = I(dpack[u >> _DSHIFT])
            if pk < 0:
                lo = 0
                hi = cum.shape[0]
                while lo < hi:
                    mid = (lo + hi) >> 1
                    if cum[mid] > u:
                        hi = mid
                    else:
                        lo = mid + 1
                if lo >= cum.shape[0]:
                    lo = cum.shape[0] - 1
                pk = (I(jdy[lo]) << I(8)) | (I(jdx[lo]) + I(128))
            lx = I(sx_lo + ai) + (pk & I(0xFF)) - I(128)
            ly = I(b) + (pk >> I(8))
            if 0 <= lx < side and 0 <= ly < side:
                count += 1
    return count
