"""Compiled inner loops used by the vectorized census paths."""

from __future__ import annotations

import numba as nb
import numpy as np

SQRT5 = np.sqrt(5.0)


# ---------------------------------------------------------------------------
# running median with two binary heaps


@nb.njit(cache=True, inline="always")
def _sift_up(h, j):
    while j > 0:
        p = (j - 1) >> 1
        if h[p] > h[j]:
            h[p], h[j] = h[j], h[p]
            j = p
        else:
            break


@nb.njit(cache=True, inline="always")
def _sift_down(h, size):
    j = 0
    while True:
        left = 2 * j + 1
        right = left + 1
        s = j
        if left < size and h[left] < h[s]:
            s = left
        if right < size and h[right] < h[s]:
            s = right
        if s == j:
            break
        h[s], h[j] = h[j], h[s]
        j = s


@nb.njit(cache=True)
def running_median(x):
    """Sample median of every prefix of ``x``; even sizes average the two
    central order statistics."""
    n = x.size
    lo = np.empty(n)  # max-heap stored negated
    hi = np.empty(n)  # min-heap
    nlo = 0
    nhi = 0
    out = np.empty(n)
    for i in range(n):
        v = x[i]
        if nlo == 0 or v <= -lo[0]:
            lo[nlo] = -v
            nlo += 1
            _sift_up(lo, nlo - 1)
        else:
            hi[nhi] = v
            nhi += 1
            _sift_up(hi, nhi - 1)
        if nlo > nhi + 1:
            top = -lo[0]
            nlo -= 1
            lo[0] = lo[nlo]
            _sift_down(lo, nlo)
            hi[nhi] = top
            nhi += 1
            _sift_up(hi, nhi - 1)
        elif nhi > nlo:
            top = hi[0]
            nhi -= 1
            hi[0] = hi[nhi]
            _sift_down(hi, nhi)
            lo[nlo] = -top
            nlo += 1
            _sift_up(lo, nlo - 1)
        if nlo > nhi:
            out[i] = -lo[0]
        else:
            out[i] = 0.5 * (hi[0] - lo[0])
    return out


# ---------------------------------------------------------------------------
# exact ECDF census


@nb.njit(cache=True)
def _record(state, k, n1, n2, thresholds):
    # misses on the contiguous block n1..n2 (inclusive) for distance k
    if n2 < n1:
        return
    state[k, 0] += n2 - n1 + 1
    state[k, 1] = n2
    for j in range(thresholds.size):
        lo = max(n1, thresholds[j])
        if n2 >= lo:
            state[k, 2 + j] += n2 - lo + 1


@nb.njit(cache=True)
def _sup_exact(u_sorted, C, n, lo, hi):
    # max over t in [lo, hi) of |F_n(t) - t| given the bucket's sorted points
    m = u_sorted.size
    best = abs(C / n - lo)
    for j in range(m):
        v = u_sorted[j]
        a = abs((C + j) / n - v)
        b = abs((C + j + 1) / n - v)
        if a > best:
            best = a
        if b > best:
            best = b
    e = abs((C + m) / n - hi)
    if e > best:
        best = e
    return best


@nb.njit(cache=True)
def _l1_exact(u_sorted, C, n, lo, hi):
    # int_lo^hi |F_n(t) - t| dt, F_n piecewise constant between points
    total = 0.0
    left = lo
    level = C / n
    m = u_sorted.size
    for j in range(m + 1):
        right = u_sorted[j] if j < m else hi
        if right > left:
            a = level - left
            b = level - right
            if a >= 0.0 and b >= 0.0:
                total += 0.5 * (a + b) * (right - left)
            elif a <= 0.0 and b <= 0.0:
                total -= 0.5 * (a + b) * (right - left)
            else:
                # crosses zero at t = level
                total += 0.5 * a * a + 0.5 * b * b
        left = right
        level = (C + j + 1) / n
    return total


@nb.njit(cache=True)
def _sup_now(bcnt, bstart, bvals, ub, n, B):
    # exact sup |F_n(t) - t| from bucket counts and sorted bucket members
    w = 1.0 / B
    # pass 1: attained values at bucket edges, and per-bucket bounds
    d = 0.0
    C = 0
    for bb in range(B):
        m = bcnt[bb]
        lo = bb * w
        hi = lo + w
        a_lo = abs(C / n - lo)
        a_hi = abs((C + m) / n - hi)
        if a_lo > d:
            d = a_lo
        if a_hi > d:
            d = a_hi
        ub[bb] = max(abs(C / n - hi), abs((C + m) / n - lo)) if m > 0 else 0.0
        C += m
    # pass 2: exact only where the bound can beat the current max
    C = 0
    for bb in range(B):
        m = bcnt[bb]
        if ub[bb] > d:
            st = bstart[bb]
            e = _sup_exact(bvals[st:st + m], C, n, bb * w, bb * w + w)
            if e > d:
                d = e
        C += m
    return d


@nb.njit(cache=True)
def _next_eval(hsum, n, gap, nmax):
    # smallest n' > n with sum_{j=n+1}^{n'} 1/j >= gap
    target = hsum[n] + gap
    k = n + 1
    while k <= nmax and hsum[k] < target:
        k += 1
    return k


@nb.njit(cache=True)
def ecdf_census(u, eps, thresholds, nbuckets):
    """Exact census of ``sup|F_n - F|``, ``(int (F_n - F)^2)^{1/2}`` and
    ``int |F_n - F|`` against ``eps`` for uniform data ``u``.

    Returns an array with one row per distance (sup, cvm, l1) holding
    ``[total_misses, last_exit_n, miss counts for n >= thresholds[j]...]``.

    Exactness rests on ``|d_{n+1} - d_n| <= 1/(n+1)`` for all three
    distances: after an exact evaluation at ``n`` the sign of ``d - eps`` is
    known until the harmonic increments can close the gap. Sup and L1 are
    evaluated per bucket from counts and sums, falling back to sorted
    bucket members only where bounds are inconclusive. The Cramer-von Mises
    value uses the rank-weighted sum kept in a Fenwick tree.
    """
    nmax = u.size
    B = nbuckets
    state = np.zeros((3, 2 + thresholds.size), dtype=np.int64)
    hsum = np.zeros(nmax + 2)
    for j in range(1, nmax + 2):
        hsum[j] = hsum[j - 1] + 1.0 / j
    # bucket index and storage offsets
    bidx = np.minimum((u * B).astype(np.int64), B - 1)
    bcount_total = np.zeros(B, dtype=np.int64)
    for i in range(nmax):
        bcount_total[bidx[i]] += 1
    bstart = np.zeros(B + 1, dtype=np.int64)
    for b in range(B):
        bstart[b + 1] = bstart[b] + bcount_total[b]
    # arrived members of each bucket, kept sorted by insertion
    bvals = np.empty(nmax)
    bcnt = np.zeros(B, dtype=np.int64)
    bsum = np.zeros(B)
    ub = np.empty(B)
    # Fenwick over global rank for the rank-weighted sum
    order = np.argsort(u)
    rank = np.empty(nmax, dtype=np.int64)
    for r in range(nmax):
        rank[order[r]] = r + 1
    fcnt = np.zeros(nmax + 1, dtype=np.int64)
    fsum = np.zeros(nmax + 1)
    S1 = 0.0
    S2 = 0.0
    T = 0.0
    next_eval = np.ones(3, dtype=np.int64)
    cur_miss = np.zeros(3, dtype=np.bool_)
    w = 1.0 / B
    for i in range(nmax):
        n = i + 1
        v = u[i]
        b = bidx[i]
        j = bstart[b] + bcnt[b]
        while j > bstart[b] and bvals[j - 1] > v:
            bvals[j] = bvals[j - 1]
            j -= 1
        bvals[j] = v
        bcnt[b] += 1
        bsum[b] += v
        # Fenwick: count and sum of earlier values below v
        r = rank[i]
        c_less = 0
        s_less = 0.0
        k = r - 1
        while k > 0:
            c_less += fcnt[k]
            s_less += fsum[k]
            k -= k & (-k)
        k = r
        while k <= nmax:
            fcnt[k] += 1
            fsum[k] += v
            k += k & (-k)
        s_greater = S1 - s_less
        T += (c_less + 1) * v + s_greater
        S1 += v
        S2 += v * v
        for kd in range(3):
            if n < next_eval[kd]:
                if cur_miss[kd]:
                    _record(state, kd, n, n, thresholds)
                continue
            if kd == 1:
                nn = float(n)
                ncm = 1.0 / (12.0 * nn) + S2 - (2.0 * T - S1) / nn + (4.0 * nn * nn - 1.0) / (12.0 * nn)
                d = np.sqrt(max(ncm, 0.0) / nn)
            elif kd == 0:
                d = _sup_now(bcnt, bstart, bvals, ub, n, B)
            else:
                d = 0.0
                C = 0
                for bb in range(B):
                    m = bcnt[bb]
                    lo = bb * w
                    hi = lo + w
                    fmin = C / n - hi
                    fmax = (C + m) / n - lo
                    if fmin >= 0.0 or fmax <= 0.0:
                        # F_n - t keeps its sign on the bucket
                        integ = (C / n) * w + (m * hi - bsum[bb]) / n - 0.5 * (hi * hi - lo * lo)
                        d += abs(integ)
                    else:
                        st = bstart[bb]
                        d += _l1_exact(bvals[st:st + m], C, n, lo, hi)
                    C += m
            miss = d >= eps
            cur_miss[kd] = miss
            if miss:
                _record(state, kd, n, n, thresholds)
                nxt = _next_eval(hsum, n, d - eps, nmax)
            else:
                nxt = _next_eval(hsum, n, eps - d, nmax)
            # guard against rounding at the boundary
            next_eval[kd] = max(n + 1, nxt - 1)
    return state


@nb.njit(cache=True)
def ecdf_sup_exceed(u, nmin, levels, nbuckets):
    """Number of ``levels`` (ascending) reached by ``sup_{n >= nmin} D_n``,
    ``D_n = sup_t |F_n(t) - t|``, over ``n <= len(u)``.

    Exact: between evaluations ``D`` moves by at most ``1/(n+1)`` per step,
    so evaluation resumes only once the next unreached level is attainable.
    """
    nmax = u.size
    B = nbuckets
    hsum = np.zeros(nmax + 2)
    for j in range(1, nmax + 2):
        hsum[j] = hsum[j - 1] + 1.0 / j
    bidx = np.minimum((u * B).astype(np.int64), B - 1)
    bstart = np.zeros(B + 1, dtype=np.int64)
    for i in range(nmax):
        bstart[bidx[i] + 1] += 1
    for b in range(B):
        bstart[b + 1] += bstart[b]
    bvals = np.empty(nmax)
    bcnt = np.zeros(B, dtype=np.int64)
    ub = np.empty(B)
    reached = 0
    nl = levels.size
    next_eval = nmin
    for i in range(nmax):
        v = u[i]
        b = bidx[i]
        j = bstart[b] + bcnt[b]
        while j > bstart[b] and bvals[j - 1] > v:
            bvals[j] = bvals[j - 1]
            j -= 1
        bvals[j] = v
        bcnt[b] += 1
        n = i + 1
        if n < next_eval or reached == nl:
            continue
        d = _sup_now(bcnt, bstart, bvals, ub, n, B)
        while reached < nl and d >= levels[reached]:
            reached += 1
        if reached == nl:
            break
        nxt = _next_eval(hsum, n, levels[reached] - d, nmax)
        next_eval = max(n + 1, nxt - 1)
    return reached


# ---------------------------------------------------------------------------
# compact-kernel density and derivative miss counts


@nb.njit(cache=True)
def epanechnikov_q_counts(x, x0, cs, target, eps, npow, rate, deriv, thresholds):
    """Miss counts of the Epanechnikov density (or derivative) estimate at
    ``x0`` with bandwidths ``h_n = c n^{-rate}`` for every ``c`` in ``cs``.

    Observation ``i`` (1-based) contributes to ``f_n(x0)`` for
    ``n`` in ``[i, e_i]`` where ``e_i`` is the last ``n`` with
    ``|x0 - x_i| < sqrt(5) h_n``. Difference arrays over ``n`` accumulate the
    count, first and second moments of ``x0 - x_i`` inside the window, from
    which the estimate is exact. Returns ``(len(cs), 2 + len(thresholds))``
    rows of ``[total, last, counts from thresholds...]``.
    """
    na = cs.size
    nmax = x.size
    out = np.zeros((na, 2 + thresholds.size), dtype=np.int64)
    cnt = np.zeros(nmax + 2)
    s1 = np.zeros(nmax + 2)
    s2 = np.zeros(nmax + 2)
    p = 1.0 / rate
    kc = 3.0 / (4.0 * SQRT5)
    dc = 3.0 / (10.0 * SQRT5)
    cmax = cs.max()
    base = np.empty(nmax)
    for i in range(nmax):
        ad = abs(x0 - x[i])
        base[i] = (SQRT5 / ad) ** p if (ad > 0.0 and ad < SQRT5 * cmax) else np.inf
    for ia in range(na):
        c = cs[ia]
        cp = c**p
        edge = SQRT5 * c
        cnt[:] = 0.0
        s1[:] = 0.0
        s2[:] = 0.0
        for i in range(nmax):
            d = x0 - x[i]
            ad = abs(d)
            if ad >= edge:
                continue
            n0 = i + 1
            if ad > 0.0:
                ef = cp * base[i]
                if ef < n0 - 1:
                    continue
                e = nmax if ef >= nmax else int(ef)
                # settle the strict support inequality exactly
                while e >= n0 and edge * npow[e] <= ad:
                    e -= 1
                while e < nmax and edge * npow[e + 1] > ad:
                    e += 1
                if e < n0:
                    continue
            else:
                e = nmax
            cnt[n0] += 1.0
            cnt[e + 1] -= 1.0
            s1[n0] += d
            s1[e + 1] -= d
            s2[n0] += d * d
            s2[e + 1] -= d * d
        C = 0.0
        S1 = 0.0
        S2 = 0.0
        for n in range(1, nmax + 1):
            C += cnt[n]
            S1 += s1[n]
            S2 += s2[n]
            h = c * npow[n]
            if deriv:
                est = -dc * S1 / (n * h * h * h)
            else:
                est = kc * (C - S2 / (5.0 * h * h)) / (n * h)
            if abs(est - target) >= eps:
                out[ia, 0] += 1
                out[ia, 1] = n
                for j in range(thresholds.size):
                    if n >= thresholds[j]:
                        out[ia, 2 + j] += 1
    return out


@nb.njit(cache=True)
def epanechnikov_estimates(x, x0, c, npow, deriv):
    """Full estimate sequence (same arithmetic as the census), for checks."""
    nmax = x.size
    out = np.empty(nmax)
    kc = 3.0 / (4.0 * SQRT5)
    dc = 3.0 / (10.0 * SQRT5)
    for n in range(1, nmax + 1):
        h = c * npow[n]
        C = 0.0
        S1 = 0.0
        S2 = 0.0
        for i in range(n):
            d = x0 - x[i]
            if abs(d) < SQRT5 * h:
                C += 1.0
                S1 += d
                S2 += d * d
        if deriv:
            out[n - 1] = -dc * S1 / (n * h * h * h)
        else:
            out[n - 1] = kc * (C - S2 / (5.0 * h * h)) / (n * h)
    return out


# ---------------------------------------------------------------------------
# Kiefer sheet maximum by exact local refinement


@nb.njit(cache=True)
def _cell_var_t(t0, t1):
    # largest t(1-t) on [t0, t1]
    if t0 <= 0.5 <= t1:
        return 0.25
    return max(t0 * (1.0 - t0), t1 * (1.0 - t1))


@nb.njit(cache=True)
def kiefer_refine_max(V, s, t, seed, min_cell, zq, max_rounds):
    """Continuous ``max |K0|`` from grid values by exact midpoint refinement.

    ``V[i, j] = K0(s_i, t_j)`` with ``s[0] = 0`` (a zero row) and ``t``
    covering ``[0, 1]``. In ``s`` the sheet has independent bridge-valued
    increments, and in ``t`` it is a vector bridge with covariance
    ``min(s_i, s_k)``; so a new row at an ``s`` midpoint is the average of its
    neighbours plus ``sqrt(ds)/2`` times a fresh bridge, and a new column at a
    ``t`` midpoint is the average plus ``sqrt(dt)/2`` times a fresh Brownian
    motion in ``s``. Cells whose corner maximum is within ``zq`` standard
    deviations of the running maximum are refined until both sides are below
    ``min_cell``; the rest is cropped away. Fresh normals come from numba's
    generator seeded with ``seed``.
    """
    np.random.seed(seed)
    best = 0.0
    for i in range(V.shape[0]):
        for j in range(V.shape[1]):
            best = max(best, abs(V[i, j]))
    for _ in range(max_rounds):
        ns = s.size
        nt = t.size
        rr = np.zeros(ns - 1, np.bool_)
        cc = np.zeros(nt - 1, np.bool_)
        i0, i1, j0, j1 = ns, -1, nt, -1
        for i in range(ns - 1):
            ds = s[i + 1] - s[i]
            for j in range(nt - 1):
                dt = t[j + 1] - t[j]
                if ds < min_cell and dt < min_cell:
                    continue
                gap = best - max(max(abs(V[i, j]), abs(V[i + 1, j])),
                                 max(abs(V[i, j + 1]), abs(V[i + 1, j + 1])))
                # gap < zq * sd with sd = sqrt(var) / 2
                if gap <= 0.0 or 4.0 * gap * gap < zq * zq * (
                        ds * _cell_var_t(t[j], t[j + 1]) + dt * s[i + 1]):
                    if ds >= min_cell:
                        rr[i] = True
                    if dt >= min_cell:
                        cc[j] = True
                    i0 = min(i0, i)
                    i1 = max(i1, i + 1)
                    j0 = min(j0, j)
                    j1 = max(j1, j + 1)
        if i1 < 0:
            break
        # crop, then insert columns
        s = s[i0:i1 + 1].copy()
        rr = rr[i0:i1]
        cc = cc[j0:j1]
        ns = s.size
        nc = 0
        for j in range(cc.size):
            if cc[j]:
                nc += 1
        tn = np.empty(t[j0:j1 + 1].size + nc)
        Vn = np.empty((ns, tn.size))
        k = 0
        for j in range(j0, j1 + 1):
            tn[k] = t[j]
            for i in range(ns):
                Vn[i, k] = V[i0 + i, j]
            k += 1
            if j < j1 and cc[j - j0]:
                tn[k] = 0.5 * (t[j] + t[j + 1])
                h = 0.5 * np.sqrt(t[j + 1] - t[j])
                x = 0.0
                prev = 0.0
                for i in range(ns):
                    x += np.random.standard_normal() * np.sqrt(s[i] - prev)
                    prev = s[i]
                    Vn[i, k] = 0.5 * (V[i0 + i, j] + V[i0 + i, j + 1]) + h * x
                k += 1
        t = tn
        V = Vn
        nt = t.size
        # insert rows
        nr = 0
        for i in range(rr.size):
            if rr[i]:
                nr += 1
        sn = np.empty(ns + nr)
        Vn = np.empty((ns + nr, nt))
        k = 0
        for i in range(ns):
            sn[k] = s[i]
            Vn[k, :] = V[i, :]
            k += 1
            if i < ns - 1 and rr[i]:
                sn[k] = 0.5 * (s[i] + s[i + 1])
                h = 0.5 * np.sqrt(s[i + 1] - s[i])
                w = 0.0
                uprev = 0.0
                for j in range(nt):
                    b = 0.0
                    if 0.0 < t[j] < 1.0:
                        # bridge B(t) = (1 - t) W(t / (1 - t))
                        u = t[j] / (1.0 - t[j])
                        w += np.random.standard_normal() * np.sqrt(u - uprev)
                        uprev = u
                        b = (1.0 - t[j]) * w
                    Vn[k, j] = 0.5 * (V[i, j] + V[i + 1, j]) + h * b
                    best = max(best, abs(Vn[k, j]))
                k += 1
        s = sn
        V = Vn
        for i in range(V.shape[0]):
            for j in range(V.shape[1]):
                best = max(best, abs(V[i, j]))
    return best
