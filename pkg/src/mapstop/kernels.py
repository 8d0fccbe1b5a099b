"""Inner loops with a numba implementation and a numpy/python fallback.

Every public kernel ``foo`` is bound to ``foo_numba`` or ``foo_numpy``
depending on :data:`mapstop.accel.USE_NUMBA`.  Both variants perform the same
floating point operations in the same order, so results agree bit for bit.

Cell codes used throughout: 0 free, 1 occupied, 2 unknown.
"""
import heapq
import math

import numpy as np
from scipy.spatial import cKDTree

from .accel import USE_NUMBA, njit

FREE = 0
OCCUPIED = 1
UNKNOWN = 2

SQRT2 = math.sqrt(2.0)

# 8-neighbourhood in a fixed order; A* expansion order depends on it
NEIGHBOURS = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)], dtype=np.int64
)


# ---------------------------------------------------------------------------
# ray casting (Amanatides-Woo DDA)
# ---------------------------------------------------------------------------

@njit
def _dda_setup(p, d, res):
    # returns step, first boundary distance, boundary spacing
    cell = math.floor(p / res)
    if d > 0.0:
        return 1, ((cell + 1) * res - p) / d, res / d
    if d < 0.0:
        return -1, (cell * res - p) / d, -res / d
    return 0, math.inf, math.inf


@njit
def cast_rays_numba(occ, x0, y0, angles, max_range, res):
    h, w = occ.shape
    n = angles.shape[0]
    ranges = np.full(n, max_range)
    hits = np.zeros(n, dtype=np.bool_)
    c0 = int(math.floor(x0 / res))
    r0 = int(math.floor(y0 / res))
    for k in range(n):
        dx = math.cos(angles[k])
        dy = math.sin(angles[k])
        sc, tmx, tdx = _dda_setup(x0, dx, res)
        sr, tmy, tdy = _dda_setup(y0, dy, res)
        c = c0
        r = r0
        while True:
            if tmx <= tmy:
                t = tmx
                c += sc
                tmx += tdx
            else:
                t = tmy
                r += sr
                tmy += tdy
            if t > max_range or c < 0 or c >= w or r < 0 or r >= h:
                break
            if occ[r, c]:
                ranges[k] = t
                hits[k] = True
                break
    return ranges, hits


def _dda_setup_np(p, d, res):
    cell = np.floor(p / res)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_pos = ((cell + 1) * res - p) / d
        t_neg = (cell * res - p) / d
        t_max = np.where(d > 0.0, t_pos, np.where(d < 0.0, t_neg, np.inf))
        t_delta = np.where(d > 0.0, res / d, np.where(d < 0.0, -res / d, np.inf))
    return step, t_max, t_delta


def cast_rays_numpy(occ, x0, y0, angles, max_range, res):
    h, w = occ.shape
    n = angles.shape[0]
    ranges = np.full(n, max_range)
    hits = np.zeros(n, dtype=bool)
    dx = np.cos(angles)
    dy = np.sin(angles)
    sc, tmx, tdx = _dda_setup_np(np.full(n, x0), dx, res)
    sr, tmy, tdy = _dda_setup_np(np.full(n, y0), dy, res)
    c = np.full(n, int(math.floor(x0 / res)), dtype=np.int64)
    r = np.full(n, int(math.floor(y0 / res)), dtype=np.int64)
    active = np.ones(n, dtype=bool)
    while active.any():
        ix = np.nonzero(active)[0]
        use_x = tmx[ix] <= tmy[ix]
        t = np.where(use_x, tmx[ix], tmy[ix])
        c[ix] += np.where(use_x, sc[ix], 0)
        r[ix] += np.where(use_x, 0, sr[ix])
        tmx[ix] = np.where(use_x, tmx[ix] + tdx[ix], tmx[ix])
        tmy[ix] = np.where(use_x, tmy[ix], tmy[ix] + tdy[ix])
        ci, ri = c[ix], r[ix]
        out = (t > max_range) | (ci < 0) | (ci >= w) | (ri < 0) | (ri >= h)
        inside = ~out
        struck = np.zeros(ix.shape[0], dtype=bool)
        struck[inside] = occ[ri[inside], ci[inside]]
        ranges[ix[struck]] = t[struck]
        hits[ix[struck]] = True
        active[ix[out | struck]] = False
    return ranges, hits


@njit
def integrate_rays_numba(cells, x0, y0, angles, ranges, hits, res, margin):
    """Carve free space along each beam; mark confident hit cells occupied.

    For a hit beam the cell boundaries entered within ``range +- margin`` are
    candidate obstacle surfaces.  With exactly one candidate, its cell becomes
    occupied and everything before it free.  Otherwise the hit is ambiguous:
    only cells lying wholly before the window are freed.  The robot's own
    cell is never marked occupied.
    """
    h, w = cells.shape
    n = angles.shape[0]
    c0 = int(math.floor(x0 / res))
    r0 = int(math.floor(y0 / res))
    for k in range(n):
        dx = math.cos(angles[k])
        dy = math.sin(angles[k])
        rng = ranges[k]
        lo = rng - margin
        hi = rng + margin
        sc, tmx0, tdx = _dda_setup(x0, dx, res)
        sr, tmy0, tdy = _dda_setup(y0, dy, res)
        free_upto = 0  # cells with step index < free_upto become free
        occ_at = -1
        if hits[k]:
            tmx, tmy, c, r = tmx0, tmy0, c0, r0
            entry = 0.0
            i = 0
            first_in = -1
            n_cand = 0
            cand = -1
            while True:
                if entry > hi:
                    if first_in < 0:
                        first_in = i
                    break
                if entry >= lo:
                    if first_in < 0:
                        first_in = i
                    n_cand += 1
                    cand = i
                if tmx <= tmy:
                    entry = tmx
                    c += sc
                    tmx += tdx
                else:
                    entry = tmy
                    r += sr
                    tmy += tdy
                i += 1
                if c < 0 or c >= w or r < 0 or r >= h:
                    if first_in < 0:
                        first_in = i
                    break
            if n_cand == 1:
                free_upto = cand
                occ_at = cand
            else:
                free_upto = first_in - 1
            if free_upto < 1:
                free_upto = 1
        tmx, tmy, c, r = tmx0, tmy0, c0, r0
        entry = 0.0
        i = 0
        while True:
            if hits[k]:
                if i == occ_at and i > 0:
                    cells[r, c] = OCCUPIED
                    break
                if i >= free_upto:
                    break
            elif entry >= rng:
                break
            if cells[r, c] != OCCUPIED:
                cells[r, c] = FREE
            if tmx <= tmy:
                entry = tmx
                c += sc
                tmx += tdx
            else:
                entry = tmy
                r += sr
                tmy += tdy
            if c < 0 or c >= w or r < 0 or r >= h:
                break
            i += 1
    return cells


def _walk_np(n, c0, r0, tmx0, tmy0, tdx, tdy, sc, sr, h, w):
    """Co-routine over DDA steps of all beams at once.

    Yields ``(ix, step, rows, cols, entry)`` for the still-active beams; the
    caller sends back a mask of which of those beams keep walking.
    """
    tmx, tmy = tmx0.copy(), tmy0.copy()
    c = np.full(n, c0, dtype=np.int64)
    r = np.full(n, r0, dtype=np.int64)
    entry = np.zeros(n)
    active = np.ones(n, dtype=bool)
    step = 0
    while active.any():
        ix = np.nonzero(active)[0]
        keep = yield ix, step, r[ix], c[ix], entry[ix]
        active[ix[~keep]] = False
        ix = ix[keep]
        use_x = tmx[ix] <= tmy[ix]
        entry[ix] = np.where(use_x, tmx[ix], tmy[ix])
        c[ix] += np.where(use_x, sc[ix], 0)
        r[ix] += np.where(use_x, 0, sr[ix])
        tmx[ix] = np.where(use_x, tmx[ix] + tdx[ix], tmx[ix])
        tmy[ix] = np.where(use_x, tmy[ix], tmy[ix] + tdy[ix])
        step += 1
        ci, ri = c[ix], r[ix]
        out = (ci < 0) | (ci >= w) | (ri < 0) | (ri >= h)
        active[ix[out]] = False
        yield ix[out], step
    return


def _drive(gen, visit):
    try:
        item = next(gen)
        while True:
            if len(item) == 2:
                visit.out_of_bounds(*item)
                item = next(gen)
            else:
                item = gen.send(visit.step(*item))
    except StopIteration:
        pass


def integrate_rays_numpy(cells, x0, y0, angles, ranges, hits, res, margin):
    h, w = cells.shape
    n = angles.shape[0]
    dx = np.cos(angles)
    dy = np.sin(angles)
    sc, tmx0, tdx = _dda_setup_np(np.full(n, x0), dx, res)
    sr, tmy0, tdy = _dda_setup_np(np.full(n, y0), dy, res)
    c0 = int(math.floor(x0 / res))
    r0 = int(math.floor(y0 / res))
    lo = ranges - margin
    hi = ranges + margin
    args = (n, c0, r0, tmx0, tmy0, tdx, tdy, sc, sr, h, w)

    class Scout:
        first_in = np.full(n, -1, dtype=np.int64)
        n_cand = np.zeros(n, dtype=np.int64)
        cand = np.full(n, -1, dtype=np.int64)

        def step(self, ix, step, ri, ci, ent):
            past = ent > hi[ix]
            inside = ~past & (ent >= lo[ix])
            unset = self.first_in[ix] < 0
            self.first_in[ix[(past | inside) & unset]] = step
            self.n_cand[ix[inside]] += 1
            self.cand[ix[inside]] = step
            return hits[ix] & ~past

        def out_of_bounds(self, ix, step):
            unset = ix[self.first_in[ix] < 0]
            self.first_in[unset] = step

    scout = Scout()
    _drive(_walk_np(*args), scout)
    single = scout.n_cand == 1
    free_upto = np.where(single, scout.cand, scout.first_in - 1)
    free_upto = np.maximum(free_upto, 1)
    occ_at = np.where(single & hits, scout.cand, -1)

    free = np.zeros((h, w), dtype=bool)
    occ = np.zeros((h, w), dtype=bool)

    class Carver:
        def step(self, ix, step, ri, ci, ent):
            hit = hits[ix]
            mark = hit & (occ_at[ix] == step) & (step > 0)
            stop = np.where(hit, mark | (step >= free_upto[ix]), ent >= ranges[ix])
            occ[ri[mark], ci[mark]] = True
            carve = ~stop
            free[ri[carve], ci[carve]] = True
            return ~stop

        def out_of_bounds(self, ix, step):
            pass

    _drive(_walk_np(*args), Carver())
    cells[occ] = OCCUPIED
    cells[free & (cells != OCCUPIED)] = FREE
    return cells


# ---------------------------------------------------------------------------
# A* on an 8-connected grid
# ---------------------------------------------------------------------------

@njit
def _heap_less(f, h, q, i, j):
    if f[i] != f[j]:
        return f[i] < f[j]
    if h[i] != h[j]:
        return h[i] < h[j]
    return q[i] < q[j]


@njit
def _heap_swap(f, h, q, node, i, j):
    f[i], f[j] = f[j], f[i]
    h[i], h[j] = h[j], h[i]
    q[i], q[j] = q[j], q[i]
    node[i], node[j] = node[j], node[i]


@njit
def _octile(r, c, gr, gc, res):
    dr = abs(r - gr)
    dc = abs(c - gc)
    lo = min(dr, dc)
    hi = max(dr, dc)
    return res * (hi + (SQRT2 - 1.0) * lo)


@njit
def astar_numba(passable, start, goal, res):
    """Return (length, parent array).  length < 0 means unreachable."""
    h, w = passable.shape
    n = h * w
    g = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    closed = np.zeros(n, dtype=np.bool_)
    cap = 16 * n + 16
    hf = np.empty(cap)
    hh = np.empty(cap)
    hq = np.empty(cap, dtype=np.int64)
    hn = np.empty(cap, dtype=np.int64)
    size = 0
    counter = 0
    gr, gc = goal // w, goal % w
    g[start] = 0.0
    h0 = _octile(start // w, start % w, gr, gc, res)
    hf[0] = h0
    hh[0] = h0
    hq[0] = 0
    hn[0] = start
    size = 1
    counter = 1
    while size > 0:
        cur = hn[0]
        size -= 1
        if size > 0:
            _heap_swap(hf, hh, hq, hn, 0, size)
            i = 0
            while True:
                left = 2 * i + 1
                if left >= size:
                    break
                best = left
                right = left + 1
                if right < size and _heap_less(hf, hh, hq, right, left):
                    best = right
                if _heap_less(hf, hh, hq, best, i):
                    _heap_swap(hf, hh, hq, hn, best, i)
                    i = best
                else:
                    break
        if closed[cur]:
            continue
        if cur == goal:
            return g[cur], parent
        closed[cur] = True
        r, c = cur // w, cur % w
        for k in range(8):
            nr = r + NEIGHBOURS[k, 0]
            nc = c + NEIGHBOURS[k, 1]
            if nr < 0 or nr >= h or nc < 0 or nc >= w or not passable[nr, nc]:
                continue
            nxt = nr * w + nc
            if closed[nxt]:
                continue
            step = res * SQRT2 if (NEIGHBOURS[k, 0] != 0 and NEIGHBOURS[k, 1] != 0) else res
            cand = g[cur] + step
            if cand < g[nxt]:
                g[nxt] = cand
                parent[nxt] = cur
                hv = _octile(nr, nc, gr, gc, res)
                if size >= cap:
                    return -2.0, parent
                hf[size] = cand + hv
                hh[size] = hv
                hq[size] = counter
                hn[size] = nxt
                counter += 1
                i = size
                size += 1
                while i > 0:
                    p = (i - 1) // 2
                    if _heap_less(hf, hh, hq, i, p):
                        _heap_swap(hf, hh, hq, hn, i, p)
                        i = p
                    else:
                        break
    return -1.0, parent


def _octile_py(r, c, gr, gc, res):
    dr = abs(r - gr)
    dc = abs(c - gc)
    return res * (max(dr, dc) + (SQRT2 - 1.0) * min(dr, dc))


def astar_numpy(passable, start, goal, res):
    h, w = passable.shape
    n = h * w
    g = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    closed = np.zeros(n, dtype=bool)
    gr, gc = divmod(goal, w)
    g[start] = 0.0
    h0 = _octile_py(start // w, start % w, gr, gc, res)
    heap = [(h0, h0, 0, start)]
    counter = 1
    moves = [(int(a), int(b)) for a, b in NEIGHBOURS]
    while heap:
        _, _, _, cur = heapq.heappop(heap)
        if closed[cur]:
            continue
        if cur == goal:
            return float(g[cur]), parent
        closed[cur] = True
        r, c = divmod(cur, w)
        gcur = g[cur]
        for dr, dc in moves:
            nr, nc = r + dr, c + dc
            if nr < 0 or nr >= h or nc < 0 or nc >= w or not passable[nr, nc]:
                continue
            nxt = nr * w + nc
            if closed[nxt]:
                continue
            step = res * SQRT2 if (dr != 0 and dc != 0) else res
            cand = gcur + step
            if cand < g[nxt]:
                g[nxt] = cand
                parent[nxt] = cur
                hv = _octile_py(nr, nc, gr, gc, res)
                heapq.heappush(heap, (cand + hv, hv, counter, nxt))
                counter += 1
    return -1.0, parent


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------

@njit
def dbscan_numba(points, eps, min_pts):
    n = points.shape[0]
    eps2 = eps * eps
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            ddx = points[i, 0] - points[j, 0]
            ddy = points[i, 1] - points[j, 1]
            if ddx * ddx + ddy * ddy <= eps2:
                counts[i] += 1
    offsets = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        offsets[i + 1] = offsets[i] + counts[i]
    nbrs = np.empty(offsets[n], dtype=np.int64)
    for i in range(n):
        k = offsets[i]
        for j in range(n):
            ddx = points[i, 0] - points[j, 0]
            ddy = points[i, 1] - points[j, 1]
            if ddx * ddx + ddy * ddy <= eps2:
                nbrs[k] = j
                k += 1
    labels = np.full(n, -2, dtype=np.int64)
    queue = np.empty(offsets[n] + 1, dtype=np.int64)
    cid = -1
    for i in range(n):
        if labels[i] != -2:
            continue
        if counts[i] < min_pts:
            labels[i] = -1
            continue
        cid += 1
        labels[i] = cid
        head = 0
        tail = 0
        for k in range(offsets[i], offsets[i + 1]):
            queue[tail] = nbrs[k]
            tail += 1
        while head < tail:
            q = queue[head]
            head += 1
            if labels[q] == -1:
                labels[q] = cid
                continue
            if labels[q] != -2:
                continue
            labels[q] = cid
            if counts[q] >= min_pts:
                for k in range(offsets[q], offsets[q + 1]):
                    if labels[nbrs[k]] < 0:
                        queue[tail] = nbrs[k]
                        tail += 1
    return labels


def dbscan_numpy(points, eps, min_pts):
    n = points.shape[0]
    labels = np.full(n, -2, dtype=np.int64)
    if n == 0:
        return labels
    # squared-distance test keeps the inclusive boundary identical to the numba path
    tree = cKDTree(points)
    cand = tree.query_ball_point(points, eps * (1.0 + 1e-9))
    eps2 = eps * eps
    nbrs = []
    for i, js in enumerate(cand):
        js = np.sort(np.asarray(js, dtype=np.int64))
        d = points[js] - points[i]
        nbrs.append(js[(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) <= eps2])
    counts = np.array([len(js) for js in nbrs])
    cid = -1
    for i in range(n):
        if labels[i] != -2:
            continue
        if counts[i] < min_pts:
            labels[i] = -1
            continue
        cid += 1
        labels[i] = cid
        queue = list(nbrs[i])
        head = 0
        while head < len(queue):
            q = queue[head]
            head += 1
            if labels[q] == -1:
                labels[q] = cid
                continue
            if labels[q] != -2:
                continue
            labels[q] = cid
            if counts[q] >= min_pts:
                queue.extend(j for j in nbrs[q] if labels[j] < 0)
    return labels


# ---------------------------------------------------------------------------
# 2x2 max pooling
# ---------------------------------------------------------------------------

@njit
def maxpool_forward_numba(x):
    n, ch, hh, ww = x.shape
    ho, wo = hh // 2, ww // 2
    out = np.empty((n, ch, ho, wo), dtype=x.dtype)
    arg = np.empty((n, ch, ho, wo), dtype=np.int8)
    for a in range(n):
        for b in range(ch):
            for i in range(ho):
                for j in range(wo):
                    best = x[a, b, 2 * i, 2 * j]
                    k = 0
                    v = x[a, b, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[a, b, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = x[a, b, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[a, b, i, j] = best
                    arg[a, b, i, j] = k
    return out, arg


@njit
def maxpool_backward_numba(dout, arg, shape_h, shape_w):
    n, ch, ho, wo = dout.shape
    dx = np.zeros((n, ch, shape_h, shape_w), dtype=dout.dtype)
    for a in range(n):
        for b in range(ch):
            for i in range(ho):
                for j in range(wo):
                    k = arg[a, b, i, j]
                    dx[a, b, 2 * i + k // 2, 2 * j + k % 2] = dout[a, b, i, j]
    return dx


def maxpool_forward_numpy(x):
    n, ch, hh, ww = x.shape
    ho, wo = hh // 2, ww // 2
    win = (
        x[:, :, : 2 * ho, : 2 * wo]
        .reshape(n, ch, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, ch, ho, wo, 4)
    )
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.int64), axis=-1)[..., 0]
    return out, arg


def maxpool_backward_numpy(dout, arg, shape_h, shape_w):
    n, ch, ho, wo = dout.shape
    win = np.zeros((n, ch, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.int64), dout[..., None], axis=-1)
    dx = np.zeros((n, ch, shape_h, shape_w), dtype=dout.dtype)
    dx[:, :, : 2 * ho, : 2 * wo] = (
        win.reshape(n, ch, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, ch, 2 * ho, 2 * wo)
    )
    return dx


if USE_NUMBA:
    cast_rays = cast_rays_numba
    integrate_rays = integrate_rays_numba
    astar = astar_numba
    dbscan_labels = dbscan_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
else:
    cast_rays = cast_rays_numpy
    integrate_rays = integrate_rays_numpy
    astar = astar_numpy
    dbscan_labels = dbscan_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
