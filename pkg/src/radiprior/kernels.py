"""Hot inner loops, each with a numba and a numpy implementation.

The public names at the bottom of the module dispatch on ``USE_NUMBA``; both
implementations are importable as ``*_numba`` / ``*_numpy`` so tests and the
benchmark can compare them directly.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

HASH_PRIMES = (1, 2654435761, 805459861)
_MASK32 = np.uint64(0xFFFFFFFF)

# corner c of a cell: offset bit k along axis k
_CORNERS = np.array([[(c >> k) & 1 for k in range(3)] for c in range(8)], dtype=np.int64)


# ---------------------------------------------------------------------------
# multiresolution hash grid


def hash_grid_forward_numpy(pos, resolutions, table, table_size):
    n = pos.shape[0]
    levels = resolutions.shape[0]
    nfeat = table.shape[1]
    dtype = table.dtype
    feats = np.empty((n, levels * nfeat), dtype=dtype)
    idx = np.empty((n, levels, 8), dtype=np.int64)
    wts = np.empty((n, levels, 8), dtype=dtype)
    p0, p1, p2 = (np.uint64(p) for p in HASH_PRIMES)
    for lvl in range(levels):
        scaled = pos * resolutions[lvl]
        base = np.floor(scaled)
        frac = (scaled - base).astype(dtype)
        base = base.astype(np.int64)
        acc = np.zeros((n, nfeat), dtype=dtype)
        for c in range(8):
            off = _CORNERS[c]
            ix = (base[:, 0] + off[0]).astype(np.uint64)
            iy = (base[:, 1] + off[1]).astype(np.uint64)
            iz = (base[:, 2] + off[2]).astype(np.uint64)
            h = ((ix * p0) ^ (iy * p1) ^ (iz * p2)) & _MASK32
            h = (h % np.uint64(table_size)).astype(np.int64) + lvl * table_size
            w = np.ones(n, dtype=dtype)
            for k in range(3):
                w *= frac[:, k] if off[k] else 1 - frac[:, k]
            idx[:, lvl, c] = h
            wts[:, lvl, c] = w
            acc += w[:, None] * table[h]
        feats[:, lvl * nfeat:(lvl + 1) * nfeat] = acc
    return feats, idx, wts


def hash_grid_backward_numpy(idx, wts, grad, n_rows, nfeat):
    n, levels, _ = idx.shape
    out = np.zeros((n_rows, nfeat), dtype=grad.dtype)
    flat_idx = idx.reshape(n, levels * 8)
    flat_w = wts.reshape(n, levels * 8)
    for f in range(nfeat):
        # grad column for feature f of each level, repeated over the 8 corners
        g = np.repeat(grad[:, f::nfeat], 8, axis=1)
        out[:, f] = np.bincount(flat_idx.ravel(), weights=(flat_w * g).ravel(), minlength=n_rows)
    return out


@njit(cache=True)
def hash_grid_forward_numba(pos, resolutions, table, table_size):
    n = pos.shape[0]
    levels = resolutions.shape[0]
    nfeat = table.shape[1]
    feats = np.zeros((n, levels * nfeat), dtype=table.dtype)
    idx = np.empty((n, levels, 8), dtype=np.int64)
    wts = np.empty((n, levels, 8), dtype=table.dtype)
    p1 = np.uint64(2654435761)
    p2 = np.uint64(805459861)
    mask = np.uint64(0xFFFFFFFF)
    ts = np.uint64(table_size)
    for i in range(n):
        for lvl in range(levels):
            r = resolutions[lvl]
            sx = pos[i, 0] * r
            sy = pos[i, 1] * r
            sz = pos[i, 2] * r
            bx = np.floor(sx)
            by = np.floor(sy)
            bz = np.floor(sz)
            fx = sx - bx
            fy = sy - by
            fz = sz - bz
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                ix = np.uint64(np.int64(bx) + ox)
                iy = np.uint64(np.int64(by) + oy)
                iz = np.uint64(np.int64(bz) + oz)
                h = (ix ^ (iy * p1) ^ (iz * p2)) & mask
                row = np.int64(h % ts) + lvl * table_size
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                idx[i, lvl, c] = row
                wts[i, lvl, c] = w
                for f in range(nfeat):
                    feats[i, lvl * nfeat + f] += w * table[row, f]
    return feats, idx, wts


@njit(cache=True)
def hash_grid_backward_numba(idx, wts, grad, n_rows, nfeat):
    n, levels, _ = idx.shape
    out = np.zeros((n_rows, nfeat), dtype=grad.dtype)
    for i in range(n):
        for lvl in range(levels):
            for c in range(8):
                row = idx[i, lvl, c]
                w = wts[i, lvl, c]
                for f in range(nfeat):
                    out[row, f] += w * grad[i, lvl * nfeat + f]
    return out


# ---------------------------------------------------------------------------
# ray / triangle


def intersect_triangles_numpy(o, d, t_min, t_max, v0, e1, e2):
    n = o.shape[0]
    best_t = t_max.copy()
    best_prim = np.full(n, -1, dtype=np.int64)
    for k in range(v0.shape[0]):
        pvec = np.cross(d, e2[k])
        det = pvec @ e1[k]
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - v0[k]
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[k])
        v = np.einsum("ij,ij->i", qvec, d) * inv
        t = (qvec @ e2[k]) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min) & (t < best_t)
        best_t = np.where(hit, t, best_t)
        best_prim[hit] = k
    return best_t, best_prim


@njit(cache=True)
def intersect_triangles_numba(o, d, t_min, t_max, v0, e1, e2):
    n = o.shape[0]
    m = v0.shape[0]
    best_t = t_max.copy()
    best_prim = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for k in range(m):
            px = d[i, 1] * e2[k, 2] - d[i, 2] * e2[k, 1]
            py = d[i, 2] * e2[k, 0] - d[i, 0] * e2[k, 2]
            pz = d[i, 0] * e2[k, 1] - d[i, 1] * e2[k, 0]
            det = px * e1[k, 0] + py * e1[k, 1] + pz * e1[k, 2]
            if abs(det) <= 1e-12:
                continue
            inv = 1.0 / det
            tx = o[i, 0] - v0[k, 0]
            ty = o[i, 1] - v0[k, 1]
            tz = o[i, 2] - v0[k, 2]
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * e1[k, 2] - tz * e1[k, 1]
            qy = tz * e1[k, 0] - tx * e1[k, 2]
            qz = tx * e1[k, 1] - ty * e1[k, 0]
            v = (d[i, 0] * qx + d[i, 1] * qy + d[i, 2] * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
            if t > t_min[i] and t < best_t[i]:
                best_t[i] = t
                best_prim[i] = k
    return best_t, best_prim


# ---------------------------------------------------------------------------
# Russian roulette path lengths in a closed constant-albedo enclosure


def rr_path_lengths_numpy(albedo, n_paths, max_survival, min_survival, start_depth, max_length, seed):
    """Segment count of each path, camera segment included."""
    rng = np.random.default_rng(seed)
    lengths = np.ones(n_paths, dtype=np.int64)
    beta = np.ones(n_paths)
    alive = np.arange(n_paths)
    depth = 1
    while alive.size and (max_length <= 0 or depth < max_length):
        beta[alive] *= albedo
        if depth >= start_depth:
            q = np.clip(beta[alive], min_survival, max_survival)
            survive = rng.random(alive.size) < q
            alive = alive[survive]
            beta[alive] /= q[survive]
        if not alive.size:
            break
        lengths[alive] += 1
        depth += 1
    return lengths


@njit(cache=True)
def rr_path_lengths_numba(albedo, n_paths, max_survival, min_survival, start_depth, max_length, seed):
    np.random.seed(seed)
    lengths = np.ones(n_paths, dtype=np.int64)
    for i in range(n_paths):
        beta = 1.0
        depth = 1
        while max_length <= 0 or depth < max_length:
            beta *= albedo
            if depth >= start_depth:
                q = min(max(beta, min_survival), max_survival)
                if np.random.random() >= q:
                    break
                beta /= q
            lengths[i] += 1
            depth += 1
    return lengths


if USE_NUMBA:
    hash_grid_forward = hash_grid_forward_numba
    hash_grid_backward = hash_grid_backward_numba
    intersect_triangles = intersect_triangles_numba
    rr_path_lengths = rr_path_lengths_numba
else:
    hash_grid_forward = hash_grid_forward_numpy
    hash_grid_backward = hash_grid_backward_numpy
    intersect_triangles = intersect_triangles_numpy
    rr_path_lengths = rr_path_lengths_numpy
