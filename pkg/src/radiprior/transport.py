"""Monte Carlo estimators: path tracing, direct lighting, RHS/LHS rendering and the residual.

Every estimator works on flat batches of camera samples.  Differentiation is
controlled per parameter group: ``phi_tape`` records the scene parameters
(albedo, roughness, environment texels) and ``theta_tape`` records the
radiance network.  Passing ``None`` for a group evaluates it as a constant,
which is how gradient routing is enforced structurally.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import (TapeValue, constant, index_add, mean as t_mean, mul, reshape, scatter_rows, sub, value_of)
from .geometry import (HitBatch, PinholeCamera, SceneDescription, cosine_hemisphere, dot, eval_environment,
                       stratified_jitter)
from .materials import brdf_weight, detached_albedo, eval_surface_params, shading_normal, surface_brdf


def _rng(rng=None, seed=0):
    return rng if rng is not None else np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# image accumulation


class ImageBuffer:
    """Per-pixel running sums; ``values`` optionally holds tape-recorded pixel means."""

    def __init__(self, resolution):
        self.resolution = (int(resolution[0]), int(resolution[1]))
        w, h = self.resolution
        self.sum = np.zeros((h, w, 3))
        self.sum_sq = np.zeros((h, w, 3))
        self.count = np.zeros((h, w), dtype=np.int64)
        self.values: Optional[TapeValue] = None
        self.pixels: Optional[np.ndarray] = None

    def accumulate(self, pixels, samples):
        """Add ``samples`` (N, 3) to ``pixels`` (N, 2) given as (column, row)."""
        samples = np.asarray(samples, dtype=np.float64)
        col, row = pixels[:, 0], pixels[:, 1]
        np.add.at(self.sum, (row, col), samples)
        np.add.at(self.sum_sq, (row, col), samples * samples)
        np.add.at(self.count, (row, col), 1)

    def mean(self):
        if np.any(self.count == 0):
            raise ValueError("image has pixels without samples")
        return self.sum / self.count[..., None]

    def variance(self):
        n = self.count[..., None]
        m = self.sum / n
        return np.maximum(self.sum_sq / n - m * m, 0.0) * n / np.maximum(n - 1, 1)

    def stderr(self):
        """Standard error of each pixel mean."""
        return np.sqrt(self.variance() / self.count[..., None])


def all_pixels(camera: PinholeCamera):
    w, h = camera.resolution
    rows, cols = np.mgrid[0:h, 0:w]
    return np.stack([cols.ravel(), rows.ravel()], axis=-1)


def _image_from_samples(camera, pixels, spp, samples, values=None):
    buf = ImageBuffer(camera.resolution)
    buf.accumulate(np.repeat(pixels, spp, axis=0), samples)
    if values is not None:
        buf.values = pixel_means(values, spp)
        buf.pixels = pixels
    return buf


def pixel_means(samples: TapeValue, spp: int) -> TapeValue:
    """Average consecutive groups of ``spp`` sample rows."""
    samples = constant(samples)
    return t_mean(reshape(samples, (-1, spp, 3)), axis=1)


# ---------------------------------------------------------------------------
# shading samples


@dataclass
class ShadingSample:
    hits: HitBatch
    wo: np.ndarray
    throughput: Optional[np.ndarray] = None
    depth: int = 0
    wi: Optional[np.ndarray] = None
    pdf: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.hits)

    @property
    def normal(self):
        """Shading normal, flipped to face ``wo``."""
        return shading_normal(self.hits.normal, self.wo)


@dataclass
class CameraBatch:
    pixels: np.ndarray            # (P, 2) pixel coordinates
    spp: int
    origins: np.ndarray           # (P * spp, 3)
    directions: np.ndarray
    primary: ShadingSample = field(default=None)


def camera_batch(scene: SceneDescription, camera: PinholeCamera, pixels, spp, rng) -> CameraBatch:
    """Jittered camera rays (``spp`` consecutive rows per pixel) and their primary hits."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    jit = stratified_jitter(len(pixels), spp, rng)
    o, d = camera.generate_rays(np.repeat(pixels, spp, axis=0), jit)
    hits = scene.trace(o, d)
    return CameraBatch(pixels, spp, o, d, ShadingSample(hits, -d, np.ones((len(d), 3)), 0))


def sample_directions(s: ShadingSample, rng):
    """Cosine-sample ``wi`` (stored on ``s`` with its pdf) at every valid hit."""
    n = len(s)
    u = rng.random((n, 2))
    nrm = s.normal
    wi = np.zeros((n, 3))
    v = s.hits.valid
    if np.any(v):
        wi[v] = cosine_hemisphere(u[v], nrm[v])
    s.wi = wi
    s.pdf = np.where(v, np.maximum(dot(wi, nrm), 0.0) / np.pi, 0.0)
    return s


def trace_next(scene: SceneDescription, s: ShadingSample, rows=None) -> ShadingSample:
    """Trace the stored directions of ``s`` from the given rows (default: valid rows)."""
    n = len(s)
    if rows is None:
        rows = np.flatnonzero(s.hits.valid)
    nxt = HitBatch(np.zeros(n, dtype=bool), np.full(n, np.inf), np.zeros((n, 3)), np.zeros((n, 3)),
                   np.full(n, -1, dtype=np.int64), np.zeros((n, 2)))
    if rows.size:
        o = scene.spawn(s.hits.position[rows], s.hits.normal[rows], s.wi[rows])
        h = scene.trace(o, s.wi[rows])
        nxt.valid[rows], nxt.t[rows], nxt.position[rows] = h.valid, h.t, h.position
        nxt.normal[rows], nxt.shape_id[rows], nxt.uv[rows] = h.normal, h.shape_id, h.uv
    return ShadingSample(nxt, -s.wi, None, s.depth + 1)


def extend(scene: SceneDescription, s: ShadingSample, rng) -> ShadingSample:
    """Cosine-sample ``wi`` at every valid hit of ``s`` and trace to the next vertex.

    The sampled direction and pdf are stored on ``s``; invalid rows of ``s``
    stay invalid in the result without tracing a ray.
    """
    return trace_next(scene, sample_directions(s, rng))


# ---------------------------------------------------------------------------
# radiance sources


def background(scene: SceneDescription, directions, mask, phi_tape=None):
    """Environment radiance for rows in ``mask`` (escaped rays), zero elsewhere."""
    n = len(directions)
    rows = np.flatnonzero(mask)
    if scene.environment is None or rows.size == 0:
        return constant(np.zeros((n, 3)))
    env = eval_environment(scene.environment, directions[rows], phi_tape)
    return scatter_rows(n, [(rows, env)], 3)


def emitted(scene: SceneDescription, s: ShadingSample):
    return scene.emitted(s.hits, s.wo)


def bsdf_weight(scene, s: ShadingSample, phi_tape=None, albedo=None):
    """``f cos / pdf`` for the direction stored on ``s`` (zero on invalid rows)."""
    valid = s.hits.valid
    n = len(s)
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        return constant(np.zeros((n, 3)))
    sub_hits = s.hits.subset(rows)
    if albedo is None:
        a, r = eval_surface_params(scene, sub_hits, tape=phi_tape)
    else:
        a, r = albedo
    w = brdf_weight(scene, sub_hits, s.wi[rows], s.wo[rows], a, r)
    return scatter_rows(n, [(rows, w)], 3)


class ConstantRadiance:
    """A radiance cache returning the same value everywhere (e.g. the furnace equilibrium)."""

    def __init__(self, value):
        self.value = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)).copy()

    def query(self, x, wo, n, albedo, tape=None):
        return constant(np.broadcast_to(self.value, (len(x), 3)).copy())


class PathTracedRadiance:
    """Value-only radiance cache that path traces ``spp`` paths from each query point."""

    def __init__(self, scene, spp=64, max_depth=8, seed=0, rr=False):
        self.scene = scene
        self.spp = int(spp)
        self.max_depth = int(max_depth)
        self.rng = np.random.default_rng(seed)
        self.rr = rr

    def query_sample(self, s: ShadingSample, tape=None):
        n = len(s)
        rep = ShadingSample(s.hits.subset(np.repeat(np.arange(n), self.spp)), np.repeat(s.wo, self.spp, axis=0),
                            None, s.depth)
        est = trace_paths(self.scene, rep, self.rng, max_depth=self.max_depth - s.depth, rr=self.rr)
        vals = value_of(est).reshape(n, self.spp, 3).mean(axis=1)
        return constant(vals)


def cache_radiance(cache, scene, s: ShadingSample, theta_tape=None, hint=None):
    """``L_theta`` at the valid hits of ``s`` toward ``s.wo``; zero on invalid rows.

    ``hint`` is the albedo input of the network: ``None`` uses the detached
    scene albedo, or a ``(N, 3)`` array / tape value may be supplied.
    """
    n = len(s)
    rows = np.flatnonzero(s.hits.valid)
    if rows.size == 0:
        return constant(np.zeros((n, 3)))
    if hasattr(cache, "query_sample"):
        sub = ShadingSample(s.hits.subset(rows), s.wo[rows], None, s.depth)
        val = cache.query_sample(sub, theta_tape)
    else:
        if hint is None:
            h = detached_albedo(scene, s.hits.subset(rows))
        else:
            h = hint[rows]
        val = cache.query(s.hits.position[rows], s.wo[rows], s.normal[rows], h, theta_tape)
    return scatter_rows(n, [(rows, val)], 3)


# ---------------------------------------------------------------------------
# path tracing (reference, and the differentiable baseline)


def trace_paths(scene, start: ShadingSample, rng, max_depth=15, rr=True, rr_prob=0.95, rr_start=3,
                min_survival=0.0, phi_tape=None, include_emission=True):
    """Outgoing radiance at the hits of ``start`` by BRDF-sampled path tracing.

    ``max_depth`` bounds the number of scattering events.  With ``rr`` the
    survival probability after the ``rr_start``-th scattering event onward is
    ``clip(max-channel throughput, min_survival, rr_prob)``.  With ``phi_tape``
    every throughput factor is recorded (detached sampling).
    """
    n = len(start)
    total = constant(np.zeros((n, 3)))
    if include_emission:
        total = total + emitted(scene, start)
    alive = np.flatnonzero(start.hits.valid)
    cur = ShadingSample(start.hits.subset(alive), start.wo[alive], None, start.depth)
    beta = constant(np.ones((len(alive), 3)))
    for bounce in range(1, max_depth + 1):
        if alive.size == 0:
            break
        sample_directions(cur, rng)
        beta = mul(beta, bsdf_weight(scene, cur, phi_tape))
        keep = np.any(value_of(beta) > 0, axis=1)
        if rr and bounce >= rr_start:
            # roulette decides before the next segment is traced
            q = np.clip(value_of(beta).max(axis=1), min_survival, rr_prob)
            keep &= rng.random(len(q)) < q
            beta = mul(beta, np.where(keep, 1.0 / np.where(q > 0, q, 1.0), 0.0)[:, None])
        idx = np.flatnonzero(keep)
        if idx.size < len(keep):
            beta = beta[idx]
            cur = ShadingSample(cur.hits.subset(idx), cur.wo[idx], None, cur.depth, cur.wi[idx], cur.pdf[idx])
        alive = alive[idx]
        if alive.size == 0:
            break
        nxt = trace_next(scene, cur)
        esc = ~nxt.hits.valid
        contrib = mul(beta, constant(emitted(scene, nxt)) + background(scene, cur.wi, esc, phi_tape))
        total = index_add(total, alive, contrib)
        idx = np.flatnonzero(nxt.hits.valid)
        if idx.size < len(alive):
            beta = beta[idx]
        alive = alive[idx]
        cur = ShadingSample(nxt.hits.subset(idx), nxt.wo[idx], None, nxt.depth)
    return total


def _primary_radiance(scene, batch: CameraBatch, rng, phi_tape, **kw):
    p = batch.primary
    esc = ~p.hits.valid
    return trace_paths(scene, p, rng, phi_tape=phi_tape, **kw) + background(scene, batch.directions, esc, phi_tape)


def render_pt(scene, camera, spp, max_depth=15, rr_prob=0.95, rr_start=3, rr=True, seed=0, rng=None,
              pixels=None, chunk=1 << 16, min_survival=0.0):
    """Reference path-traced image (value only)."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    rng = _rng(rng, seed)
    pixels = all_pixels(camera) if pixels is None else np.asarray(pixels).reshape(-1, 2)
    buf = ImageBuffer(camera.resolution)
    step = max(1, chunk // spp)
    for i in range(0, len(pixels), step):
        px = pixels[i:i + step]
        batch = camera_batch(scene, camera, px, spp, rng)
        est = _primary_radiance(scene, batch, rng, None, max_depth=max_depth, rr=rr, rr_prob=rr_prob,
                                rr_start=rr_start, min_survival=min_survival)
        buf.accumulate(np.repeat(px, spp, axis=0), value_of(est))
    return buf


def render_pt_diff(scene, camera, spp, pixels=None, rng=None, seed=0, phi_tape=None, max_depth=15, rr_prob=0.95,
                   rr_start=1, min_survival=0.0, batch=None):
    """Differentiable path tracer (the AD-PT baseline): full paths recorded on ``phi_tape``."""
    rng = _rng(rng, seed)
    if batch is None:
        pixels = all_pixels(camera) if pixels is None else pixels
        batch = camera_batch(scene, camera, pixels, spp, rng)
    est = _primary_radiance(scene, batch, rng, phi_tape, max_depth=max_depth, rr=True, rr_prob=rr_prob,
                            rr_start=rr_start, min_survival=min_survival)
    return _image_from_samples(camera, batch.pixels, batch.spp, value_of(est), est)


# ---------------------------------------------------------------------------
# direct illumination


def estimate_direct(scene, batch: CameraBatch, rng, phi_tape=None):
    """``E + T(E)`` per camera sample with one emitter sample at the primary hit."""
    p = batch.primary
    esc = ~p.hits.valid
    total = constant(emitted(scene, p)) + background(scene, batch.directions, esc, phi_tape)
    rows = np.flatnonzero(p.hits.valid)
    if rows.size == 0 or not scene.emitters:
        return total
    hits = p.hits.subset(rows)
    wo = p.wo[rows]
    nrm = shading_normal(hits.normal, wo)
    es = scene.sample_emitter(hits.position, nrm, rng)
    cos_i = np.maximum(dot(es.direction, nrm), 0.0)
    ok = es.visible & (es.pdf > 0) & (cos_i > 0)
    a, r = eval_surface_params(scene, hits, tape=phi_tape)
    f = surface_brdf(scene, hits, es.direction, wo, a, r)
    scale = np.where(ok, cos_i / np.where(es.pdf > 0, es.pdf, 1.0), 0.0)[:, None]
    le = constant(np.where(ok[:, None], es.radiance, 0.0))
    env_rows = np.flatnonzero(ok & es.env)
    if env_rows.size and scene.environment is not None:
        le = le + scatter_rows(len(rows), [(env_rows, eval_environment(scene.environment, es.direction[env_rows],
                                                                              phi_tape))], 3)
    contrib = mul(mul(f, le), scale)
    return index_add(total, rows, contrib)


def render_direct(scene, camera, spp, pixels=None, rng=None, seed=0, phi_tape=None, batch=None):
    """Direct-illumination image, differentiable in the scene parameters."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    rng = _rng(rng, seed)
    if batch is None:
        pixels = all_pixels(camera) if pixels is None else pixels
        batch = camera_batch(scene, camera, pixels, spp, rng)
    est = estimate_direct(scene, batch, rng, phi_tape)
    return _image_from_samples(camera, batch.pixels, batch.spp, value_of(est), est)


# ---------------------------------------------------------------------------
# RHS / LHS rendering and the residual


@dataclass
class PathVertices:
    """Vertices ``s[0..m]`` of sampled paths with per-segment BRDF weights (constants)."""
    vertices: list
    directions: np.ndarray


def sample_path(scene, batch: CameraBatch, rng, bounces):
    """Trace ``bounces`` cosine-sampled segments beyond the primary hits."""
    verts = [batch.primary]
    for _ in range(bounces):
        verts.append(extend(scene, verts[-1], rng))
    return PathVertices(verts, batch.directions)


def rhs_from_path(scene, cache, path: PathVertices, k, phi_tape=None, theta_tape=None, hint=None, weights=None):
    """``sum_{i<k} T^i(E) + T^k(L_theta)`` along an already sampled path.

    ``weights`` may carry precomputed per-segment BRDF weights.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(path.vertices) < k + 1:
        raise ValueError("path has fewer vertices than k + 1")
    v0 = path.vertices[0]
    total = constant(emitted(scene, v0)) + background(scene, path.directions, ~v0.hits.valid, phi_tape)
    beta = None
    for j in range(k):
        cur, nxt = path.vertices[j], path.vertices[j + 1]
        w = weights[j] if weights is not None else bsdf_weight(scene, cur, phi_tape)
        beta = w if beta is None else mul(beta, w)
        esc = cur.hits.valid & ~nxt.hits.valid
        far = background(scene, cur.wi, esc, phi_tape)
        if j < k - 1:
            far = far + constant(emitted(scene, nxt))
        else:
            far = far + cache_radiance(cache, scene, nxt, theta_tape, hint)
        total = total + mul(beta, far)
    return total


def estimate_rhs(scene, cache, batch: CameraBatch, rng, phi_tape=None, theta_tape=None, n_inner=1, hint=None):
    """``E + T(L_theta)`` per camera sample, averaging ``n_inner`` secondary directions."""
    if n_inner == 1:
        return rhs_from_path(scene, cache, sample_path(scene, batch, rng, 1), 1, phi_tape, theta_tape, hint)
    n = len(batch.primary)
    rep = np.repeat(np.arange(n), n_inner)
    p = batch.primary
    big = CameraBatch(batch.pixels, batch.spp, batch.origins[rep], batch.directions[rep],
                      ShadingSample(p.hits.subset(rep), p.wo[rep], None, 0))
    est = rhs_from_path(scene, cache, sample_path(scene, big, rng, 1), 1, phi_tape, theta_tape,
                        None if hint is None else hint[rep])
    return t_mean(reshape(est, (n, n_inner, 3)), axis=1)


def render_rhs_k(scene, camera, spp, cache, k=1, pixels=None, rng=None, seed=0, phi_tape=None, theta_tape=None,
                 batch=None, chunk=1 << 15):
    """Truncated-series rendering with ``k`` differentiable bounces before the cache query."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if spp < 1:
        raise ValueError("spp must be >= 1")
    rng = _rng(rng, seed)
    if batch is not None or phi_tape is not None or theta_tape is not None:
        if batch is None:
            batch = camera_batch(scene, camera, all_pixels(camera) if pixels is None else pixels, spp, rng)
        est = rhs_from_path(scene, cache, sample_path(scene, batch, rng, k), k, phi_tape, theta_tape)
        return _image_from_samples(camera, batch.pixels, batch.spp, value_of(est), est)
    pixels = all_pixels(camera) if pixels is None else np.asarray(pixels).reshape(-1, 2)
    buf = ImageBuffer(camera.resolution)
    step = max(1, chunk // spp)
    for i in range(0, len(pixels), step):
        px = pixels[i:i + step]
        b = camera_batch(scene, camera, px, spp, rng)
        est = rhs_from_path(scene, cache, sample_path(scene, b, rng, k), k)
        buf.accumulate(np.repeat(px, spp, axis=0), value_of(est))
    return buf


def render_rhs(scene, camera, spp, cache, **kw):
    """``E + T(L_theta)`` image; identical to ``render_rhs_k`` with ``k=1``."""
    return render_rhs_k(scene, camera, spp, cache, k=1, **kw)


def residual_from_path(scene, cache, path: PathVertices, j, theta_tape=None, hint=None):
    """Residual ``L_theta - E - T(L_theta)`` at vertex ``j``, using segment ``j -> j+1``.

    Scene parameters enter only as constants.  Returns ``(residual, L_theta, valid)``.
    """
    cur, nxt = path.vertices[j], path.vertices[j + 1]
    lhs = cache_radiance(cache, scene, cur, theta_tape, hint)
    w = bsdf_weight(scene, cur, None)
    esc = cur.hits.valid & ~nxt.hits.valid
    far = background(scene, cur.wi, esc, None) + cache_radiance(cache, scene, nxt, theta_tape, hint)
    r = sub(sub(lhs, constant(emitted(scene, cur))), mul(w.value, far))
    return r, lhs, cur.hits.valid


def residual_at(scene, cache, sample: ShadingSample, rng, theta_tape=None, n_inner=1):
    """Per-row residual at the hits of ``sample``; rows without a hit are zero."""
    n = len(sample)
    rep = np.repeat(np.arange(n), n_inner)
    start = ShadingSample(sample.hits.subset(rep), sample.wo[rep], None, sample.depth)
    nxt = extend(scene, start, rng)
    r, _, _ = residual_from_path(scene, cache, PathVertices([start, nxt], -sample.wo[rep]), 0, theta_tape)
    return t_mean(reshape(r, (n, n_inner, 3)), axis=1) if n_inner > 1 else r


def render_lhs(scene, camera, spp, cache, pixels=None, rng=None, seed=0, theta_tape=None, batch=None):
    """``L_theta`` imaged at primary hits; background pixels see the environment (or black)."""
    rng = _rng(rng, seed)
    if batch is None:
        batch = camera_batch(scene, camera, all_pixels(camera) if pixels is None else pixels, spp, rng)
    p = batch.primary
    est = cache_radiance(cache, scene, p, theta_tape) + background(scene, batch.directions, ~p.hits.valid, None)
    return _image_from_samples(camera, batch.pixels, batch.spp, value_of(est), est)


# ---------------------------------------------------------------------------
# Cube path-length statistics


@dataclass
class RRPolicy:
    """Throughput-proportional roulette: survival ``clip(throughput, min_survival, max_survival)``."""
    max_survival: float = 1.0
    min_survival: float = 0.0
    start_depth: int = 1
    max_length: int = 0


def path_length_stats(scene, albedo, n_paths, policy: RRPolicy = None, seed=0):
    """``(mean, 99.9-percentile)`` of segment counts per camera path in a closed scene.

    In a closed constant-albedo enclosure every scattering event multiplies the
    throughput by the albedo, so only that scalar matters; ``scene`` serves as
    the closedness check.
    """
    if scene is not None and not scene.closed:
        raise ValueError("path-length statistics need a closed scene")
    policy = policy or RRPolicy()
    lengths = kernels.rr_path_lengths(float(albedo), int(n_paths), float(policy.max_survival),
                                      float(policy.min_survival), int(policy.start_depth), int(policy.max_length),
                                      int(seed))
    return float(lengths.mean()), float(np.percentile(lengths, 99.9))
