"""Reusable experiment drivers: the Cube benchmark and per-pixel gradient maps."""
import gc
import math
import time

import numpy as np

from .autodiff import GradientTape
from .geometry import PinholeCamera, count_segments
from .inverse import TrainConfig, evaluate, make_field, step_streams
from .scenes import furnace_cube
from .transport import (PathTracedRadiance, RRPolicy, camera_batch, estimate_direct, path_length_stats,
                        pixel_means, render_pt, rhs_from_path, sample_path, trace_paths)

CUBE_ALBEDOS = (0.3, 0.5, 0.7, 0.9, 0.95, 0.97)


def hemisphere_cameras(scene, n, resolution=(32, 32), fov=40.0, distance=2.5, seed=0):
    """Cameras on the upper hemisphere around the scene centre (Fibonacci spiral)."""
    lo, hi = scene.bounds
    centre = 0.5 * (lo + hi)
    radius = distance * 0.5 * float(np.linalg.norm(hi - lo))
    golden = math.pi * (3 - math.sqrt(5))
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0, 2 * math.pi)
    cams = []
    for k in range(n):
        y = 1 - (k + 0.5) / n * 0.9          # keep clear of the horizon
        r = math.sqrt(max(0.0, 1 - y * y))
        phi = offset + golden * k
        eye = centre + radius * np.array([r * math.cos(phi), y, r * math.sin(phi)])
        up = (0, 1, 0) if y < 0.999 else (0, 0, -1)
        cams.append(PinholeCamera.look_at(eye, centre, up, fov, resolution))
    return cams


# ---------------------------------------------------------------------------
# Cube benchmark


def ours_segments_per_sample(albedo, extra_bounce=True, decorrelate=False, batch=1024, spp=1, seed=0):
    """Instrumented ray segments per camera sample of one ad-ours loss evaluation."""
    scene = furnace_cube(albedo, n_cameras=1, resolution=(32, 32), optimize=True)
    cfg = TrainConfig(batch_size=batch, spp=spp, prior_bounces=2 if extra_bounce else 1, decorrelate=decorrelate,
                      seed=seed)
    field = make_field(scene, cfg)
    cam = scene.cameras[0]
    rng = np.random.default_rng(seed)
    pixels = np.stack([rng.integers(cam.width, size=batch), rng.integers(cam.height, size=batch)], axis=-1)
    target = np.ones((batch, 3))
    streams = step_streams(seed, 0)[1:]
    tape = GradientTape()
    with count_segments() as c:
        evaluate(scene, field, pixels, target, cam, cfg, streams, tape)
    return c["segments"] / (batch * spp)


def _ours_step_timer(albedo, batch, spp, seed):
    scene = furnace_cube(albedo, n_cameras=1, resolution=(64, 64), optimize=True)
    cfg = TrainConfig(batch_size=batch, spp=spp, seed=seed)
    field = make_field(scene, cfg)
    cam = scene.cameras[0]
    rng = np.random.default_rng(seed)
    counter = [0]

    def step():
        pixels = np.stack([rng.integers(cam.width, size=batch), rng.integers(cam.height, size=batch)], axis=-1)
        streams = step_streams(seed, counter[0])[1:]
        counter[0] += 1
        t0 = time.perf_counter()
        tape = GradientTape()
        terms = evaluate(scene, field, pixels, np.ones((batch, 3)), cam, cfg, streams, tape)
        obj = None
        for t in terms.values():
            obj = t.objective if obj is None else obj + t.objective
        tape.backward(obj)
        tape.clear()
        return time.perf_counter() - t0
    return step


def ours_step_seconds(albedo, batch=4096, spp=4, steps=5, seed=0):
    """Median wall time of a full ad-ours gradient evaluation at a fixed batch."""
    step = _ours_step_timer(albedo, batch, spp, seed)
    step()                                # warms up the JIT kernels
    return float(np.median([step() for _ in range(steps)]))


def ours_step_seconds_sweep(albedos, batch=4096, spp=4, rounds=15, seed=0, stat="min"):
    """Per-albedo step time, timing the albedos interleaved round by round.

    ``stat`` is ``"min"`` (default) or ``"median"`` over the rounds.  As with
    ``timeit``, the minimum is the least contaminated by other processes on a
    shared machine; slower samples measure interference, not the step.
    Interleaving spreads slow drifts of a shared machine (other processes,
    frequency scaling) evenly over all albedos instead of biasing whichever
    one happened to run during a busy period.
    """
    timers = [_ours_step_timer(a, batch, spp, seed) for a in albedos]
    for t in timers:
        t()
    # as in timeit: no cyclic-GC pauses inside timed steps (each step clears its own tape)
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        times = np.array([[t() for t in timers] for _ in range(rounds)])
    finally:
        if was_enabled:
            gc.enable()
    return np.median(times, axis=0) if stat == "median" else times.min(axis=0)


def pt_segments_per_sample(albedo, max_length, batch=4096, spp=4, rr_prob=0.95, seed=0):
    """Mean traced segments per camera sample of the differentiable path tracer (AD-PT wiring)."""
    scene = furnace_cube(albedo, n_cameras=1, resolution=(64, 64), optimize=True)
    cam = scene.cameras[0]
    rng = np.random.default_rng(seed)
    pixels = np.stack([rng.integers(cam.width, size=batch), rng.integers(cam.height, size=batch)], axis=-1)
    tape = GradientTape()
    with count_segments() as c:
        b = camera_batch(scene, cam, pixels, spp, rng)
        est = trace_paths(scene, b.primary, rng, max_depth=max(1, int(max_length) - 1), rr=True, rr_prob=rr_prob,
                          rr_start=1, phi_tape=tape)
        tape.backward(est.sum())
    return c["segments"] / (batch * spp)


def bench_cube(albedos=CUBE_ALBEDOS, n_paths=10 ** 6, seed=0, batch=4096, spp=4, timing=True, timing_steps=5):
    """Per-albedo rows of path-length statistics and per-sample cost of each wiring."""
    rows = []
    for rho in albedos:
        scene = furnace_cube(rho)
        mean, p999 = path_length_stats(scene, rho, n_paths, RRPolicy(), seed=seed)
        row = {"albedo": rho, "mean_path_length": mean, "p99_9_path_length": p999,
               "expected_1_over_1_minus_rho": 1.0 / (1.0 - rho),
               "ours_segments": ours_segments_per_sample(rho, extra_bounce=False, batch=256, seed=seed),
               "ours_segments_extra_bounce": ours_segments_per_sample(rho, extra_bounce=True, batch=256, seed=seed),
               "ours_segments_total_decorrelated": ours_segments_per_sample(rho, True, True, batch=256, seed=seed),
               "pt_segments": pt_segments_per_sample(rho, p999, batch=batch, spp=spp, seed=seed)}
        if timing:
            row["ours_step_seconds"] = ours_step_seconds(rho, batch=batch, spp=spp, steps=timing_steps, seed=seed)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# per-pixel gradient maps


def _param_handle(scene, selector):
    """``(Parameter, flat index)`` from ``"name"`` or ``"name[i]"``."""
    name, idx = selector, 0
    if selector.endswith("]") and "[" in selector:
        name, idx = selector[:-1].split("[")
        idx = int(idx)
    for p in scene.parameters():
        if p.name == name:
            return p, idx
    raise KeyError(f"no optimizable parameter named {name!r}")


def _region_pixels(camera, region):
    x0, y0, x1, y1 = region if region is not None else (0, 0, camera.width, camera.height)
    rows, cols = np.mgrid[y0:y1, x0:x1]
    return np.stack([cols.ravel(), rows.ravel()], axis=-1), (y1 - y0, x1 - x0)


def pixel_gradients(scene, camera, selector, method, pixels, spp=256, k=1, cache=None, seed=0):
    """``d I_p / d phi`` for each pixel (luminance-free: mean over RGB), one backward per pixel."""
    param, idx = _param_handle(scene, selector)
    out = np.zeros(len(pixels))
    for i, px in enumerate(pixels):
        rng = np.random.default_rng([seed, i])
        tape = GradientTape()
        tape.watch(param)
        b = camera_batch(scene, camera, px[None], spp, rng)
        if method == "ad-direct":
            est = estimate_direct(scene, b, rng, tape)
        elif method == "ad-ours":
            est = rhs_from_path(scene, cache, sample_path(scene, b, rng, k), k, phi_tape=tape)
        else:
            raise ValueError(f"unknown gradient-map method {method!r}")
        pix = pixel_means(est, spp).mean()
        g = tape.backward(pix, params=[param])[param.name]
        out[i] = g.reshape(-1)[idx]
    return out


def fd_pixel_gradients(scene, camera, selector, pixels, spp=1024, h=1e-3, max_depth=8, seed=0):
    """Central differences of a frozen-seed, roulette-free path-traced image."""
    param, idx = _param_handle(scene, selector)
    old = param.data.copy()

    def render():
        img = render_pt(scene, camera, spp, max_depth=max_depth, rr=False, seed=seed, pixels=pixels)
        m = img.sum / np.maximum(img.count[..., None], 1)
        return m[pixels[:, 1], pixels[:, 0]].mean(axis=1)
    try:
        flat = param.data.reshape(-1)
        flat[idx] = old.reshape(-1)[idx] + h
        hi = render()
        flat[idx] = old.reshape(-1)[idx] - h
        lo = render()
    finally:
        param.data = old
    return (hi - lo) / (2 * h)


def gradient_maps(scene, selector, region=None, spp=256, fd_spp=1024, ks=(1, 2, 4), cache=None, seed=0,
                  camera=None):
    """Signed per-pixel gradient images for ad-direct, ad-ours at each ``k`` and the FD reference."""
    camera = camera or scene.cameras[0]
    pixels, shape = _region_pixels(camera, region)
    if cache is None:
        cache = PathTracedRadiance(scene, spp=64, max_depth=8, seed=seed + 1)
    maps = {"fd": fd_pixel_gradients(scene, camera, selector, pixels, spp=fd_spp, seed=seed).reshape(shape),
            "ad-direct": pixel_gradients(scene, camera, selector, "ad-direct", pixels, spp, seed=seed).reshape(shape)}
    for k in ks:
        maps[f"ad-ours-k{k}"] = pixel_gradients(scene, camera, selector, "ad-ours", pixels, spp, k, cache,
                                                seed=seed).reshape(shape)
    return maps


def sign_agreement(estimate, reference, floor):
    """Fraction of pixels with ``|reference| > floor`` whose signs agree."""
    m = np.abs(reference) > floor
    if not np.any(m):
        return float("nan")
    return float(np.mean(np.sign(estimate[m]) == np.sign(reference[m])))
