"""Losses, the joint (theta, phi) training loop and reconstruction metrics.

Loss terms and what they may differentiate (the routing matrix):

========  ================  ============
term      scene params phi  network theta
========  ================  ============
photo     yes               no
prior     no                yes
lhs       no                yes
========  ================  ============

A blocked entry is enforced by evaluating that input as a constant, so the
corresponding gradient is exactly zero rather than merely small.
"""
import csv
import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Adam, GradientTape, TapeValue, constant, mul, sum_, value_of, sub
from .geometry import PinholeCamera, read_poses, write_poses
from .imageio import read_pfm, write_pfm
from .materials import eval_surface_params
from .neuralfield import HashGridConfig, RadianceField
from .transport import (ShadingSample, background, bsdf_weight, cache_radiance, camera_batch, emitted,
                        estimate_direct, extend, pixel_means, render_pt, render_rhs, trace_paths, all_pixels)

log = logging.getLogger(__name__)

METHODS = ("ad-ours", "ad-ours-no-prior", "ad-direct", "ad-pt")
TERMS = ("photo", "prior", "lhs")


class LossError(RuntimeError):
    """A loss term evaluated to a non-finite value."""


class DivergenceError(RuntimeError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


# ---------------------------------------------------------------------------
# metrics


def _check_shapes(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    """PSNR in dB on linear (HDR) values; identical images return the 99 dB cap."""
    a, b = _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return 99.0
    return min(99.0, 10.0 * math.log10(peak * peak / mse))


def mape(a, b, eps=0.01):
    a, b = _check_shapes(a, b)
    return float(np.mean(np.abs(a - b) / (b + eps)))


# ---------------------------------------------------------------------------
# losses


def relative_l2(prediction, target, eps=0.01):
    """Mean of ``(p - t)^2 / (sg(p)^2 + eps)``; the denominator carries no gradient."""
    prediction = constant(prediction)
    target = np.asarray(value_of(target), dtype=np.float64)
    denom = value_of(prediction) ** 2 + eps
    d = sub(prediction, target)
    return mul(mul(d, d), 1.0 / denom).mean()


@dataclass
class LossTerm:
    value: float
    objective: TapeValue          # differentiable stand-in whose gradient is the term's gradient
    # for the single-pass losses: the per-entry values and detached denominators
    # (``prediction``/``denominator`` or ``residuals``/``denominators``)
    extras: dict = field(default_factory=dict)


def _relative_l2_term(pred, target, eps):
    obj = relative_l2(pred, target, eps)
    p = np.asarray(value_of(pred), dtype=np.float64)
    return LossTerm(float(obj.value), obj, {"prediction": p, "denominator": p * p + eps})


def _relative_l2_decorrelated(pred_a, pred_b, target, eps):
    """Value from pass A; gradient ``2 (A - t) / (A^2 + eps) * dB`` (independent passes)."""
    a = value_of(pred_a)
    t = np.asarray(target, dtype=np.float64)
    value = float(np.mean((a - t) ** 2 / (a * a + eps)))
    coef = 2.0 * (a - t) / (a * a + eps) / a.size
    return LossTerm(value, sum_(mul(pred_b, coef)))


def photometric_loss(pred_b, target, eps=0.01, pred_a=None) -> LossTerm:
    """Relative L2 between rendered pixel means and ground truth."""
    if pred_a is None:
        return _relative_l2_term(pred_b, target, eps)
    return _relative_l2_decorrelated(pred_a, pred_b, target, eps)


def prior_loss(residuals_b, radiance, eps=0.01, residuals_a=None) -> LossTerm:
    """Normalized squared residual ``r^2 / (sg(L_theta)^2 + eps)`` averaged over samples.

    ``residuals_b`` and ``radiance`` are lists (one entry per bounce) of
    ``(rows, 3)`` values; every sample counts equally regardless of bounce.
    """
    count = sum(value_of(r).size for r in residuals_b)
    if count == 0:
        return LossTerm(0.0, constant(0.0))
    terms, value, denoms = [], 0.0, []
    for j, rb in enumerate(residuals_b):
        denom = value_of(radiance[j]) ** 2 + eps
        denoms.append(denom)
        if residuals_a is None:
            terms.append(sum_(mul(mul(rb, rb), 1.0 / (denom * count))))
            rv = value_of(rb)
        else:
            rv = value_of(residuals_a[j])
            terms.append(sum_(mul(rb, 2.0 * rv / (denom * count))))
        value += float(np.sum(rv * rv / denom)) / count
    obj = terms[0]
    for t in terms[1:]:
        obj = obj + t
    extras = {}
    if residuals_a is None:
        extras = {"residuals": [np.asarray(value_of(r), dtype=np.float64) for r in residuals_b],
                  "denominators": denoms}
    return LossTerm(value, obj, extras)


def lhs_loss(pred, target, eps=0.01) -> LossTerm:
    return _relative_l2_term(pred, target, eps)


# ---------------------------------------------------------------------------
# configuration


def _default_routing():
    return {"photo": {"phi": True, "theta": False}, "prior": {"phi": False, "theta": True},
            "lhs": {"phi": False, "theta": True}}


@dataclass
class TrainConfig:
    method: str = "ad-ours"
    lr: float = 5e-4
    batch_size: int = 4096
    spp: int = 4
    steps: int = 2000
    weights: dict = field(default_factory=lambda: {"photo": 1.0, "prior": 1.0, "lhs": 1.0})
    routing: dict = field(default_factory=_default_routing)
    prior_bounces: int = 2
    k: int = 1
    decorrelate: bool = True
    detach_albedo_hint: bool = True
    eps: float = 0.01
    seed: int = 0
    dtype: str = "float32"
    # radiance network (desk defaults)
    levels: int = 8
    table_size: int = 2 ** 14
    hidden_layers: int = 3
    hidden_width: int = 64
    # batching
    crop: bool = True
    foreground_fraction: float = 0.0
    # AD-PT baseline termination
    pt_max_depth: int = 15
    pt_rr_prob: float = 0.95
    pt_rr_start: int = 1
    # bookkeeping
    log_every: int = 50
    val_every: int = 0
    val_spp: int = 16
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for key in self.weights:
            if key not in TERMS:
                raise ValueError(f"unknown loss term {key!r}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("loss weights must be >= 0")
        if not any(self.active(t) for t in TERMS):
            raise ValueError("at least one loss term must be active")
        if self.prior_bounces not in (1, 2):
            raise ValueError("prior_bounces must be 1 or 2")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch_size < 1 or self.spp < 1:
            raise ValueError("batch_size and spp must be >= 1")
        for term in TERMS:
            r = self.routing.setdefault(term, _default_routing()[term])
            r.setdefault("phi", False)
            r.setdefault("theta", False)

    @property
    def uses_field(self):
        return self.method in ("ad-ours", "ad-ours-no-prior")

    def weight(self, term):
        w = float(self.weights.get(term, 0.0))
        if term != "photo" and not self.uses_field:
            return 0.0
        if term == "prior" and self.method == "ad-ours-no-prior":
            return 0.0
        return w

    def active(self, term):
        return self.weight(term) > 0

    def hash_config(self):
        return HashGridConfig.desk(levels=self.levels, table_size=self.table_size)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def make_field(scene, config: TrainConfig, seed=None):
    return RadianceField(scene.bounds, config.hash_config(), config.hidden_layers, config.hidden_width,
                         seed=config.seed if seed is None else seed, dtype=np.dtype(config.dtype))


# ---------------------------------------------------------------------------
# dataset


@dataclass
class View:
    camera: PinholeCamera
    image: np.ndarray
    mask: Optional[np.ndarray] = None


class MultiViewDataset:
    def __init__(self, views, meta=None):
        self.views = list(views)
        self.meta = dict(meta or {})
        if not self.views:
            raise ValueError("dataset has no views")
        res = {v.camera.resolution for v in self.views}
        if len(res) != 1:
            raise ValueError("all views must share one resolution")
        for v in self.views:
            if not np.all(np.isfinite(v.image)) or np.any(v.image < 0):
                raise ValueError("ground-truth images must be finite and >= 0")

    def __len__(self):
        return len(self.views)

    @classmethod
    def generate(cls, scene, cameras, spp, seed=0, max_depth=15, rr_prob=0.95, masks=True):
        views = []
        for i, cam in enumerate(cameras):
            img = render_pt(scene, cam, spp, max_depth=max_depth, rr_prob=rr_prob, seed=seed * 100003 + i).mean()
            mask = None
            if masks:
                o, d = cam.generate_rays(all_pixels(cam))
                mask = scene.trace(o, d).valid.reshape(cam.height, cam.width)
            views.append(View(cam, img.astype(np.float32), mask))
        return cls(views, {"spp": spp, "seed": seed, "max_depth": max_depth})

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i, v in enumerate(self.views):
            name = f"view_{i:03d}.pfm"
            write_pfm(out / name, v.image)
            rec = {"image": name}
            if v.mask is not None:
                mname = f"mask_{i:03d}.pfm"
                write_pfm(out / mname, v.mask.astype(np.float32))
                rec["mask"] = mname
            files.append(rec)
        write_poses(out / "poses.json", [v.camera for v in self.views])
        with open(out / "manifest.json", "w") as f:
            json.dump({"views": files, "poses": "poses.json", "meta": self.meta}, f, indent=1)

    @classmethod
    def load(cls, path):
        root = Path(path)
        with open(root / "manifest.json") as f:
            man = json.load(f)
        cams = read_poses(root / man["poses"])
        views = []
        for cam, rec in zip(cams, man["views"]):
            img = read_pfm(root / rec["image"])
            mask = read_pfm(root / rec["mask"])[..., 0] > 0.5 if "mask" in rec else None
            views.append(View(cam, img, mask))
        return cls(views, man.get("meta"))


def sample_batch(dataset: MultiViewDataset, config: TrainConfig, rng):
    """One random view, a random square crop, and up to ``batch_size`` pixels from it."""
    vi = int(rng.integers(len(dataset)))
    view = dataset.views[vi]
    w, h = view.camera.resolution
    if config.crop:
        side = min(int(math.ceil(math.sqrt(config.batch_size))), w, h)
        x0 = int(rng.integers(w - side + 1))
        y0 = int(rng.integers(h - side + 1))
        rows, cols = np.mgrid[y0:y0 + side, x0:x0 + side]
    else:
        rows, cols = np.mgrid[0:h, 0:w]
    cand = np.stack([cols.ravel(), rows.ravel()], axis=-1)
    if len(cand) > config.batch_size:
        n = config.batch_size
        if view.mask is not None and config.foreground_fraction > 0:
            fg = view.mask[cand[:, 1], cand[:, 0]]
            fg_idx, bg_idx = np.flatnonzero(fg), np.flatnonzero(~fg)
            n_fg = min(len(fg_idx), max(int(math.ceil(config.foreground_fraction * n)), n - len(bg_idx)))
            pick = np.concatenate([rng.choice(fg_idx, n_fg, replace=False),
                                   rng.choice(bg_idx, n - n_fg, replace=False)])
        else:
            pick = rng.choice(len(cand), n, replace=False)
        cand = cand[np.sort(pick)]
    target = view.image[cand[:, 1], cand[:, 0]].astype(np.float64)
    return vi, cand, target


# ---------------------------------------------------------------------------
# one forward/backward evaluation


def step_streams(seed, step):
    """Independent generators for batch selection, camera jitter, pass A and pass B."""
    ss = np.random.SeedSequence([int(seed), int(step)])
    return [np.random.default_rng(s) for s in ss.spawn(4)]


class _Vertex:
    """Memoized per-vertex quantities; each term picks a live or detached copy."""

    def __init__(self, scene, field_, sample: ShadingSample, tape, config, train_phi, train_theta):
        self.scene, self.field, self.s = scene, field_, sample
        self.tape, self.config = tape, config
        self.train_phi, self.train_theta = train_phi, train_theta
        self._memo = {}

    def share_radiance(self, other: "_Vertex"):
        """Reuse the detached-hint radiance value of a vertex at the same hits."""
        self._memo[("L", False)] = constant(other.radiance(False).value)

    def weight(self, live):
        if "w" not in self._memo:
            self._memo["w"] = bsdf_weight(self.scene, self.s, self.tape if self.train_phi else None)
        w = self._memo["w"]
        return w if live else constant(w.value)

    def radiance(self, live_theta, live_phi_hint=False):
        live_hint = bool(live_phi_hint and self.train_phi and not self.config.detach_albedo_hint)
        if live_hint and not (live_theta and self.train_theta):
            # phi reaches L only through the albedo input: evaluate without theta on the tape
            key, theta_tape = ("L", "hint-only"), None
        else:
            key, theta_tape = ("L", live_hint), self.tape if self.train_theta else None
        if key not in self._memo:
            hint = None
            if live_hint:
                hint = eval_surface_params(self.scene, self.s.hits, tape=self.tape)[0]
            self._memo[key] = cache_radiance(self.field, self.scene, self.s, theta_tape, hint)
        val = self._memo[key]
        return val if (live_theta or key[1] == "hint-only") else constant(val.value)

    def escape(self, directions, valid_from, live):
        """Environment radiance for rays that left ``valid_from`` and missed everything."""
        key = ("bg", id(directions))
        if key not in self._memo:
            esc = valid_from & ~self.s.hits.valid
            self._memo[key] = background(self.scene, directions, esc, self.tape if self.train_phi else None)
        v = self._memo[key]
        return v if live else constant(v.value)


def _rhs(verts, k, route, primary_dirs, consts_only=False):
    """``sum_{i<k} T^i(E) + T^k(L)`` over memoized vertices."""
    lp = route["phi"] and not consts_only
    lt = route["theta"] and not consts_only
    v0 = verts[0]
    total = constant(emitted(v0.scene, v0.s)) + v0.escape(primary_dirs, np.ones(len(v0.s), bool), lp)
    beta = None
    for j in range(k):
        cur, nxt = verts[j], verts[j + 1]
        w = cur.weight(lp)
        beta = w if beta is None else mul(beta, w)
        far = nxt.escape(cur.s.wi, cur.s.hits.valid, lp)
        if j < k - 1:
            far = far + constant(emitted(nxt.scene, nxt.s))
        else:
            far = far + nxt.radiance(lt, lp)
        total = total + mul(beta, far)
    return total


def _residual(cur, nxt, route, consts_only=False):
    """Residual rows at the valid hits of ``cur``: ``(r, L_theta(x))``."""
    lt = route["theta"] and not consts_only
    lp = route["phi"] and not consts_only
    rows = np.flatnonzero(cur.s.hits.valid)
    lhs = cur.radiance(lt, lp)
    far = nxt.escape(cur.s.wi, cur.s.hits.valid, lp) + nxt.radiance(lt, lp)
    r = lhs - constant(emitted(cur.scene, cur.s)) - mul(cur.weight(lp), far)
    return r[rows], value_of(lhs)[rows]


def _copy(s: ShadingSample):
    return ShadingSample(s.hits, s.wo, None, s.depth)


def evaluate(scene, field_, batch_pixels, target, camera, config: TrainConfig, streams, tape=None):
    """Loss terms for one batch.  Returns ``{term: LossTerm}`` for the active terms.

    ``streams`` is ``(rng_jitter, rng_a, rng_b)``.  With ``config.decorrelate``
    pass B carries gradients and pass A (independent secondary directions,
    shared primary hits) supplies loss values and weights.
    """
    rng_cam, rng_a, rng_b = streams
    cb = camera_batch(scene, camera, batch_pixels, config.spp, rng_cam)
    spp = config.spp
    train_phi = tape is not None and any(config.routing[t]["phi"] and config.active(t) for t in TERMS)
    train_theta = tape is not None and field_ is not None and any(
        config.routing[t]["theta"] and config.active(t) for t in TERMS)
    out = {}
    route = config.routing
    eps = config.eps
    decor = config.decorrelate

    if not config.uses_field:
        ptape = tape if (train_phi and route["photo"]["phi"]) else None
        if config.method == "ad-direct":
            est_b = estimate_direct(scene, cb, rng_b, ptape)
            est_a = estimate_direct(scene, cb, rng_a, None) if decor else None
        else:
            kw = dict(max_depth=config.pt_max_depth, rr=True, rr_prob=config.pt_rr_prob, rr_start=config.pt_rr_start)
            esc = ~cb.primary.hits.valid
            est_b = trace_paths(scene, cb.primary, rng_b, phi_tape=ptape, **kw) + background(
                scene, cb.directions, esc, ptape)
            est_a = None
            if decor:
                est_a = trace_paths(scene, _copy(cb.primary), rng_a, **kw) + background(scene, cb.directions, esc)
        out["photo"] = photometric_loss(pixel_means(est_b, spp), target, eps,
                                        pixel_means(est_a, spp) if decor else None)
        return out

    # pass B: one shared path carrying gradients
    need_prior = config.active("prior")
    bounces = max(config.k if config.active("photo") else 0, config.prior_bounces if need_prior else 0,
                  1 if (config.active("photo") or need_prior) else 0)
    samples = [cb.primary]
    for _ in range(bounces):
        samples.append(extend(scene, samples[-1], rng_b))
    verts = [_Vertex(scene, field_, s, tape, config, train_phi, train_theta) for s in samples]

    # pass A: fresh secondary directions from the shared primary hits, values only
    a_verts = None
    if decor:
        a_samples = [_copy(cb.primary)]
        a_bounces = max(config.k if config.active("photo") else 0, 1 if need_prior else 0)
        for _ in range(a_bounces):
            a_samples.append(extend(scene, a_samples[-1], rng_a))
        a_verts = [_Vertex(scene, field_, s, None, config, False, False) for s in a_samples]
        a_verts[0].share_radiance(verts[0])

    if config.active("photo"):
        pred_b = pixel_means(_rhs(verts, config.k, route["photo"], cb.directions), spp)
        pred_a = None
        if decor:
            pred_a = pixel_means(_rhs(a_verts, config.k, route["photo"], cb.directions, consts_only=True), spp)
        out["photo"] = photometric_loss(pred_b, target, eps, pred_a)

    if need_prior:
        res_b, res_a, rad = [], [], []
        for j in range(config.prior_bounces):
            r, lval = _residual(verts[j], verts[j + 1], route["prior"])
            res_b.append(r)
            rad.append(lval)
            if decor:
                if j == 0:
                    a_cur, a_nxt = a_verts[0], a_verts[1]
                else:
                    start = _copy(samples[j])
                    a_cur = _Vertex(scene, field_, start, None, config, False, False)
                    a_cur.share_radiance(verts[j])
                    a_nxt = _Vertex(scene, field_, extend(scene, start, rng_a), None, config, False, False)
                ra, _ = _residual(a_cur, a_nxt, route["prior"], consts_only=True)
                res_a.append(ra)
        out["prior"] = prior_loss(res_b, rad, eps, res_a if decor else None)

    if config.active("lhs"):
        v0 = verts[0]
        img = v0.radiance(route["lhs"]["theta"], route["lhs"]["phi"]) + v0.escape(
            cb.directions, np.ones(len(v0.s), bool), False)
        out["lhs"] = lhs_loss(pixel_means(img, spp), target, eps)
    return out


# ---------------------------------------------------------------------------
# training state and step


@dataclass
class TrainState:
    theta_opt: Adam
    phi_opt: Adam
    step: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=1000))
    frozen_seed: bool = False
    above_median: int = 0

    @property
    def rng_step(self):
        """Step index used to derive this step's random streams (0 when seeds are frozen)."""
        return 0 if self.frozen_seed else self.step


def init_state(scene, field_, config: TrainConfig, frozen_seed=False):
    theta = field_.params if field_ is not None else []
    phi = scene.parameters()
    project = {}
    if scene.environment is not None and scene.environment.optimize:
        project[scene.environment.param.name] = lambda d: np.maximum(d, 0.0)
    return TrainState(Adam(theta, config.lr), Adam(phi, config.lr, project), frozen_seed=frozen_seed)


@dataclass
class StepReport:
    step: int
    losses: dict
    total: float
    term_grads: Optional[dict] = None


def compute_gradients(scene, field_, dataset, state: TrainState, config: TrainConfig, per_term=False):
    """Losses and gradient tables for the current step without updating anything."""
    rng_batch, rng_cam, rng_a, rng_b = step_streams(config.seed, state.rng_step)
    vi, pixels, target = sample_batch(dataset, config, rng_batch)
    tape = GradientTape()
    params = list(state.theta_opt.params) + list(state.phi_opt.params)
    for p in params:
        tape.watch(p)
    terms = evaluate(scene, field_, pixels, target, dataset.views[vi].camera, config, (rng_cam, rng_a, rng_b), tape)
    for name, t in terms.items():
        if not np.isfinite(t.value) or not np.all(np.isfinite(value_of(t.objective))):
            raise LossError(f"non-finite {name} loss at step {state.step}")
    losses = {name: t.value for name, t in terms.items()}
    total = sum(config.weight(n) * v for n, v in losses.items())
    term_grads = None
    if per_term:
        term_grads = {n: tape.backward(t.objective, params=params) for n, t in terms.items()}
        grads = {p.name: sum(config.weight(n) * term_grads[n][p.name] for n in terms) for p in params}
    else:
        obj = None
        for n, t in terms.items():
            piece = mul(t.objective, config.weight(n))
            obj = piece if obj is None else obj + piece
        grads = tape.backward(obj, params=params)
    tape.clear()
    return losses, total, grads, term_grads


def train_step(scene, field_, dataset, state: TrainState, config: TrainConfig, per_term=False) -> StepReport:
    losses, total, grads, term_grads = compute_gradients(scene, field_, dataset, state, config, per_term)
    state.theta_opt.step(grads)
    state.phi_opt.step(grads)
    report = StepReport(state.step, losses, total, term_grads)
    _divergence_guard(state, config, total)
    state.step += 1
    return report


def _divergence_guard(state: TrainState, config: TrainConfig, total):
    hist = state.history
    if len(hist) >= config.divergence_patience and total > config.divergence_factor * float(np.median(hist)):
        state.above_median += 1
    else:
        state.above_median = 0
    hist.append(total)
    if state.above_median >= config.divergence_patience:
        raise DivergenceError(f"loss above {config.divergence_factor}x its running median for "
                              f"{config.divergence_patience} steps (step {state.step})", state)


# ---------------------------------------------------------------------------
# training loop


LOG_COLUMNS = ("step", "wall_seconds", "loss_total", "loss_photo", "loss_prior", "loss_lhs", "psnr_val", "param_mape")


def parameter_mape(scene, eps=0.01):
    """MAPE of constant-field parameters against ``scene.meta['truth']`` (``nan`` when unknown)."""
    truth = scene.meta.get("truth", {})
    errs = []
    for m in scene.materials.values():
        for f in m.fields():
            if f.name in truth and hasattr(f, "value"):
                t = np.asarray(truth[f.name], dtype=np.float64)
                errs.append(np.mean(np.abs(f.value - t) / (t + eps)))
    return float(np.mean(errs)) if errs else float("nan")


def validation_image(scene, field_, camera, config: TrainConfig, spp, seed=0):
    from .transport import render_direct
    if config.method == "ad-direct":
        return render_direct(scene, camera, spp, seed=seed).mean()
    if config.method == "ad-pt":
        return render_pt(scene, camera, spp, max_depth=config.pt_max_depth, rr_prob=config.pt_rr_prob,
                         rr_start=config.pt_rr_start, seed=seed).mean()
    return render_rhs(scene, camera, spp, field_, seed=seed).mean()


def train(scene, dataset, config: TrainConfig, field_=None, log_path=None, val_view=None, state=None,
          callback=None):
    """Run ``config.steps`` steps; returns ``(state, field, history)``.

    ``history`` holds one dict per step with the CSV columns.  The CSV (when
    ``log_path`` is given) is flushed every ``config.log_every`` steps.
    """
    if field_ is None and config.uses_field:
        field_ = make_field(scene, config)
    if state is None:
        state = init_state(scene, field_, config)
    rows = []
    t0 = time.perf_counter()
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for _ in range(config.steps):
            rep = train_step(scene, field_, dataset, state, config)
            pv = ""
            if val_view is not None and config.val_every and (rep.step + 1) % config.val_every == 0:
                img = validation_image(scene, field_, val_view.camera, config, config.val_spp, seed=rep.step)
                pv = psnr(img, val_view.image)
            row = {"step": rep.step, "wall_seconds": time.perf_counter() - t0, "loss_total": rep.total,
                   "loss_photo": rep.losses.get("photo", 0.0), "loss_prior": rep.losses.get("prior", 0.0),
                   "loss_lhs": rep.losses.get("lhs", 0.0), "psnr_val": pv, "param_mape": parameter_mape(scene)}
            rows.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in LOG_COLUMNS])
                if (rep.step + 1) % config.log_every == 0:
                    fh.flush()
            if callback is not None:
                callback(state, rep)
            if rep.step % max(1, config.log_every) == 0:
                log.info("step %d total %.5g %s", rep.step, rep.total, rep.losses)
    finally:
        if fh is not None:
            fh.close()
    return state, field_, rows


def save_parameters(path, scene):
    """Scene parameter storage beside a network checkpoint (same binary layout)."""
    from .neuralfield import save_checkpoint
    save_checkpoint(path, {"kind": "scene_parameters"}, scene.parameters())


def load_parameters(path, scene):
    from .neuralfield import load_checkpoint
    _, tensors = load_checkpoint(path)
    for p in scene.parameters():
        if p.name in tensors:
            p.data = tensors[p.name].astype(p.data.dtype)
