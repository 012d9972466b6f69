"""Burley diffuse BRDF and the fields that hold optimizable material parameters.

Optimizable fields store unconstrained raw values and squash them through a
logistic function, so albedo and roughness always stay inside (0, 1).
"""
from dataclasses import dataclass

import numpy as np

from .autodiff import (Parameter, TapeValue, broadcast_to, constant, gather_weighted, mul, scatter_rows, sigmoid,
                       value_of, where)
from .geometry import cosine_hemisphere, dot, normalize
from .neuralfield import EncodedMLP, HashGridConfig

INV_PI = 1.0 / np.pi


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


# ---------------------------------------------------------------------------
# parameter fields


class ParameterField:
    kind = "field"
    channels = 1
    bounds = (np.zeros(3), np.ones(3))

    def parameters(self):
        return []

    def raw_query(self, x, tape=None) -> TapeValue:
        raise NotImplementedError

    def query(self, x, tape=None) -> TapeValue:
        return self.raw_query(x, tape)

    def _normalize(self, x):
        lo, hi = self.bounds
        return np.clip((np.asarray(x, dtype=np.float64).reshape(-1, 3) - lo) / (hi - lo), 0.0, 1.0)


class ConstantField(ParameterField):
    kind = "constant"

    def __init__(self, value, optimize=False, name="const"):
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        self.channels = value.shape[0]
        self.optimize = bool(optimize)
        self.name = name
        self.param = Parameter(name, logit(value) if self.optimize else value)

    def parameters(self):
        return [self.param] if self.optimize else []

    @property
    def value(self):
        raw = self.param.data
        return 1 / (1 + np.exp(-raw)) if self.optimize else raw

    def raw_query(self, x, tape=None):
        n = np.asarray(x).reshape(-1, 3).shape[0]
        p = tape.watch(self.param) if (tape is not None and self.optimize) else constant(self.param.data)
        return broadcast_to(p, (n, self.channels))

    def query(self, x, tape=None):
        raw = self.raw_query(x, tape)
        return sigmoid(raw) if self.optimize else raw


class GridField(ParameterField):
    """Dense grid of nodes spanning ``bounds``, trilinearly interpolated."""
    kind = "grid"

    def __init__(self, resolution, channels=1, init=0.5, optimize=True, name="grid", values=None):
        self.resolution = tuple(int(r) for r in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise ValueError("grid resolution must be three integers >= 1")
        self.channels = int(channels)
        self.optimize = bool(optimize)
        self.name = name
        if values is None:
            values = np.broadcast_to(logit(init), self.resolution + (self.channels,))
        self.param = Parameter(name, np.array(values, dtype=np.float64).reshape(self.resolution + (self.channels,)))

    def parameters(self):
        return [self.param] if self.optimize else []

    def corner_weights(self, x):
        u = self._normalize(x)
        res = np.array(self.resolution)
        g = u * (res - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), np.maximum(res - 2, 0))
        f = np.where(res > 1, g - i0, 0.0)
        idx, wts = [], []
        for c in range(8):
            off = np.array([(c >> k) & 1 for k in range(3)])
            ii = np.minimum(i0 + off, res - 1)
            w = np.prod(np.where(off, f, 1 - f), axis=1)
            idx.append((ii[:, 0] * res[1] + ii[:, 1]) * res[2] + ii[:, 2])
            wts.append(w)
        return np.stack(idx, axis=1), np.stack(wts, axis=1)

    def raw_query(self, x, tape=None):
        p = tape.watch(self.param) if (tape is not None and self.optimize) else constant(self.param.data)
        idx, wts = self.corner_weights(x)
        return gather_weighted(p.reshape(-1, self.channels), idx, wts)

    def query(self, x, tape=None):
        return sigmoid(self.raw_query(x, tape))


class NeuralField(ParameterField):
    """Hash-grid MLP with one hidden layer and a logistic output."""
    kind = "neural"

    def __init__(self, channels=1, init=0.5, hash_config=None, hidden_width=64, seed=0, name="neural",
                 optimize=True, dtype=np.float64):
        self.channels = int(channels)
        self.optimize = bool(optimize)
        self.name = name
        self.net = EncodedMLP(name, hash_config or HashGridConfig.desk(), 1, hidden_width, self.channels,
                              output_activation="none", seed=seed, dtype=dtype)
        self.net.weights[-1].data[:] = logit(init)

    @property
    def bounds(self):
        return self.net.bounds

    @bounds.setter
    def bounds(self, b):
        self.net.bounds = b

    def parameters(self):
        return self.net.params if self.optimize else []

    def raw_query(self, x, tape=None):
        return self.net.forward(np.asarray(x).reshape(-1, 3), tape=tape if self.optimize else None)

    def query(self, x, tape=None):
        return sigmoid(self.raw_query(x, tape))


def field_query(field: ParameterField, x, tape=None) -> TapeValue:
    return field.query(x, tape)


def field_from_json(spec, name, channels, optimize_default=False):
    if not isinstance(spec, dict):
        return ConstantField(spec, optimize=optimize_default, name=name)
    kind = spec.get("kind", "constant")
    optimize = spec.get("optimize", optimize_default if kind == "constant" else True)
    if kind == "constant":
        return ConstantField(spec.get("value", spec.get("init", 0.5)), optimize=optimize, name=name)
    if kind == "grid":
        return GridField(spec.get("resolution", (16, 16, 16)), spec.get("channels", channels),
                         spec.get("init", 0.5), optimize=optimize, name=name)
    if kind == "neural":
        cfg = HashGridConfig.desk(**spec.get("hash", {}))
        return NeuralField(spec.get("channels", channels), spec.get("init", 0.5), cfg,
                           spec.get("hidden_width", 64), spec.get("seed", 0), name=name, optimize=optimize)
    raise ValueError(f"unknown field kind {kind!r}")


# ---------------------------------------------------------------------------
# BRDF


@dataclass
class BurleyParams:
    albedo: object
    roughness: object


def _schlick(cos, fd90):
    return 1.0 + (fd90 - 1.0) * (1.0 - np.clip(cos, 0.0, 1.0)) ** 5


def burley_eval(albedo, roughness, cos_i, cos_o, cos_d, retro=True):
    """``f = albedo/pi * F(cos_i) * F(cos_o)`` with ``F_D90 = 0.5 + 2 r cos_d^2``.

    Cosines are plain arrays (directions are never differentiated); albedo
    ``(N, 3|1)`` and roughness ``(N, 1)`` may be tape values.
    """
    cos_i = np.asarray(cos_i)[..., None]
    cos_o = np.asarray(cos_o)[..., None]
    cos_d = np.asarray(cos_d)[..., None]
    upper = ((cos_i > 0) & (cos_o > 0)).astype(np.float64)
    if not retro:
        return mul(albedo, INV_PI * upper)
    fd_m1 = mul(roughness, 2.0 * cos_d ** 2) + (-0.5)
    wi = (1.0 - np.clip(cos_i, 0.0, 1.0)) ** 5
    wo = (1.0 - np.clip(cos_o, 0.0, 1.0)) ** 5
    fi = mul(fd_m1, wi) + 1.0
    fo = mul(fd_m1, wo) + 1.0
    return mul(mul(albedo, fi * fo), INV_PI * upper)


def eval_brdf(params: BurleyParams, wi, wo, retro=True):
    """Burley diffuse lobe for shading-frame directions (z is the normal)."""
    wi = np.asarray(wi, dtype=np.float64).reshape(-1, 3)
    wo = np.asarray(wo, dtype=np.float64).reshape(-1, 3)
    h = normalize(wi + wo)
    cos_d = dot(wi, h)
    albedo = constant(params.albedo)
    rough = constant(params.roughness)
    if albedo.ndim < 2:
        albedo = albedo.reshape(1, -1)
    if rough.ndim < 2:
        rough = rough.reshape(1, 1)
    return burley_eval(albedo, rough, wi[:, 2], wo[:, 2], cos_d, retro)


def sample_brdf(params: BurleyParams, wo, rng, n=None, retro=True):
    """Cosine-weighted ``wi`` in the shading frame; ``pdf = cos_i / pi``."""
    wo = np.asarray(wo, dtype=np.float64).reshape(-1, 3)
    count = len(wo) if n is None else n
    u = rng.random((count, 2))
    wi = cosine_hemisphere(u, np.broadcast_to([0.0, 0.0, 1.0], (count, 3)))
    pdf = np.maximum(wi[:, 2], 0.0) * INV_PI
    value = eval_brdf(params, wi, np.broadcast_to(wo, (count, 3)), retro)
    return wi, pdf, value


class Material:
    """``kind='burley'`` or ``'diffuse'`` (Lambertian: the retro-reflection term disabled)."""

    def __init__(self, name, kind="burley", albedo=None, roughness=None):
        if kind not in ("burley", "diffuse"):
            raise ValueError(f"unknown material kind {kind!r}")
        self.name = name
        self.kind = kind
        self.albedo = albedo if albedo is not None else ConstantField([0.5, 0.5, 0.5], name=f"{name}.albedo")
        self.roughness = roughness if roughness is not None else ConstantField(0.5, name=f"{name}.roughness")

    @property
    def retro(self):
        return self.kind == "burley"

    def fields(self):
        return [self.albedo, self.roughness] if self.retro else [self.albedo]

    def parameters(self):
        out = []
        for f in self.fields():
            out.extend(f.parameters())
        return out

    def set_bounds(self, bounds):
        for f in (self.albedo, self.roughness):
            f.bounds = bounds


def material_from_json(name, spec) -> Material:
    albedo = field_from_json(spec.get("albedo", 0.5), f"{name}.albedo", 3)
    rough = field_from_json(spec.get("roughness", 0.5), f"{name}.roughness", 1)
    return Material(name, spec.get("kind", "burley"), albedo, rough)


# ---------------------------------------------------------------------------
# per-hit evaluation over a scene with several materials


def eval_surface_params(scene, hits, tape=None):
    """Albedo ``(N, 3)`` and roughness ``(N, 1)`` at ``hits`` (valid rows only).

    ``tape=None`` evaluates detached.  Rows of invalid hits are zero.
    """
    n = len(hits)
    mat = np.where(hits.valid, scene.shape_material[np.maximum(hits.shape_id, 0)], -1)
    a_parts, r_parts = [], []
    for k, mname in enumerate(scene.material_names):
        rows_k = np.flatnonzero(mat == k)
        if rows_k.size == 0:
            continue
        m = scene.materials[mname]
        x = hits.position[rows_k]
        a = m.albedo.query(x, tape)
        if a.shape[1] == 1:
            a = broadcast_to(a, (len(rows_k), 3))
        r = m.roughness.query(x, tape) if m.retro else constant(np.zeros((len(rows_k), 1)))
        a_parts.append((rows_k, a))
        r_parts.append((rows_k, r))
    return scatter_rows(n, a_parts, 3), scatter_rows(n, r_parts, 1)


def surface_brdf(scene, hits, wi, wo, albedo, roughness):
    """BRDF value per hit for world-space ``wi``/``wo`` (zero below the horizon).

    Shading normals are flipped toward ``wo`` so every material is two-sided.
    """
    n = shading_normal(hits.normal, wo)
    h = normalize(wi + wo)
    cos_i, cos_o, cos_d = dot(wi, n), dot(wo, n), dot(wi, h)
    retro = retro_mask(scene, hits)
    if not retro.any():
        return burley_eval(albedo, roughness, cos_i, cos_o, cos_d, retro=False)
    f_retro = burley_eval(albedo, roughness, cos_i, cos_o, cos_d, retro=True)
    if retro.all():
        return f_retro
    f_lamb = burley_eval(albedo, roughness, cos_i, cos_o, cos_d, retro=False)
    return where(retro[:, None], f_retro, f_lamb)


def brdf_weight(scene, hits, wi, wo, albedo, roughness):
    """``f * cos_i / pdf`` under cosine sampling, which is simply ``pi * f``."""
    return mul(surface_brdf(scene, hits, wi, wo, albedo, roughness), np.pi)


def retro_mask(scene, hits):
    mat = scene.shape_material[np.maximum(hits.shape_id, 0)]
    kinds = np.array([scene.materials[m].retro for m in scene.material_names])
    return kinds[mat] & hits.valid


def shading_normal(n, wo):
    return np.where((dot(n, wo) < 0)[:, None], -n, n)


def detached_albedo(scene, hits):
    a, _ = eval_surface_params(scene, hits, tape=None)
    return value_of(a)
