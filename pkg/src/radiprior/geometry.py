"""Rays, shapes, cameras, emitters and the JSON scene format.

All tracing is batched: arrays of ``N`` rays go in, a :class:`HitBatch` comes
out.  Single-ray helpers (:func:`intersect`, :func:`sample_camera_ray`) wrap
the batched path.  There is no acceleration structure; scenes are desk scale.
"""
import json
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import Parameter, TapeValue, constant, gather_weighted, reshape

INF = np.inf


def normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def orthonormal_basis(n):
    """Rows ``(t, b, n)`` of a right-handed frame around unit ``n`` (Duff et al. 2017)."""
    n = np.asarray(n, dtype=np.float64)
    sign = np.where(n[..., 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1)
    bt = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return np.stack([t, bt, n], axis=-2)


def cosine_hemisphere(u, n):
    """Cosine-weighted directions around unit normals ``n`` from uniforms ``u`` (N, 2)."""
    r = np.sqrt(u[:, 0])
    phi = 2 * np.pi * u[:, 1]
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(0.0, 1 - u[:, 0]))], axis=-1)
    frame = orthonormal_basis(n)
    return np.einsum("ni,nij->nj", local, frame)


# ---------------------------------------------------------------------------
# segment instrumentation


class _Counter(threading.local):
    def __init__(self):
        self.segments = 0
        self.active = False


_counter = _Counter()


@contextmanager
def count_segments():
    """Count camera and bounce ray segments traced inside the block (shadow rays excluded)."""
    prev_active, prev = _counter.active, _counter.segments
    _counter.active, _counter.segments = True, 0
    box = {"segments": 0}
    try:
        yield box
    finally:
        box["segments"] = _counter.segments
        _counter.active, _counter.segments = prev_active, prev


# ---------------------------------------------------------------------------
# rays and hits


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = INF

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.t_min < self.t_max):
            raise ValueError("ray bounds must satisfy 0 <= t_min < t_max")


@dataclass
class SurfaceHit:
    position: np.ndarray
    normal: np.ndarray
    frame: np.ndarray
    shape_id: int
    uv: np.ndarray
    t: float


@dataclass
class HitBatch:
    valid: np.ndarray
    t: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    shape_id: np.ndarray
    uv: np.ndarray

    def __len__(self):
        return self.valid.shape[0]

    @property
    def frame(self):
        return orthonormal_basis(self.normal)

    def subset(self, idx):
        return HitBatch(self.valid[idx], self.t[idx], self.position[idx], self.normal[idx],
                        self.shape_id[idx], self.uv[idx])

    def single(self, i) -> Optional[SurfaceHit]:
        if not self.valid[i]:
            return None
        return SurfaceHit(self.position[i], self.normal[i], orthonormal_basis(self.normal[i]),
                          int(self.shape_id[i]), self.uv[i], float(self.t[i]))


# ---------------------------------------------------------------------------
# shapes


class Transform:
    """Scale, then rotate (axis-angle, degrees), then translate."""

    def __init__(self, scale=1.0, rotate=None, translate=(0.0, 0.0, 0.0)):
        self.scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,)).copy()
        self.translate = np.asarray(translate, dtype=np.float64)
        self.rotation = np.eye(3)
        if rotate is not None:
            axis = normalize(np.asarray(rotate[:3], dtype=np.float64))
            ang = math.radians(rotate[3])
            k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            self.rotation = np.eye(3) + math.sin(ang) * k + (1 - math.cos(ang)) * k @ k

    @classmethod
    def from_json(cls, d):
        if d is None:
            return cls()
        return cls(d.get("scale", 1.0), d.get("rotate"), d.get("translate", (0.0, 0.0, 0.0)))

    @property
    def is_identity_rotation(self):
        return np.allclose(self.rotation, np.eye(3))

    def point(self, p):
        return (np.asarray(p) * self.scale) @ self.rotation.T + self.translate

    def vector(self, v):
        return (np.asarray(v) * self.scale) @ self.rotation.T


class Shape:
    kind = "shape"
    material_id = None
    emitter_id = None
    name = None

    def intersect(self, o, d, t_min, t_max):
        """Hit distance per ray (``inf`` on miss) and primitive index."""
        raise NotImplementedError

    def surface(self, p, prim, d):
        """Geometric normal and uv at hit points."""
        raise NotImplementedError

    def sample_area(self, u):
        """Uniform area samples ``(points, normals)`` from uniforms ``u`` (N, 3)."""
        raise NotImplementedError

    @property
    def area(self):
        raise NotImplementedError

    def bounds(self):
        raise NotImplementedError


class Sphere(Shape):
    kind = "sphere"

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def intersect(self, o, d, t_min, t_max):
        oc = o - self.center
        b = dot(oc, d)
        c = dot(oc, oc) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > t_min, t0, t1)
        ok = (disc >= 0) & (t > t_min) & (t < t_max)
        return np.where(ok, t, INF), np.zeros(len(o), dtype=np.int64)

    def surface(self, p, prim, d):
        n = (p - self.center) / self.radius
        uv = np.stack([(np.arctan2(n[:, 0], n[:, 2]) / (2 * np.pi)) % 1.0,
                       np.arccos(np.clip(n[:, 1], -1, 1)) / np.pi], axis=-1)
        return n, uv

    @property
    def area(self):
        return 4 * np.pi * self.radius ** 2

    def sample_area(self, u):
        z = 1 - 2 * u[:, 0]
        r = np.sqrt(np.maximum(0.0, 1 - z * z))
        phi = 2 * np.pi * u[:, 1]
        n = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
        return self.center + self.radius * n, n

    def bounds(self):
        return self.center - self.radius, self.center + self.radius


class Quad(Shape):
    """Parallelogram ``p0 + s*u + t*v``, ``s, t`` in [0, 1]; front side along ``u x v``."""
    kind = "quad"

    def __init__(self, p0, u, v):
        self.p0 = np.asarray(p0, dtype=np.float64)
        self.u = np.asarray(u, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        cr = np.cross(self.u, self.v)
        self._area = float(np.linalg.norm(cr))
        if self._area <= 0:
            raise ValueError("degenerate quad")
        self.n = cr / self._area
        # dual basis for in-plane coordinates
        m = np.array([self.u, self.v])
        self._dual = np.linalg.pinv(m)

    def intersect(self, o, d, t_min, t_max):
        denom = d @ self.n
        ok = np.abs(denom) > 1e-12
        t = np.where(ok, ((self.p0 - o) @ self.n) / np.where(ok, denom, 1.0), INF)
        p = o + np.where(ok, t, 0.0)[:, None] * d
        st = (p - self.p0) @ self._dual
        ok &= (st[:, 0] >= 0) & (st[:, 0] <= 1) & (st[:, 1] >= 0) & (st[:, 1] <= 1) & (t > t_min) & (t < t_max)
        return np.where(ok, t, INF), np.zeros(len(o), dtype=np.int64)

    def surface(self, p, prim, d):
        st = np.clip((p - self.p0) @ self._dual, 0.0, 1.0)
        return np.broadcast_to(self.n, p.shape).copy(), st

    @property
    def area(self):
        return self._area

    def sample_area(self, u):
        p = self.p0 + u[:, :1] * self.u + u[:, 1:2] * self.v
        return p, np.broadcast_to(self.n, p.shape).copy()

    def bounds(self):
        pts = np.array([self.p0, self.p0 + self.u, self.p0 + self.v, self.p0 + self.u + self.v])
        return pts.min(axis=0), pts.max(axis=0)


class BoxInterior(Shape):
    """Axis-aligned box seen from the inside: normals point inward."""
    kind = "box_interior"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("box max must exceed min on every axis")
        ext = self.hi - self.lo
        self._face_area = np.array([ext[1] * ext[2], ext[1] * ext[2], ext[0] * ext[2],
                                    ext[0] * ext[2], ext[0] * ext[1], ext[0] * ext[1]])

    def intersect(self, o, d, t_min, t_max):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.lo - o) * inv
            tb = (self.hi - o) * inv
        tn = np.nanmax(np.minimum(ta, tb), axis=1)
        tf = np.nanmin(np.maximum(ta, tb), axis=1)
        t = np.where(tn > t_min, tn, tf)
        ok = (tn <= tf) & (t > t_min) & (t < t_max)
        return np.where(ok, t, INF), np.zeros(len(o), dtype=np.int64)

    def _face(self, p):
        dist = np.stack([p[:, 0] - self.lo[0], self.hi[0] - p[:, 0], p[:, 1] - self.lo[1],
                         self.hi[1] - p[:, 1], p[:, 2] - self.lo[2], self.hi[2] - p[:, 2]], axis=-1)
        return np.argmin(np.abs(dist), axis=1)

    _NORMALS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)

    def surface(self, p, prim, d):
        face = self._face(p)
        n = self._NORMALS[face]
        rel = (p - self.lo) / (self.hi - self.lo)
        axis = face // 2
        uv = np.where((axis == 0)[:, None], rel[:, [1, 2]], np.where((axis == 1)[:, None], rel[:, [0, 2]], rel[:, [0, 1]]))
        return n, np.clip(uv, 0, 1)

    @property
    def area(self):
        return float(self._face_area.sum())

    def sample_area(self, u):
        cdf = np.cumsum(self._face_area) / self._face_area.sum()
        face = np.minimum(np.searchsorted(cdf, u[:, 2], side="right"), 5)
        axis = face // 2
        others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        ext = self.hi - self.lo
        rows = np.arange(len(u))
        p = np.tile(self.lo, (len(u), 1))
        p[rows, others[:, 0]] += u[:, 0] * ext[others[:, 0]]
        p[rows, others[:, 1]] += u[:, 1] * ext[others[:, 1]]
        p[rows, axis] = np.where(face % 2 == 0, self.lo[axis], self.hi[axis])
        return p, self._NORMALS[face]

    def bounds(self):
        return self.lo.copy(), self.hi.copy()


class TriangleMesh(Shape):
    kind = "mesh"

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        tri = self.vertices[self.faces]
        self.v0 = np.ascontiguousarray(tri[:, 0])
        self.e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        self.e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        cr = np.cross(self.e1, self.e2)
        self.tri_area = 0.5 * np.linalg.norm(cr, axis=1)
        self.tri_normal = normalize(cr)

    def intersect(self, o, d, t_min, t_max):
        t_min = np.broadcast_to(t_min, (len(o),)).astype(np.float64)
        t_max = np.broadcast_to(t_max, (len(o),)).astype(np.float64)
        t, prim = kernels.intersect_triangles(np.ascontiguousarray(o), np.ascontiguousarray(d),
                                              t_min, t_max, self.v0, self.e1, self.e2)
        t = np.where(prim >= 0, t, INF)
        return t, prim

    def surface(self, p, prim, d):
        n = self.tri_normal[prim]
        rel = p - self.v0[prim]
        # barycentric (u, v) via least squares on the two edges
        e1, e2 = self.e1[prim], self.e2[prim]
        d00, d01, d11 = dot(e1, e1), dot(e1, e2), dot(e2, e2)
        d20, d21 = dot(rel, e1), dot(rel, e2)
        den = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        return n, np.clip(np.stack([v, w], axis=-1), 0, 1)

    @property
    def area(self):
        return float(self.tri_area.sum())

    def sample_area(self, u):
        cdf = np.cumsum(self.tri_area) / self.tri_area.sum()
        k = np.minimum(np.searchsorted(cdf, u[:, 2], side="right"), len(cdf) - 1)
        su = np.sqrt(u[:, 0])
        b2 = u[:, 1] * su
        p = self.v0[k] + (su * (1 - u[:, 1]))[:, None] * self.e1[k] + b2[:, None] * self.e2[k]
        return p, self.tri_normal[k]

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


# ---------------------------------------------------------------------------
# camera


@dataclass
class PinholeCamera:
    """Looks down camera-space ``-z`` with ``+y`` up; pixel (0, 0) is top-left."""
    world_from_camera: np.ndarray
    fov: float
    resolution: tuple

    def __post_init__(self):
        self.world_from_camera = np.asarray(self.world_from_camera, dtype=np.float64).reshape(4, 4)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    @classmethod
    def look_at(cls, eye, target, up=(0, 1, 0), fov=60.0, resolution=(32, 32)):
        eye, target = np.asarray(eye, float), np.asarray(target, float)
        back = normalize(eye - target)
        right = normalize(np.cross(up, back))
        if np.linalg.norm(right) == 0:
            right = normalize(np.cross((0, 0, 1), back))
        upv = np.cross(back, right)
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, upv, back, eye
        return cls(m, fov, resolution)

    @property
    def position(self):
        return self.world_from_camera[:3, 3].copy()

    @property
    def width(self):
        return self.resolution[0]

    @property
    def height(self):
        return self.resolution[1]

    def generate_rays(self, pixels, jitter=None):
        """World-space origins and unit directions for ``pixels`` (N, 2) as (column, row)."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        if jitter is None:
            jitter = np.zeros_like(pixels)
        w, h = self.resolution
        tan = math.tan(math.radians(self.fov) / 2)
        sx = ((pixels[:, 0] + 0.5 + jitter[:, 0]) / w * 2 - 1) * tan * (w / h)
        sy = (1 - (pixels[:, 1] + 0.5 + jitter[:, 1]) / h * 2) * tan
        local = np.stack([sx, sy, -np.ones_like(sx)], axis=-1)
        rot = self.world_from_camera[:3, :3]
        d = normalize(local @ rot.T)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    def to_json(self):
        return {"matrix": self.world_from_camera.reshape(-1).tolist(), "fov": self.fov,
                "resolution": list(self.resolution)}

    @classmethod
    def from_json(cls, d):
        res = d.get("resolution", (32, 32))
        if "matrix" in d:
            return cls(np.asarray(d["matrix"], dtype=np.float64).reshape(4, 4), d["fov"], res)
        return cls.look_at(d["look_from"], d["look_at"], d.get("up", (0, 1, 0)), d.get("fov", 60.0), res)


def stratified_jitter(n_pixels, spp, rng):
    """Jitter in [-0.5, 0.5]^2, stratified on a square grid when ``spp`` is a perfect square."""
    k = int(round(math.sqrt(spp)))
    u = rng.random((n_pixels, spp, 2))
    if k * k == spp and k > 1:
        cell = np.arange(spp)
        off = np.stack([cell % k, cell // k], axis=-1)
        u = (off + u) / k
    return (u - 0.5).reshape(-1, 2)


def sample_camera_ray(camera: PinholeCamera, pixel, rng, jitter=True):
    x, y = int(pixel[0]), int(pixel[1])
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel {pixel} outside resolution {camera.resolution}")
    j = (rng.random(2) - 0.5) if jitter else np.zeros(2)
    o, d = camera.generate_rays(np.array([[x, y]]), j[None])
    return Ray(o[0], d[0]), 1.0


# ---------------------------------------------------------------------------
# emitters


@dataclass
class AreaEmitter:
    shape_id: int
    radiance: np.ndarray
    kind: str = "area"


class EnvironmentEmitter:
    """Equirectangular map, ``+y`` up; row 0 is the zenith."""
    kind = "environment"

    def __init__(self, texture, optimize=False, name="envmap"):
        tex = np.asarray(texture, dtype=np.float64)
        if tex.ndim != 3 or tex.shape[2] != 3:
            raise ValueError("environment texture must be (H, W, 3)")
        self.param = Parameter(name, tex)
        self.optimize = bool(optimize)

    @property
    def texture(self):
        return self.param.data

    def lookup_coords(self, d):
        h, w, _ = self.texture.shape
        theta = np.arccos(np.clip(d[:, 1], -1.0, 1.0))
        phi = np.arctan2(d[:, 0], -d[:, 2])
        u = (phi / (2 * np.pi) + 0.5) % 1.0
        v = theta / np.pi
        col = u * w - 0.5
        row = np.clip(v * h - 0.5, 0.0, h - 1.0)
        c0 = np.floor(col)
        r0 = np.minimum(np.floor(row), h - 2) if h > 1 else np.zeros_like(row)
        fc, fr = col - c0, row - r0
        c0 = c0.astype(np.int64) % w
        c1 = (c0 + 1) % w
        r0 = r0.astype(np.int64)
        r1 = np.minimum(r0 + 1, h - 1)
        idx = np.stack([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1], axis=-1)
        wts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1)
        return idx, wts


def eval_environment(env: EnvironmentEmitter, directions, tape=None) -> TapeValue:
    """Bilinear radiance lookup, differentiable in texel values when ``tape`` is given."""
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    tex = tape.watch(env.param) if (tape is not None and env.optimize) else constant(env.texture)
    h, w, _ = tex.shape
    idx, wts = env.lookup_coords(d)
    return gather_weighted(reshape(tex, (h * w, 3)), idx, wts)


@dataclass
class EmitterSample:
    direction: np.ndarray
    pdf: np.ndarray
    radiance: np.ndarray      # area-emitter radiance; zero where the environment was chosen
    visible: np.ndarray
    env: np.ndarray           # samples that selected the environment emitter
    distance: np.ndarray


# ---------------------------------------------------------------------------
# scene


class SceneDescription:
    def __init__(self, shapes, materials, emitters=(), cameras=(), meta=None):
        self.shapes = list(shapes)
        self.materials = dict(materials)
        self.material_names = list(self.materials)
        self.emitters = list(emitters)
        self.cameras = list(cameras)
        self.meta = dict(meta or {})
        self.environment = next((e for e in self.emitters if e.kind == "environment"), None)
        self.area_emitters = [e for e in self.emitters if e.kind == "area"]
        self._shape_radiance = np.zeros((len(self.shapes), 3))
        self._shape_emits = np.zeros(len(self.shapes), dtype=bool)
        for k, e in enumerate(self.emitters):
            if e.kind == "area":
                self.shapes[e.shape_id].emitter_id = k
                self._shape_radiance[e.shape_id] = e.radiance
                self._shape_emits[e.shape_id] = True
        self.shape_material = np.array([self.material_names.index(s.material_id) for s in self.shapes], dtype=np.int64)
        lo = np.min([s.bounds()[0] for s in self.shapes], axis=0) if self.shapes else np.zeros(3)
        hi = np.max([s.bounds()[1] for s in self.shapes], axis=0) if self.shapes else np.ones(3)
        pad = 1e-3 * np.maximum(hi - lo, 1e-6)
        self.bounds = (lo - pad, hi + pad)
        for m in self.materials.values():
            m.set_bounds(self.bounds)
        self.scale = float(np.max(hi - lo)) if self.shapes else 1.0
        self.eps = 1e-4 * self.scale

    # -- helpers ------------------------------------------------------------

    def normalize_points(self, p):
        lo, hi = self.bounds
        return np.clip((p - lo) / (hi - lo), 0.0, 1.0)

    @property
    def closed(self):
        return self.environment is None

    def parameters(self):
        """Optimizable scene parameters (phi)."""
        out = []
        for m in self.materials.values():
            out.extend(m.parameters())
        if self.environment is not None and self.environment.optimize:
            out.append(self.environment.param)
        return out

    # -- tracing ------------------------------------------------------------

    def trace(self, o, d, t_min=None, t_max=None) -> HitBatch:
        o = np.asarray(o, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        n = len(o)
        t_min = np.zeros(n) if t_min is None else np.broadcast_to(t_min, (n,)).astype(np.float64)
        t_max = np.full(n, INF) if t_max is None else np.broadcast_to(t_max, (n,)).astype(np.float64)
        if _counter.active:
            _counter.segments += n
        best = t_max.copy()
        sid = np.full(n, -1, dtype=np.int64)
        prim = np.zeros(n, dtype=np.int64)
        for k, shape in enumerate(self.shapes):
            t, pr = shape.intersect(o, d, t_min, best)
            closer = t < best
            best = np.where(closer, t, best)
            sid[closer] = k
            prim[closer] = pr[closer]
        valid = sid >= 0
        pos = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        uv = np.zeros((n, 2))
        tt = np.where(valid, best, INF)
        pos[valid] = o[valid] + tt[valid, None] * d[valid]
        for k in np.unique(sid[valid]):
            m = sid == k
            nn, uu = self.shapes[k].surface(pos[m], prim[m], d[m])
            nrm[m] = nn
            uv[m] = uu
        return HitBatch(valid, tt, pos, nrm, sid, uv)

    def spawn(self, p, n, d):
        """Ray origins offset along the normal to the side ``d`` leaves from."""
        side = np.where(dot(n, d) >= 0, 1.0, -1.0)
        return p + (self.eps * side)[:, None] * n

    def visible(self, p, n, q, nq=None):
        """Mutual visibility of point pairs with matched epsilons at both ends."""
        d = q - p
        dist = np.linalg.norm(d, axis=1)
        d = d / np.where(dist > 0, dist, 1.0)[:, None]
        o = self.spawn(p, n, d)
        end = q if nq is None else self.spawn(q, nq, -d)
        # trace exactly the offset segment so that swapping the endpoints traces the same line
        seg_d = end - o
        seg = np.linalg.norm(seg_d, axis=1)
        seg_d = seg_d / np.where(seg > 0, seg, 1.0)[:, None]
        with _suspend_counter():
            hit = self.trace(o, seg_d, 0.0, seg * (1 - 1e-7))
        return ~hit.valid

    def emitted(self, hits: HitBatch, wo):
        """Area-emitter radiance leaving ``hits`` toward ``wo`` (front side only)."""
        out = np.zeros((len(hits), 3))
        v = hits.valid
        if not np.any(self._shape_emits[hits.shape_id[v]]):
            return out
        sid = np.where(v, hits.shape_id, 0)
        front = dot(hits.normal, wo) > 0
        mask = v & self._shape_emits[sid] & front
        out[mask] = self._shape_radiance[sid[mask]]
        return out

    def sample_emitter(self, x, n, rng) -> EmitterSample:
        """Pick an emitter uniformly and sample a direction toward it (solid-angle pdf)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
        cnt = len(x)
        ne = len(self.emitters)
        if ne == 0:
            raise ValueError("scene has no emitters")
        u = rng.random((cnt, 4))
        pick = np.minimum((u[:, 3] * ne).astype(np.int64), ne - 1)
        direction = np.zeros((cnt, 3))
        pdf = np.zeros(cnt)
        radiance = np.zeros((cnt, 3))
        dist = np.full(cnt, INF)
        env = np.zeros(cnt, dtype=bool)
        visible = np.zeros(cnt, dtype=bool)
        for k, em in enumerate(self.emitters):
            m = pick == k
            if not np.any(m):
                continue
            if em.kind == "environment":
                wi = cosine_hemisphere(u[m, :2], n[m])
                direction[m] = wi
                pdf[m] = np.maximum(dot(wi, n[m]), 0.0) / np.pi / ne
                env[m] = True
                o = self.spawn(x[m], n[m], wi)
                with _suspend_counter():
                    hit = self.trace(o, wi)
                visible[m] = ~hit.valid
            else:
                shape = self.shapes[em.shape_id]
                q, nq = shape.sample_area(u[m, :3])
                d = q - x[m]
                r = np.linalg.norm(d, axis=1)
                wi = d / np.where(r > 0, r, 1.0)[:, None]
                cos_l = -dot(nq, wi)
                good = (cos_l > 1e-9) & (r > 0)
                p = np.where(good, r * r / (shape.area * np.where(good, cos_l, 1.0)) / ne, 0.0)
                direction[m] = wi
                pdf[m] = p
                dist[m] = r
                radiance[m] = np.where(good[:, None], em.radiance, 0.0)
                visible[m] = good & self.visible(x[m], n[m], q, nq)
        return EmitterSample(direction, pdf, radiance, visible, env, dist)

    def emitter_pdf(self, x, direction):
        """Solid-angle density of :meth:`sample_emitter` for area lights (occlusion ignored)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(direction, dtype=np.float64).reshape(-1, 3)
        ne = len(self.emitters)
        pdf = np.zeros(len(x))
        for em in self.area_emitters:
            shape = self.shapes[em.shape_id]
            t, prim = shape.intersect(x, d, np.zeros(len(x)), np.full(len(x), INF))
            hit = np.isfinite(t)
            if not np.any(hit):
                continue
            p = x[hit] + t[hit, None] * d[hit]
            nq, _ = shape.surface(p, prim[hit], d[hit])
            cos_l = -dot(nq, d[hit])
            ok = cos_l > 1e-9
            pdf[np.flatnonzero(hit)[ok]] += t[hit][ok] ** 2 / (shape.area * cos_l[ok]) / ne
        return pdf


@contextmanager
def _suspend_counter():
    prev = _counter.active
    _counter.active = False
    try:
        yield
    finally:
        _counter.active = prev


def intersect(scene: SceneDescription, ray: Ray) -> Optional[SurfaceHit]:
    """Nearest hit of a single ray, or ``None`` when it escapes."""
    hits = scene.trace(ray.origin[None], ray.direction[None], ray.t_min, ray.t_max)
    return hits.single(0)


# ---------------------------------------------------------------------------
# scene file


def _shape_from_json(d):
    kind = d["type"]
    tf = Transform.from_json(d.get("transform"))
    if kind == "sphere":
        if not np.allclose(tf.scale, tf.scale[0]):
            raise ValueError("spheres only support uniform scale")
        shape = Sphere(tf.point(d.get("center", (0, 0, 0))), d.get("radius", 1.0) * tf.scale[0])
    elif kind == "quad":
        shape = Quad(tf.point(d["p0"]), tf.vector(d["u"]), tf.vector(d["v"]))
    elif kind == "box_interior":
        if not tf.is_identity_rotation:
            raise ValueError("box_interior must stay axis aligned")
        shape = BoxInterior(tf.point(d.get("min", (-1, -1, -1))), tf.point(d.get("max", (1, 1, 1))))
    elif kind == "mesh":
        shape = TriangleMesh(tf.point(np.asarray(d["vertices"], dtype=np.float64)), d["faces"])
    else:
        raise ValueError(f"unknown shape type {kind!r}")
    shape.material_id = d["material"]
    shape.name = d.get("id")
    return shape


def scene_from_dict(d) -> SceneDescription:
    from .materials import material_from_json

    materials = {name: material_from_json(name, spec) for name, spec in d["materials"].items()}
    shapes = [_shape_from_json(s) for s in d["shapes"]]
    for s in shapes:
        if s.material_id not in materials:
            raise ValueError(f"shape references unknown material {s.material_id!r}")
    ids = {s.name: k for k, s in enumerate(shapes) if s.name is not None}
    emitters = []
    for e in d.get("emitters", []):
        if e["type"] == "area":
            ref = e["shape"]
            sid = ids[ref] if isinstance(ref, str) else int(ref)
            emitters.append(AreaEmitter(sid, np.broadcast_to(np.asarray(e["radiance"], dtype=np.float64), (3,)).copy()))
        elif e["type"] == "environment":
            tex = e.get("texture")
            if tex is None:
                h, w = e.get("resolution", (8, 16))
                tex = np.broadcast_to(np.asarray(e.get("constant", (1.0, 1.0, 1.0)), dtype=np.float64), (h, w, 3))
            emitters.append(EnvironmentEmitter(tex, e.get("optimize", False)))
        else:
            raise ValueError(f"unknown emitter type {e['type']!r}")
    cameras = [PinholeCamera.from_json(c) for c in d.get("cameras", [])]
    meta = dict(d.get("render", {}))
    if "truth" in d:
        meta["truth"] = dict(d["truth"])
    return SceneDescription(shapes, materials, emitters, cameras, meta=meta)


def load_scene(path) -> SceneDescription:
    with open(path) as f:
        return scene_from_dict(json.load(f))


def write_poses(path, cameras):
    with open(path, "w") as f:
        json.dump([c.to_json() for c in cameras], f, indent=1)


def read_poses(path):
    with open(Path(path)) as f:
        return [PinholeCamera.from_json(r) for r in json.load(f)]
