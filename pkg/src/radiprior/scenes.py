"""Procedural desk-scale scenes used by the tests, the benchmark and the CLI."""
import numpy as np

from .geometry import AreaEmitter, BoxInterior, PinholeCamera, Quad, SceneDescription, EnvironmentEmitter, Sphere
from .materials import ConstantField, Material


def _diffuse(name, albedo, optimize=False, kind="diffuse", roughness=0.5, init=None):
    value = albedo if init is None else init
    return Material(name, kind, ConstantField(np.atleast_1d(value), optimize=optimize, name=f"{name}.albedo"),
                    ConstantField(roughness, name=f"{name}.roughness"))


def corner_cameras(n, resolution=(32, 32), fov=70.0, half=1.0, inset=0.8, seed=0):
    """Cameras near the corners of ``[-half, half]^3`` looking at the centre."""
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    rng = np.random.default_rng(seed)
    cams = []
    for k in range(n):
        eye = corners[k % 8] * half * inset
        target = rng.uniform(-0.15, 0.15, 3) * half
        up = (0, 1, 0) if abs(eye[1]) < 0.99 * np.linalg.norm(eye) else (0, 0, 1)
        cams.append(PinholeCamera.look_at(eye, target, up, fov, resolution))
    return cams


def furnace_cube(albedo=0.5, emission=1.0, n_cameras=1, resolution=(16, 16), kind="diffuse", optimize=False,
                 init=None):
    """Closed cube whose inner walls all emit ``emission`` and reflect with ``albedo``.

    The exact outgoing radiance everywhere is ``emission / (1 - albedo)``.
    """
    mat = _diffuse("walls", albedo, optimize=optimize, kind=kind, init=init)
    box = BoxInterior((-1, -1, -1), (1, 1, 1))
    box.material_id = "walls"
    cams = corner_cameras(n_cameras, resolution) if n_cameras > 1 else [
        PinholeCamera.look_at((0, 0, 0.5), (0, 0, -1), fov=60.0, resolution=resolution)]
    sc = SceneDescription([box], {"walls": mat}, [AreaEmitter(0, np.full(3, float(emission)))], cams,
                          meta={"name": "furnace", "truth": {"walls.albedo": albedo}})
    return sc


def lit_cube(albedo=0.7, init=0.5, light_radiance=8.0, light_size=0.8, n_cameras=6, resolution=(32, 32),
             kind="diffuse", optimize=True, roughness=0.5):
    """Closed cube with a downward-facing ceiling light; wall albedo is the unknown."""
    walls = _diffuse("walls", albedo, optimize=optimize, kind=kind, init=init if optimize else None,
                     roughness=roughness)
    light_mat = Material("light", "diffuse", ConstantField([0.0]), ConstantField(0.0))
    box = BoxInterior((-1, -1, -1), (1, 1, 1))
    box.material_id = "walls"
    h = light_size / 2
    light = Quad((-h, 0.999, -h), (2 * h, 0, 0), (0, 0, 2 * h))   # normal -y
    light.material_id = "light"
    light.name = "light"
    cams = corner_cameras(n_cameras, resolution)
    return SceneDescription([box, light], {"walls": walls, "light": light_mat},
                            [AreaEmitter(1, np.full(3, float(light_radiance)))], cams,
                            meta={"name": "lit_cube", "truth": {"walls.albedo": albedo}})


def interreflection_scene(albedo_a=0.5, albedo_b=0.5, light_radiance=10.0, resolution=(16, 16)):
    """Floor ``A`` seen by the camera, side wall ``B`` reached only after one reflection.

    The camera frames a patch of the floor away from the wall.  A ceiling light
    above the wall illuminates both surfaces; the background is black.  The
    wall's albedo is the optimizable parameter.
    """
    floor = Quad((-1, 0, 1), (2, 0, 0), (0, 0, -2))     # normal +y
    floor.material_id, floor.name = "floor", "floor"
    wall = Quad((1, 0, 1), (0, 2, 0), (0, 0, -2))       # normal -x
    wall.material_id, wall.name = "wall", "wall"
    light = Quad((0.4, 2.0, -0.5), (0.5, 0, 0), (0, 0, 1))  # normal -y
    light.material_id, light.name = "light", "light"
    mats = {"floor": _diffuse("floor", albedo_a), "wall": _diffuse("wall", albedo_b, optimize=True),
            "light": Material("light", "diffuse", ConstantField([0.0]), ConstantField(0.0))}
    cam = PinholeCamera.look_at((-0.6, 1.4, 0.0), (-0.6, 0.0, 0.0), up=(0, 0, -1), fov=30.0, resolution=resolution)
    return SceneDescription([floor, wall, light], mats, [AreaEmitter(2, np.full(3, float(light_radiance)))], [cam],
                            meta={"name": "interreflection"})


def environment_sphere(texture=None, albedo=0.6, resolution=(16, 16), optimize_env=False):
    """Diffuse sphere lit by an equirectangular environment map."""
    if texture is None:
        texture = np.ones((8, 16, 3))
    ball = Sphere((0, 0, 0), 1.0)
    ball.material_id = "ball"
    cam = PinholeCamera.look_at((0, 0, 3.5), (0, 0, 0), fov=45.0, resolution=resolution)
    return SceneDescription([ball], {"ball": _diffuse("ball", albedo)}, [EnvironmentEmitter(texture, optimize_env)],
                            [cam], meta={"name": "environment_sphere"})


BUILTIN = {"furnace": furnace_cube, "lit_cube": lit_cube, "interreflection": interreflection_scene,
           "environment_sphere": environment_sphere}
