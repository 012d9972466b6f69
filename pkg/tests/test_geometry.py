import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from radiprior.autodiff import GradientTape, finite_diff_gradient, value_of
from radiprior.geometry import (AreaEmitter, BoxInterior, EnvironmentEmitter, PinholeCamera, Quad, Ray,
                                SceneDescription, Sphere, TriangleMesh, cosine_hemisphere, count_segments,
                                eval_environment, intersect, load_scene, orthonormal_basis, read_poses,
                                sample_camera_ray, scene_from_dict, stratified_jitter, write_poses)
from radiprior.materials import ConstantField, Material


def _mat(name="m"):
    return Material(name, "diffuse", ConstantField([0.5, 0.5, 0.5]), ConstantField(0.5))


def _scene(shapes, emitters=(), cameras=()):
    for s in shapes:
        s.material_id = "m"
    return SceneDescription(shapes, {"m": _mat()}, emitters, cameras)


def test_sphere_hit_analytic():
    sc = _scene([Sphere((0, 0, 0), 1.0)])
    hit = intersect(sc, Ray((0, 0, -2), (0, 0, 1)))
    assert hit is not None
    assert hit.t == pytest.approx(1.0)
    np.testing.assert_allclose(hit.position, (0, 0, -1), atol=1e-12)
    np.testing.assert_allclose(hit.normal, (0, 0, -1), atol=1e-12)


def test_sphere_miss():
    sc = _scene([Sphere((0, 0, 0), 1.0)])
    assert intersect(sc, Ray((0, 0, -2), (0, 1, 0))) is None


def test_nearest_hit_rule():
    sc = _scene([Sphere((0, 0, 3), 0.5), Sphere((0, 0, 1), 0.5)])
    hit = intersect(sc, Ray((0, 0, 0), (0, 0, 1)))
    assert hit.shape_id == 1
    assert hit.t == pytest.approx(0.5)


def test_ray_invariants_enforced():
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (0, 0, 2))
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (0, 0, 1), t_min=1.0, t_max=0.5)


def test_hit_frame_and_bounds():
    sc = _scene([Sphere((0, 0, 0), 1.0)])
    rng = np.random.default_rng(0)
    for _ in range(20):
        o = rng.normal(size=3) * 0.1 + np.array([0, 0, -3])
        d = np.array([0, 0, 1.0]) + rng.normal(size=3) * 0.1
        d /= np.linalg.norm(d)
        hit = intersect(sc, Ray(o, d, 0.5, 10.0))
        assert hit is not None and 0.5 <= hit.t <= 10.0
        assert np.linalg.norm(hit.normal) == pytest.approx(1.0)
        np.testing.assert_allclose(hit.frame[2], hit.normal)
        np.testing.assert_allclose(hit.frame @ hit.frame.T, np.eye(3), atol=1e-12)
        assert np.all((hit.uv >= 0) & (hit.uv <= 1))


def test_box_interior_normals_point_inward():
    box = BoxInterior((-1, -1, -1), (1, 1, 1))
    sc = _scene([box])
    rng = np.random.default_rng(1)
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    hits = sc.trace(np.zeros((1000, 3)), d)
    assert np.all(hits.valid)
    assert np.all(np.einsum("ij,ij->i", hits.normal, -hits.position) > 0)


def test_closed_box_is_watertight():
    sc = _scene([BoxInterior((-1, -1, -1), (1, 1, 1))])
    rng = np.random.default_rng(2)
    n = 10 ** 6
    o = rng.uniform(-0.999, 0.999, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.all(sc.trace(o, d).valid)


def test_intersect_is_pure():
    sc = _scene([Sphere((0, 0, 0), 1.0), Quad((-2, -1.5, -2), (4, 0, 0), (0, 0, 4))])
    rng = np.random.default_rng(3)
    o = rng.normal(size=(500, 3)) * 3
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a, b = sc.trace(o, d), sc.trace(o, d)
    for f in ("valid", "t", "position", "normal", "shape_id", "uv"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_mesh_matches_quad():
    quad = Quad((-1, 0, -1), (2, 0, 0), (0, 0, 2))
    mesh = TriangleMesh([(-1, 0, -1), (1, 0, -1), (1, 0, 1), (-1, 0, 1)], [(0, 1, 2), (0, 2, 3)])
    rng = np.random.default_rng(4)
    o = np.column_stack([rng.uniform(-1.5, 1.5, 400), np.full(400, 2.0), rng.uniform(-1.5, 1.5, 400)])
    d = np.tile([0, -1.0, 0], (400, 1))
    tq, _ = quad.intersect(o, d, np.zeros(400), np.full(400, np.inf))
    tm, _ = mesh.intersect(o, d, np.zeros(400), np.full(400, np.inf))
    inside = (np.abs(o[:, 0]) < 0.999) & (np.abs(o[:, 2]) < 0.999)
    outside = (np.abs(o[:, 0]) > 1.001) | (np.abs(o[:, 2]) > 1.001)
    np.testing.assert_allclose(tm[inside], tq[inside])
    assert np.all(np.isinf(tm[outside])) and np.all(np.isinf(tq[outside]))


def test_shadow_ray_reciprocity():
    box = BoxInterior((-1, -1, -1), (1, 1, 1))
    ball = Sphere((0.1, -0.2, 0.05), 0.45)
    sc = _scene([box, ball])
    rng = np.random.default_rng(5)
    n = 10 ** 4
    pa, na = box.sample_area(rng.random((n, 3)))
    pb, nb = ball.sample_area(rng.random((n, 3)))
    mix = rng.random(n) < 0.5
    pb = np.where(mix[:, None], pb, box.sample_area(rng.random((n, 3)))[0])
    nb = np.where(mix[:, None], nb, box.sample_area(rng.random((n, 3)))[1])
    fwd = sc.visible(pa, na, pb, nb)
    bwd = sc.visible(pb, nb, pa, na)
    np.testing.assert_array_equal(fwd, bwd)
    assert 0.05 < fwd.mean() < 0.95     # both outcomes occur


# ---------------------------------------------------------------------------
# camera


def test_centre_pixel_looks_along_axis():
    cam = PinholeCamera.look_at((0, 0, 5), (0, 0, 0), fov=40, resolution=(5, 5))
    ray, w = sample_camera_ray(cam, (2, 2), np.random.default_rng(0), jitter=False)
    np.testing.assert_allclose(ray.direction, (0, 0, -1), atol=1e-12)
    np.testing.assert_allclose(ray.origin, cam.position)
    assert w == 1.0


def test_camera_weight_and_determinism():
    cam = PinholeCamera.look_at((1, 2, 3), (0, 0, 0), fov=50, resolution=(7, 4))
    for px in [(0, 0), (6, 3), (3, 1)]:
        r1, w1 = sample_camera_ray(cam, px, np.random.default_rng(11))
        r2, w2 = sample_camera_ray(cam, px, np.random.default_rng(11))
        assert w1 == w2 == 1.0
        np.testing.assert_array_equal(r1.direction, r2.direction)
    with pytest.raises(ValueError):
        sample_camera_ray(cam, (7, 0), np.random.default_rng(0))


def test_pixel_zero_is_top_left():
    cam = PinholeCamera.look_at((0, 0, 0), (0, 0, -1), fov=60, resolution=(8, 8))
    _, d = cam.generate_rays(np.array([[0, 0]]))
    assert d[0, 0] < 0 and d[0, 1] > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 25), st.integers(0, 2 ** 31))
def test_stratified_jitter_range(spp, seed):
    j = stratified_jitter(3, spp, np.random.default_rng(seed))
    assert j.shape == (3 * spp, 2)
    assert np.all((j >= -0.5) & (j <= 0.5))


def test_camera_json_and_pose_file_roundtrip(tmp_path):
    cams = [PinholeCamera.look_at((1, 2, 3), (0, 0.5, 0), fov=37.5, resolution=(9, 5)),
            PinholeCamera.look_at((0, 0, 4), (0, 0, 0), fov=60, resolution=(9, 5))]
    write_poses(tmp_path / "poses.json", cams)
    back = read_poses(tmp_path / "poses.json")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.world_from_camera, b.world_from_camera)
        assert a.fov == b.fov and a.resolution == b.resolution
    rec = json.loads((tmp_path / "poses.json").read_text())
    assert len(rec[0]["matrix"]) == 16


# ---------------------------------------------------------------------------
# sampling helpers


unit_normals = arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 0.1)


@settings(max_examples=60, deadline=None)
@given(unit_normals, st.integers(0, 2 ** 31))
def test_cosine_hemisphere_support(n, seed):
    n = n / np.linalg.norm(n)
    u = np.random.default_rng(seed).random((64, 2))
    d = cosine_hemisphere(u, np.tile(n, (64, 1)))
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    assert np.all(d @ n >= -1e-12)
    f = orthonormal_basis(n)
    np.testing.assert_allclose(f @ f.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f[2], n)


# ---------------------------------------------------------------------------
# emitters


def test_environment_constant_texture():
    env = EnvironmentEmitter(np.full((6, 12, 3), 0.75))
    rng = np.random.default_rng(6)
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    np.testing.assert_allclose(value_of(eval_environment(env, d)), 0.75)


def test_environment_up_reads_top_row():
    tex = np.ones((4, 8, 3))
    tex[0] = 3.0
    env = EnvironmentEmitter(tex)
    np.testing.assert_allclose(value_of(eval_environment(env, np.array([[0.0, 1.0, 0.0]]))), 3.0)


def test_environment_texel_gradient_matches_fd():
    rng = np.random.default_rng(7)
    env = EnvironmentEmitter(rng.uniform(0.2, 2.0, (4, 8, 3)), optimize=True)
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    w = rng.normal(size=(50, 3))
    tape = GradientTape()
    out = eval_environment(env, d, tape)
    g = tape.backward((out * w).sum())[env.param.name]
    base = env.param.data.copy()
    for texel in [(0, 0, 0), (1, 3, 2), (3, 7, 1), (2, 5, 0)]:
        flat = np.ravel_multi_index(texel, base.shape)

        def f(v):
            t = base.copy().reshape(-1)
            t[flat] = v[0]
            env.param.data = t.reshape(base.shape)
            return float((value_of(eval_environment(env, d)) * w).sum())
        fd = finite_diff_gradient(f, np.array([base[texel]]), 1e-5)[0]
        env.param.data = base
        assert g[texel] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def _light_scene(occluder=False):
    light = Quad((-0.5, 2.0, -0.5), (1, 0, 0), (0, 0, 1))       # faces -y
    floor = Quad((-3, 0, 3), (6, 0, 0), (0, 0, -6))              # faces +y
    shapes = [floor, light]
    if occluder:
        shapes.append(Quad((-2, 1.0, 2), (4, 0, 0), (0, 0, -4)))
    return _scene(shapes, [AreaEmitter(1, np.full(3, 5.0))])


def test_occluded_light_is_invisible():
    sc = _light_scene(occluder=True)
    x = np.zeros((100, 3))
    n = np.tile([0, 1.0, 0], (100, 1))
    es = sc.sample_emitter(x, n, np.random.default_rng(8))
    assert not np.any(es.visible)
    es = _light_scene().sample_emitter(x, n, np.random.default_rng(8))
    assert np.all(es.visible)


def test_quad_light_pdf_integrates_to_one():
    sc = _light_scene()
    rng = np.random.default_rng(9)
    n = 10 ** 5
    # uniform directions over the upper hemisphere, density 1 / (2 pi)
    z = rng.random(n)
    phi = 2 * np.pi * rng.random(n)
    r = np.sqrt(1 - z * z)
    d = np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=-1)
    vals = sc.emitter_pdf(np.tile([0.1, 0.0, -0.2], (n, 1)), d) * 2 * np.pi
    est, err = vals.mean(), vals.std() / np.sqrt(n)
    assert abs(est - 1.0) < 3 * err


def test_environment_sampling_is_cosine_weighted():
    sc = _scene([Sphere((0, 0, 0), 1.0)], [EnvironmentEmitter(np.ones((4, 8, 3)))])
    x = np.tile([0, 1.0, 0], (2000, 1)) * 1.0001
    n = np.tile([0, 1.0, 0], (2000, 1))
    es = sc.sample_emitter(x, n, np.random.default_rng(10))
    cos = es.direction @ np.array([0, 1.0, 0])
    assert np.all(cos >= 0)
    np.testing.assert_allclose(es.pdf, cos / np.pi)
    assert np.all(es.env)


def test_area_emitter_front_side_only():
    sc = _light_scene()
    hits = sc.trace(np.array([[0, 1.0, 0], [0, 3.0, 0]]), np.array([[0, 1.0, 0], [0, -1.0, 0]]))
    assert np.all(hits.valid) and np.all(hits.shape_id == 1)
    e = sc.emitted(hits, -np.array([[0, 1.0, 0], [0, -1.0, 0]]))
    np.testing.assert_allclose(e[0], 5.0)
    np.testing.assert_allclose(e[1], 0.0)


# ---------------------------------------------------------------------------
# instrumentation and the scene file


def test_segment_counter_excludes_shadow_rays():
    sc = _light_scene()
    o = np.tile([0, 1.0, 0], (10, 1))
    with count_segments() as c:
        sc.trace(o, np.tile([0, 1.0, 0], (10, 1)))
        sc.visible(o, np.tile([0, 1.0, 0], (10, 1)), o + 0.5)
    assert c["segments"] == 10


SCENE_DOC = {
    "shapes": [
        {"type": "box_interior", "id": "room", "material": "walls", "min": [-1, -1, -1], "max": [1, 1, 1]},
        {"type": "quad", "id": "lamp", "material": "lamp", "p0": [-0.2, 0.99, -0.2], "u": [0.4, 0, 0],
         "v": [0, 0, 0.4]},
        {"type": "sphere", "material": "walls", "center": [0, -0.5, 0], "radius": 0.3,
         "transform": {"translate": [0.1, 0, 0]}},
        {"type": "mesh", "material": "walls", "vertices": [[0, 0, 0], [0.2, 0, 0], [0, 0.2, 0]], "faces": [[0, 1, 2]]},
    ],
    "materials": {"walls": {"kind": "burley", "albedo": {"kind": "constant", "value": [0.6, 0.5, 0.4],
                                                               "optimize": True},
                            "roughness": {"kind": "grid", "resolution": [2, 2, 2]}},
                  "lamp": {"kind": "diffuse", "albedo": 0.0}},
    "emitters": [{"type": "area", "shape": "lamp", "radiance": [4, 4, 4]}],
    "cameras": [{"look_from": [0.5, 0, 0.5], "look_at": [0, 0, 0], "fov": 60, "resolution": [8, 6]}],
    "truth": {"walls.albedo": [0.7, 0.7, 0.7]},
}


def test_scene_file_loads(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(SCENE_DOC))
    sc = load_scene(path)
    assert len(sc.shapes) == 4 and sc.closed
    assert sc.shapes[2].center[0] == pytest.approx(0.1)
    assert sc.cameras[0].resolution == (8, 6)
    names = sorted(p.name for p in sc.parameters())
    assert names == ["walls.albedo", "walls.roughness"]
    assert sc.meta["truth"]["walls.albedo"] == [0.7, 0.7, 0.7]
    np.testing.assert_allclose(sc.materials["walls"].albedo.value, [0.6, 0.5, 0.4])


def test_scene_file_rejects_unknown_material():
    bad = json.loads(json.dumps(SCENE_DOC))
    bad["shapes"][0]["material"] = "nope"
    with pytest.raises(ValueError):
        scene_from_dict(bad)
