"""``radiprior`` command line: dataset generation, training, rendering and analyses.

Every subcommand reads an optional JSON config (``--config``), applies
``--set key=value`` overrides (dotted keys, JSON values), and writes the fully
resolved config to ``<out>/config.json``.  Feeding that file back with
``--config`` reproduces the run.

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.
"""
import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments, scenes
from ._accel import set_threads
from .autodiff import value_of
from .geometry import load_scene, scene_from_dict
from .imageio import read_pfm, signed_colormap, write_pfm, write_png
from .inverse import (METHODS, DivergenceError, MultiViewDataset, TrainConfig, make_field, mape, parameter_mape, psnr,
                      save_parameters, load_parameters, train)
from .materials import eval_surface_params
from .neuralfield import RadianceField
from .transport import (ConstantRadiance, all_pixels, render_direct, render_lhs, render_pt, render_rhs_k)

log = logging.getLogger("radiprior")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "scene": {"builtin": "lit_cube", "args": {}},
    "gt_scene": None,
    "dataset": None,
    "method": "ad-ours",
    "seed": 0,
    "out": "out",
    "train": {},
    "gen": {"n_views": None, "spp": 256, "max_depth": 64, "resolution": None},
    "render": {"method": "pt", "view": 0, "spp": 64, "max_depth": 15, "k": 1, "checkpoint": None,
               "parameters": None, "constant_radiance": None},
    "bench": {"albedos": list(experiments.CUBE_ALBEDOS), "n_paths": 1000000, "batch": 4096, "spp": 4,
              "timing": True, "timing_steps": 5},
    "gradient_map": {"selector": None, "region": None, "spp": 256, "fd_spp": 1024, "ks": [1, 2, 4], "view": 0,
                     "cache_spp": 64},
}


# ---------------------------------------------------------------------------
# config handling


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg, assignment):
    """``a.b.c=value`` with ``value`` parsed as JSON when possible (else a string)."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return cfg


def resolve_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as f:
                cfg = _merge(cfg, json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: {e}") from e
    for s in args.set or []:
        apply_override(cfg, s)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if cfg["method"] not in METHODS:
        raise ConfigError(f"unknown method {cfg['method']!r}; expected one of {METHODS}")
    return cfg


def build_scene(spec, base_dir="."):
    """Scene from a JSON path, ``{"builtin": name, "args": {...}}`` or an inline scene dict."""
    if spec is None:
        raise ConfigError("no scene given")
    if isinstance(spec, str):
        path = Path(spec)
        if not path.is_absolute():
            path = Path(base_dir) / path
        return load_scene(path)
    if "builtin" in spec:
        name = spec["builtin"]
        if name not in scenes.BUILTIN:
            raise ConfigError(f"unknown builtin scene {name!r}; expected one of {sorted(scenes.BUILTIN)}")
        args = dict(spec.get("args", {}))
        if "resolution" in args:
            args["resolution"] = tuple(args["resolution"])
        try:
            return scenes.BUILTIN[name](**args)
        except TypeError as e:
            raise ConfigError(f"builtin scene {name!r}: {e}") from e
    return scene_from_dict(spec)


def train_config(cfg):
    d = dict(cfg.get("train", {}))
    d.setdefault("method", cfg["method"])
    d.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg, out):
    with open(out / "config.json", "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)


def _write_image(path_stem, img):
    write_pfm(str(path_stem) + ".pfm", img)
    write_png(str(path_stem) + ".png", img)


# ---------------------------------------------------------------------------
# subcommands


def interior_cameras(scene, n, resolution):
    lo, hi = scene.bounds
    centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    cams = scenes.corner_cameras(n, resolution, half=1.0)
    for c in cams:
        c.world_from_camera[:3, 3] = centre + c.position * half
    return cams


def cmd_gen_dataset(cfg, args):
    scene = build_scene(cfg["gt_scene"] or cfg["scene"])
    gen = cfg["gen"]
    n = gen["n_views"]
    res = tuple(gen["resolution"]) if gen["resolution"] else (scene.cameras[0].resolution if scene.cameras
                                                             else (32, 32))
    if n is None:
        cams = list(scene.cameras)
    elif scene.closed:
        cams = list(scene.cameras[:n]) if len(scene.cameras) >= n else interior_cameras(scene, n, res)
    else:
        cams = experiments.hemisphere_cameras(scene, n, res, seed=cfg["seed"])
    if not cams:
        raise ConfigError("scene declares no cameras; set gen.n_views")
    out = _out_dir(cfg)
    ds = MultiViewDataset.generate(scene, cams, gen["spp"], seed=cfg["seed"], max_depth=gen["max_depth"])
    ds.meta["truth"] = scene.meta.get("truth", {})
    ds.save(out)
    _echo(cfg, out)
    print(f"wrote {len(ds)} views to {out}")
    return EXIT_OK


def _surface_maps(scene, camera):
    o, d = camera.generate_rays(all_pixels(camera))
    hits = scene.trace(o, d)
    a, r = eval_surface_params(scene, hits)
    w, h = camera.resolution
    alb = value_of(a).reshape(h, w, 3)
    rough = np.repeat(value_of(r).reshape(h, w, 1), 3, axis=2)
    return alb, rough


def cmd_train(cfg, args):
    tc = train_config(cfg)
    scene = build_scene(cfg["scene"])
    if cfg["dataset"] is None:
        raise ConfigError("train needs 'dataset' (a directory written by gen-dataset)")
    ds = MultiViewDataset.load(cfg["dataset"])
    truth = ds.meta.get("truth")
    if truth and "truth" not in scene.meta:
        scene.meta["truth"] = truth
    out = _out_dir(cfg)
    cfg = copy.deepcopy(cfg)
    cfg["train"] = tc.to_dict()
    _echo(cfg, out)
    log.info("training %s for %d steps", tc.method, tc.steps)
    val = ds.views[-1]
    field_ = make_field(scene, tc) if tc.uses_field else None
    code = EXIT_OK
    try:
        state, field_, rows = train(scene, ds, tc, field_, log_path=out / "log.csv", val_view=val)
    except DivergenceError as e:
        log.error("%s", e)
        print(f"diverged: {e}", file=sys.stderr)
        code = EXIT_DIVERGED
    save_parameters(out / "parameters.ckpt", scene)
    if field_ is not None:
        field_.save(out / "field.ckpt")
    alb, rough = _surface_maps(scene, val.camera)
    _write_image(out / "albedo", alb)
    _write_image(out / "roughness", rough)
    summary = {"method": tc.method, "param_mape": parameter_mape(scene),
               "parameters": {p.name: np.asarray(p.data).tolist() for p in scene.parameters()}}
    for m in scene.materials.values():
        for f in m.fields():
            if hasattr(f, "value") and f.optimize:
                summary["parameters"][f.name + ":value"] = np.asarray(f.value).tolist()
    with open(out / "metrics.json", "w") as f:
        json.dump(summary, f, indent=1)
    print(json.dumps(summary))
    return code


def cmd_render(cfg, args):
    scene = build_scene(cfg["scene"])
    r = cfg["render"]
    if r["parameters"]:
        load_parameters(r["parameters"], scene)
    cam = scene.cameras[r["view"]]
    seed = cfg["seed"]
    kind = r["method"]
    if kind == "pt":
        buf = render_pt(scene, cam, r["spp"], max_depth=r["max_depth"], seed=seed)
    elif kind == "direct":
        buf = render_direct(scene, cam, r["spp"], seed=seed)
    elif kind in ("rhs", "lhs"):
        if r["constant_radiance"] is not None:
            cache = ConstantRadiance(r["constant_radiance"])
        elif r["checkpoint"]:
            cache = RadianceField.load(r["checkpoint"])
        else:
            raise ConfigError("render.method rhs/lhs needs render.checkpoint or render.constant_radiance")
        if kind == "rhs":
            buf = render_rhs_k(scene, cam, r["spp"], cache, k=r["k"], seed=seed)
        else:
            buf = render_lhs(scene, cam, r["spp"], cache, seed=seed)
    else:
        raise ConfigError(f"unknown render.method {kind!r}; expected pt, direct, rhs or lhs")
    out = _out_dir(cfg)
    _echo(cfg, out)
    _write_image(out / f"render_{kind}", buf.mean())
    print(f"wrote {out / ('render_' + kind + '.pfm')}")
    return EXIT_OK


def cmd_bench_cube(cfg, args):
    b = cfg["bench"]
    rows = experiments.bench_cube(b["albedos"], int(b["n_paths"]), seed=cfg["seed"], batch=b["batch"], spp=b["spp"],
                                  timing=b["timing"], timing_steps=b["timing_steps"])
    out = _out_dir(cfg)
    _echo(cfg, out)
    cols = list(rows[0])
    with open(out / "bench_cube.csv", "w", newline="") as f:
        w = csv.DictWriter(f, cols)
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(", ".join(f"{k}={v:.4g}" for k, v in row.items()))
    return EXIT_OK


def cmd_gradient_map(cfg, args):
    scene = build_scene(cfg["scene"])
    g = cfg["gradient_map"]
    if g["selector"] is None:
        names = [p.name for p in scene.parameters()]
        if not names:
            raise ConfigError("scene has no optimizable parameters")
        g["selector"] = names[0]
    cam = scene.cameras[g["view"]]
    try:
        from .transport import PathTracedRadiance
        cache = PathTracedRadiance(scene, spp=g["cache_spp"], max_depth=8, seed=cfg["seed"] + 1)
        maps = experiments.gradient_maps(scene, g["selector"], g["region"], g["spp"], g["fd_spp"], tuple(g["ks"]),
                                         cache, seed=cfg["seed"], camera=cam)
    except KeyError as e:
        raise ConfigError(str(e)) from e
    out = _out_dir(cfg)
    _echo(cfg, out)
    scale = max(float(np.max(np.abs(maps["fd"]))), 1e-12)
    for name, m in maps.items():
        np.save(out / f"grad_{name}.npy", m)
        write_png(out / f"grad_{name}.png", signed_colormap(m, scale), gamma=1.0)
    print(json.dumps({name: float(np.sum(m)) for name, m in maps.items()}))
    return EXIT_OK


def cmd_metrics(cfg, args):
    a, b = read_pfm(args.image_a), read_pfm(args.image_b)
    if a.shape != b.shape:
        print(f"resolution mismatch: {a.shape} vs {b.shape}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"PSNR {psnr(a, b):.4f}")
    print(f"MAPE {mape(a, b):.6f}")
    return EXIT_OK


COMMANDS = {"gen-dataset": cmd_gen_dataset, "train": cmd_train, "render": cmd_render, "bench-cube": cmd_bench_cube,
            "gradient-map": cmd_gradient_map, "metrics": cmd_metrics}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for compiled kernels (1 = deterministic)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, dotted keys")
    p = argparse.ArgumentParser(prog="radiprior", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "metrics":
            sp.add_argument("image_a")
            sp.add_argument("image_b")
        if name in ("train", "gen-dataset", "render", "gradient-map"):
            sp.add_argument("--method", choices=METHODS, help="estimator/loss wiring")
    return p


def _setup_logging():
    level = os.environ.get("RADIPRIOR_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if getattr(args, "method", None):
            cfg["method"] = args.method
        set_threads(args.threads)
        return COMMANDS[args.command](cfg, args)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, KeyError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
