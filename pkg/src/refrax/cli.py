"""Command line: ``refrax gen | train | eval | render``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .field import BackgroundModel, FieldError, VoxelField
from .geometry import GeometryError, MediumMap, read_obj
from .renderer import write_pfm, write_png
from .scenegen import (BACKGROUNDS, PRESETS, DatasetError, SceneSpec, cameras_helical,
                       make_background, make_scene_spec, read_dataset, write_dataset)
from .train import ConfigError, TrainConfig, evaluate, render_views, train

logger = logging.getLogger("refrax")


class UsageError(Exception):
    pass


def version_string():
    """``git describe``-style version; falls back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunManifest:
    """Record of one invocation, written at start and finalized at exit."""

    def __init__(self, path, command, argv, config, seed):
        self.path = Path(path) if path is not None else None
        self.data = {"command": command, "argv": list(argv), "config": config, "seed": seed,
                     "version": version_string(), "status": "running",
                     "timings": {"start": time.time()}}
        self._t0 = time.perf_counter()
        self.write()

    def write(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.finish("failed", error=f"{exc_type.__name__}: {exc}")
        return False

    def finish(self, status, **extra):
        self.data["status"] = status
        self.data["timings"]["wall_seconds"] = time.perf_counter() - self._t0
        self.data.update(extra)
        self.write()


def _threads(args):
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get("REFREF_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise UsageError(f"REFREF_THREADS must be an integer, got {env!r}")


def _load_config(args, base=None):
    cfg = base or TrainConfig()
    for item in args.config or []:
        if "=" in item and not Path(item).exists():
            cfg = cfg.override([item])
        else:
            path = Path(item)
            if not path.exists():
                raise UsageError(f"config file not found: {item}")
            cfg = cfg.override(dict(_pairs(path.read_text())))
    return cfg


def _pairs(text):
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            if "=" not in line:
                raise ConfigError(f"expected key = value, got {line!r}")
            k, _, v = line.partition("=")
            out.append((k.strip(), v.strip()))
    return out


# -- gen ----------------------------------------------------------------------------

def _scene_from_file(path, args):
    """Scene JSON: ``mesh`` (OBJ path), ``media`` (medium-map path), ``background``
    (kind name or full dict) and optional ``name``; paths are relative to the file."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"scene file not found: {path}")
    try:
        desc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"scene file is not valid JSON: {exc}")
    bg = desc.get("background", args.background)
    bg = BackgroundModel.from_dict(bg) if isinstance(bg, dict) else make_background(bg)
    mesh = read_obj(path.parent / desc["mesh"]) if "mesh" in desc else None
    media = (MediumMap.from_text((path.parent / desc["media"]).read_text()) if "media" in desc
             else MediumMap({}))
    base = make_scene_spec("empty", "constant", args.n_train, args.n_val, args.n_test,
                           (args.resolution,) * 2, args.spp, args.seed)
    return SceneSpec(desc.get("name", path.stem), mesh, media, bg, base.cameras, args.spp,
                     base.resolution)


def cmd_gen(args):
    if args.scene_file:
        spec = _scene_from_file(args.scene_file, args)
    else:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; available presets: "
                             + ", ".join(PRESETS))
        if args.background not in BACKGROUNDS:
            raise UsageError(f"unknown background {args.background!r}; available: "
                             + ", ".join(BACKGROUNDS))
        spec = make_scene_spec(args.preset, args.background, args.n_train, args.n_val,
                               args.n_test, (args.resolution, args.resolution), args.spp,
                               args.seed, ior=args.ior, absorption=tuple(args.absorption))
    out = Path(args.out)
    # kept beside the dataset so that repeated runs produce identical trees
    with RunManifest(out.parent / f"{out.name}.manifest.json", "gen", sys.argv[1:],
                     {"preset": args.preset, "scene_file": args.scene_file,
                      "background": args.background, "resolution": args.resolution,
                      "spp": args.spp, "n_train": args.n_train, "n_val": args.n_val,
                      "n_test": args.n_test, "ior": args.ior,
                      "absorption": list(args.absorption)}, args.seed) as manifest:
        write_dataset(spec, out, seed=args.seed, threads=_threads(args))
        manifest.finish("ok")
    print(f"wrote dataset to {out}")
    return 0


# -- train --------------------------------------------------------------------------

def _train_config(args):
    cfg = _load_config(args)
    pairs = {"mode": args.mode, "seed": args.seed if args.seed is not None else cfg.seed}
    if args.iters is not None:
        pairs["iterations"] = args.iters
    if args.batch is not None:
        pairs["batch_size"] = args.batch
    if args.no_tir:
        pairs["tir"] = False
    if args.no_reflection:
        pairs["first_surface_reflection"] = False
    if args.uncorrected_distortion:
        pairs["corrected_distortion"] = False
    if args.mode == "straight" and (args.no_tir or args.no_reflection):
        raise UsageError("--no-tir / --no-reflection cannot be combined with --mode straight")
    return cfg.override(pairs)


def _open_dataset(path, splits=("train", "val", "test")):
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return read_dataset(path, splits)


def cmd_train(args):
    cfg = _train_config(args)
    ds = _open_dataset(args.dataset, ("train",))
    threads = _threads(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.txt").write_text(cfg.to_text())
    with RunManifest(out / "run_manifest.json", "train", sys.argv[1:],
                     {**_cfg_dict(cfg), "dataset": str(args.dataset)}, cfg.seed) as manifest:
        o, d = ds.rays("train")
        targets = ds.images["train"].reshape(-1, 3)
        res = train(ds.spec.scene(threads), o, d, targets, cfg, out_dir=out, threads=threads)
        manifest.finish("ok", final_train_psnr=res.final_psnr)
    print(f"checkpoint: {out / 'checkpoint.rfx'}  final batch PSNR {res.final_psnr:.2f} dB")
    return 0


def _cfg_dict(cfg):
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def _checkpoint_config(ckpt, args):
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg_file = ckpt.parent / "train_config.txt"
    base = TrainConfig.from_file(cfg_file) if cfg_file.exists() else TrainConfig()
    cfg = _load_config(args, base)
    if getattr(args, "mode", None):
        cfg = cfg.override({"mode": args.mode})
    return VoxelField.load(ckpt), cfg


def cmd_eval(args):
    field, cfg = _checkpoint_config(args.checkpoint, args)
    ds = _open_dataset(args.dataset, (args.split,))
    if not ds.spec.cameras[args.split]:
        raise UsageError(f"split {args.split!r} has no frames")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    with RunManifest(out / "run_manifest.json", "eval", sys.argv[1:],
                     {**_cfg_dict(cfg), "split": args.split}, cfg.seed) as manifest:
        method = cfg.mode + ("" if cfg.tir else "-no-tir") \
            + ("" if cfg.first_surface_reflection else "-no-reflection") \
            + ("" if cfg.corrected_distortion else "-uncorrected")
        split = args.split
        report, _, _ = evaluate(field, ds.spec.scene(_threads(args)), ds.spec.cameras[split],
                                ds.images[split], ds.depths[split], ds.masks[split], cfg,
                                ds.spec.name, method)
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.txt").write_text(report.to_text())
        manifest.finish("ok", means=report.means)
    print(report.to_text(), end="")
    return 0


def cmd_render(args):
    field, cfg = _checkpoint_config(args.checkpoint, args)
    ds = _open_dataset(args.dataset, ("train", "val", "test"))
    if args.helical:
        ref = ds.spec.cameras["test"] or ds.spec.cameras["train"]
        fov = ref[0].fov_x if ref else 0.87
        w, h = ds.spec.resolution
        cams = cameras_helical(args.helical, args.radius, (args.z_min, args.z_max), args.turns,
                               fov_x=fov, width=w, height=h)
    else:
        cams = ds.spec.cameras[args.split]
        if args.index is not None:
            if not 0 <= args.index < len(cams):
                raise UsageError(f"camera index {args.index} out of range for split "
                                 f"{args.split!r} ({len(cams)} cameras)")
            cams = [cams[args.index]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with RunManifest(out / "run_manifest.json", "render", sys.argv[1:], _cfg_dict(cfg),
                     cfg.seed) as manifest:
        imgs, depths, _ = render_views(field, ds.spec.scene(_threads(args)), cams, cfg)
        for k in range(len(cams)):
            write_png(out / f"frame_{k:04d}.png", imgs[k])
            if args.depth:
                write_pfm(out / f"frame_{k:04d}_depth.pfm", depths[k])
        manifest.finish("ok", frames=len(cams))
    print(f"rendered {len(cams)} frames to {out}")
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="refrax", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: $REFREF_THREADS or 1)")
        sp.add_argument("--config", action="append", default=[],
                        help="config file or key=value override (repeatable)")

    g = sub.add_parser("gen", help="render a synthetic dataset")
    g.add_argument("--preset", default="convex-sphere", help=", ".join(PRESETS))
    g.add_argument("--scene-file", default=None, help="JSON scene description")
    g.add_argument("--background", default="cube", help=", ".join(BACKGROUNDS))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spp", type=int, default=1)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--n-train", type=int, default=50)
    g.add_argument("--n-val", type=int, default=10)
    g.add_argument("--n-test", type=int, default=20)
    g.add_argument("--ior", type=float, default=1.5)
    g.add_argument("--absorption", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit a field to a dataset")
    t.add_argument("dataset")
    t.add_argument("--mode", choices=("oracle", "r3f", "straight"), default="oracle")
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default="run")
    t.add_argument("--no-tir", action="store_true")
    t.add_argument("--no-reflection", action="store_true")
    t.add_argument("--uncorrected-distortion", action="store_true")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--mode", choices=("oracle", "r3f", "straight"), default=None)
    e.add_argument("--out", default=None)
    common(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("dataset")
    r.add_argument("--split", choices=("train", "val", "test"), default="test")
    r.add_argument("--index", type=int, default=None)
    r.add_argument("--helical", type=int, default=0, help="render an n-frame helix instead")
    r.add_argument("--radius", type=float, default=1.4)
    r.add_argument("--z-min", type=float, default=-0.4)
    r.add_argument("--z-max", type=float, default=0.4)
    r.add_argument("--turns", type=float, default=1.0)
    r.add_argument("--depth", action="store_true", help="also write median-depth PFMs")
    r.add_argument("--mode", choices=("oracle", "r3f", "straight"), default=None)
    r.add_argument("--out", default="frames")
    common(r)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"refrax: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, FieldError, GeometryError, FileNotFoundError) as exc:
        print(f"refrax: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure; keep the traceback for --verbose runs
        logger.debug("failure", exc_info=True)
        print(f"refrax: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
