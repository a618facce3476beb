"""Desk-scale scenes: objects, backgrounds, camera rigs and dataset files.

Datasets follow the NeRF-synthetic layout: ``transforms_<split>.json`` holds
``camera_angle_x`` and per-frame 4x4 camera-to-world matrices (camera looks
down -z, +y up).  Images are 8-bit sRGB PNGs, depths float32 PFMs and masks
8-bit PNGs with values {0, 255}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import BackgroundModel
from .geometry import (Medium, MediumMap, TriMesh, make_box, make_nested_spheres, make_sphere,
                       make_torus, read_obj, write_obj)
from .lightpath import Scene
from .renderer import read_mask, read_pfm, read_png, render_ground_truth, write_mask, write_pfm, \
    write_png

SPLITS = ("train", "val", "test")
WORLD_UP = np.array([0.0, 0.0, 1.0])
ALT_UP = np.array([0.0, 1.0, 0.0])


class DatasetError(ValueError):
    pass


@dataclass
class Camera:
    c2w: np.ndarray   # (4, 4)
    fov_x: float      # horizontal field of view, radians
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=float).reshape(4, 4)
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        rot = self.c2w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def position(self):
        return self.c2w[:3, 3].copy()

    @property
    def forward(self):
        return -self.c2w[:3, 2]

    @property
    def focal(self):
        return 0.5 * self.width / math.tan(0.5 * self.fov_x)

    def rays(self, jitter=None):
        """World-space origins and unit directions, row-major over pixels.

        ``jitter`` (H*W, 2) gives sub-pixel offsets in [0, 1); default is the center.
        """
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        j, i = j.ravel().astype(float), i.ravel().astype(float)
        if jitter is None:
            j, i = j + 0.5, i + 0.5
        else:
            j, i = j + jitter[:, 0], i + jitter[:, 1]
        f = self.focal
        d = np.stack([(j - 0.5 * self.width) / f, -(i - 0.5 * self.height) / f,
                      -np.ones_like(j)], axis=1)
        d = d @ self.c2w[:3, :3].T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.position, d.shape).copy(), d


def look_at(eye, target=(0.0, 0.0, 0.0), up=WORLD_UP):
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=float)
    if abs(f @ up) > 0.99:
        up = ALT_UP if abs(f @ ALT_UP) <= 0.99 else np.array([1.0, 0.0, 0.0])
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, f)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, -f, eye
    return c2w


def cameras_random_sphere(n, radius, look_at_point=(0.0, 0.0, 0.0), seed=0, fov_x=0.87,
                          width=64, height=64):
    """``n`` viewpoints uniform in area on a sphere, all aimed at ``look_at_point``."""
    if n < 1 or radius <= 0:
        raise ValueError("need n >= 1 and radius > 0")
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    r = np.sqrt(1.0 - z * z)
    centre = np.asarray(look_at_point, dtype=float)
    pts = centre + radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return [Camera(look_at(p, centre), fov_x, width, height) for p in pts]


def cameras_helical(n, radius, z_range=(-0.5, 0.5), turns=1.0, look_at_point=(0.0, 0.0, 0.0),
                    fov_x=0.87, width=64, height=64):
    """Ordered helix: azimuth ``2*pi*turns*k/n``, height linear over ``z_range`` inclusive."""
    if n < 2:
        raise ValueError("a helix needs at least 2 cameras")
    k = np.arange(n)
    az = 2 * np.pi * turns * k / n
    z = np.linspace(z_range[0], z_range[1], n)
    centre = np.asarray(look_at_point, dtype=float)
    cams = []
    for a, h in zip(az, z):
        eye = centre + np.array([radius * np.cos(a), radius * np.sin(a), h])
        cams.append(Camera(look_at(eye, centre), fov_x, width, height))
    return cams


@dataclass
class SceneSpec:
    name: str
    mesh: TriMesh | None
    media: MediumMap
    background: BackgroundModel
    cameras: dict = field(default_factory=dict)  # split -> list[Camera]
    spp: int = 1
    resolution: tuple = (64, 64)

    def scene(self, threads=1) -> Scene:
        return Scene(self.mesh, self.media, threads=threads)


# -- presets -------------------------------------------------------------------

def _glass(nu=1.5, absorb=(0.0, 0.0, 0.0)):
    return Medium(nu, tuple(absorb))


PRESETS = {
    "convex-sphere": "glass sphere, radius 0.5, ior 1.5",
    "nonconvex-torus": "glass torus, radii 0.5 / 0.2, ior 1.5",
    "multi-nested": "glass shell (ior 1.5) around a water core (ior 1.33)",
    "tir-box": "glass cube, side 0.8, ior 1.5 (internal reflections)",
    "empty": "no object",
}
BACKGROUNDS = ("cube", "sphere", "constant")


def make_background(kind="cube"):
    if kind == "cube":
        return BackgroundModel("textured-cube", 1.8, "checker", 0.45)
    if kind == "sphere":
        return BackgroundModel("textured-sphere", 1.8, "stripes", math.pi / 10)
    if kind == "constant":
        return BackgroundModel("constant", 1.8, "checker", 0.45, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    raise ValueError(f"unknown background {kind!r}; choose from {', '.join(BACKGROUNDS)}")


def preset_object(name, ior=1.5, absorption=(0.0, 0.0, 0.0)):
    if name == "convex-sphere":
        return make_sphere(0.5, 4), MediumMap({1: _glass(ior, absorption)})
    if name == "nonconvex-torus":
        return make_torus(0.5, 0.2, 64, 32), MediumMap({1: _glass(ior, absorption)})
    if name == "multi-nested":
        return (make_nested_spheres(0.5, 0.3, 4),
                MediumMap({1: _glass(ior, absorption), 2: Medium(1.33, (0.0, 0.0, 0.0))}))
    if name == "tir-box":
        return make_box((0.8, 0.8, 0.8), subdiv=3), MediumMap({1: _glass(ior, absorption)})
    if name == "empty":
        return None, MediumMap({})
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def make_scene_spec(preset="convex-sphere", background="cube", n_train=50, n_val=10, n_test=20,
                    resolution=(64, 64), spp=1, seed=0, fov_x=0.87, cam_radius=1.5,
                    ior=1.5, absorption=(0.0, 0.0, 0.0)):
    """Standard desk-scale scene: random-sphere train/val views, helical test views."""
    mesh, media = preset_object(preset, ior, absorption)
    w, h = resolution
    ss = np.random.SeedSequence(seed).spawn(2)
    cams = {
        "train": cameras_random_sphere(n_train, cam_radius, seed=ss[0], fov_x=fov_x,
                                       width=w, height=h) if n_train else [],
        "val": cameras_random_sphere(n_val, cam_radius, seed=ss[1], fov_x=fov_x,
                                     width=w, height=h) if n_val else [],
        "test": cameras_helical(n_test, 0.95 * cam_radius, (-0.4, 0.4), 1.0, fov_x=fov_x,
                                width=w, height=h) if n_test >= 2 else [],
    }
    return SceneSpec(preset, mesh, media, make_background(background), cams, spp, (w, h))


# -- dataset files -------------------------------------------------------------------

@dataclass
class Dataset:
    spec: SceneSpec
    images: dict   # split -> (V, H, W, 3) float sRGB
    depths: dict   # split -> (V, H, W) float32
    masks: dict    # split -> (V, H, W) bool
    root: Path | None = None

    def rays(self, split):
        o, d = zip(*(c.rays() for c in self.spec.cameras[split])) if self.spec.cameras[split] \
            else ((np.zeros((0, 3)),), (np.zeros((0, 3)),))
        return np.concatenate(o), np.concatenate(d)


def render_split(spec: SceneSpec, split, seed=0, threads=1):
    scene = spec.scene(threads)
    imgs, depths, masks = [], [], []
    for k, cam in enumerate(spec.cameras.get(split, [])):
        img, depth, mask = render_ground_truth(scene, spec.background, cam, spec.spp,
                                               seed=[seed, SPLITS.index(split), k])
        imgs.append(img)
        depths.append(depth)
        masks.append(mask)
    return imgs, depths, masks


def _frame_stem(split, k):
    return f"{split}/r_{k:03d}"


def write_dataset(spec: SceneSpec, out_dir, renders=None, seed=0, threads=1):
    """Render (unless ``renders`` is given) and write all splits; manifests go last."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if spec.mesh is not None:
        write_obj(spec.mesh, out / "mesh.obj")
    (out / "media.txt").write_text(spec.media.to_text())
    meta = {"name": spec.name, "background": spec.background.to_dict(), "spp": spec.spp,
            "resolution": list(spec.resolution), "has_mesh": spec.mesh is not None}
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    all_cams = [c for split in SPLITS for c in spec.cameras.get(split, [])]
    fov = all_cams[0].fov_x if all_cams else 0.87
    manifests = {}
    for split in SPLITS:
        cams = spec.cameras.get(split, [])
        (out / split).mkdir(exist_ok=True)
        imgs, depths, masks = (renders[split] if renders is not None
                               else render_split(spec, split, seed, threads))
        frames = []
        for k, cam in enumerate(cams):
            stem = _frame_stem(split, k)
            write_png(out / f"{stem}.png", imgs[k])
            write_pfm(out / f"{stem}_depth.pfm", depths[k])
            write_mask(out / f"{stem}_mask.png", masks[k])
            frames.append({"file_path": f"./{stem}", "transform_matrix": cam.c2w.tolist(),
                           "depth_path": f"./{stem}_depth.pfm",
                           "mask_path": f"./{stem}_mask.png"})
        manifests[split] = {"camera_angle_x": fov, "width": spec.resolution[0],
                            "height": spec.resolution[1], "frames": frames}
    for split, m in manifests.items():
        (out / f"transforms_{split}.json").write_text(json.dumps(m, indent=2) + "\n")
    return out


def cameras_from_manifest(manifest, width=None, height=None):
    try:
        fov = float(manifest["camera_angle_x"])
        w = int(width or manifest.get("width", 800))
        h = int(height or manifest.get("height", w))
        return [Camera(np.array(f["transform_matrix"], dtype=float), fov, w, h)
                for f in manifest["frames"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest: {exc}") from exc


def _read_json(path):
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc


def read_dataset(root, splits=SPLITS) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    meta = _read_json(root / "scene.json")
    media_path = root / "media.txt"
    if not media_path.exists():
        raise DatasetError(f"missing file: {media_path}")
    media = MediumMap.from_text(media_path.read_text())
    mesh = read_obj(root / "mesh.obj") if meta.get("has_mesh", True) else None
    bg = BackgroundModel.from_dict(meta["background"])
    cams, images, depths, masks = {}, {}, {}, {}
    w, h = meta["resolution"]
    for split in splits:
        manifest = _read_json(root / f"transforms_{split}.json")
        cams[split] = cameras_from_manifest(manifest)
        imgs, ds, ms = [], [], []
        for frame in manifest["frames"]:
            stem = frame["file_path"]
            imgs.append(read_png(root / f"{stem}.png")[..., :3])
            ds.append(read_pfm(root / frame.get("depth_path", f"{stem}_depth.pfm")))
            ms.append(read_mask(root / frame.get("mask_path", f"{stem}_mask.png")))
        images[split] = np.array(imgs).reshape(-1, h, w, 3)
        depths[split] = np.array(ds, dtype=np.float32).reshape(-1, h, w)
        masks[split] = np.array(ms, dtype=bool).reshape(-1, h, w)
    spec = SceneSpec(meta["name"], mesh, media, bg, cams, int(meta["spp"]), (w, h))
    return Dataset(spec, images, depths, masks, root)
