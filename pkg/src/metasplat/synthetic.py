"""Synthetic benchmark scenes: random Gaussian clouds on a camera ring.

The generator renders its ground truth with the package's own renderer, so a
perfect prediction scores the PSNR sentinel against the stored views. Every
fourth camera is held out as a test view (3:1 split). Depth maps come from the
renderer's compositing-weighted expected depth; the stored seed depths add
Gaussian noise so the predictor never sees exact geometry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .errors import CorruptHeader, FormatVersionMismatch, IoFailure
from .renderer import render_forward
from .scene import (
    Camera,
    GaussianScene,
    ImageBuffer,
    inverse_softplus,
    look_at_camera,
    SCALE_GAIN,
)

BUNDLE_MAGIC = b"FSSC"
BUNDLE_VERSION = 1

GT_SCALE_RANGE = (0.01, 0.08)
GT_OPACITY_RANGE = (0.3, 0.95)
GT_SH_RANGE = (-0.5, 0.5)


@dataclass
class SyntheticScene:
    """Ground truth plus rendered views, depths, and the train/test split."""

    scene_id: int
    gaussians: GaussianScene
    cameras: list[Camera]
    views: list[ImageBuffer]
    depths: list[np.ndarray]       # exact expected depth per view
    seed_depths: list[np.ndarray]  # noisy depths handed to the predictor
    test_view_reads: int = field(default=0, compare=False)

    @property
    def train_indices(self) -> list[int]:
        return [i for i in range(len(self.cameras)) if i % 4 != 3]

    @property
    def test_indices(self) -> list[int]:
        return [i for i in range(len(self.cameras)) if i % 4 == 3]

    def train_views(self) -> list[tuple[Camera, ImageBuffer]]:
        return [(self.cameras[i], self.views[i]) for i in self.train_indices]

    def test_views(self) -> list[tuple[Camera, ImageBuffer]]:
        """Held-out views; reads are counted so split hygiene is checkable."""
        self.test_view_reads += len(self.test_indices)
        return [(self.cameras[i], self.views[i]) for i in self.test_indices]


def ring_cameras(cfg: TrainConfig) -> list[Camera]:
    """Cameras on a radius-`ring_radius` circle in the z=0 plane, aimed at the origin."""
    size = cfg.image_size
    focal = cfg.focal_factor * size
    cams = []
    for i in range(cfg.cameras_per_scene):
        angle = 2.0 * np.pi * i / cfg.cameras_per_scene
        eye = (cfg.ring_radius * np.cos(angle), cfg.ring_radius * np.sin(angle), 0.0)
        cams.append(look_at_camera(eye, (0.0, 0.0, 0.0), fx=focal, fy=focal,
                                   width=size, height=size))
    return cams


def _random_ground_truth(rng: np.random.Generator, cfg: TrainConfig) -> GaussianScene:
    n = cfg.gaussians_per_scene
    basis = (cfg.sh_degree + 1) ** 2
    direction = rng.normal(0.0, 1.0, (n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    means = direction * rng.uniform(0.0, 1.0, n)[:, None] ** (1.0 / 3.0)

    phys_scales = rng.uniform(*GT_SCALE_RANGE, (n, 3))
    raw_scales = inverse_softplus(phys_scales / SCALE_GAIN)

    opacities = rng.uniform(*GT_OPACITY_RANGE, n)
    raw_op = np.log(opacities / (1.0 - opacities))

    quats = rng.normal(0.0, 1.0, (n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    sh = rng.uniform(*GT_SH_RANGE, (n, basis, 3))
    return GaussianScene(means=means, raw_scales=raw_scales, raw_rotations=quats,
                         raw_opacities=raw_op, sh_coeffs=sh)


def gen_scenes(rng: np.random.Generator, count: int, cfg: TrainConfig) -> list[SyntheticScene]:
    """Deterministic per RNG state; views are rendered with the module renderer."""
    if count < 1:
        raise ValueError("count must be >= 1")
    background = np.full(3, cfg.background_gray)
    cameras = ring_cameras(cfg)
    scenes = []
    for sid in range(count):
        gt = _random_ground_truth(rng, cfg)
        views, depths, seeds = [], [], []
        for cam in cameras:
            out = render_forward(gt, cam, background)
            views.append(out.image)
            depths.append(out.aux.depth_map)
            noise = rng.normal(0.0, cfg.depth_noise, out.aux.depth_map.shape)
            seeds.append(out.aux.depth_map + noise)
        scenes.append(SyntheticScene(scene_id=sid, gaussians=gt, cameras=cameras,
                                     views=views, depths=depths, seed_depths=seeds))
    return scenes


def _pack_camera(cam: Camera) -> bytes:
    vals = np.concatenate([cam.rotation.ravel(), cam.translation,
                           [cam.fx, cam.fy, cam.cx, cam.cy, cam.near]])
    return struct.pack("<II", cam.width, cam.height) + vals.astype("<f8").tobytes()


def _unpack_camera(buf: bytes, pos: int):
    width, height = struct.unpack_from("<II", buf, pos)
    pos += 8
    vals = np.frombuffer(buf, dtype="<f8", count=17, offset=pos)
    pos += 17 * 8
    cam = Camera(rotation=vals[:9].reshape(3, 3).copy(), translation=vals[9:12].copy(),
                 fx=float(vals[12]), fy=float(vals[13]), cx=float(vals[14]),
                 cy=float(vals[15]), width=int(width), height=int(height),
                 near=float(vals[16]))
    return cam, pos


def save_synthetic(path, scene: SyntheticScene) -> None:
    """Self-contained binary bundle: ground truth, cameras, views, depths."""
    from .scene import flatten

    gt = scene.gaussians
    try:
        with open(path, "wb") as fh:
            fh.write(BUNDLE_MAGIC)
            fh.write(struct.pack("<IQIII", BUNDLE_VERSION, scene.scene_id,
                                 len(scene.cameras), gt.count, gt.sh_degree))
            fh.write(flatten(gt).data.astype("<f8").tobytes())
            for i, cam in enumerate(scene.cameras):
                fh.write(_pack_camera(cam))
                fh.write(scene.views[i].pixels.astype("<f8").tobytes())
                fh.write(scene.depths[i].astype("<f8").tobytes())
                fh.write(scene.seed_depths[i].astype("<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write scene bundle {path}: {exc}") from exc


def load_synthetic(path) -> SyntheticScene:
    from .scene import FlatParams, SceneLayout, unflatten

    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read scene bundle {path}: {exc}") from exc
    if len(buf) < 28 or buf[:4] != BUNDLE_MAGIC:
        raise CorruptHeader(f"not a scene bundle: {path}")
    version, scene_id, n_cams, count, sh_degree = struct.unpack_from("<IQIII", buf, 4)
    if version != BUNDLE_VERSION:
        raise FormatVersionMismatch(f"scene bundle version {version}")
    pos = 28
    layout = SceneLayout(int(count), int(sh_degree))
    data = np.frombuffer(buf, dtype="<f8", count=layout.total, offset=pos).astype(np.float64)
    pos += layout.total * 8
    gt = unflatten(FlatParams(data, layout))

    cameras, views, depths, seeds = [], [], [], []
    for _ in range(n_cams):
        cam, pos = _unpack_camera(buf, pos)
        npx = cam.height * cam.width
        img = np.frombuffer(buf, dtype="<f8", count=npx * 3, offset=pos)
        pos += npx * 3 * 8
        views.append(ImageBuffer(img.reshape(cam.height, cam.width, 3).copy()))
        depth = np.frombuffer(buf, dtype="<f8", count=npx, offset=pos)
        pos += npx * 8
        depths.append(depth.reshape(cam.height, cam.width).copy())
        seed = np.frombuffer(buf, dtype="<f8", count=npx, offset=pos)
        pos += npx * 8
        seeds.append(seed.reshape(cam.height, cam.width).copy())
        cameras.append(cam)
    if pos != len(buf):
        raise CorruptHeader(f"trailing bytes in scene bundle {path}")
    return SyntheticScene(scene_id=int(scene_id), gaussians=gt, cameras=cameras,
                          views=views, depths=depths, seed_depths=seeds)
