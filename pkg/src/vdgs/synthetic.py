"""Synthetic view-dependent scenes with a known ground truth.

Each Gaussian ``i`` gets a random unit axis ``a_i``; seen along direction
``d`` its opacity is ``o_i * logistic(k * <d, a_i>)``. Ground-truth images
come from the package's own rasterizer, one Identity render per view with the
view's opacities baked in, so a model that learns the modulation can match
them exactly.

Run ``python -m vdgs.synthetic OUT_DIR`` to write a dataset directory that
:func:`vdgs.io.load_transforms` and the CLI accept.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Camera, GaussianCloud, logit, sigmoid, viewing_directions
from .io import DatasetManifest, Frame, save_points_ply, save_transforms, to_uint8, write_image
from .rasterizer import render
from .sh import rgb_to_dc


@dataclass
class ViewDependentScene:
    cloud: GaussianCloud  # base opacities, degree-0 colors
    axes: np.ndarray  # (N, 3) unit vectors
    sharpness: float
    colors: np.ndarray  # (N, 3)

    def view_opacity(self, cam: Camera) -> np.ndarray:
        d = viewing_directions(cam, self.cloud.means)
        s = sigmoid(self.sharpness * np.sum(d * self.axes, axis=1))
        return self.cloud.opacities * s

    def view_cloud(self, cam: Camera) -> GaussianCloud:
        c = self.cloud.copy()
        o = np.clip(self.view_opacity(cam), 1e-6, 1 - 1e-6)
        c.opacity_logits = logit(o).astype(c.opacity_logits.dtype)
        return c

    def render(self, cam: Camera, background) -> np.ndarray:
        return render(self.view_cloud(cam), cam, background=background, sh_degree=0).image


def make_scene(n: int = 200, seed: int = 0, radius: float = 1.0, sharpness: float = 6.0,
               scale_range=(0.06, 0.14), base_opacity=(0.85, 0.99)) -> ViewDependentScene:
    rng = np.random.default_rng(seed)
    # uniform in a ball
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    means = v * radius * rng.uniform(0, 1, size=(n, 1)) ** (1 / 3)
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = rgb_to_dc(colors)[:, :, None]
    cloud = GaussianCloud(
        means=means,
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        rotations=q,
        opacity_logits=logit(rng.uniform(*base_opacity, size=n)),
        sh=sh,
        sh_degree=0,
    )
    return ViewDependentScene(cloud, axes, sharpness, colors)


def orbit_cameras(count: int, radius: float = 4.0, size: int = 64, fov_x: float = 0.75,
                  phase: float = 0.0, elevations=(-0.35, 0.35)) -> list:
    """Cameras on a wavy ring around the origin, looking at it."""
    cams = []
    lo, hi = elevations
    for i in range(count):
        t = 2 * np.pi * (i + phase) / count
        el = 0.5 * (lo + hi) + 0.5 * (hi - lo) * np.sin(3 * t)
        eye = radius * np.array([np.cos(el) * np.cos(t), np.cos(el) * np.sin(t), np.sin(el)])
        cams.append(Camera.look_at(eye, np.zeros(3), size, size, fov_x))
    return cams


def make_dataset(scene: ViewDependentScene | None = None, n_train: int = 32, n_test: int = 8, size: int = 64,
                 background=(1.0, 1.0, 1.0), quantize: bool = False, point_noise: float = 0.02,
                 seed: int = 0) -> DatasetManifest:
    """In-memory dataset: train and test views plus a noisy point cloud.

    Test poses sit between training poses on the same orbit. ``quantize``
    rounds images to 8 bits, matching what a PNG round trip produces.
    """
    scene = scene or make_scene(seed=seed)
    bg = np.asarray(background, dtype=np.float64)
    frames = []
    for split, cams in (("train", orbit_cameras(n_train, size=size)),
                        ("test", orbit_cameras(n_test, size=size, phase=0.5 * n_test / n_train))):
        for cam in cams:
            img = scene.render(cam, bg)
            img = to_uint8(img) / 255.0 if quantize else np.clip(img, 0.0, 1.0)
            frames.append(Frame(cam, split, image=img))
    rng = np.random.default_rng(seed + 1)
    pts = scene.cloud.means + rng.normal(0, point_noise, size=scene.cloud.means.shape)
    return DatasetManifest(frames, bg, aabb=None, points=(pts, scene.colors.copy()))


def write_dataset(out_dir, dataset: DatasetManifest) -> Path:
    """Write PNGs, ``transforms_{split}.json`` and ``points3d.ply`` under ``out_dir``."""
    out = Path(out_dir)
    for split in dataset.splits:
        (out / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (cam, img) in enumerate(zip(dataset.cameras(split), dataset.images(split))):
            rel = f"{split}/r_{i:03d}.png"
            write_image(out / rel, img)
            entries.append((cam, rel))
        cam0 = entries[0][0]
        save_transforms(out / f"transforms_{split}.json", entries,
                        camera_angle_x=float(2 * np.arctan(0.5 * cam0.width / cam0.fx)),
                        extra={"background": dataset.background.tolist()})
    if dataset.points is not None:
        save_points_ply(out / "points3d.ply", *dataset.points)
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m vdgs.synthetic", description=__doc__.split("\n")[0])
    p.add_argument("out_dir")
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--train", type=int, default=32)
    p.add_argument("--test", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--sharpness", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    scene = make_scene(a.gaussians, a.seed, sharpness=a.sharpness)
    ds = make_dataset(scene, a.train, a.test, a.size, quantize=True, seed=a.seed)
    write_dataset(a.out_dir, ds)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
