"""Joint optimization of Gaussians, hash tables and the modulation network."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._validation import NonFiniteError, ValidationError, check_same_shape
from .encoding import HashGrid
from .geometry import GaussianCloud, quat_to_rotmat, scene_aabb, sh_coeff_count, sigmoid
from .metrics import psnr, ssim_value_and_grad
from .mlp import ModulationVariant, TinyMLP
from .rasterizer import render, render_backward
from .sh import rgb_to_dc

log = logging.getLogger(__name__)

NN_FLOOR = 1e-6
INIT_OPACITY = 0.1
SINGLE_POINT_SCALE = 0.01


def logit_np(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class TrainConfig:
    iterations: int = 5000
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity_logits: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_mlp: float = 1e-3
    lr_tables: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    lambda_ssim: float = 0.2
    densify_interval: int = 100
    densify_from: int = 500
    densify_until_frac: float = 0.7
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    max_gaussians: int = 0  # 0 = unlimited
    prune_interval: int = 100
    prune_opacity: float = 0.005
    sh_degree: int = 3
    sh_warmup_interval: int = 1000
    eval_interval: int = 500
    deterministic: bool = True
    seed: int = 0
    variant: str = "opacity_mul"
    mode: str = "joint"
    attach_iteration: int = 0  # pre_attach only; 0 = half of the iterations
    init: str = "auto"  # auto | points | random
    init_count: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ValidationError(f"{f.name} must be > 0")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValidationError("lambda_ssim must be in [0, 1]")
        for name in ("densify_interval", "prune_interval", "sh_warmup_interval", "eval_interval"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if not 0 <= self.sh_degree <= 3:
            raise ValidationError("sh_degree must be in [0, 3]")
        ModulationVariant.parse(self.variant)
        self.mode = self.mode.replace("-", "_")
        if self.mode not in ("joint", "pre_attach"):
            raise ValidationError(f"mode must be joint or pre_attach, got {self.mode!r}")
        if self.init not in ("auto", "points", "random"):
            raise ValidationError(f"init must be auto, points or random, got {self.init!r}")

    @property
    def variant_enum(self) -> ModulationVariant:
        return ModulationVariant.parse(self.variant)

    @property
    def attach_at(self) -> int:
        return self.attach_iteration or self.iterations // 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class AdamGroup:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x), np.zeros_like(x))


def adam_update(param, grad, group: AdamGroup, lr, beta1, beta2, eps):
    """In-place Adam step on ``param``."""
    group.step += 1
    group.m *= beta1
    group.m += (1 - beta1) * grad
    group.v *= beta2
    group.v += (1 - beta2) * grad * grad
    c1 = 1 - beta1**group.step
    c2 = 1 - beta2**group.step
    param -= (lr * math.sqrt(c2) / c1) * group.m / (np.sqrt(group.v) + eps)


@dataclass
class TrainState:
    cloud: GaussianCloud
    grid: HashGrid
    mlp: TinyMLP
    optimizer: dict
    extent: float
    iteration: int = 0
    grad_accum: np.ndarray | None = None
    grad_denom: np.ndarray | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    events: list = field(default_factory=list)
    variant: ModulationVariant = ModulationVariant.IDENTITY

    def __post_init__(self):
        n = len(self.cloud)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_denom is None:
            self.grad_denom = np.zeros(n)

    def check_consistent(self):
        n = len(self.cloud)
        for name in GaussianCloud.PARAM_NAMES:
            g = self.optimizer[name]
            if g.m.shape != getattr(self.cloud, name).shape or g.v.shape != g.m.shape:
                raise AssertionError(f"optimizer state for {name} has shape {g.m.shape}, cloud has {n} rows")
        if self.grad_accum.shape != (n,) or self.grad_denom.shape != (n,):
            raise AssertionError("densification accumulators out of sync with the cloud")


class TrainingError(RuntimeError):
    def __init__(self, message, state=None, record=None):
        super().__init__(message)
        self.state = state
        self.record = record


def loss(rendered, target, lambda_ssim: float = 0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM) and its gradient w.r.t. ``rendered``.

    SSIM here is per channel over valid 11x11 windows.
    """
    r = np.asarray(rendered)
    t = np.asarray(target)
    check_same_shape(r, t, ("rendered", "target"))
    if r.ndim != 3:
        raise ValidationError(f"expected HxWxC images, got shape {r.shape}")
    r64 = r.astype(np.float64)
    diff = r64 - t
    l1 = float(np.mean(np.abs(diff)))
    g = (1 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, gs = ssim_value_and_grad(r64, t)
        value += lambda_ssim * (1 - s)
        g = g - lambda_ssim * gs
    return float(value), g.astype(r.dtype)


def l1_term(rendered, target) -> float:
    return float(np.mean(np.abs(np.asarray(rendered, np.float64) - target)))


def _knn_mean_distance(points, k=3):
    n = len(points)
    if n < 2:
        return np.full(n, SINGLE_POINT_SCALE)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    return np.maximum(dist[:, 1:].mean(axis=1), NN_FLOOR)


def _cloud_from(means, colors, scales, sh_degree, dtype):
    n = len(means)
    sh = np.zeros((n, 3, sh_coeff_count(sh_degree)))
    sh[:, :, 0] = rgb_to_dc(colors)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        means=np.asarray(means, np.float64),
        log_scales=np.repeat(np.log(scales)[:, None], 3, axis=1),
        rotations=rot,
        opacity_logits=np.full(n, logit_np(INIT_OPACITY)),
        sh=sh,
        sh_degree=sh_degree,
    ).astype(dtype)


def init_random(count: int, aabb, seed: int = 0, sh_degree: int = 3, dtype=np.float32) -> GaussianCloud:
    """``count`` mid-gray isotropic Gaussians uniform in ``aabb`` ((2, 3) lo/hi)."""
    if count < 1:
        raise ValidationError("init_random needs count >= 1")
    aabb = np.asarray(aabb, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = rng.uniform(aabb[0], aabb[1], size=(count, 3))
    scale = float(np.mean(_knn_mean_distance(means))) if count > 1 else SINGLE_POINT_SCALE
    return _cloud_from(means, np.full((count, 3), 0.5), np.full(count, scale), sh_degree, dtype)


def init_from_points(points, colors=None, sh_degree: int = 3, dtype=np.float32) -> GaussianCloud:
    """One Gaussian per point; colors are RGB in [0, 1] (default mid-gray)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValidationError("init_from_points needs at least one point")
    colors = np.full((len(points), 3), 0.5) if colors is None else np.asarray(colors, np.float64).reshape(-1, 3)
    if len(colors) != len(points):
        raise ValidationError("points and colors differ in length")
    return _cloud_from(points, colors, _knn_mean_distance(points), sh_degree, dtype)


def new_optimizer(cloud: GaussianCloud, grid: HashGrid, mlp: TinyMLP) -> dict:
    opt = {name: AdamGroup.zeros_like(getattr(cloud, name)) for name in GaussianCloud.PARAM_NAMES}
    opt["tables"] = AdamGroup.zeros_like(grid.tables)
    for k, v in mlp.params.items():
        opt[f"mlp.{k}"] = AdamGroup.zeros_like(v)
    return opt


def scene_extent(cameras, aabb=None) -> float:
    """1.1 x the largest distance of a camera center from their centroid."""
    if cameras is not None and len(cameras) > 1:
        centers = np.stack([c.center for c in cameras])
        return float(1.1 * np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    if aabb is not None:
        return float(np.linalg.norm(np.asarray(aabb)[1] - np.asarray(aabb)[0]))
    return 1.0


def init_state(config: TrainConfig, dataset, dtype=np.float32) -> TrainState:
    points = getattr(dataset, "points", None)
    use_points = config.init == "points" or (config.init == "auto" and points is not None)
    if use_points:
        if points is None:
            raise ValidationError("init=points but the dataset has no point cloud")
        cloud = init_from_points(points[0], points[1], config.sh_degree, dtype)
    else:
        if dataset.aabb is None:
            raise ValidationError("random initialization needs a scene bounding box")
        cloud = init_random(config.init_count, dataset.aabb, config.seed, config.sh_degree, dtype)
    grid = HashGrid(scene_aabb(cloud.means, 0.1), seed=config.seed, dtype=dtype)
    net = TinyMLP.for_variant(config.variant_enum, seed=config.seed, dtype=dtype)
    return TrainState(
        cloud=cloud, grid=grid, mlp=net, optimizer=new_optimizer(cloud, grid, net),
        extent=scene_extent(dataset.cameras("train"), dataset.aabb),
        rng=np.random.default_rng(config.seed), variant=config.variant_enum,
    )


def _apply_cloud_index(state: TrainState, index, new_rows: GaussianCloud | None = None):
    """Keep rows ``index`` of the cloud and append ``new_rows`` with zeroed moments."""
    cloud = state.cloud.select(index)
    for name in GaussianCloud.PARAM_NAMES:
        g = state.optimizer[name]
        g.m, g.v = g.m[index], g.v[index]
    if new_rows is not None and len(new_rows):
        cloud = cloud.concat(new_rows)
        for name in GaussianCloud.PARAM_NAMES:
            g = state.optimizer[name]
            pad = np.zeros_like(getattr(new_rows, name))
            g.m = np.concatenate([g.m, pad])
            g.v = np.concatenate([g.v, pad])
    state.cloud = cloud
    state.grad_accum = np.zeros(len(cloud))
    state.grad_denom = np.zeros(len(cloud))


def densify_and_prune(state: TrainState, config: TrainConfig, densify: bool = True):
    """Clone small / split large high-gradient Gaussians, then prune transparent ones."""
    cloud = state.cloud
    n = len(cloud)
    keep = np.ones(n, bool)
    new_rows = None
    if densify:
        grads = state.grad_accum / np.maximum(state.grad_denom, 1)
        selected = grads > config.densify_grad_threshold
        if config.max_gaussians:
            room = max(config.max_gaussians - n, 0)
            if selected.sum() > room:
                order = np.argsort(-grads, kind="stable")
                top = np.zeros(n, bool)
                top[order[:room]] = True
                selected &= top
        big = cloud.scales.max(axis=1) > config.percent_dense * state.extent
        clone_idx = np.flatnonzero(selected & ~big)
        split_idx = np.flatnonzero(selected & big)
        clones = cloud.select(clone_idx)
        halves = cloud.select(np.repeat(split_idx, 2))
        if len(split_idx):
            rot = quat_to_rotmat(halves.rotations.astype(np.float64))
            local = state.rng.normal(size=(len(halves), 3)) * halves.scales
            halves.means = (halves.means + np.einsum("nij,nj->ni", rot, local)).astype(cloud.means.dtype)
            halves.log_scales = (halves.log_scales - np.log(config.split_factor)).astype(cloud.means.dtype)
        keep[split_idx] = False
        new_rows = clones.concat(halves)
        if len(clone_idx) or len(split_idx):
            state.events.append({"iteration": state.iteration, "event": "densify",
                                 "cloned": int(len(clone_idx)), "split": int(len(split_idx))})
    # prune after densification so that new rows are judged too
    opac = np.concatenate([cloud.opacities[keep], sigmoid(new_rows.opacity_logits) if new_rows is not None else []])
    alive = opac >= config.prune_opacity
    if not alive.any():
        alive[int(np.argmax(opac))] = True
        msg = f"pruning would empty the cloud at iteration {state.iteration}; kept the most opaque Gaussian"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        state.events.append({"iteration": state.iteration, "event": "prune_guard"})
    kept_old = np.flatnonzero(keep)
    n_old = len(kept_old)
    index = kept_old[alive[:n_old]]
    if new_rows is not None:
        new_rows = new_rows.select(alive[n_old:])
    pruned = int((~alive).sum())
    if pruned:
        state.events.append({"iteration": state.iteration, "event": "prune", "removed": pruned})
    _apply_cloud_index(state, index, new_rows)
    state.check_consistent()


def _means_lr(config: TrainConfig, extent: float, iteration: int) -> float:
    t = min(max(iteration / max(config.iterations, 1), 0.0), 1.0)
    lr = math.exp((1 - t) * math.log(config.lr_means) + t * math.log(config.lr_means_final))
    return lr * extent


def active_variant(config: TrainConfig, iteration: int) -> ModulationVariant:
    if config.mode == "pre_attach" and iteration <= config.attach_at:
        return ModulationVariant.IDENTITY
    return config.variant_enum


def evaluate(state: TrainState, dataset, split="test", variant=None, sh_degree=None):
    """Per-view PSNR on ``split``; ``variant`` defaults to the state's own."""
    variant = state.variant if variant is None else variant
    out = []
    bg = dataset.background
    for cam, img in zip(dataset.cameras(split), dataset.images(split)):
        pred = render(state.cloud, cam, state.grid, state.mlp, variant, background=bg, sh_degree=sh_degree).image
        out.append(psnr(np.clip(pred, 0, 1), img))
    return out


def train_step(state: TrainState, config: TrainConfig, dataset) -> dict:
    it = state.iteration + 1
    variant = active_variant(config, it)
    sh_deg = min(config.sh_degree, (it - 1) // config.sh_warmup_interval)
    cams = dataset.cameras("train")
    images = dataset.images("train")
    view = int(state.rng.integers(len(cams)))
    cam, target = cams[view], images[view]
    out = render(state.cloud, cam, state.grid, state.mlp, variant, background=dataset.background,
                 sh_degree=sh_deg, keep_context=True)
    value, g_img = loss(out.image, target, config.lambda_ssim)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at iteration {it} (view {view})", state=state,
                            record={"iteration": it, "view": view, "loss": value})
    grads = render_backward(state.cloud, cam, state.grid, state.mlp, variant, g_img,
                            background=dataset.background, sh_degree=sh_deg, context=out.context,
                            deterministic=config.deterministic)
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    lrs = {
        "means": _means_lr(config, state.extent, it),
        "log_scales": config.lr_log_scales,
        "rotations": config.lr_rotations,
        "opacity_logits": config.lr_opacity_logits,
    }
    for name, lr in lrs.items():
        adam_update(getattr(state.cloud, name), getattr(grads, name), state.optimizer[name], lr, b1, b2, eps)
    # higher-order SH gets a 20x smaller rate, as in the reference GS recipe
    sh_lr = np.full(state.cloud.sh.shape[2], config.lr_sh / 20.0, dtype=state.cloud.sh.dtype)
    sh_lr[0] = config.lr_sh
    _adam_sh(state, grads.sh, sh_lr, b1, b2, eps)
    if variant is not ModulationVariant.IDENTITY:
        adam_update(state.grid.tables, grads.tables, state.optimizer["tables"], config.lr_tables, b1, b2, eps)
        for k, v in state.mlp.params.items():
            adam_update(v, grads.mlp[k], state.optimizer[f"mlp.{k}"], config.lr_mlp, b1, b2, eps)
    vis = grads.visible
    state.grad_accum[vis] += grads.screen_grad_norm[vis]
    state.grad_denom[vis] += 1
    state.iteration = it
    until = int(config.densify_until_frac * config.iterations)
    if it >= config.densify_from:
        densify = it <= until and it % config.densify_interval == 0
        if densify or it % config.prune_interval == 0:
            densify_and_prune(state, config, densify=densify)
    record = {"iteration": it, "loss": value, "psnr": None, "num_gaussians": len(state.cloud)}
    if it % config.eval_interval == 0 or it == config.iterations:
        if dataset.cameras("test"):
            record["psnr"] = float(np.mean(evaluate(state, dataset, "test", variant, sh_deg)))
    return record


def _adam_sh(state, grad, lr_per_coeff, b1, b2, eps):
    g = state.optimizer["sh"]
    g.step += 1
    g.m *= b1
    g.m += (1 - b1) * grad
    g.v *= b2
    g.v += (1 - b2) * grad * grad
    c1 = 1 - b1**g.step
    c2 = 1 - b2**g.step
    state.cloud.sh -= (lr_per_coeff * (math.sqrt(c2) / c1)).astype(g.m.dtype) * g.m / (np.sqrt(g.v) + eps)


def format_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(config: TrainConfig, dataset, state: TrainState | None = None, log_file=None,
          stop_at: int | None = None, on_iteration=None):
    """Run training until ``config.iterations`` (or ``stop_at``) completed iterations.

    Returns ``(state, records)``. ``log_file`` receives one JSON record per line.
    """
    if state is None:
        state = init_state(config, dataset)
    records = []
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    while state.iteration < end:
        record = train_step(state, config, dataset)
        records.append(record)
        if log_file is not None:
            log_file.write(format_record(record) + "\n")
        if on_iteration is not None:
            on_iteration(state, record)
        if record["psnr"] is not None:
            log.info("iter %d loss %.5f psnr %.2f n=%d", record["iteration"], record["loss"],
                     record["psnr"], record["num_gaussians"])
    return state, records


__all__ = [
    "TrainConfig", "TrainState", "TrainingError", "loss", "init_random", "init_from_points",
    "densify_and_prune", "train", "train_step", "evaluate", "NonFiniteError",
]
