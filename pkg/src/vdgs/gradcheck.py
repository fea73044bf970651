"""Finite-difference verification of every hand-written adjoint.

Each suite builds seeded random instances, compares analytic gradients of a
random linear functional against central differences, and reports the worst
relative error ``max|analytic - numeric| / max(max|numeric|, max|analytic|)``
per parameter group.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoding as _encoding
from . import mlp as _mlp
from . import rasterizer as _rasterizer
from . import sh as _sh
from . import trainer as _trainer
from .geometry import Camera, GaussianCloud
from .mlp import ModulationVariant, TinyMLP

TOLERANCE = {"double": 1e-3, "single": 1e-2}
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
RASTER_VARIANTS = (
    ModulationVariant.OPACITY_COLOR_MUL,
    ModulationVariant.OPACITY_COLOR_ADD,
    ModulationVariant.OPACITY_MUL,
    ModulationVariant.COLOR_MUL,
    ModulationVariant.IDENTITY,
)


@dataclass
class SuiteResult:
    name: str
    worst: float = 0.0
    groups: dict = field(default_factory=dict)

    def update(self, group, analytic, numeric):
        err = relative_error(analytic, numeric)
        self.groups[group] = max(self.groups.get(group, 0.0), err)
        self.worst = max(self.worst, err)


def relative_error(analytic, numeric, floor=1e-10) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(n)), np.max(np.abs(a)), floor)
    return float(np.max(np.abs(a - n)) / scale)


def central_difference(f, x: np.ndarray, h: float, index=None) -> np.ndarray:
    """Numeric gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if index is None else index):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_sh(seeds=DEFAULT_SEEDS, dtype=np.float64, h=1e-4) -> SuiteResult:
    res = SuiteResult("sh")
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for degree in range(4):
            k = (degree + 1) ** 2
            coeffs = rng.normal(0, 0.3, size=(6, 3, k)).astype(dtype)
            dirs = rng.normal(size=(6, 3))
            dirs = (dirs / np.linalg.norm(dirs, axis=1, keepdims=True)).astype(dtype)
            w = rng.normal(size=(6, 3)).astype(dtype)

            def f():
                return float(np.sum(w * _sh.eval_sh_batch(coeffs, dirs, degree)))

            gc, gd = _sh.eval_sh_batch_backward(coeffs, dirs, w, degree)
            res.update(f"coeffs_deg{degree}", gc, central_difference(f, coeffs, h))
            res.update(f"dir_deg{degree}", gd, central_difference(f, dirs, h))
    return res


def check_encoding(seeds=DEFAULT_SEEDS, dtype=np.float64, h=1e-4) -> SuiteResult:
    res = SuiteResult("encoding")
    for seed in seeds:
        rng = np.random.default_rng(seed)
        grid = _encoding.HashGrid(np.array([[-1.0] * 3, [1.0] * 3]), seed=seed, init_scale=1.0, dtype=dtype)
        pos = rng.uniform(-1, 1, size=(4, 3))
        w = rng.normal(size=(4, grid.output_dim)).astype(dtype)

        def f():
            return float(np.sum(w * grid.encode(pos)))

        analytic = grid.encode_backward(pos, w)
        idx, _ = grid.lookup(pos)
        flat = (np.arange(grid.levels)[None, :, None] * grid.table_size + idx).ravel()
        touched = np.unique((flat[:, None] * grid.feature_dim + np.arange(grid.feature_dim)).ravel())
        numeric = central_difference(f, grid.tables, h, index=touched)
        res.update("tables", analytic.reshape(-1)[touched], numeric.reshape(-1)[touched])
        untouched = np.ones(analytic.size, bool)
        untouched[touched] = False
        res.update("tables_untouched", analytic.reshape(-1)[untouched], np.zeros(int(untouched.sum())))
    return res


def _random_mlp(variant, rng, dtype, final_scale=0.5):
    net = TinyMLP.for_variant(variant, seed=int(rng.integers(1 << 31)), dtype=dtype)
    net.params["w3"] = rng.normal(0, final_scale / np.sqrt(net.hidden), size=net.params["w3"].shape).astype(dtype)
    net.params["b1"] = rng.normal(0, 0.1, size=net.hidden).astype(dtype)
    net.params["b2"] = rng.normal(0, 0.1, size=net.hidden).astype(dtype)
    net.params["b3"] = rng.normal(0, 0.1, size=net.output_dim).astype(dtype)
    return net


def _smooth_coordinates(pattern, x, h):
    """Mask of coordinates whose +-h perturbation keeps every LeakyReLU on one side.

    Central differences straddling a kink do not estimate the derivative.
    """
    base = pattern()
    flat = x.reshape(-1)
    ok = np.ones(flat.size, bool)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        same = np.array_equal(pattern(), base)
        flat[i] = old - h
        same = same and np.array_equal(pattern(), base)
        flat[i] = old
        ok[i] = same
    return ok


def check_mlp(seeds=DEFAULT_SEEDS, dtype=np.float64, h=1e-3) -> SuiteResult:
    res = SuiteResult("mlp")
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for variant in _mlp.ALL_VARIANTS[1:]:
            net = _random_mlp(variant, rng, dtype)
            feats = rng.normal(0, 0.5, size=(5, 24)).astype(dtype)
            dirs = rng.normal(size=(5, 3))
            dirs = (dirs / np.linalg.norm(dirs, axis=1, keepdims=True)).astype(dtype)
            wo = rng.normal(size=5).astype(dtype)
            wc = rng.normal(size=(5, 3)).astype(dtype)

            def f():
                m = _mlp.modulate_batch(net, variant, feats, dirs)
                total = 0.0
                if m.opacity is not None:
                    total += float(np.sum(wo * m.opacity))
                if m.color is not None:
                    total += float(np.sum(wc * m.color))
                return total

            grad_mod = _mlp.Modulation(
                opacity=wo if variant.modulates_opacity else None,
                color=wc if variant.modulates_color else None,
            )
            gp, gf, gd = _mlp.mlp_backward(net, variant, feats, dirs, grad_mod)

            def pattern():
                _, (_, z1, _, z2, _) = net.forward(feats, dirs, cache=True)
                return np.concatenate([(z1 >= 0).ravel(), (z2 >= 0).ravel()])

            for name, arr, analytic in [(k, net.params[k], gp[k]) for k in net.PARAM_NAMES] + [
                ("features", feats, gf), ("dirs", dirs, gd)
            ]:
                smooth = _smooth_coordinates(pattern, arr, h)
                numeric = central_difference(f, arr, h, index=np.flatnonzero(smooth))
                res.update(name, analytic.ravel()[smooth], numeric.ravel()[smooth])
    return res


def random_scene(seed: int, n: int = 8, size: int = 16, dtype=np.float64, variant=ModulationVariant.OPACITY_COLOR_MUL):
    """Small random scene for adjoint checks: cloud, camera, grid, network."""
    rng = np.random.default_rng(seed)
    variant = ModulationVariant.parse(variant)
    q = rng.normal(size=(n, 4))
    sh = rng.normal(0, 0.08, size=(n, 3, 16))
    sh[:, :, 0] = rng.uniform(-0.6, 0.6, size=(n, 3))
    cloud = GaussianCloud(
        means=rng.uniform(-0.5, 0.5, size=(n, 3)),
        log_scales=np.log(rng.uniform(0.12, 0.3, size=(n, 3))),
        rotations=q,
        opacity_logits=_trainer.logit_np(rng.uniform(0.35, 0.7, size=n)),
        sh=sh,
        sh_degree=3,
    ).astype(dtype)
    eye = rng.normal(size=3)
    eye = 4.0 * eye / np.linalg.norm(eye)
    cam = Camera.look_at(eye, rng.uniform(-0.1, 0.1, size=3), size, size, fov_x=0.55)
    grid = _encoding.HashGrid(np.array([[-1.0] * 3, [1.0] * 3]), seed=seed, init_scale=0.5, dtype=dtype)
    net = _random_mlp(variant, rng, dtype, final_scale=0.3) if variant is not ModulationVariant.IDENTITY else None
    background = rng.uniform(0, 1, size=3)
    return cloud, cam, grid, net, variant, background


class _FrozenEncoding:
    """Stands in for a HashGrid, returning the features of fixed positions."""

    def __init__(self, grid, positions):
        self._positions = positions.copy()
        self._features = grid.encode(self._positions)

    def encode(self, positions):
        # rows arrive culled and depth sorted; match them to the unperturbed means
        d = np.linalg.norm(positions[:, None, :] - self._positions[None, :, :], axis=2)
        return self._features[np.argmin(d, axis=1)]


def check_rasterizer(seeds=DEFAULT_SEEDS, dtype=np.float64, h=1e-6) -> SuiteResult:
    res = SuiteResult("rasterizer")
    for i, seed in enumerate(seeds):
        variant = RASTER_VARIANTS[i % len(RASTER_VARIANTS)]
        cloud, cam, grid, net, variant, bg = random_scene(seed, dtype=dtype, variant=variant)
        rng = np.random.default_rng(1000 + seed)
        w = rng.normal(size=(cam.height, cam.width, 3)).astype(dtype)

        def f():
            img = _rasterizer.render(cloud, cam, grid, net, variant, background=bg).image
            return float(np.sum(w * img))

        grads = _rasterizer.render_backward(cloud, cam, grid, net, variant, w, background=bg)
        # means reach the network only through the stop-gradient hash encoding,
        # so the means oracle holds the encoded features fixed
        frozen = _FrozenEncoding(grid, cloud.means)

        def f_frozen():
            img = _rasterizer.render(cloud, cam, frozen, net, variant, background=bg).image
            return float(np.sum(w * img))

        for name in GaussianCloud.PARAM_NAMES:
            fn = f_frozen if name == "means" else f
            res.update(name, getattr(grads, name), central_difference(fn, getattr(cloud, name), h))
        if variant is not ModulationVariant.IDENTITY:
            for name in net.PARAM_NAMES:
                res.update(f"mlp.{name}", grads.mlp[name], central_difference(f, net.params[name], h))
            idx, _ = grid.lookup(cloud.means)
            flat = (np.arange(grid.levels)[None, :, None] * grid.table_size + idx).ravel()
            touched = np.unique((flat[:, None] * grid.feature_dim + np.arange(grid.feature_dim)).ravel())
            numeric = central_difference(f, grid.tables, h, index=touched)
            res.update("tables", grads.tables.reshape(-1)[touched], numeric.reshape(-1)[touched])
    return res


def check_loss(seeds=DEFAULT_SEEDS, dtype=np.float64, h=1e-5) -> SuiteResult:
    res = SuiteResult("loss")
    for seed in seeds:
        rng = np.random.default_rng(seed)
        target = rng.uniform(0, 1, size=(14, 13, 3))
        img = np.clip(target + rng.normal(0, 0.2, size=target.shape), 0, 1).astype(dtype)

        def f():
            return _trainer.loss(img, target)[0]

        _, g = _trainer.loss(img, target)
        # |r - t| has a kink at equality; skip pixels too close to it
        ok = (np.abs(img - target) > 10 * h).ravel()
        numeric = central_difference(f, img, h, index=np.flatnonzero(ok))
        res.update("image", g.ravel()[ok], numeric.ravel()[ok])
    return res


SUITES = {
    "sh": check_sh,
    "encoding": check_encoding,
    "mlp": check_mlp,
    "rasterizer": check_rasterizer,
    "loss": check_loss,
}


def run_all(seeds=DEFAULT_SEEDS, precision: str = "double", suites=None) -> dict[str, SuiteResult]:
    dtype = np.float64 if precision == "double" else np.float32
    steps = {"double": None, "single": {"sh": 1e-2, "encoding": 1e-2, "mlp": 1e-2, "rasterizer": 1e-3, "loss": 1e-3}}
    out = {}
    for name in suites or SUITES:
        fn = SUITES[name]
        kw = {} if steps[precision] is None else {"h": steps[precision][name]}
        out[name] = fn(seeds=seeds, dtype=dtype, **kw)
    return out
