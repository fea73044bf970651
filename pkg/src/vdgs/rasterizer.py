"""Tile-based differentiable Gaussian splatting on the CPU.

Pipeline per frame:

1. ``preprocess``: cull, project means and covariances (EWA, 0.3 px dilation),
   evaluate SH color along each Gaussian's viewing direction and apply the
   view-dependent modulation.
2. Global stable depth sort (key: depth, then source index) and binning of
   splats to 16x16 tiles by their 3-sigma extent.
3. Per tile, the (splat, pixel) pairs inside each splat's 3-sigma ellipse are
   enumerated, sorted by pixel (stable, so depth order is kept) and packed
   into per-pixel depth lists; front-to-back compositing is a cumulative
   product along those lists. Tiles are processed in chunks, optionally on a
   thread pool bounded by ``VDGS_THREADS``.

A splat contributes to a pixel only inside its 3-sigma ellipse and when its
alpha reaches 1/255, so the image does not depend on the tile size. The
backward pass is the exact adjoint of this forward pass, including the
modulation network and hash tables.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from ._validation import NonFiniteError, ValidationError
from .encoding import HashGrid
from .geometry import (
    Camera,
    Gaussian3D,
    GaussianCloud,
    covariance_backward,
    covariance_from_params,
    sigmoid,
    viewing_directions,
    viewing_directions_backward,
)
from .mlp import (
    Modulation,
    ModulationVariant,
    TinyMLP,
    apply_modulation_backward,
    apply_modulation_batch,
    modulate_batch,
    modulation_raw_grad,
)
from .sh import eval_sh_batch, eval_sh_batch_backward

ALPHA_CAP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
DILATION = 0.3
SIGMA_EXTENT = 3.0
TILE_SIZE = 16
# upper bound on (tiles x splats x pixels) elements held per chunk
CHUNK_ELEMENTS = 1 << 21


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("VDGS_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    opacity_eff: float
    source_index: int


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    contributor_count: np.ndarray  # (H, W)
    context: "RenderContext | None" = field(default=None, repr=False)


@dataclass
class Gradients:
    """Gradients of a scalar loss w.r.t. every trainable quantity."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    tables: np.ndarray | None = None
    mlp: dict | None = None
    # |dL/d(mean2d)| in NDC units and a visibility mask, for densification
    screen_grad_norm: np.ndarray | None = None
    visible: np.ndarray | None = None

    def cloud_grads(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in GaussianCloud.PARAM_NAMES}


@dataclass
class Preprocessed:
    """Per-visible-Gaussian quantities (sorted front to back) reused by backward."""

    source: np.ndarray  # (K,) indices into the cloud
    p_cam: np.ndarray
    jac: np.ndarray  # (K, 2, 3)
    t_mat: np.ndarray  # (K, 2, 3) = J @ R_w
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (K, 2, 2)
    mean2d: np.ndarray
    extent: np.ndarray  # (K, 2) 3-sigma bounding-box half-widths
    dirs: np.ndarray
    features: np.ndarray | None
    mlp_cache: tuple | None
    mod: Modulation
    opacity_base: np.ndarray
    rgb_base: np.ndarray
    opacity: np.ndarray
    rgb: np.ndarray
    sh_degree: int


@dataclass
class RenderContext:
    pre: Preprocessed
    tiles: list
    width: int
    height: int
    tile_size: int
    background: np.ndarray
    variant: ModulationVariant
    chunk_caches: list | None = None


def _normalize_background(background, dtype):
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.size == 1:
        bg = np.repeat(bg, 3)
    if bg.shape != (3,):
        raise ValidationError("background must be a scalar or an RGB triple")
    return bg.astype(dtype)


def preprocess(cloud: GaussianCloud, cam: Camera, grid: HashGrid | None, mlp: TinyMLP | None,
               variant, sh_degree: int | None = None) -> Preprocessed:
    variant = ModulationVariant.parse(variant)
    dtype = cloud.means.dtype
    if sh_degree is None:
        sh_degree = cloud.sh_degree
    sh_degree = min(sh_degree, cloud.sh_degree)
    rw = cam.rotation.astype(dtype)
    tw = cam.translation.astype(dtype)
    p_cam = cloud.means @ rw.T + tw
    z = p_cam[:, 2]
    keep = (z > cam.near) & (z < cam.far)
    idx = np.flatnonzero(keep)
    p = p_cam[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy, cx, cy = (dtype.type(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy))
    inv_z = 1.0 / z
    jac = np.zeros((len(idx), 2, 3), dtype)
    jac[:, 0, 0] = fx * inv_z
    jac[:, 0, 2] = -fx * x * inv_z**2
    jac[:, 1, 1] = fy * inv_z
    jac[:, 1, 2] = -fy * y * inv_z**2
    t_mat = jac @ rw
    cov3d = covariance_from_params(cloud.log_scales[idx], cloud.rotations[idx])
    cov2d = t_mat @ cov3d @ np.swapaxes(t_mat, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mean2d = np.stack([fx * x * inv_z + cx, fy * y * inv_z + cy], axis=1)
    # half-widths of the 3-sigma ellipse's bounding box
    extent = SIGMA_EXTENT * np.sqrt(np.maximum(np.stack([a, c], axis=1), 0.0))
    on_screen = (
        (det > 0)
        & (mean2d[:, 0] + extent[:, 0] > 0)
        & (mean2d[:, 0] - extent[:, 0] < cam.width)
        & (mean2d[:, 1] + extent[:, 1] > 0)
        & (mean2d[:, 1] - extent[:, 1] < cam.height)
    )
    sel = np.flatnonzero(on_screen)
    # stable depth sort, ties broken by source index
    order = sel[np.lexsort((idx[sel], z[sel]))]
    idx, p, jac, t_mat, cov3d, cov2d = idx[order], p[order], jac[order], t_mat[order], cov3d[order], cov2d[order]
    mean2d, extent, det = mean2d[order], extent[order], det[order]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det

    means = cloud.means[idx]
    dirs = viewing_directions(cam, means)
    rgb_base = eval_sh_batch(cloud.sh[idx], dirs, sh_degree)
    opacity_base = sigmoid(cloud.opacity_logits[idx])
    features = None
    if variant is not ModulationVariant.IDENTITY:
        if grid is None:
            raise ValidationError(f"variant {variant.value} needs a hash grid")
        features = grid.encode(means).astype(dtype, copy=False)
    mod, mlp_cache = modulate_batch(mlp, variant, features, dirs, cache=True)
    opacity, rgb = apply_modulation_batch(variant, opacity_base, rgb_base, mod)
    return Preprocessed(
        source=idx, p_cam=p, jac=jac, t_mat=t_mat, cov3d=cov3d, cov2d=cov2d, conic=conic,
        mean2d=mean2d, extent=extent, dirs=dirs, features=features, mlp_cache=mlp_cache, mod=mod,
        opacity_base=opacity_base, rgb_base=rgb_base, opacity=opacity.astype(dtype, copy=False),
        rgb=rgb.astype(dtype, copy=False), sh_degree=sh_degree,
    )


@dataclass
class TileBins:
    """(tile, splat) pairs sorted by tile id, then by depth rank.

    ``x0..y1`` is the pixel rectangle where the pair's tile meets the splat's
    3-sigma bounding box.
    """

    tile: np.ndarray
    rank: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    tiles: np.ndarray  # unique tile ids
    starts: np.ndarray  # first pair of each tile
    candidates: np.ndarray  # candidate pixel-splat tests per tile

    def __len__(self):
        return len(self.tiles)


def _pixel_bounds(pre: Preprocessed, width: int, height: int):
    """Inclusive pixel index ranges whose centers can pass both contribution tests.

    A pair contributes when its power is at least -4.5 (3 sigma) and at least
    log(1 / (255 opacity)); the bounding box of the smaller ellipse is used.
    Splats too faint to reach 1/255 anywhere get empty ranges (x1 < x0).
    """
    u, v = pre.mean2d[:, 0], pre.mean2d[:, 1]
    limit = 0.5 * SIGMA_EXTENT**2
    with np.errstate(divide="ignore"):
        c = np.minimum(limit, np.log(np.maximum(pre.opacity.astype(np.float64), 1e-300) / ALPHA_MIN))
    faint = c < 0
    scale = np.sqrt(np.maximum(c, 0.0) / limit) * (1 + 1e-6) + 1e-6
    ex = pre.extent[:, 0] * scale
    ey = pre.extent[:, 1] * scale
    x0 = np.clip(np.floor(u - ex - 0.5), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.ceil(u + ex - 0.5), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.floor(v - ey - 0.5), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.ceil(v + ey - 0.5), 0, height - 1).astype(np.int64)
    x1[faint] = x0[faint] - 1
    return x0, x1, y0, y1


def _bin_tiles(pre: Preprocessed, width: int, height: int, tile_size: int) -> TileBins:
    ntx = -(-width // tile_size)
    k = len(pre.source)
    empty = np.zeros(0, np.int64)
    if k == 0:
        return TileBins(*([empty] * 9))
    bx0, bx1, by0, by1 = _pixel_bounds(pre, width, height)
    tx0, tx1 = bx0 // tile_size, bx1 // tile_size
    ty0, ty1 = by0 // tile_size, by1 // tile_size
    nx = np.maximum(tx1 - tx0 + 1, 0)
    counts = nx * np.maximum(ty1 - ty0 + 1, 0)
    ranks = np.repeat(np.arange(k), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[ranks] + local % nx[ranks]
    ty = ty0[ranks] + local // nx[ranks]
    tile_id = ty * ntx + tx
    order = np.argsort(tile_id, kind="stable")
    tile_id, ranks, tx, ty = tile_id[order], ranks[order], tx[order], ty[order]
    x0 = np.maximum(bx0[ranks], tx * tile_size)
    x1 = np.minimum(bx1[ranks], tx * tile_size + tile_size - 1)
    y0 = np.maximum(by0[ranks], ty * tile_size)
    y1 = np.minimum(by1[ranks], ty * tile_size + tile_size - 1)
    uniq, starts = np.unique(tile_id, return_index=True)
    area = np.maximum(x1 - x0 + 1, 0) * np.maximum(y1 - y0 + 1, 0)
    cand = np.add.reduceat(area, starts) if len(starts) else empty
    return TileBins(tile_id, ranks, x0, x1, y0, y1, uniq, starts, cand)


def _chunks(bins: TileBins, tile_size: int):
    """Contiguous tile ranges as (first pair, end pair, first tile, end tile).

    Bounded by ``CHUNK_ELEMENTS`` candidate tests and by a tile count that
    keeps per-chunk pixel keys within 16 bits.
    """
    max_tiles = max(1, 65536 // (tile_size * tile_size))
    n_tiles = len(bins)
    ends = np.append(bins.starts[1:], len(bins.rank)) if n_tiles else bins.starts
    out = []
    t = 0
    while t < n_tiles:
        e, total = t, 0
        while e < n_tiles and e - t < max_tiles and (e == t or total + bins.candidates[e] <= CHUNK_ELEMENTS):
            total += bins.candidates[e]
            e += 1
        out.append((int(bins.starts[t]), int(ends[e - 1]), t, e))
        t = e
    return out


def _padded(pre: Preprocessed, dtype):
    return pre.mean2d.astype(dtype, copy=False), pre.conic, pre.opacity, pre.rgb


def _chunk_pairs(chunk, bins: TileBins, padded, width, tile_size, dtype):
    """Active (splat, pixel) pairs of a chunk, sorted by pixel, then depth rank."""
    mean2d, conic, opacity, _ = padded
    p0, p1, t0, t1 = chunk
    sl = slice(p0, p1)
    x0, y0 = bins.x0[sl], bins.y0[sl]
    nx = np.maximum(bins.x1[sl] - x0 + 1, 0)
    cnt = nx * np.maximum(bins.y1[sl] - y0 + 1, 0)
    rep = np.repeat(np.arange(p1 - p0), cnt)
    local = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    nxr = nx[rep]
    px = x0[rep] + local % nxr
    py = y0[rep] + local // nxr
    r = bins.rank[sl][rep]
    dx = (px + 0.5).astype(dtype) - mean2d[r, 0]
    dy = (py + 0.5).astype(dtype) - mean2d[r, 1]
    ca, cb, cc = conic[r, 0, 0], conic[r, 0, 1], conic[r, 1, 1]
    power = dx * (-0.5 * ca * dx - cb * dy) - 0.5 * cc * dy * dy
    a_raw = opacity[r] * np.exp(power)
    active = (power >= -0.5 * SIGMA_EXTENT**2) & (a_raw >= ALPHA_MIN)
    keep = np.flatnonzero(active)
    r, px, py, dx, dy, power, a_raw = r[keep], px[keep], py[keep], dx[keep], dy[keep], power[keep], a_raw[keep]
    # per-chunk pixel key: position of the tile in the chunk, then the pixel inside the tile
    tile_pos = np.repeat(np.arange(t1 - t0), np.diff(np.append(bins.starts[t0:t1], p1)))[rep[keep]]
    key = tile_pos * tile_size * tile_size + (py % tile_size) * tile_size + px % tile_size
    key = key.astype(np.uint16 if tile_size * tile_size * (t1 - t0) <= 65536 else np.int64)
    order = np.argsort(key, kind="stable")
    key = key[order]
    n = len(key)
    new_seg = np.ones(n, bool)
    new_seg[1:] = key[1:] != key[:-1]
    starts = np.flatnonzero(new_seg)
    seg = np.cumsum(new_seg) - 1
    j = np.arange(n) - starts[seg]
    return dict(r=r[order], pix=(py * width + px)[order][starts], seg=seg, j=j, starts=starts,
                dx=dx[order], dy=dy[order], gauss=np.exp(power[order]), a_raw=a_raw[order])


def _chunk_forward(chunk, bins, padded, width, tile_size, dtype, bg):
    """Composite one chunk. Returns (pixel ids, color, final T, count, cache)."""
    rgb = padded[3]
    c = _chunk_pairs(chunk, bins, padded, width, tile_size, dtype)
    seg, j, starts = c["seg"], c["j"], c["starts"]
    n_seg = len(starts)
    if n_seg == 0:
        z = np.zeros(0, np.int64)
        return z, np.zeros((0, 3), dtype), np.zeros(0, dtype), z, dict(c, shape=(0, 0))
    depth = int(j.max()) + 1
    # per-pixel depth lists padded with transparent entries
    alpha = np.zeros((n_seg, depth), dtype)
    alpha[seg, j] = np.minimum(c["a_raw"], dtype.type(ALPHA_CAP))
    alpha = np.where(np.cumprod(1 - alpha, axis=1) >= T_MIN, alpha, dtype.type(0))
    t_after = np.cumprod(1 - alpha, axis=1)
    t_final = t_after[:, -1]
    a = alpha[seg, j]
    tb = np.where(j > 0, t_after[seg, np.maximum(j - 1, 0)], dtype.type(1))
    w = a * tb
    color = np.add.reduceat(w[:, None] * rgb[c["r"]], starts, axis=0)
    count = np.add.reduceat((a > 0).astype(np.int64), starts)
    c.update(alpha=a, t_before=tb, t_final=t_final, w=w, shape=(n_seg, depth))
    return c["pix"], color + t_final[:, None] * bg, t_final, count, c


def _chunk_backward(chunk, bins, padded, k, width, tile_size, dtype, bg, grad_flat, cache):
    _, conic, _, rgb = padded
    if cache is None:
        cache = _chunk_forward(chunk, bins, padded, width, tile_size, dtype, bg)[4]
    out = np.zeros((k, 10), dtype=np.float64)
    if cache["shape"][0] == 0:
        return out
    r, seg, j = cache["r"], cache["seg"], cache["j"]
    dx, dy = cache["dx"], cache["dy"]
    alpha, tb, w = cache["alpha"], cache["t_before"], cache["w"]
    g = grad_flat[cache["pix"]][seg]  # (pairs, 3)
    rgb_i = rgb[r]
    g_rgb = w[:, None] * g
    q = np.sum(rgb_i * g, axis=1)
    wq = np.zeros(cache["shape"], dtype)
    wq[seg, j] = w * q
    # light composited behind each pair, per pixel
    behind = np.cumsum(wq[:, ::-1], axis=1)[:, ::-1] - wq
    tail = behind[seg, j] + cache["t_final"][seg] * (g @ bg)
    live = alpha > 0
    g_alpha = np.where(live, tb * q - tail / np.where(live, 1 - alpha, 1), 0)
    g_alpha = np.where(cache["a_raw"] < ALPHA_CAP, g_alpha, 0)
    g_power = g_alpha * cache["a_raw"]
    ca, cb, cc = conic[r, 0, 0], conic[r, 0, 1], conic[r, 1, 1]

    def scatter(vals):
        return np.bincount(r, weights=vals, minlength=k)

    out[:, 0] = scatter(g_power * (ca * dx + cb * dy))
    out[:, 1] = scatter(g_power * (cb * dx + cc * dy))
    out[:, 2] = scatter(-0.5 * g_power * dx * dx)
    out[:, 3] = scatter(-g_power * dx * dy)
    out[:, 4] = scatter(-0.5 * g_power * dy * dy)
    out[:, 5] = scatter(g_alpha * cache["gauss"])
    for ch in range(3):
        out[:, 6 + ch] = scatter(g_rgb[:, ch])
    return out


def _map_chunks(fn, chunks, deterministic=True):
    workers = worker_count()
    if workers == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(fn, c): i for i, c in enumerate(chunks)}
        if deterministic:
            return [f.result() for f in futures]
        # completion order; reductions over it are not bit-reproducible
        return [f.result() for f in as_completed(futures)]


def render(cloud: GaussianCloud, cam: Camera, grid: HashGrid | None = None, mlp: TinyMLP | None = None,
           variant="identity", background=None, sh_degree: int | None = None, tile_size: int = TILE_SIZE,
           keep_context: bool = False, deterministic: bool = True) -> RenderOutput:
    """Render ``cloud`` from ``cam``; the image is composited over ``background``.

    Raises ``NonFiniteError`` naming the first Gaussian with a NaN/inf parameter.
    """
    variant = ModulationVariant.parse(variant)
    dtype = cloud.means.dtype
    bg = _normalize_background(background, dtype)
    h, w = cam.height, cam.width
    if len(cloud) == 0:
        pre = preprocess(cloud, cam, grid, mlp, ModulationVariant.IDENTITY, sh_degree)
        image = np.broadcast_to(bg, (h, w, 3)).astype(dtype)
        ctx = RenderContext(pre, [], w, h, tile_size, bg, variant, []) if keep_context else None
        return RenderOutput(image, np.ones((h, w), dtype), np.zeros((h, w), np.int64), ctx)
    cloud.check_finite()
    pre = preprocess(cloud, cam, grid, mlp, variant, sh_degree)
    bad = ~np.isfinite(pre.rgb).all(axis=1) | ~np.isfinite(pre.opacity)
    if bad.any():
        raise NonFiniteError(f"non-finite modulated color/opacity for Gaussian index {int(pre.source[bad][0])}")
    bins = _bin_tiles(pre, w, h, tile_size)
    chunks = _chunks(bins, tile_size)
    padded = _padded(pre, dtype)
    image = np.broadcast_to(bg, (h * w, 3)).astype(dtype)
    trans = np.ones(h * w, dtype)
    count = np.zeros(h * w, np.int64)
    results = _map_chunks(lambda c: _chunk_forward(c, bins, padded, w, tile_size, dtype, bg), chunks)
    caches = []
    for pix, img, tf, cnt, cache in results:
        image[pix] = img
        trans[pix] = tf
        count[pix] = cnt
        caches.append(cache if keep_context else None)
    ctx = RenderContext(pre, bins, w, h, tile_size, bg, variant, caches) if keep_context else None
    return RenderOutput(image.reshape(h, w, 3), trans.reshape(h, w), count.reshape(h, w), ctx)


def render_backward(cloud: GaussianCloud, cam: Camera, grid: HashGrid | None, mlp: TinyMLP | None,
                    variant, grad_image, background=None, sh_degree: int | None = None,
                    tile_size: int = TILE_SIZE, context: RenderContext | None = None,
                    deterministic: bool = True) -> Gradients:
    """Exact adjoint of ``render`` for upstream gradient ``grad_image`` (H, W, 3).

    Pass ``context`` from ``render(..., keep_context=True)`` to skip recomputing
    the forward pass.
    """
    variant = ModulationVariant.parse(variant)
    dtype = cloud.means.dtype
    n = len(cloud)
    grads = Gradients(
        means=np.zeros_like(cloud.means), log_scales=np.zeros_like(cloud.log_scales),
        rotations=np.zeros_like(cloud.rotations), opacity_logits=np.zeros_like(cloud.opacity_logits),
        sh=np.zeros_like(cloud.sh),
        tables=None if (grid is None or variant is ModulationVariant.IDENTITY) else np.zeros_like(grid.tables),
        mlp=None if (mlp is None or variant is ModulationVariant.IDENTITY)
        else {k: np.zeros_like(v) for k, v in mlp.params.items()},
        screen_grad_norm=np.zeros(n, np.float64), visible=np.zeros(n, bool),
    )
    if n == 0:
        return grads
    grad_image = np.asarray(grad_image, dtype=dtype)
    if grad_image.shape != (cam.height, cam.width, 3):
        raise ValidationError(f"grad_image must have shape {(cam.height, cam.width, 3)}, got {grad_image.shape}")
    if context is None:
        context = render(cloud, cam, grid, mlp, variant, background, sh_degree, tile_size,
                         keep_context=True).context
    pre, ts = context.pre, context.tile_size
    bg = context.background
    k = len(pre.source)
    grads.visible[pre.source] = True
    if k == 0:
        return grads
    grad_flat = grad_image.reshape(-1, 3)
    chunks = _chunks(context.tiles, ts)
    caches = context.chunk_caches or [None] * len(chunks)
    padded = _padded(pre, dtype)
    bins = context.tiles
    parts = _map_chunks(
        lambda ci: _chunk_backward(ci[0], bins, padded, k, cam.width, ts, dtype, bg, grad_flat, ci[1]),
        list(zip(chunks, caches)), deterministic,
    )
    acc = np.zeros((k, 10), np.float64)
    for p in parts:
        acc += p
    g_mean2d = acc[:, 0:2]
    g_conic = np.zeros((k, 2, 2))
    g_conic[:, 0, 0] = acc[:, 2]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * acc[:, 3]
    g_conic[:, 1, 1] = acc[:, 4]
    g_opacity = acc[:, 5]
    g_rgb = acc[:, 6:9]
    grads.screen_grad_norm[pre.source] = np.linalg.norm(
        g_mean2d * np.array([0.5 * cam.width, 0.5 * cam.height]), axis=1
    )
    _preprocess_backward(cloud, cam, grid, mlp, variant, pre, g_mean2d, g_conic, g_opacity, g_rgb, grads)
    return grads


def _preprocess_backward(cloud, cam, grid, mlp, variant, pre, g_mean2d, g_conic, g_opacity, g_rgb, grads):
    dtype = cloud.means.dtype
    src = pre.source
    rw = cam.rotation
    # modulation
    g_op_base, g_rgb_base, g_mo, g_mc = apply_modulation_backward(
        variant, pre.opacity_base, pre.rgb_base, pre.mod, g_opacity, g_rgb
    )
    g_dirs = np.zeros((len(src), 3))
    if variant is not ModulationVariant.IDENTITY:
        raw, net_cache = pre.mlp_cache
        g_raw = modulation_raw_grad(variant, raw, g_mo, g_mc)
        g_params, g_feat, g_dir_net = mlp.backward(pre.features, pre.dirs, g_raw.astype(raw.dtype), cache=net_cache)
        for name, val in g_params.items():
            grads.mlp[name] += val
        grads.tables += grid.encode_backward(cloud.means[src], g_feat)
        g_dirs += g_dir_net
    # color and opacity activations
    g_sh, g_dir_sh = eval_sh_batch_backward(cloud.sh[src], pre.dirs, g_rgb_base, pre.sh_degree)
    g_dirs += g_dir_sh
    grads.sh[src] += g_sh
    grads.opacity_logits[src] += g_op_base * pre.opacity_base * (1 - pre.opacity_base)
    g_means = viewing_directions_backward(cam, cloud.means[src], g_dirs)
    # conic = inverse(cov2d)
    conic = pre.conic
    g_cov2d = -conic @ g_conic @ conic
    t_mat = pre.t_mat
    g_cov3d = np.swapaxes(t_mat, 1, 2) @ g_cov2d @ t_mat
    g_t = 2.0 * g_cov2d @ t_mat @ pre.cov3d
    g_jac = g_t @ rw.T
    x, y, z = pre.p_cam[:, 0], pre.p_cam[:, 1], pre.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    iz = 1.0 / z
    iz2 = iz * iz
    g_p = np.zeros((len(src), 3))
    g_p[:, 0] = g_jac[:, 0, 2] * (-fx * iz2) + g_mean2d[:, 0] * fx * iz
    g_p[:, 1] = g_jac[:, 1, 2] * (-fy * iz2) + g_mean2d[:, 1] * fy * iz
    g_p[:, 2] = (
        g_jac[:, 0, 0] * (-fx * iz2)
        + g_jac[:, 0, 2] * (2 * fx * x * iz2 * iz)
        + g_jac[:, 1, 1] * (-fy * iz2)
        + g_jac[:, 1, 2] * (2 * fy * y * iz2 * iz)
        - g_mean2d[:, 0] * fx * x * iz2
        - g_mean2d[:, 1] * fy * y * iz2
    )
    g_means = g_means + g_p @ rw
    grads.means[src] += g_means.astype(dtype)
    g_ls, g_q = covariance_backward(cloud.log_scales[src], cloud.rotations[src], g_cov3d)
    grads.log_scales[src] += g_ls.astype(dtype)
    grads.rotations[src] += g_q.astype(dtype)


def project(g: Gaussian3D, cam: Camera, grid=None, mlp=None, variant="identity") -> Splat2D | None:
    """Project one Gaussian; returns None when it is culled."""
    cloud = GaussianCloud.from_gaussians([g], sh_degree=int(round(np.sqrt(np.shape(g.sh_coeffs)[-1]))) - 1)
    pre = preprocess(cloud, cam, grid, mlp, variant)
    if len(pre.source) == 0:
        return None
    return Splat2D(
        mean2d=pre.mean2d[0], cov2d=pre.cov2d[0], depth=float(pre.p_cam[0, 2]), rgb=pre.rgb[0],
        opacity_eff=float(pre.opacity[0]), source_index=0,
    )
