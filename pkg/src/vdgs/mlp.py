"""The view-dependent modulation network and the variants that apply it.

The network maps hash features of a Gaussian's mean concatenated with the raw
unit viewing direction to per-Gaussian opacity and/or color factors. Output
activations are chosen so that a zero final layer is exactly the identity
modulation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError
from .geometry import sigmoid

LEAKY_SLOPE = 0.01


class ModulationVariant(str, enum.Enum):
    IDENTITY = "identity"
    COLOR_ADD = "color_add"
    COLOR_MUL = "color_mul"
    OPACITY_ADD = "opacity_add"
    OPACITY_MUL = "opacity_mul"
    OPACITY_COLOR_ADD = "opacity_color_add"
    OPACITY_COLOR_MUL = "opacity_color_mul"

    @classmethod
    def parse(cls, value) -> "ModulationVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        if key in _ALIASES:
            return _ALIASES[key]
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValidationError(f"unknown variant {value!r}; expected one of {names}") from None

    @property
    def tag(self) -> str:
        return _TAGS[self]

    @property
    def modulates_opacity(self) -> bool:
        return self in (self.OPACITY_ADD, self.OPACITY_MUL, self.OPACITY_COLOR_ADD, self.OPACITY_COLOR_MUL)

    @property
    def modulates_color(self) -> bool:
        return self in (self.COLOR_ADD, self.COLOR_MUL, self.OPACITY_COLOR_ADD, self.OPACITY_COLOR_MUL)

    @property
    def multiplicative(self) -> bool:
        return self in (self.COLOR_MUL, self.OPACITY_MUL, self.OPACITY_COLOR_MUL)

    @property
    def output_dim(self) -> int:
        return int(self.modulates_opacity) + 3 * int(self.modulates_color)


_TAGS = {
    ModulationVariant.IDENTITY: "GS",
    ModulationVariant.COLOR_ADD: "C+",
    ModulationVariant.COLOR_MUL: "C*",
    ModulationVariant.OPACITY_ADD: "O+",
    ModulationVariant.OPACITY_MUL: "O*",
    ModulationVariant.OPACITY_COLOR_ADD: "OC+",
    ModulationVariant.OPACITY_COLOR_MUL: "OC*",
}
_ALIASES = {"gs": ModulationVariant.IDENTITY, "none": ModulationVariant.IDENTITY}
_ALIASES.update({t.lower(): v for v, t in _TAGS.items()})

# ablation order
ALL_VARIANTS = (
    ModulationVariant.IDENTITY,
    ModulationVariant.COLOR_ADD,
    ModulationVariant.COLOR_MUL,
    ModulationVariant.OPACITY_ADD,
    ModulationVariant.OPACITY_MUL,
    ModulationVariant.OPACITY_COLOR_ADD,
    ModulationVariant.OPACITY_COLOR_MUL,
)


@dataclass
class Modulation:
    """Per-Gaussian factors; ``opacity`` is (N,) and ``color`` is (N, 3), or None."""

    opacity: np.ndarray | None = None
    color: np.ndarray | None = None


def leaky_relu(x):
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x):
    return np.where(x >= 0, 1.0, LEAKY_SLOPE)


class TinyMLP:
    """Fully connected net: input -> 32 -> 32 -> output, LeakyReLU hidden units."""

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, output_dim: int, input_dim: int = 27, hidden: int = 32, seed: int | None = 0,
                 params: dict | None = None, dtype=np.float64):
        if output_dim not in (1, 3, 4):
            raise ValidationError(f"output_dim must be 1, 3 or 4, got {output_dim}")
        self.input_dim = input_dim
        self.hidden = hidden
        self.output_dim = output_dim
        if params is None:
            rng = np.random.default_rng(seed)

            def glorot(fan_in, fan_out):
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                return rng.uniform(-lim, lim, size=(fan_in, fan_out))

            params = {
                "w1": glorot(input_dim, hidden),
                "b1": np.zeros(hidden),
                "w2": glorot(hidden, hidden),
                "b2": np.zeros(hidden),
                "w3": np.zeros((hidden, output_dim)),
                "b3": np.zeros(output_dim),
            }
        expected = self.param_shapes()
        for name in self.PARAM_NAMES:
            if np.shape(params[name]) != expected[name]:
                raise ValidationError(f"{name}: expected shape {expected[name]}, got {np.shape(params[name])}")
        self.params = {k: np.array(params[k], dtype=dtype) for k in self.PARAM_NAMES}
        self.n_evals = 0

    @classmethod
    def for_variant(cls, variant, seed=0, **kw) -> "TinyMLP":
        variant = ModulationVariant.parse(variant)
        return cls(max(variant.output_dim, 1), seed=seed, **kw)

    def param_shapes(self):
        h, i, o = self.hidden, self.input_dim, self.output_dim
        return {"w1": (i, h), "b1": (h,), "w2": (h, h), "b2": (h,), "w3": (h, o), "b3": (o,)}

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def copy(self) -> "TinyMLP":
        return TinyMLP(self.output_dim, self.input_dim, self.hidden,
                       params={k: v.copy() for k, v in self.params.items()}, dtype=self.params["w1"].dtype)

    def astype(self, dtype) -> "TinyMLP":
        return TinyMLP(self.output_dim, self.input_dim, self.hidden, params=self.params, dtype=dtype)

    def _inputs(self, features, dirs):
        features = np.asarray(features)
        dirs = np.asarray(dirs)
        if features.ndim != 2 or dirs.ndim != 2 or dirs.shape[1] != 3 or len(features) != len(dirs):
            raise ValidationError(f"bad input shapes: features {features.shape}, dirs {dirs.shape}")
        if features.shape[1] + 3 != self.input_dim:
            raise ValidationError(
                f"network expects {self.input_dim - 3} features + 3 direction components, "
                f"got {features.shape[1]} features"
            )
        return np.concatenate([features, dirs], axis=1).astype(self.params["w1"].dtype, copy=False)

    def forward(self, features, dirs, cache: bool = False):
        """Raw (pre-activation) outputs, shape (N, output_dim)."""
        self.n_evals += 1
        p = self.params
        x = self._inputs(features, dirs)
        z1 = x @ p["w1"] + p["b1"]
        h1 = leaky_relu(z1)
        z2 = h1 @ p["w2"] + p["b2"]
        h2 = leaky_relu(z2)
        out = h2 @ p["w3"] + p["b3"]
        if cache:
            return out, (x, z1, h1, z2, h2)
        return out

    def backward(self, features, dirs, grad_out, cache=None):
        """Returns (param grads dict, grad_features, grad_dirs)."""
        p = self.params
        if cache is None:
            _, cache = self.forward(features, dirs, cache=True)
            self.n_evals -= 1
        x, z1, h1, z2, h2 = cache
        grads = {"w3": h2.T @ grad_out, "b3": grad_out.sum(axis=0)}
        g2 = (grad_out @ p["w3"].T) * leaky_relu_grad(z2)
        grads["w2"] = h1.T @ g2
        grads["b2"] = g2.sum(axis=0)
        g1 = (g2 @ p["w2"].T) * leaky_relu_grad(z1)
        grads["w1"] = x.T @ g1
        grads["b1"] = g1.sum(axis=0)
        gx = g1 @ p["w1"].T
        nf = self.input_dim - 3
        return {k: grads[k] for k in self.PARAM_NAMES}, gx[:, :nf], gx[:, nf:]


def _activate(raw, multiplicative):
    if multiplicative:
        return 2.0 * sigmoid(raw)
    return np.tanh(raw)


def _activate_grad(raw, multiplicative):
    if multiplicative:
        s = sigmoid(raw)
        return 2.0 * s * (1.0 - s)
    t = np.tanh(raw)
    return 1.0 - t * t


def split_outputs(variant: ModulationVariant, raw) -> Modulation:
    mult = variant.multiplicative
    act = _activate(raw, mult)
    if variant.modulates_opacity and variant.modulates_color:
        return Modulation(opacity=act[:, 0], color=act[:, 1:4])
    if variant.modulates_opacity:
        return Modulation(opacity=act[:, 0])
    return Modulation(color=act[:, 0:3])


def identity_modulation(n: int, dtype=np.float64) -> Modulation:
    return Modulation(opacity=np.ones(n, dtype), color=np.zeros((n, 3), dtype))


def modulate_batch(mlp: TinyMLP | None, variant, features, dirs, cache: bool = False):
    """Vectorized ``modulate``. With ``cache`` also returns backward state."""
    variant = ModulationVariant.parse(variant)
    if variant is ModulationVariant.IDENTITY:
        mod = identity_modulation(len(dirs), np.asarray(dirs).dtype)
        return (mod, None) if cache else mod
    if mlp is None:
        raise ValidationError(f"variant {variant.value} needs a network")
    if mlp.output_dim != variant.output_dim:
        raise ValidationError(f"network has {mlp.output_dim} outputs but {variant.value} needs {variant.output_dim}")
    raw, net_cache = mlp.forward(features, dirs, cache=True)
    mod = split_outputs(variant, raw)
    return (mod, (raw, net_cache)) if cache else mod


def modulate(mlp: TinyMLP | None, variant, features, direction) -> Modulation:
    """Modulation for a single Gaussian (scalar opacity factor, rgb color factor).

    Identity returns opacity factor 1 and color offset 0 without touching the network.
    """
    variant = ModulationVariant.parse(variant)
    feats = np.asarray(features, dtype=np.float64).reshape(1, -1)
    d = np.asarray(direction, dtype=np.float64).reshape(1, -1)
    if variant is not ModulationVariant.IDENTITY and (feats.shape[1] + d.shape[1] != mlp.input_dim or d.shape[1] != 3):
        raise ValidationError(f"expected {mlp.input_dim - 3} features and a 3-vector direction")
    m = modulate_batch(mlp, variant, feats, d)
    if variant is ModulationVariant.IDENTITY:
        return Modulation(opacity=1.0, color=np.zeros(3))
    return Modulation(
        opacity=None if m.opacity is None else float(m.opacity[0]),
        color=None if m.color is None else m.color[0],
    )


def apply_modulation_batch(variant, opacity, rgb, mod: Modulation):
    """Returns modulated (opacity, rgb) for (N,) opacities and (N, 3) base colors."""
    variant = ModulationVariant.parse(variant)
    if variant is ModulationVariant.IDENTITY:
        return opacity, rgb
    op, col = opacity, rgb
    if variant.modulates_opacity:
        op = np.clip(opacity * mod.opacity if variant.multiplicative else opacity + mod.opacity, 0.0, 1.0)
    if variant.modulates_color:
        col = np.maximum(rgb * mod.color if variant.multiplicative else rgb + mod.color, 0.0)
    return op, col


def apply_modulation(variant, opacity, rgb, mod: Modulation):
    variant = ModulationVariant.parse(variant)
    m = Modulation(
        opacity=None if mod.opacity is None else np.atleast_1d(np.asarray(mod.opacity, dtype=np.float64)),
        color=None if mod.color is None else np.asarray(mod.color, dtype=np.float64).reshape(1, 3),
    )
    op, col = apply_modulation_batch(variant, np.atleast_1d(np.asarray(opacity, dtype=np.float64)),
                                     np.asarray(rgb, dtype=np.float64).reshape(1, 3), m)
    return float(op[0]), col[0]


def apply_modulation_backward(variant, opacity, rgb, mod: Modulation, grad_opacity, grad_rgb):
    """Adjoint of ``apply_modulation_batch``.

    Returns (grad_opacity_in, grad_rgb_in, grad_mod_opacity, grad_mod_color);
    clamped entries pass no gradient.
    """
    variant = ModulationVariant.parse(variant)
    if variant is ModulationVariant.IDENTITY:
        return grad_opacity, grad_rgb, None, None
    g_op, g_rgb, g_mo, g_mc = grad_opacity, grad_rgb, None, None
    if variant.modulates_opacity:
        pre = opacity * mod.opacity if variant.multiplicative else opacity + mod.opacity
        g = np.where((pre >= 0.0) & (pre <= 1.0), grad_opacity, 0.0)
        if variant.multiplicative:
            g_op, g_mo = g * mod.opacity, g * opacity
        else:
            g_op, g_mo = g, g
    if variant.modulates_color:
        pre = rgb * mod.color if variant.multiplicative else rgb + mod.color
        g = np.where(pre >= 0.0, grad_rgb, 0.0)
        if variant.multiplicative:
            g_rgb, g_mc = g * mod.color, g * rgb
        else:
            g_rgb, g_mc = g, g
    return g_op, g_rgb, g_mo, g_mc


def modulation_raw_grad(variant, raw, grad_mod_opacity, grad_mod_color):
    """Chain the modulation-factor gradients through the output activations."""
    variant = ModulationVariant.parse(variant)
    act_grad = _activate_grad(raw, variant.multiplicative)
    g = np.zeros_like(raw)
    col = 0
    if variant.modulates_opacity:
        if grad_mod_opacity is not None:
            g[:, 0] = grad_mod_opacity
        col = 1
    if variant.modulates_color and grad_mod_color is not None:
        g[:, col:col + 3] = grad_mod_color
    return g * act_grad


def mlp_backward(mlp: TinyMLP, variant, features, dirs, grad_modulation: Modulation):
    """Batched adjoint of ``modulate_batch``: (param grads, grad_features, grad_dirs)."""
    variant = ModulationVariant.parse(variant)
    feats = np.atleast_2d(np.asarray(features, dtype=mlp.params["w1"].dtype))
    d = np.atleast_2d(np.asarray(dirs, dtype=mlp.params["w1"].dtype))
    if variant is ModulationVariant.IDENTITY:
        zeros = {k: np.zeros_like(v) for k, v in mlp.params.items()}
        return zeros, np.zeros_like(feats), np.zeros_like(d)
    raw, cache = mlp.forward(feats, d, cache=True)
    mlp.n_evals -= 1
    n = len(raw)
    go = None if grad_modulation.opacity is None else np.asarray(grad_modulation.opacity).reshape(n)
    gc = None if grad_modulation.color is None else np.asarray(grad_modulation.color).reshape(n, 3)
    g_raw = modulation_raw_grad(variant, raw, go, gc)
    return mlp.backward(feats, d, g_raw, cache=cache)
