"""Coordinate MLP with explicit backpropagation.

The network follows the classic radiance-field layout: an encoded 3-d
position runs through a skip-connected trunk, a density head reads the
trunk output, and the color head sees the trunk features concatenated
with the encoded view direction. A 2-d variant maps encoded pixel
coordinates straight to RGB for the fast proxy task.

Layers come in two flavours: plain dense layers, and factorized layers
``y = L (R x) + b`` where only ``L`` and ``b`` are learnable and ``R``
is frozen. Gradients are computed by hand; there is no autodiff.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NetArch",
    "DenseLayer",
    "FactorizedLayer",
    "NetworkParams",
    "FactorizedParams",
    "Adam",
    "DivergenceError",
    "positional_encode",
    "encoded_dim",
    "init_network",
    "mlp_forward",
    "mlp_backward",
    "forward",
    "desk_arch",
    "full_arch",
]

TAG_TRUNK = "trunk"
TAG_DENSITY = "density"
TAG_FEATURE = "feature"
TAG_COLOR = "color"


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite gradients."""


def positional_encode(p: np.ndarray, freqs: int, include_identity: bool) -> np.ndarray:
    """Sinusoidal features ``[p?, sin(2^j pi p_i), cos(2^j pi p_i), ...]``.

    The layout is coordinate-major: for each input coordinate, sin/cos
    pairs at frequencies ``2^0 pi .. 2^(F-1) pi``. Works on any leading
    batch shape.
    """
    p = np.asarray(p, dtype=np.float64)
    if freqs < 0:
        raise ValueError("frequency count must be non-negative")
    parts = [p] if include_identity else []
    if freqs > 0:
        bands = np.pi * (2.0 ** np.arange(freqs))
        angles = p[..., :, None] * bands  # (..., n, F)
        pairs = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
        parts.append(pairs.reshape(*p.shape[:-1], p.shape[-1] * 2 * freqs))
    if not parts:
        return np.zeros(p.shape[:-1] + (0,))
    return np.concatenate(parts, axis=-1)


def encoded_dim(n: int, freqs: int, include_identity: bool) -> int:
    return n * 2 * freqs + (n if include_identity else 0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class NetArch:
    """Shape of the coordinate MLP, shared by coarse and fine sub-networks."""

    task: str = "nerf3d"  # "nerf3d" or "image2d"
    trunk_depth: int = 4
    trunk_width: int = 64
    skip_layers: tuple[int, ...] = (2,)
    pos_freqs_x: int = 6
    pos_freqs_d: int = 3
    include_identity: bool = True
    use_fine: bool = False

    def __post_init__(self):
        if self.task not in ("nerf3d", "image2d"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.trunk_depth < 1 or self.trunk_width < 1:
            raise ValueError("trunk depth and width must be positive")
        for i in self.skip_layers:
            if not (1 <= i < self.trunk_depth):
                raise ValueError(f"skip index {i} outside (0, {self.trunk_depth})")

    @property
    def input_dim(self) -> int:
        return 3 if self.task == "nerf3d" else 2

    @property
    def enc_x_dim(self) -> int:
        return encoded_dim(self.input_dim, self.pos_freqs_x, self.include_identity)

    @property
    def enc_d_dim(self) -> int:
        return encoded_dim(3, self.pos_freqs_d, self.include_identity)

    @property
    def color_hidden_width(self) -> int:
        return self.trunk_width // 2

    def layer_dims(self) -> list[tuple[str, int, int]]:
        """Canonical (tag, out_dim, in_dim) sequence for one sub-network."""
        dims: list[tuple[str, int, int]] = []
        w = self.trunk_width
        for i in range(self.trunk_depth):
            in_dim = self.enc_x_dim if i == 0 else w
            if i in self.skip_layers:
                in_dim += self.enc_x_dim
            dims.append((TAG_TRUNK, w, in_dim))
        if self.task == "nerf3d":
            dims.append((TAG_DENSITY, 1, w))
            dims.append((TAG_FEATURE, w, w))
            dims.append((TAG_COLOR, self.color_hidden_width, w + self.enc_d_dim))
            dims.append((TAG_COLOR, 3, self.color_hidden_width))
        else:
            dims.append((TAG_COLOR, 3, w))
        return dims


def desk_arch(task: str = "nerf3d", use_fine: bool = False) -> NetArch:
    """Small preset suitable for 64x64 experiments on a CPU."""
    return NetArch(task=task, trunk_depth=4, trunk_width=64, skip_layers=(2,),
                   pos_freqs_x=6, pos_freqs_d=3, use_fine=use_fine)


def full_arch(task: str = "nerf3d", use_fine: bool = True) -> NetArch:
    """Preset matching the original radiance-field configuration."""
    return NetArch(task=task, trunk_depth=8, trunk_width=256, skip_layers=(5,),
                   pos_freqs_x=10, pos_freqs_d=4, use_fine=use_fine)


class DenseLayer:
    """Fully-connected layer ``y = x W^T + b`` with weight (u, v), bias (u,)."""

    __slots__ = ("weight", "bias", "tag")

    def __init__(self, weight: np.ndarray, bias: np.ndarray, tag: str):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")
        self.tag = tag

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def dense_weight(self) -> np.ndarray:
        return self.weight

    def forward(self, x: np.ndarray):
        return x @ self.weight.T + self.bias, x

    def vjp(self, ctx, dy: np.ndarray):
        x = ctx
        return (dy.T @ x, dy.sum(axis=0)), dy @ self.weight

    def learnable(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.tag)


class FactorizedLayer:
    """Low-rank layer ``y = (x R^T) L^T + b``; ``R`` is frozen, ``L``/``b`` learn."""

    __slots__ = ("left", "right", "bias", "tag")

    def __init__(self, left: np.ndarray, right: np.ndarray, bias: np.ndarray, tag: str):
        self.left = np.asarray(left, dtype=np.float64)
        self.right = np.asarray(right, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if (self.left.ndim != 2 or self.right.ndim != 2
                or self.left.shape[1] != self.right.shape[0]
                or self.bias.shape != (self.left.shape[0],)):
            raise ValueError(
                f"bad factor shapes L{self.left.shape} R{self.right.shape} b{self.bias.shape}")
        self.tag = tag

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    @property
    def out_dim(self) -> int:
        return self.left.shape[0]

    @property
    def in_dim(self) -> int:
        return self.right.shape[1]

    def dense_weight(self) -> np.ndarray:
        return self.left @ self.right

    def forward(self, x: np.ndarray):
        z = x @ self.right.T
        return z @ self.left.T + self.bias, z

    def vjp(self, ctx, dy: np.ndarray):
        z = ctx
        return (dy.T @ z, dy.sum(axis=0)), (dy @ self.left) @ self.right

    def learnable(self) -> list[np.ndarray]:
        return [self.left, self.bias]

    def copy(self) -> "FactorizedLayer":
        # The frozen factor is shared deliberately: it is never mutated.
        return FactorizedLayer(self.left.copy(), self.right, self.bias.copy(), self.tag)


def _validate_layers(layers, arch: NetArch) -> None:
    dims = arch.layer_dims()
    if len(layers) != len(dims):
        raise ValueError(f"expected {len(dims)} layers, got {len(layers)}")
    for layer, (tag, u, v) in zip(layers, dims):
        if layer.tag != tag or layer.out_dim != u or layer.in_dim != v:
            raise ValueError(
                f"layer mismatch: got tag={layer.tag} ({layer.out_dim}x{layer.in_dim}), "
                f"expected tag={tag} ({u}x{v})")


class _ParamsBase:
    """Shared behaviour of dense and factorized model containers."""

    coarse: list
    fine: list | None
    arch: NetArch

    def sub_networks(self):
        yield "coarse", self.coarse
        if self.fine is not None:
            yield "fine", self.fine

    def all_layers(self) -> list:
        return list(self.coarse) + (list(self.fine) if self.fine is not None else [])

    def learnable_tensors(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.all_layers():
            out.extend(layer.learnable())
        return out

    def copy(self):
        return type(self)(
            coarse=[l.copy() for l in self.coarse],
            fine=[l.copy() for l in self.fine] if self.fine is not None else None,
            arch=self.arch,
        )


@dataclass
class NetworkParams(_ParamsBase):
    """Full dense model: ordered tagged layers for coarse (and optional fine)."""

    coarse: list[DenseLayer]
    fine: list[DenseLayer] | None
    arch: NetArch

    def __post_init__(self):
        _validate_layers(self.coarse, self.arch)
        if self.arch.use_fine != (self.fine is not None):
            raise ValueError("fine sub-network presence must match arch.use_fine")
        if self.fine is not None:
            _validate_layers(self.fine, self.arch)


@dataclass
class FactorizedParams(_ParamsBase):
    """Factorized model: learnable left factors and biases over frozen rights."""

    coarse: list[FactorizedLayer]
    fine: list[FactorizedLayer] | None
    arch: NetArch

    def __post_init__(self):
        _validate_layers(self.coarse, self.arch)
        if self.arch.use_fine != (self.fine is not None):
            raise ValueError("fine sub-network presence must match arch.use_fine")
        if self.fine is not None:
            _validate_layers(self.fine, self.arch)

    def ranks(self) -> list[int]:
        return [layer.rank for layer in self.all_layers()]

    def frozen_tensors(self) -> list[np.ndarray]:
        return [layer.right for layer in self.all_layers()]


def _init_sub_network(arch: NetArch, rng: np.random.Generator) -> list[DenseLayer]:
    layers = []
    for tag, u, v in arch.layer_dims():
        limit = np.sqrt(6.0 / (u + v))
        weight = rng.uniform(-limit, limit, size=(u, v))
        layers.append(DenseLayer(weight, np.zeros(u), tag))
    return layers


def init_network(arch: NetArch, rng: np.random.Generator) -> NetworkParams:
    """Glorot-uniform weights, zero biases; fine net drawn after coarse."""
    coarse = _init_sub_network(arch, rng)
    fine = _init_sub_network(arch, rng) if arch.use_fine else None
    return NetworkParams(coarse=coarse, fine=fine, arch=arch)


def mlp_forward(layers, arch: NetArch, x: np.ndarray, d: np.ndarray | None = None,
                want_ctx: bool = False):
    """Run one sub-network on a batch.

    For nerf3d returns ``(sigma (N,), rgb (N, 3), ctx)``; for image2d
    sigma is None. ``ctx`` holds everything :func:`mlp_backward` needs
    and is None unless requested.
    """
    enc_x = positional_encode(x, arch.pos_freqs_x, arch.include_identity)
    depth = arch.trunk_depth
    trunk_ctx = []
    h = enc_x
    for i in range(depth):
        inp = np.concatenate([h, enc_x], axis=-1) if i in arch.skip_layers else h
        pre, layer_ctx = layers[i].forward(inp)
        trunk_ctx.append((layer_ctx, pre))
        h = np.maximum(pre, 0.0)

    if arch.task == "image2d":
        rgb_pre, rgb_ctx = layers[depth].forward(h)
        rgb = _sigmoid(rgb_pre)
        ctx = {"trunk": trunk_ctx, "rgb": (rgb_ctx, rgb)} if want_ctx else None
        return None, rgb, ctx

    if d is None:
        raise ValueError("nerf3d forward requires view directions")
    sigma_pre, sigma_ctx = layers[depth].forward(h)
    sigma = _softplus(sigma_pre[..., 0])
    feat, feat_ctx = layers[depth + 1].forward(h)
    enc_d = positional_encode(d, arch.pos_freqs_d, arch.include_identity)
    color_in = np.concatenate([feat, enc_d], axis=-1)
    hid_pre, hid_ctx = layers[depth + 2].forward(color_in)
    hid = np.maximum(hid_pre, 0.0)
    rgb_pre, rgb_ctx = layers[depth + 3].forward(hid)
    rgb = _sigmoid(rgb_pre)
    ctx = None
    if want_ctx:
        ctx = {
            "trunk": trunk_ctx,
            "sigma": (sigma_ctx, sigma_pre),
            "feat": feat_ctx,
            "hid": (hid_ctx, hid_pre),
            "rgb": (rgb_ctx, rgb),
        }
    return sigma, rgb, ctx


def mlp_backward(layers, arch: NetArch, ctx, d_sigma: np.ndarray | None,
                 d_rgb: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of a scalar loss w.r.t. each layer's learnable tensors.

    ``d_sigma`` / ``d_rgb`` are the loss gradients at the network
    outputs. Returns one ``(d_weight_or_left, d_bias)`` pair per layer
    in layer order.
    """
    depth = arch.trunk_depth
    grads: list = [None] * len(layers)

    rgb_ctx, rgb = ctx["rgb"]
    d_rgb_pre = d_rgb * rgb * (1.0 - rgb)  # sigmoid'

    if arch.task == "image2d":
        grads[depth], dh = layers[depth].vjp(rgb_ctx, d_rgb_pre)
    else:
        grads[depth + 3], d_hid = layers[depth + 3].vjp(rgb_ctx, d_rgb_pre)
        hid_ctx, hid_pre = ctx["hid"]
        d_hid_pre = d_hid * (hid_pre > 0)
        grads[depth + 2], d_color_in = layers[depth + 2].vjp(hid_ctx, d_hid_pre)
        d_feat = d_color_in[:, : arch.trunk_width]
        grads[depth + 1], dh_feat = layers[depth + 1].vjp(ctx["feat"], d_feat)

        sigma_ctx, sigma_pre = ctx["sigma"]
        if d_sigma is None:
            d_sigma = np.zeros(sigma_pre.shape[0])
        d_sigma_pre = (d_sigma * _sigmoid(sigma_pre[..., 0]))[:, None]  # softplus'
        grads[depth], dh_sigma = layers[depth].vjp(sigma_ctx, d_sigma_pre)
        dh = dh_feat + dh_sigma

    for i in reversed(range(depth)):
        layer_ctx, pre = ctx["trunk"][i]
        d_pre = dh * (pre > 0)
        grads[i], d_inp = layers[i].vjp(layer_ctx, d_pre)
        if i in arch.skip_layers:
            d_inp = d_inp[:, : -arch.enc_x_dim]  # encoded input is not learnable
        dh = d_inp
    return grads


def forward(params: _ParamsBase, x: np.ndarray, d: np.ndarray | None = None):
    """Evaluate the coarse sub-network at points ``x`` (and directions ``d``).

    Accepts single vectors or batches; returns ``(sigma, rgb)`` with
    sigma None for the 2-d task.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    db = None
    if d is not None:
        d = np.asarray(d, dtype=np.float64)
        db = d[None, :] if d.ndim == 1 else d
    sigma, rgb, _ = mlp_forward(params.coarse, params.arch, xb, db)
    if single:
        return (None if sigma is None else float(sigma[0])), rgb[0]
    return sigma, rgb


class Adam(object):
    """Adam over a flat list of parameter tensors, updated in place."""

    def __init__(self, tensors: list[np.ndarray], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7,
                 lr_decay: float = 1.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_decay = lr_decay  # per-step multiplicative factor, 1.0 = off
        self.step_count = 0
        self.m = [np.zeros_like(t) for t in tensors]
        self.v = [np.zeros_like(t) for t in tensors]

    def step(self, tensors: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(tensors) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("tensor/gradient count does not match optimizer state")
        self.step_count += 1
        t = self.step_count
        lr_t = self.lr * self.lr_decay ** (t - 1)
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for param, grad, m, v in zip(tensors, grads, self.m, self.v):
            if param.shape != grad.shape:
                raise ValueError(f"gradient shape {grad.shape} != parameter {param.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def check_finite_grads(grads, where: str) -> None:
    """Abort with a diagnostic if any gradient entry is non-finite."""
    for i, pair in enumerate(grads):
        for g in pair:
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in layer {i} during {where}")


def clone_params(params):
    return copy.deepcopy(params)
