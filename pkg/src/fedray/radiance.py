"""Rays, volume rendering, training loops, and synthetic data.

A scene is any callable mapping points and view directions to density
and color; both the coordinate MLP and the analytic ground-truth fields
used by the dataset generator satisfy that interface, so generated
images and model renders go through the identical compositing path.

Two tasks share the training and federation machinery: ``nerf3d``
(volume-rendered rays against posed images) and ``image2d`` (a fast
proxy that regresses pixel colors directly from encoded 2-d
coordinates, no compositing).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .net import (
    Adam,
    FactorizedParams,
    NetArch,
    check_finite_grads,
    mlp_backward,
    mlp_forward,
)

__all__ = [
    "PosedImage",
    "ClientDataset",
    "Ray",
    "RenderOptions",
    "TrainOptions",
    "Primitive",
    "SceneSpec",
    "GeneratedScene",
    "generate_ray",
    "stratified_samples",
    "stratified_depths",
    "composite",
    "hierarchical_samples",
    "render_image",
    "render_view",
    "train",
    "sparse_train",
    "generate_synthetic_scene",
    "desk_scene",
    "make_task",
    "write_ppm",
    "read_ppm",
    "read_ppm_bytes",
    "load_dataset",
    "evaluate_mse",
]


# ---------------------------------------------------------------------------
# domain types

@dataclass
class PosedImage:
    """One training or validation view: pixels plus camera geometry.

    ``pose`` is the 3x4 camera-to-world matrix; ``stored_bytes`` is the
    size of the encoded file on disk, which is what dataset-upload
    accounting counts.
    """

    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    pose: np.ndarray  # (3, 4)
    focal: float
    cx: float
    cy: float
    stored_bytes: int
    name: str = ""
    path: Path | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (3, 4):
            raise ValueError(f"pose must be 3x4, got {self.pose.shape}")
        rot = self.pose[:, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")
        if self.stored_bytes <= 0:
            raise ValueError("stored_bytes must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class ClientDataset:
    """The posed images held by one client."""

    images: list[PosedImage]
    id: int

    def __post_init__(self):
        if not self.images:
            raise ValueError(f"client {self.id} dataset is empty")

    @property
    def total_bytes(self) -> int:
        return sum(img.stored_bytes for img in self.images)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"near {self.near} must be < far {self.far}")
        if not np.isclose(np.linalg.norm(self.direction), 1.0, atol=1e-9):
            raise ValueError("ray direction must be unit length")


@dataclass(frozen=True)
class RenderOptions:
    """Sampling and compositing knobs shared by training and rendering."""

    near: float = 0.5
    far: float = 4.5
    n_coarse: int = 32
    n_fine: int = 0
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    delta_cap: float = 1e10
    chunk: int = 4096
    eps_floor: float = 1e-5


@dataclass(frozen=True)
class TrainOptions:
    batch_size: int = 256
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    lr_decay: float = 1.0


# ---------------------------------------------------------------------------
# rays and sampling

def camera_ray_dirs(pose: np.ndarray, focal: float, cx: float, cy: float,
                    px: np.ndarray) -> np.ndarray:
    """World-space unit directions for pixel coordinates ``px`` (N, 2)."""
    px = np.asarray(px, dtype=np.float64)
    cam = np.stack([
        (px[..., 0] - cx) / focal,
        -(px[..., 1] - cy) / focal,
        -np.ones(px.shape[:-1]),
    ], axis=-1)
    world = cam @ pose[:, :3].T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def generate_ray(img: PosedImage, px, near: float = 0.5, far: float = 4.5) -> Ray:
    """Pinhole ray through pixel ``px = (x, y)`` of a posed image."""
    x, y = float(px[0]), float(px[1])
    if not (0 <= x < img.width and 0 <= y < img.height):
        raise ValueError(f"pixel ({x}, {y}) outside {img.width}x{img.height} image")
    direction = camera_ray_dirs(img.pose, img.focal, img.cx, img.cy,
                                np.array([[x, y]]))[0]
    return Ray(origin=img.pose[:, 3].copy(), direction=direction, near=near, far=far)


def stratified_depths(near: float, far: float, n: int, n_rays: int,
                      rng: np.random.Generator | None) -> np.ndarray:
    """One depth per equal-width bin of [near, far] for each ray.

    With ``rng=None`` the midpoint rule is used, which makes rendering
    deterministic.
    """
    if n < 1:
        raise ValueError("need at least one sample per ray")
    step = (far - near) / n
    offsets = rng.uniform(size=(n_rays, n)) if rng is not None else np.full((n_rays, n), 0.5)
    return near + (np.arange(n) + offsets) * step


def stratified_samples(ray: Ray, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """Spec'd single-ray form of :func:`stratified_depths`."""
    return stratified_depths(ray.near, ray.far, n, 1, rng)[0]


def composite(sigmas: np.ndarray, colors: np.ndarray, depths: np.ndarray,
              background=(1.0, 1.0, 1.0), delta_cap: float = 1e10,
              want_ctx: bool = False):
    """Alpha-composite samples along rays.

    ``alpha_i = 1 - exp(-sigma_i * delta_i)`` with the last interval set
    to ``delta_cap``; the residual transmittance is filled with the
    background color. Accepts single rays or (R, S) batches. Returns
    ``(rgb, weights, opacity)`` plus a backward context if requested.
    """
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    depths = np.atleast_2d(np.asarray(depths, dtype=np.float64))
    colors = np.asarray(colors, dtype=np.float64)
    single = colors.ndim == 2
    if single:
        colors = colors[None]
    bg = np.asarray(background, dtype=np.float64)

    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=-1)
    deltas[:, -1] = delta_cap
    a = sigmas * deltas
    alpha = -np.expm1(-a)
    # exclusive prefix sum; subtracting a from the inclusive sum would
    # cancel catastrophically against the huge capped last interval
    excl = np.concatenate([np.zeros((a.shape[0], 1)), np.cumsum(a[:, :-1], axis=-1)],
                          axis=-1)
    trans = np.exp(-excl)  # transmittance before each sample
    weights = trans * alpha
    opacity = weights.sum(axis=-1)
    rgb = (weights[..., None] * colors).sum(axis=-2) + (1.0 - opacity)[..., None] * bg

    ctx = None
    if want_ctx:
        ctx = {"deltas": deltas, "trans_next": trans * (1.0 - alpha),
               "weights": weights, "colors": colors, "bg": bg}
    if single:
        return rgb[0], weights[0], float(opacity[0]), ctx
    return rgb, weights, opacity, ctx


def composite_backward(ctx, d_rgb: np.ndarray):
    """Gradients of the composited color w.r.t. per-sample sigma and color.

    Treats depths as constants (sample placement carries no gradient).
    """
    weights = ctx["weights"]
    d_colors = weights[..., None] * d_rgb[..., None, :]
    d_weights = ((ctx["colors"] - ctx["bg"]) * d_rgb[..., None, :]).sum(axis=-1)
    g = d_weights * weights
    suffix = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1) - g
    d_a = d_weights * ctx["trans_next"] - suffix
    d_sigmas = d_a * ctx["deltas"]
    return d_sigmas, d_colors


def hierarchical_samples(weights: np.ndarray, bin_edges: np.ndarray, n_fine: int,
                         rng: np.random.Generator | None,
                         eps_floor: float = 1e-5) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant PDF over coarse bins.

    Weights get a small floor so a degenerate (all-zero) distribution
    falls back to uniform. Returns sorted fine depths, shape (R, n_fine);
    callers merge them with the coarse depths.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim == 1:
        edges = np.broadcast_to(edges, (weights.shape[0], edges.shape[0]))
    n_rays, n_bins = weights.shape
    w = np.clip(weights, 0.0, None) + eps_floor
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0

    offsets = rng.uniform(size=(n_rays, n_fine)) if rng is not None \
        else np.full((n_rays, n_fine), 0.5)
    u = (np.arange(n_fine) + offsets) / n_fine

    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=-1) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    rows = np.arange(n_rays)[:, None]
    lo, hi = cdf[rows, idx], cdf[rows, idx + 1]
    frac = (u - lo) / np.maximum(hi - lo, 1e-12)
    t = edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])
    return np.sort(t, axis=-1)


def _bin_edges(near: float, far: float, n: int) -> np.ndarray:
    return np.linspace(near, far, n + 1)


def render_rays(field, rays_o: np.ndarray, rays_d: np.ndarray,
                options: RenderOptions, rng: np.random.Generator | None = None,
                fine_field=None) -> np.ndarray:
    """Composite a batch of rays through ``field`` (and optionally a fine field)."""
    depths = stratified_depths(options.near, options.far, options.n_coarse,
                               rays_o.shape[0], rng)
    pts = rays_o[:, None, :] + depths[..., None] * rays_d[:, None, :]
    dirs = np.broadcast_to(rays_d[:, None, :], pts.shape)
    sigma, rgb = field(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    sigma = sigma.reshape(depths.shape)
    rgb = rgb.reshape(depths.shape + (3,))
    out, weights, _, _ = composite(sigma, rgb, depths, options.background,
                                   options.delta_cap)
    if options.n_fine > 0:
        fine = hierarchical_samples(weights, _bin_edges(options.near, options.far,
                                                        options.n_coarse),
                                    options.n_fine, rng, options.eps_floor)
        merged = np.sort(np.concatenate([depths, fine], axis=-1), axis=-1)
        pts = rays_o[:, None, :] + merged[..., None] * rays_d[:, None, :]
        dirs = np.broadcast_to(rays_d[:, None, :], pts.shape)
        f = fine_field if fine_field is not None else field
        sigma, rgb = f(pts.reshape(-1, 3), dirs.reshape(-1, 3))
        out, _, _, _ = composite(sigma.reshape(merged.shape),
                                 rgb.reshape(merged.shape + (3,)), merged,
                                 options.background, options.delta_cap)
    return out


def render_image(field, pose: np.ndarray, focal: float, cx: float, cy: float,
                 width: int, height: int, options: RenderOptions,
                 rng: np.random.Generator | None = None, fine_field=None) -> np.ndarray:
    """Per-pixel render of a full view; deterministic when ``rng`` is None."""
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    px = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    dirs = camera_ray_dirs(pose, focal, cx, cy, px)
    origin = np.broadcast_to(pose[:, 3], dirs.shape)
    out = np.empty((height * width, 3))
    for start in range(0, dirs.shape[0], options.chunk):
        sl = slice(start, start + options.chunk)
        out[sl] = render_rays(field, origin[sl], dirs[sl], options, rng, fine_field)
    return out.reshape(height, width, 3)


# ---------------------------------------------------------------------------
# tasks

def field_from_layers(layers, arch: NetArch):
    def field(pts, dirs):
        sigma, rgb, _ = mlp_forward(layers, arch, pts, dirs)
        return sigma, rgb
    return field


class Nerf3dTask:
    """Volume-rendered training against posed images."""

    name = "nerf3d"

    def __init__(self, options: RenderOptions):
        self.options = options

    def loss_and_grads(self, params, img: PosedImage, px: np.ndarray,
                       rng: np.random.Generator | None):
        opts = self.options
        rays_d = camera_ray_dirs(img.pose, img.focal, img.cx, img.cy, px)
        rays_o = np.broadcast_to(img.pose[:, 3], rays_d.shape)
        targets = img.pixels[px[:, 1].astype(int), px[:, 0].astype(int)]

        depths = stratified_depths(opts.near, opts.far, opts.n_coarse,
                                   rays_d.shape[0], rng)
        loss, grads_c, weights = self._sub_loss(params.coarse, params.arch, rays_o,
                                                rays_d, depths, targets)
        grads = grads_c
        if params.fine is not None:
            n_fine = opts.n_fine if opts.n_fine > 0 else opts.n_coarse
            fine = hierarchical_samples(weights, _bin_edges(opts.near, opts.far,
                                                            opts.n_coarse),
                                        n_fine, rng, opts.eps_floor)
            merged = np.sort(np.concatenate([depths, fine], axis=-1), axis=-1)
            fine_loss, grads_f, _ = self._sub_loss(params.fine, params.arch, rays_o,
                                                   rays_d, merged, targets)
            loss += fine_loss  # coarse and fine MSEs are summed
            grads = grads_c + grads_f
        return loss, grads

    def _sub_loss(self, layers, arch, rays_o, rays_d, depths, targets):
        opts = self.options
        pts = rays_o[:, None, :] + depths[..., None] * rays_d[:, None, :]
        dirs = np.broadcast_to(rays_d[:, None, :], pts.shape)
        sigma_flat, rgb_flat, net_ctx = mlp_forward(
            layers, arch, pts.reshape(-1, 3), dirs.reshape(-1, 3), want_ctx=True)
        sigma = sigma_flat.reshape(depths.shape)
        colors = rgb_flat.reshape(depths.shape + (3,))
        rgb, weights, _, ctx = composite(sigma, colors, depths, opts.background,
                                         opts.delta_cap, want_ctx=True)
        resid = rgb - targets
        loss = float(np.mean(resid ** 2))
        d_rgb = 2.0 * resid / resid.size
        d_sigma, d_colors = composite_backward(ctx, d_rgb)
        grads = mlp_backward(layers, arch, net_ctx, d_sigma.ravel(),
                             d_colors.reshape(-1, 3))
        return loss, grads, weights

    def render_view(self, params, img: PosedImage,
                    rng: np.random.Generator | None = None) -> np.ndarray:
        coarse = field_from_layers(params.coarse, params.arch)
        fine = field_from_layers(params.fine, params.arch) if params.fine is not None else None
        opts = self.options
        if params.fine is not None and opts.n_fine == 0:
            opts = replace(opts, n_fine=opts.n_coarse)
        return render_image(coarse, img.pose, img.focal, img.cx, img.cy,
                            img.width, img.height, opts, rng, fine)


class Image2dTask:
    """Direct pixel regression from encoded 2-d coordinates.

    Each view is a square window of a flat scene; the pose translation
    holds the window origin and the focal length is pixels-per-unit, so
    pixel (x, y) maps to coordinates
    ``(t_x + (x + 0.5 - cx) / f, t_y + (y + 0.5 - cy) / f)``.
    """

    name = "image2d"

    def __init__(self, options: RenderOptions):
        self.options = options

    @staticmethod
    def pixel_coords(img: PosedImage, px: np.ndarray) -> np.ndarray:
        return np.stack([
            img.pose[0, 3] + (px[:, 0] + 0.5 - img.cx) / img.focal,
            img.pose[1, 3] + (px[:, 1] + 0.5 - img.cy) / img.focal,
        ], axis=-1)

    def loss_and_grads(self, params, img: PosedImage, px: np.ndarray,
                       rng: np.random.Generator | None):
        coords = self.pixel_coords(img, px)
        targets = img.pixels[px[:, 1].astype(int), px[:, 0].astype(int)]
        grads_all = []
        loss = 0.0
        for _, layers in params.sub_networks():
            _, rgb, ctx = mlp_forward(layers, params.arch, coords, want_ctx=True)
            resid = rgb - targets
            loss += float(np.mean(resid ** 2))
            grads_all += mlp_backward(layers, params.arch, ctx, None,
                                      2.0 * resid / resid.size)
        return loss, grads_all

    def render_view(self, params, img: PosedImage,
                    rng: np.random.Generator | None = None) -> np.ndarray:
        ys, xs = np.meshgrid(np.arange(img.height), np.arange(img.width), indexing="ij")
        px = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
        coords = self.pixel_coords(img, px)
        _, rgb, _ = mlp_forward(params.coarse, params.arch, coords)
        return rgb.reshape(img.height, img.width, 3)


def make_task(arch_or_name, options: RenderOptions):
    name = arch_or_name.task if isinstance(arch_or_name, NetArch) else arch_or_name
    if name == "nerf3d":
        return Nerf3dTask(options)
    if name == "image2d":
        return Image2dTask(options)
    raise ValueError(f"unknown task {name!r}")


# ---------------------------------------------------------------------------
# training loops

def _train_loop(params, images: list[PosedImage], iters: int,
                rng: np.random.Generator, task, options: TrainOptions,
                adam: Adam | None = None):
    if not images:
        raise ValueError("cannot train on an empty dataset")
    if iters < 0:
        raise ValueError("iteration count must be non-negative")
    if adam is None:
        adam = Adam(params.learnable_tensors(), lr=options.lr, beta1=options.beta1,
                    beta2=options.beta2, eps=options.eps, lr_decay=options.lr_decay)
    for _ in range(iters):
        img = images[int(rng.integers(len(images)))]
        flat = rng.integers(0, img.height * img.width, size=options.batch_size)
        px = np.stack([flat % img.width, flat // img.width], axis=-1).astype(np.float64)
        _, grads = task.loss_and_grads(params, img, px, rng)
        check_finite_grads(grads, "training")
        adam.step(params.learnable_tensors(), [g for pair in grads for g in pair])
    return params


def train(params, datasets: list[ClientDataset], iters: int,
          rng: np.random.Generator, task, options: TrainOptions = TrainOptions()):
    """Centralized training on the union of datasets with a fresh optimizer."""
    images = [img for ds in datasets for img in ds.images]
    return _train_loop(params, images, iters, rng, task, options)


def sparse_train(params: FactorizedParams, dataset: ClientDataset, iters: int,
                 rng: np.random.Generator, task,
                 options: TrainOptions = TrainOptions(),
                 adam: Adam | None = None) -> FactorizedParams:
    """Client-side training that updates only the left factors and biases.

    Pass the same ``adam`` across merge rounds to keep optimizer state;
    the frozen right factors are untouched by construction.
    """
    return _train_loop(params, dataset.images, iters, rng, task, options, adam)


def evaluate_mse(params, images: list[PosedImage], task) -> float:
    total = 0.0
    for img in images:
        rendered = task.render_view(params, img)
        total += float(np.mean((rendered - img.pixels) ** 2))
    return total / len(images)


# ---------------------------------------------------------------------------
# analytic scenes

@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" or "box"
    center: tuple[float, float, float]
    extent: tuple[float, ...]  # (radius,) or (hx, hy, hz)
    color: tuple[float, float, float]
    density: float = 30.0
    softness: float = 0.03


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...] = ()
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)


def desk_scene() -> SceneSpec:
    return SceneSpec(primitives=(
        Primitive("sphere", (0.0, 0.0, 0.0), (0.26,), (0.85, 0.3, 0.2)),
        Primitive("sphere", (0.3, 0.18, 0.12), (0.11,), (0.2, 0.45, 0.9)),
        Primitive("box", (-0.26, -0.2, -0.08), (0.13, 0.1, 0.16), (0.25, 0.7, 0.3)),
        Primitive("sphere", (-0.1, 0.3, -0.2), (0.09,), (0.95, 0.8, 0.2)),
    ))


def _signed_distance(prim: Primitive, pts: np.ndarray) -> np.ndarray:
    rel = pts - np.asarray(prim.center)
    if prim.kind == "sphere":
        return np.linalg.norm(rel, axis=-1) - prim.extent[0]
    if prim.kind == "box":
        q = np.abs(rel) - np.asarray(prim.extent)
        outside = np.linalg.norm(np.clip(q, 0.0, None), axis=-1)
        inside = np.clip(q.max(axis=-1), None, 0.0)
        return outside + inside
    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def _coverage(sd: np.ndarray, softness: float) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(-0.5 * sd / softness))


def scene_field(spec: SceneSpec):
    """Analytic (sigma, rgb) field over 3-d points; directions are ignored."""
    def field(pts, dirs):
        pts = np.asarray(pts, dtype=np.float64)
        sigma = np.zeros(pts.shape[0])
        color_acc = np.zeros((pts.shape[0], 3))
        for prim in spec.primitives:
            contrib = prim.density * _coverage(_signed_distance(prim, pts), prim.softness)
            sigma += contrib
            color_acc += contrib[:, None] * np.asarray(prim.color)
        rgb = np.where(sigma[:, None] > 1e-12,
                       color_acc / np.maximum(sigma[:, None], 1e-12),
                       np.asarray(spec.background))
        return sigma, rgb
    return field


def scene_image_2d(spec: SceneSpec, coords: np.ndarray) -> np.ndarray:
    """Flat z=0 slice of the scene, painter-composited over the background."""
    coords = np.asarray(coords, dtype=np.float64)
    pts = np.concatenate([coords, np.zeros((coords.shape[0], 1))], axis=-1)
    out = np.broadcast_to(np.asarray(spec.background), (coords.shape[0], 3)).copy()
    for prim in spec.primitives:
        a = _coverage(_signed_distance(prim, pts), prim.softness)[:, None]
        out = a * np.asarray(prim.color) + (1.0 - a) * out
    return out


def parse_scene_file(path: Path) -> SceneSpec:
    prims: list[Primitive] = []
    background = (1.0, 1.0, 1.0)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "background":
                background = tuple(float(v) for v in parts[1:4])
            elif parts[0] == "sphere":
                v = [float(x) for x in parts[1:]]
                prims.append(Primitive("sphere", tuple(v[0:3]), (v[3],),
                                       tuple(v[4:7]), *v[7:9]))
            elif parts[0] == "box":
                v = [float(x) for x in parts[1:]]
                prims.append(Primitive("box", tuple(v[0:3]), tuple(v[3:6]),
                                       tuple(v[6:9]), *v[9:11]))
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: bad scene line: {exc}") from exc
    return SceneSpec(primitives=tuple(prims), background=background)


# ---------------------------------------------------------------------------
# image and pose files

def quantize8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def write_ppm(path: Path, img: np.ndarray) -> int:
    """Write an 8-bit binary PPM (P6); returns the byte count on disk."""
    h, w = img.shape[:2]
    data = (np.round(np.clip(img, 0.0, 1.0) * 255.0)).astype(np.uint8)
    payload = f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()
    Path(path).write_bytes(payload)
    return len(payload)


def read_ppm(path: Path) -> np.ndarray:
    return read_ppm_bytes(Path(path).read_bytes(), str(path))


def read_ppm_bytes(data: bytes, origin: str = "<bytes>") -> np.ndarray:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{origin}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after maxval
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raster.reshape(h, w, 3).astype(np.float64) / 255.0


def write_poses(path: Path, images: list[PosedImage]) -> None:
    lines = []
    for img in images:
        vals = list(img.pose.ravel()) + [img.focal, img.cx, img.cy]
        lines.append(img.name + " " + " ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path: Path) -> list[tuple[str, np.ndarray, float, float, float]]:
    entries = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 16:
            raise ValueError(f"{path}: expected 16 fields per pose line, got {len(parts)}")
        vals = [float(v) for v in parts[1:]]
        entries.append((parts[0], np.array(vals[:12]).reshape(3, 4),
                        vals[12], vals[13], vals[14]))
    return entries


def load_dataset(directory: Path, client_id: int) -> ClientDataset:
    directory = Path(directory)
    poses_path = directory / "poses.txt"
    if not poses_path.exists():
        raise FileNotFoundError(f"missing poses file {poses_path}")
    images = []
    for name, pose, focal, cx, cy in read_poses(poses_path):
        img_path = directory / name
        images.append(PosedImage(pixels=read_ppm(img_path), pose=pose, focal=focal,
                                 cx=cx, cy=cy, stored_bytes=os.path.getsize(img_path),
                                 name=name, path=img_path))
    return ClientDataset(images=images, id=client_id)


# ---------------------------------------------------------------------------
# synthetic dataset generation

@dataclass
class GeneratedScene:
    pretrain: ClientDataset | None
    clients: list[ClientDataset]
    validation: list[PosedImage]


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z, eye])


def sphere_poses(n: int, radius: float, rng: np.random.Generator,
                 elevation=(-0.15, 0.9)) -> list[np.ndarray]:
    poses = []
    for _ in range(n):
        az = rng.uniform(0.0, 2 * np.pi)
        el = np.arcsin(rng.uniform(np.sin(elevation[0]), np.sin(elevation[1])))
        eye = radius * np.array([np.cos(el) * np.cos(az),
                                 np.cos(el) * np.sin(az),
                                 np.sin(el)])
        poses.append(look_at_pose(eye))
    return poses


def _save_view(directory: Path, index: int, img_float: np.ndarray, pose: np.ndarray,
               focal: float, cx: float, cy: float) -> PosedImage:
    name = f"view_{index:04d}.ppm"
    path = directory / name
    nbytes = write_ppm(path, img_float)
    return PosedImage(pixels=quantize8(img_float), pose=pose, focal=focal,
                      cx=cx, cy=cy, stored_bytes=nbytes, name=name, path=path)


def _pretrain_indices(n: int, fraction: float) -> set[int]:
    if fraction <= 0:
        return set()
    stride = max(2, round(1.0 / fraction))
    return {i for i in range(n) if i % stride == 0}


def generate_synthetic_scene(spec: SceneSpec, n_views: int, size: int,
                             rng: np.random.Generator, out_dir: Path,
                             clients: int, n_val: int = 8,
                             pretrain_fraction: float = 0.0,
                             task: str = "nerf3d",
                             options: RenderOptions = RenderOptions(),
                             gt_samples: int = 96,
                             camera_radius: float = 2.5,
                             window_side: float = 0.5) -> GeneratedScene:
    """Render ground-truth views to disk and split them across clients.

    Views go to ``pretrain/`` (an interspersed fraction, if requested)
    and round-robin to ``client_<k>/``; held-out views go to ``val/``.
    Ground truth runs through the same compositing path as model
    renders, at ``gt_samples`` midpoint samples per ray.
    """
    out_dir = Path(out_dir)
    pre_idx = _pretrain_indices(n_views, pretrain_fraction)
    dirs = {"pretrain": out_dir / "pretrain", "val": out_dir / "val"}
    for k in range(clients):
        dirs[f"client_{k}"] = out_dir / f"client_{k}"
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)

    gt_options = replace(options, n_coarse=gt_samples, n_fine=0)
    focal = 1.4 * size
    cx = cy = size / 2.0

    def render_3d(pose):
        return render_image(scene_field(spec), pose, focal, cx, cy, size, size,
                            gt_options)

    def render_window(origin):
        ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        f2 = size / window_side
        coords = np.stack([origin[0] + (xs.ravel() + 0.5) / f2,
                           origin[1] + (ys.ravel() + 0.5) / f2], axis=-1)
        return scene_image_2d(spec, coords).reshape(size, size, 3)

    views: list[tuple[np.ndarray, np.ndarray, float]] = []
    if task == "nerf3d":
        for pose in sphere_poses(n_views + n_val, camera_radius, rng):
            views.append((render_3d(pose), pose, focal))
    elif task == "image2d":
        lo, hi = -0.5, 0.5 - window_side
        for _ in range(n_views + n_val):
            origin = rng.uniform(lo, hi, size=2)
            pose = np.column_stack([np.eye(3), [origin[0], origin[1], 0.0]])
            views.append((render_window(origin), pose, size / window_side))
    else:
        raise ValueError(f"unknown task {task!r}")

    buckets: dict[str, list[PosedImage]] = {key: [] for key in dirs}
    train_pos = 0
    for i, (img_float, pose, view_focal) in enumerate(views):
        view_cx, view_cy = (cx, cy) if task == "nerf3d" else (0.0, 0.0)
        if i >= n_views:
            key = "val"
        elif i in pre_idx:
            key = "pretrain"
        else:
            key = f"client_{train_pos % clients}"
            train_pos += 1
        buckets[key].append(
            _save_view(dirs[key], len(buckets[key]), img_float, pose, view_focal,
                       view_cx, view_cy))

    for key, imgs in buckets.items():
        if imgs:
            write_poses(dirs[key] / "poses.txt", imgs)

    pretrain = ClientDataset(buckets["pretrain"], id=-1) if buckets["pretrain"] else None
    client_sets = [ClientDataset(buckets[f"client_{k}"], id=k) for k in range(clients)]
    return GeneratedScene(pretrain=pretrain, clients=client_sets,
                          validation=buckets["val"])
