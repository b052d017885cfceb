"""Splat projection and medium-aware alpha compositing.

Per pixel, with object transmittance ``T_i = prod_{j<i} (1 - a_j)`` and
compositing weight ``w_i = T_i a_i``::

    object  = sum_i w_i exp(-sigma_attn z_i) c_i
    medium  = sum over segments [z_{i-1}, z_i] of T_seg c_med (exp(-sigma_bs z_{i-1}) - exp(-sigma_bs z_i))
            = c_med (1 - sum_i w_i exp(-sigma_bs z_i))

with ``z_0 = 0`` and the last segment running to infinity. The vectorised
renderer uses the collapsed right-hand form; :func:`composite_pixel` keeps the
segment sum and serves as the reference.

Work is organised as a list of (pixel, gaussian) pairs: every Gaussian is
paired with the pixels where its 2D weight exceeds 1/255, pairs are sorted by
pixel and then by global depth rank. Compositing and its reverse pass run in
numba kernels (``_kernels``); projection and everything upstream is torch
autograd.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import _kernels
from .geometry import quat_to_rotmat, quat_to_rotmat_np, so3_exp
from .medium import medium_fields, medium_tensors
from .scene import (
    SH_C0,
    CameraView,
    GaussianScene,
    MediumModel,
    logistic,
    sh_basis,
)

COV_FLOOR = 0.3
WEIGHT_CUTOFF = 1.0 / 255.0
Q_CUTOFF = -2.0 * math.log(WEIGHT_CUTOFF)
ALPHA_MAX = 0.9999
NEAR = 0.01
TILE = 16
DEPTH_EPS = 1e-10


# --------------------------------------------------------------------------- tensors

def scene_tensors(scene: GaussianScene, dtype=torch.float64) -> dict[str, torch.Tensor]:
    return {
        "positions": torch.tensor(scene.positions, dtype=dtype),
        "sh": torch.tensor(scene.sh, dtype=dtype),
        "opacity_logit": torch.tensor(scene.opacity_logit, dtype=dtype),
        "rotation": torch.tensor(scene.rotation, dtype=dtype),
        "log_scale": torch.tensor(scene.log_scale, dtype=dtype),
    }


def scene_from_tensors(t: dict[str, torch.Tensor]) -> GaussianScene:
    a = {k: v.detach().cpu().numpy().astype(np.float64) for k, v in t.items()}
    return GaussianScene(a["positions"], a["sh"], a["opacity_logit"], a["rotation"], a["log_scale"])


def camera_tensors(view: CameraView, dtype=torch.float64) -> dict[str, torch.Tensor]:
    return {
        "rotation": torch.tensor(quat_to_rotmat_np(view.rotation), dtype=dtype),
        "translation": torch.tensor(view.translation, dtype=dtype),
        "pose_delta": torch.tensor(view.pose_delta, dtype=dtype),
    }


def camera_pose(cam: dict[str, torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """World->camera rotation and translation with the left increment applied."""
    delta = cam["pose_delta"]
    dR = so3_exp(delta[:3])
    return dR @ cam["rotation"], dR @ cam["translation"] + delta[3:]


# --------------------------------------------------------------------------- projection

@dataclass
class Splats:
    """Projected footprints, one row per Gaussian in front of the near plane."""

    index: np.ndarray
    means: np.ndarray  # (M, 2) pixels
    cov: np.ndarray  # (M, 2, 2) pixels^2, floor included
    depth: np.ndarray
    alpha_peak: np.ndarray

    def __len__(self):
        return len(self.index)


def gaussian_covariances(rotation: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    R = quat_to_rotmat(rotation)
    M = R * torch.exp(log_scale)[..., None, :]
    return M @ M.transpose(-1, -2)


def eval_colors(sh: torch.Tensor, positions: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
    if sh.shape[1] == 1:
        return SH_C0 * sh[:, 0, :] + 0.5
    dirs = positions - center
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
    basis = sh_basis(dirs)[:, : sh.shape[1]]
    return (basis[..., None] * sh).sum(1) + 0.5


def project_tensors(g: dict[str, torch.Tensor], cam: dict[str, torch.Tensor], view: CameraView,
                    near: float = NEAR) -> dict[str, torch.Tensor]:
    R, t = camera_pose(cam)
    pc = g["positions"] @ R.T + t
    z = pc[:, 2]
    valid = (z > near).detach()
    zs = torch.where(valid, z, torch.ones_like(z))
    x, y = pc[:, 0] / zs, pc[:, 1] / zs
    means = torch.stack([view.fx * x + view.cx, view.fy * y + view.cy], dim=-1)
    zero = torch.zeros_like(zs)
    J = torch.stack([
        torch.stack([view.fx / zs, zero, -view.fx * x / zs], -1),
        torch.stack([zero, view.fy / zs, -view.fy * y / zs], -1),
    ], dim=-2)
    T = J @ R
    cov = T @ gaussian_covariances(g["rotation"], g["log_scale"]) @ T.transpose(-1, -2)
    cov = cov + COV_FLOOR * torch.eye(2, dtype=cov.dtype)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    center = -R.T @ t
    return {
        "means": means, "cov": cov, "conic": conic, "depth": z, "valid": valid,
        "colors": eval_colors(g["sh"], g["positions"], center),
        "opacity": torch.sigmoid(g["opacity_logit"]),
    }


def project(scene: GaussianScene, view: CameraView, near: float = NEAR) -> Splats:
    with torch.no_grad():
        p = project_tensors(scene_tensors(scene), camera_tensors(view), view, near)
    keep = p["valid"].numpy()
    return Splats(np.nonzero(keep)[0], p["means"].numpy()[keep], p["cov"].numpy()[keep],
                  p["depth"].numpy()[keep], p["opacity"].numpy()[keep])


# --------------------------------------------------------------------------- pairs

@dataclass
class RenderPlan:
    """CSR pair list for one view: splats of pixel ``p`` are ``gid[start[p]:start[p+1]]``,
    front to back in global depth order. Not differentiable; reuse it to freeze
    support and ordering."""

    start: np.ndarray
    gid: np.ndarray
    height: int
    width: int

    def __len__(self):
        return len(self.gid)


def _np(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy().astype(np.float64, copy=False))


def build_plan(proj: dict[str, torch.Tensor], height: int, width: int) -> RenderPlan:
    depth = _np(proj["depth"])
    order = np.argsort(depth, kind="stable")
    start, gid = _kernels.build_pairs(_np(proj["means"]), _np(proj["cov"]), _np(proj["conic"]),
                                      proj["valid"].numpy(), order, height, width, Q_CUTOFF)
    return RenderPlan(start, gid, height, width)


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, conic, opacity, colors, depth, cm, sa, sb, plan, uniform):
        args = [_np(x) for x in (means, conic, opacity, colors, depth, cm, sa, sb)]
        args.append(uniform)
        P = plan.height * plan.width
        rgb, obj, med = np.empty((P, 3)), np.empty((P, 3)), np.empty((P, 3))
        dep, acc, tfin = np.empty(P), np.empty(P), np.empty(P)
        _kernels.composite_forward(np.arange(P), plan.start, plan.gid, plan.width, *args, ALPHA_MAX,
                                   rgb, obj, med, dep, acc, tfin)
        ctx.plan = plan
        ctx.args = args
        ctx.dtype = means.dtype
        outs = [torch.from_numpy(x).to(means.dtype) for x in (rgb, obj, med, dep, acc, tfin)]
        ctx.mark_non_differentiable(outs[3], outs[5])
        return tuple(outs)

    @staticmethod
    def backward(ctx, g_rgb, g_obj, g_med, g_dep, g_acc, g_tfin):
        plan, args = ctx.plan, ctx.args
        grads = [np.zeros_like(a) for a in args[:-1]]
        _kernels.composite_backward(plan.start, plan.gid, plan.width, *args, ALPHA_MAX,
                                    _np(g_rgb), _np(g_obj), _np(g_med), _np(g_acc), *grads)
        out = [torch.from_numpy(x).to(ctx.dtype) for x in grads]
        return (*out, None, None)


def gate_backscatter(color: torch.Tensor, sigma_bs: torch.Tensor) -> torch.Tensor:
    """Zero the water colour where ``sigma_bs == 0``.

    The segment integral of a medium with no density is exactly zero, even on
    the unbounded last segment; the collapsed form would otherwise return the
    ``sigma_bs -> 0+`` limit ``c_med * T_N`` there.
    """
    return torch.where(sigma_bs > 0, color, torch.zeros_like(color))


def composite(proj: dict[str, torch.Tensor], plan: RenderPlan, color, sigma_attn, sigma_bs):
    """Differentiable compositing of projected splats. Medium fields are ``(3,)`` or ``(P, 3)``."""
    P = plan.height * plan.width
    uniform = sigma_attn.dim() == 1
    fields = [f.expand(P, 3) for f in (gate_backscatter(color, sigma_bs), sigma_attn, sigma_bs)]
    names = ("rgb", "object_rgb", "medium_rgb", "depth", "accumulation", "transmittance")
    outs = _Composite.apply(proj["means"], proj["conic"], proj["opacity"], proj["colors"],
                            proj["depth"], *fields, plan, uniform)
    return dict(zip(names, outs))


def pixel_dirs(view: CameraView, cam: dict[str, torch.Tensor]) -> torch.Tensor:
    R, _ = camera_pose(cam)
    dtype = R.dtype
    ys, xs = torch.meshgrid(torch.arange(view.height, dtype=dtype), torch.arange(view.width, dtype=dtype),
                            indexing="ij")
    d = torch.stack([(xs - view.cx) / view.fx, (ys - view.cy) / view.fy, torch.ones_like(xs)], -1)
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    return (d @ R).reshape(-1, 3)


def render_tensors(g: dict[str, torch.Tensor], med: dict[str, torch.Tensor], variant: str,
                   cam: dict[str, torch.Tensor], view: CameraView,
                   plan: Optional[RenderPlan] = None) -> tuple[dict[str, torch.Tensor], RenderPlan]:
    """Differentiable full-frame render. Pass ``plan`` to freeze pair support and order."""
    proj = project_tensors(g, cam, view)
    if plan is None:
        plan = build_plan(proj, view.height, view.width)
    color, sa, sb = medium_fields(med, variant, lambda: pixel_dirs(view, cam))
    return composite(proj, plan, color, sa, sb), plan


@dataclass
class RenderOutput:
    rgb: np.ndarray
    object_rgb: np.ndarray
    medium_rgb: np.ndarray
    depth: np.ndarray
    accumulation: np.ndarray
    transmittance: np.ndarray

    @classmethod
    def from_flat(cls, flat: dict, height: int, width: int) -> "RenderOutput":
        def img(k, c=None):
            a = flat[k]
            a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else a
            a = np.asarray(a, dtype=np.float64)
            return a.reshape(height, width, 3) if c else a.reshape(height, width)
        return cls(img("rgb", 3), img("object_rgb", 3), img("medium_rgb", 3), img("depth"),
                   img("accumulation"), img("transmittance"))


def tiles(height: int, width: int, tile: int) -> list[np.ndarray]:
    """Pixel index arrays of the ``tile x tile`` blocks covering the image."""
    out = []
    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            ys, xs = np.mgrid[y0:min(y0 + tile, height), x0:min(x0 + tile, width)]
            out.append((ys * width + xs).reshape(-1))
    return out


def render(scene: GaussianScene, medium: MediumModel, view: CameraView, tile: Optional[int] = TILE,
           threads: int = 1) -> RenderOutput:
    """Render one view.

    With ``tile`` set, pixel tiles are composited independently against one
    shared pair list, on ``threads`` workers when more than one is given.
    """
    with torch.no_grad():
        cam = camera_tensors(view)
        proj = project_tensors(scene_tensors(scene), cam, view)
        plan = build_plan(proj, view.height, view.width)
        color, sa, sb = medium_fields(medium_tensors(medium), medium.variant, lambda: pixel_dirs(view, cam))
        color = gate_backscatter(color, sb)
    H, W = view.height, view.width
    P = H * W
    args = [_np(proj[k]) for k in ("means", "conic", "opacity", "colors", "depth")]
    args += [np.ascontiguousarray(np.broadcast_to(_np(f), (P, 3))) for f in (color, sa, sb)]
    args.append(sa.dim() == 1)
    bufs = [np.empty((P, 3)), np.empty((P, 3)), np.empty((P, 3)), np.empty(P), np.empty(P), np.empty(P)]

    def run(pixels):
        _kernels.composite_forward(pixels, plan.start, plan.gid, W, *args, ALPHA_MAX, *bufs)

    jobs = tiles(H, W, tile) if tile else [np.arange(P)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    names = ("rgb", "object_rgb", "medium_rgb", "depth", "accumulation", "transmittance")
    return RenderOutput.from_flat(dict(zip(names, bufs)), H, W)


def render_plain(scene: GaussianScene, view: CameraView) -> np.ndarray:
    """Standard medium-free splatting of ``scene``, no medium code involved."""
    with torch.no_grad():
        proj = project_tensors(scene_tensors(scene), camera_tensors(view), view)
    plan = build_plan(proj, view.height, view.width)
    out = np.empty((view.height * view.width, 3))
    _kernels.composite_plain(plan.start, plan.gid, view.width, _np(proj["means"]), _np(proj["conic"]),
                             _np(proj["opacity"]), _np(proj["colors"]), ALPHA_MAX, out)
    return out.reshape(view.height, view.width, 3)


# --------------------------------------------------------------------------- reference

@dataclass
class RayRenderRecord:
    """Depth-ordered splats hitting one pixel."""

    indices: np.ndarray
    depths: np.ndarray
    alphas: np.ndarray
    colors: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if np.any(np.diff(self.depths) <= 0):
            raise ValueError("depths must be strictly increasing")

    @property
    def transmittance(self) -> float:
        return float(np.prod(1.0 - self.alphas))

    @property
    def accumulation(self) -> float:
        return float(sum(t * a for t, a in zip(self._prefix(), self.alphas)))

    def _prefix(self):
        T = 1.0
        for a in self.alphas:
            yield T
            T *= 1.0 - a


@dataclass
class PixelComposite:
    rgb: np.ndarray
    object_rgb: np.ndarray
    medium_rgb: np.ndarray
    depth: float
    accumulation: float
    transmittance: float


def composite_pixel(ordered: RayRenderRecord, medium: MediumModel, ray_dir=(0.0, 0.0, 1.0)) -> PixelComposite:
    """Reference compositor for one ray, medium integrated segment by segment."""
    from .medium import medium_query
    c_med, s_attn, s_bs = medium_query(medium, ray_dir)
    if np.any(s_attn < 0) or np.any(s_bs < 0):
        raise ValueError("negative medium coefficients")
    obj = np.zeros(3)
    att = np.zeros(3)
    med = np.zeros(3)
    T = 1.0
    acc = 0.0
    wz = 0.0
    z_prev = 0.0
    for z, a, c in zip(ordered.depths, ordered.alphas, ordered.colors):
        med += T * c_med * (np.exp(-s_bs * z_prev) - np.exp(-s_bs * z))
        w = T * a
        att += w * np.exp(-s_attn * z) * c
        obj += w * c
        acc += w
        wz += w * z
        T *= 1.0 - a
        z_prev = z
    # last segment runs to infinity: exp(-s z) - exp(-s inf), which is 0 when s == 0
    med += T * c_med * np.where(s_bs > 0, np.exp(-s_bs * z_prev), 0.0)
    depth = wz / max(acc, DEPTH_EPS) if acc > 0 else -1.0
    return PixelComposite(att + med, obj, med, depth, acc, T)


def render_reference(scene: GaussianScene, medium: MediumModel, view: CameraView) -> RenderOutput:
    """Naive per-pixel renderer in plain numpy. Slow; for checking :func:`render`."""
    H, W = view.height, view.width
    R, t = view.world_to_camera()
    pc = scene.positions @ R.T + t
    z = pc[:, 2]
    front = np.nonzero(z > NEAR)[0]
    order = front[np.argsort(z[front], kind="stable")]
    center = view.center
    splats = []
    for i in order:
        x, y, zi = pc[i]
        mean = np.array([view.fx * x / zi + view.cx, view.fy * y / zi + view.cy])
        J = np.array([[view.fx / zi, 0.0, -view.fx * x / zi ** 2], [0.0, view.fy / zi, -view.fy * y / zi ** 2]])
        Rg = _quat_matrix(scene.rotation[i])
        S3 = Rg @ np.diag(np.exp(2 * scene.log_scale[i])) @ Rg.T
        cov = J @ R @ S3 @ R.T @ J.T + COV_FLOOR * np.eye(2)
        d = scene.positions[i] - center
        color = sh_basis(d / np.linalg.norm(d))[: scene.sh.shape[1]] @ scene.sh[i] + 0.5
        splats.append((i, zi, mean, np.linalg.inv(cov), float(logistic(scene.opacity_logit[i])), color))
    rays = view.pixel_rays()
    out = {k: np.zeros((H, W, 3)) for k in ("rgb", "object_rgb", "medium_rgb")}
    out.update({k: np.zeros((H, W)) for k in ("depth", "accumulation", "transmittance")})
    for py in range(H):
        for px in range(W):
            hits = []
            for i, zi, mean, icov, op, color in splats:
                d = np.array([px, py], dtype=np.float64) - mean
                gw = np.exp(-0.5 * d @ icov @ d)
                if gw > WEIGHT_CUTOFF:
                    hits.append((i, zi, min(op * gw, ALPHA_MAX), color))
            rec = RayRenderRecord([h[0] for h in hits], [h[1] for h in hits], [h[2] for h in hits],
                                  np.array([h[3] for h in hits]).reshape(-1, 3))
            res = composite_pixel(rec, medium, rays[py, px])
            out["rgb"][py, px] = res.rgb
            out["object_rgb"][py, px] = res.object_rgb
            out["medium_rgb"][py, px] = res.medium_rgb
            out["depth"][py, px] = res.depth
            out["accumulation"][py, px] = res.accumulation
            out["transmittance"][py, px] = res.transmittance
    return RenderOutput(**out)


def _quat_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
