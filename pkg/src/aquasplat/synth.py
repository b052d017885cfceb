"""Synthetic underwater scenes with known geometry, water and cameras."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import look_at
from .pointmap import Edge, ViewGraph
from .render import render
from .scene import CameraView, GaussianScene, MediumModel, PointMap, color_to_sh0, logit, num_sh_coeffs


@dataclass
class SynthSpec:
    seed: int = 0
    n_gaussians: int = 50
    extent: float = 1.0  # positions fill a cube of this side centred at the origin
    sh_degree: int = 0
    scale_range: tuple = (0.08, 0.16)  # fraction of extent
    opacity_range: tuple = (0.7, 0.98)
    color_range: tuple = (0.1, 0.9)
    backscatter_lo: tuple = (0.02, 0.15, 0.25)
    backscatter_hi: tuple = (0.15, 0.40, 0.55)
    attn_lo: tuple = (0.25, 0.10, 0.05)
    attn_hi: tuple = (0.60, 0.30, 0.20)
    bs_lo: tuple = (0.10, 0.10, 0.10)
    bs_hi: tuple = (0.40, 0.40, 0.40)
    n_views: int = 8
    orbit_radius: float = 3.0
    orbit_height: float = 0.8
    look_at: tuple = (0.0, 0.0, 0.0)
    fov_deg: float = 50.0
    resolution: int = 128
    pointmap_resolution: int = 32
    noise_sigma: float = 0.01
    confidence_scale: float = 0.02  # residual scale of the 1 + exp(-r / scale) confidence model
    background_confidence: float = 0.01  # multiplier on exp(-r / scale) for pixels with no surface

    def __post_init__(self):
        if self.resolution < 32 or self.pointmap_resolution < 1:
            raise ValueError("resolution must be at least 32")
        for lo, hi in [(self.scale_range[0], self.scale_range[1]), (self.opacity_range[0], self.opacity_range[1]),
                       (self.color_range[0], self.color_range[1])]:
            if not lo <= hi:
                raise ValueError("empty parameter range")
        for lo, hi in [(self.backscatter_lo, self.backscatter_hi), (self.attn_lo, self.attn_hi),
                       (self.bs_lo, self.bs_hi)]:
            if np.any(np.asarray(lo) > np.asarray(hi)):
                raise ValueError("empty medium range")
        if self.n_gaussians < 0 or self.n_views < 1:
            raise ValueError("counts must be non-negative and at least one view is needed")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def orbit_views(spec: SynthSpec, resolution: int = None) -> list[CameraView]:
    res = resolution or spec.resolution
    views = []
    for k in range(spec.n_views):
        ang = 2 * np.pi * k / spec.n_views
        h = spec.orbit_height * (1 if k % 2 == 0 else 0.6)
        eye = np.asarray(spec.look_at) + [spec.orbit_radius * np.cos(ang), spec.orbit_radius * np.sin(ang), h]
        R, t = look_at(eye, spec.look_at)
        views.append(CameraView.from_fov(res, res, spec.fov_deg, R, t))
    return views


def make_scene(spec: SynthSpec) -> tuple[GaussianScene, MediumModel, list[CameraView]]:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_gaussians
    half = spec.extent / 2
    pos = rng.uniform(-half, half, (n, 3)) + np.asarray(spec.look_at)
    k = num_sh_coeffs(spec.sh_degree)
    sh = np.zeros((n, k, 3))
    sh[:, 0] = color_to_sh0(rng.uniform(*spec.color_range, (n, 3)))
    if k > 1:
        sh[:, 1:] = rng.normal(0, 0.05, (n, k - 1, 3))
    op = logit(rng.uniform(*spec.opacity_range, n))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    log_s = np.log(spec.extent * rng.uniform(*spec.scale_range, (n, 3)))
    scene = GaussianScene(pos, sh, op, q, log_s) if n else GaussianScene.empty(spec.sh_degree)
    medium = MediumModel(rng.uniform(spec.backscatter_lo, spec.backscatter_hi),
                         rng.uniform(spec.attn_lo, spec.attn_hi),
                         rng.uniform(spec.bs_lo, spec.bs_hi))
    return scene, medium, orbit_views(spec)


@dataclass
class Truth:
    clean: list[np.ndarray]
    degraded: list[np.ndarray]
    depth: list[np.ndarray]
    accumulation: list[np.ndarray] = field(default_factory=list)


def make_truth(scene: GaussianScene, medium: MediumModel, views: list[CameraView]) -> Truth:
    """Clean (no water) and degraded renders of every view, plus depth."""
    clear = MediumModel.clear()
    clean, degraded, depth, acc = [], [], [], []
    for v in views:
        c = render(scene, clear, v)
        d = render(scene, medium, v)
        clean.append(c.rgb)
        degraded.append(d.rgb)
        depth.append(d.depth)
        acc.append(d.accumulation)
    return Truth(clean, degraded, depth, acc)


def surface_points(scene: GaussianScene, view: CameraView, far: float):
    """World points at the rendered depth of every pixel and a hit mask.

    Pixels that see no surface are pushed to depth ``far``.
    """
    out = render(scene, MediumModel.clear(), view)
    hit = out.accumulation > 0.5
    z = np.where(hit, out.depth, far)
    ys, xs = np.mgrid[0:view.height, 0:view.width].astype(np.float64)
    pc = np.stack([(xs - view.cx) / view.fx * z, (ys - view.cy) / view.fy * z, z], -1)
    R, t = view.world_to_camera()
    return (pc - t) @ R, hit


def make_pointmaps(scene: GaussianScene, views: list[CameraView], noise_sigma: float,
                   spec: SynthSpec) -> ViewGraph:
    """Noisy pairwise point maps for every ordered view pair.

    Each edge ``(a, b)`` holds both views' surface points in camera ``a``'s
    frame. Confidence is ``1 + exp(-residual / confidence_scale)``, damped by
    ``background_confidence`` where the pixel sees open water.
    """
    if len(views) < 2:
        raise ValueError("point maps need at least two views")
    rng = np.random.default_rng(spec.seed + 7919)
    res = spec.pointmap_resolution
    small = [CameraView(v.fx * res / v.width, v.fy * res / v.height, v.cx * res / v.width,
                        v.cy * res / v.height, res, res, v.rotation, v.translation) for v in views]
    far = 2.0 * spec.orbit_radius
    surf = [surface_points(scene, v, far) for v in small]
    edges = []
    for a in range(len(views)):
        Ra, ta = small[a].world_to_camera()
        for b in range(len(views)):
            if a == b:
                continue
            maps = []
            for v in (a, b):
                pts, hit = surf[v]
                noise = rng.normal(0.0, noise_sigma, pts.shape) if noise_sigma > 0 else np.zeros(pts.shape)
                r = np.linalg.norm(noise, axis=-1)
                conf = np.exp(-r / spec.confidence_scale)
                conf = 1.0 + np.where(hit, conf, spec.background_confidence * conf)
                local = pts @ Ra.T + ta + noise
                maps.append(PointMap(v, local, conf, float(np.linalg.norm(local, axis=-1).mean())))
            edges.append(Edge(a, b, maps[0], maps[1]))
    return ViewGraph(list(range(len(views))), edges)


def perturb_medium(medium: MediumModel, factor: float = 1.2) -> MediumModel:
    m = medium.copy()
    m.backscatter_color = np.clip(m.backscatter_color * factor, 0.0, 1.0)
    m.sigma_attn = m.sigma_attn * factor
    m.sigma_bs = m.sigma_bs * factor
    return m


def perturb_scene(scene: GaussianScene, rng: np.random.Generator, extent: float = 1.0,
                  position: float = 0.02, color: float = 0.5, opacity: float = 0.5,
                  log_scale: float = 0.05, rotation: float = 0.05, reset_appearance: bool = False) -> GaussianScene:
    """Jitter every attribute of a scene; used as a starting point for joint fits.

    ``reset_appearance`` then discards colour and opacity entirely (grey,
    opacity 0.1), as a point-map initialisation would.
    """
    s = scene.copy()
    n = len(s)
    s.positions = s.positions + rng.normal(0, position * extent, (n, 3))
    s.sh = s.sh + rng.normal(0, color, s.sh.shape) * (np.arange(s.sh.shape[1]) == 0)[None, :, None]
    s.opacity_logit = s.opacity_logit + rng.normal(0, opacity, n)
    s.log_scale = s.log_scale + rng.normal(0, log_scale, (n, 3))
    q = s.rotation + rng.normal(0, rotation, (n, 4))
    s.rotation = q / np.linalg.norm(q, axis=1, keepdims=True)
    if reset_appearance:
        s.sh = np.zeros_like(s.sh)
        s.opacity_logit = np.full(n, logit(0.1))
    return s

