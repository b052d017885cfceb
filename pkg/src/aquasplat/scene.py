"""Domain types: Gaussians, the water medium, cameras, point maps, images.

Everything here is a plain value type. Rendering and optimization live in
their own modules; these classes only validate and convert.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import quat_to_rotmat_np, rotmat_to_quat_np, so3_exp_np

# Real spherical-harmonic basis constants (degrees 0..3), in the ordering used
# by common splatting code.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)
MAX_SH_DEGREE = 3


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if num_sh_coeffs(degree) != count or not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"{count} SH coefficients per channel is not a valid degree <= {MAX_SH_DEGREE}")
    return degree


def sh_basis(dirs):
    """Real SH basis values ``(..., 16)`` for unit directions ``(..., 3)``.

    Works on numpy arrays and torch tensors alike.
    """
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    one = x * 0 + 1
    terms = [
        SH_C0 * one,
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2 * zz - xx - yy),
        SH_C2[3] * xz, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * xy * z, SH_C3[2] * y * (4 * zz - xx - yy),
        SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy),
    ]
    if isinstance(dirs, np.ndarray):
        return np.stack(terms, axis=-1)
    import torch
    return torch.stack(terms, dim=-1)


def sh_to_color(sh_coeffs, view_dir) -> np.ndarray:
    """Evaluate per-channel SH coefficients ``(K, 3)`` along a unit direction.

    Degree 0 gives ``SH_C0 * coeff0 + 0.5`` regardless of direction.
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    d = np.asarray(view_dir, dtype=np.float64)
    if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit 3-vector")
    sh_degree_from_count(sh.shape[0])
    basis = sh_basis(d)[: sh.shape[0]]
    return basis @ sh + 0.5


def color_to_sh0(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def _unit(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    return q / n if abs(n - 1) > 1e-12 else q


@dataclass
class GaussianPrimitive:
    position: np.ndarray
    sh_coeffs: np.ndarray  # (K, 3)
    opacity_logit: float
    rotation: np.ndarray  # unit quaternion, w first
    log_scale: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.sh_coeffs = np.atleast_2d(np.asarray(self.sh_coeffs, dtype=np.float64))
        self.opacity_logit = float(self.opacity_logit)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.rotation = _unit(q)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        sh_degree_from_count(self.sh_coeffs.shape[0])

    @property
    def opacity(self) -> float:
        return opacity(self)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


def opacity(primitive: GaussianPrimitive) -> float:
    return float(logistic(primitive.opacity_logit))


@dataclass
class GaussianScene:
    """Struct-of-arrays container for ``N`` Gaussians."""

    positions: np.ndarray  # (N, 3)
    sh: np.ndarray  # (N, K, 3)
    opacity_logit: np.ndarray  # (N,)
    rotation: np.ndarray  # (N, 4)
    log_scale: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh.reshape(n, -1, 3) if sh.size or n else np.zeros((0, 1, 3))
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero quaternion")
        # leave already-unit quaternions bit-exact so file round trips are lossless
        self.rotation = q / norms if np.any(np.abs(norms - 1) > 1e-12) else q
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        sh_degree_from_count(self.sh.shape[1])

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[1])

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, num_sh_coeffs(sh_degree), 3)),
                   np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, prims) -> "GaussianScene":
        prims = list(prims)
        if not prims:
            return cls.empty()
        return cls(np.stack([p.position for p in prims]), np.stack([p.sh_coeffs for p in prims]),
                   np.array([p.opacity_logit for p in prims]), np.stack([p.rotation for p in prims]),
                   np.stack([p.log_scale for p in prims]))

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.positions[i], self.sh[i], self.opacity_logit[i],
                                 self.rotation[i], self.log_scale[i])

    def __iter__(self):
        return (self.primitive(i) for i in range(len(self)))

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(self.positions[idx], self.sh[idx], self.opacity_logit[idx],
                             self.rotation[idx], self.log_scale[idx])

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.positions.copy(), self.sh.copy(), self.opacity_logit.copy(),
                             self.rotation.copy(), self.log_scale.copy())


PARAMETRIC = "parametric"
TINYNET = "tinynet"
HIDDEN = 128


def init_net_params(rng: Optional[np.random.Generator] = None, hidden: int = HIDDEN,
                    scale: float = 0.1) -> dict[str, np.ndarray]:
    """Weights for the direction -> medium MLP. ``rng=None`` gives all zeros."""
    shapes = {"w1": (3, hidden), "b1": (hidden,), "w2": (hidden, hidden), "b2": (hidden,),
              "w_color": (hidden, 3), "b_color": (3,), "w_attn": (hidden, 3), "b_attn": (3,),
              "w_bs": (hidden, 3), "b_bs": (3,)}
    if rng is None:
        return {k: np.zeros(s) for k, s in shapes.items()}
    return {k: rng.normal(0.0, scale, size=s) for k, s in shapes.items()}


@dataclass
class MediumModel:
    """Homogeneous water: veiling colour plus per-channel attenuation.

    ``sigma_attn`` attenuates the direct signal, ``sigma_bs`` governs how fast
    backscatter saturates towards ``backscatter_color``. The ``tinynet``
    variant ignores the stored triples and predicts them per ray direction.
    """

    backscatter_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_attn: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_bs: np.ndarray = field(default_factory=lambda: np.zeros(3))
    variant: str = PARAMETRIC
    net_params: Optional[dict] = None

    def __post_init__(self):
        self.backscatter_color = np.asarray(self.backscatter_color, dtype=np.float64).reshape(3)
        self.sigma_attn = np.asarray(self.sigma_attn, dtype=np.float64).reshape(3)
        self.sigma_bs = np.asarray(self.sigma_bs, dtype=np.float64).reshape(3)
        if self.variant not in (PARAMETRIC, TINYNET):
            raise ValueError(f"unknown medium variant {self.variant!r}")
        if np.any(self.sigma_attn < 0) or np.any(self.sigma_bs < 0):
            raise ValueError("medium coefficients must be non-negative")
        if np.any(self.backscatter_color < 0) or np.any(self.backscatter_color > 1):
            raise ValueError("backscatter_color must lie in [0, 1]")
        if self.variant == TINYNET:
            if self.net_params is None:
                self.net_params = init_net_params()
            self.net_params = {k: np.asarray(v, dtype=np.float64) for k, v in self.net_params.items()}

    @classmethod
    def clear(cls) -> "MediumModel":
        return cls()

    def copy(self) -> "MediumModel":
        net = None if self.net_params is None else {k: v.copy() for k, v in self.net_params.items()}
        return MediumModel(self.backscatter_color.copy(), self.sigma_attn.copy(),
                           self.sigma_bs.copy(), self.variant, net)

    @property
    def is_clear(self) -> bool:
        return (self.variant == PARAMETRIC and not self.backscatter_color.any()
                and not self.sigma_attn.any() and not self.sigma_bs.any())


@dataclass
class CameraView:
    """Pinhole camera. ``rotation``/``translation`` map world to camera.

    ``pose_delta`` (axis-angle, translation) is a left increment applied on top
    of the stored pose; :meth:`folded` bakes it in.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pose_delta: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        self.width, self.height = int(self.width), int(self.height)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.rotation = _unit(q)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.pose_delta = np.asarray(self.pose_delta, dtype=np.float64).reshape(6)

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float, R=None, t=None) -> "CameraView":
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        q = rotmat_to_quat_np(R) if R is not None else None
        kw = {}
        if q is not None:
            kw["rotation"] = q
        if t is not None:
            kw["translation"] = t
        return cls(fx, fx, width / 2.0, height / 2.0, width, height, **kw)

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Effective ``(R, t)`` including the pending pose increment."""
        R = quat_to_rotmat_np(self.rotation)
        dR = so3_exp_np(self.pose_delta[:3])
        return dR @ R, dR @ self.translation + self.pose_delta[3:]

    @property
    def center(self) -> np.ndarray:
        R, t = self.world_to_camera()
        return -R.T @ t

    def folded(self) -> "CameraView":
        R, t = self.world_to_camera()
        return CameraView(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                          rotmat_to_quat_np(R), t, np.zeros(6))

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(M, 2)`` and view depths ``(M,)`` of world points."""
        R, t = self.world_to_camera()
        pc = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ R.T + t
        z = pc[:, 2]
        uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    def pixel_rays(self) -> np.ndarray:
        """Unit world-frame ray directions ``(H, W, 3)`` through pixel centres."""
        R, _ = self.world_to_camera()
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        d = np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ R

    def copy(self) -> "CameraView":
        return CameraView(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                          self.rotation.copy(), self.translation.copy(), self.pose_delta.copy())


@dataclass
class PointMap:
    view_id: int
    points: np.ndarray  # (H, W, 3)
    confidences: np.ndarray  # (H, W)
    scale: Optional[float] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[-1] != 3:
            raise ValueError("points must be an H x W x 3 grid")
        if self.confidences.shape != self.points.shape[:2]:
            raise ValueError("confidence grid does not match point grid")
        if np.any(self.confidences <= 0):
            raise ValueError("confidences must be positive")
        if self.scale is not None and self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]

    def normalizer(self) -> float:
        """Stored scale, or the mean point norm when none is stored."""
        if self.scale is not None:
            return float(self.scale)
        s = float(np.linalg.norm(self.points, axis=-1).mean())
        if s <= 0:
            raise ValueError("point map has zero mean norm; scale is undefined")
        return s


@dataclass
class ImageBuffer:
    """Linear RGB raster ``(H, W, 3)``. Values are never clamped here."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise ValueError("image must be H x W x 3")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)
