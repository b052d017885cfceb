"""Photometric losses, the transparency prior and image metrics.

All functions take ``(H, W, 3)`` images (numpy arrays, :class:`ImageBuffer`
or torch tensors) and return 0-d torch tensors so the same code is used for
reporting and for backpropagation.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
LAPLACE_WIDTH = 0.1
DEFAULT_LAMBDA = 0.1


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _pair(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def l1_loss(a, b) -> torch.Tensor:
    a, b = _pair(a, b)
    return (a - b).abs().mean()


def _window(dtype) -> torch.Tensor:
    x = torch.arange(WINDOW, dtype=dtype) - WINDOW // 2
    g = torch.exp(-x * x / (2 * SIGMA ** 2))
    return g / g.sum()


@functools.lru_cache(maxsize=32)
def _band(n: int, dtype) -> torch.Tensor:
    """``(n - 10, n)`` matrix applying the 1-D window in valid mode."""
    g = _window(dtype)
    m = torch.zeros(n - WINDOW + 1, n, dtype=dtype)
    for i in range(n - WINDOW + 1):
        m[i, i:i + WINDOW] = g
    return m


def _stats(x, y):
    bh, bw = _band(x.shape[-2], x.dtype), _band(x.shape[-1], x.dtype)
    mu_x, mu_y, exx, eyy, exy = bh @ torch.stack([x, y, x * x, y * y, x * y]) @ bw.T
    a1 = 2 * (mu_x * mu_y) + C1
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    a2 = 2 * (exy - mu_x * mu_y) + C2
    b2 = (exx - mu_x * mu_x) + (eyy - mu_y * mu_y) + C2
    return bh, bw, mu_x, mu_y, a1, b1, a2, b2


class _SSIMMap(torch.autograd.Function):
    """SSIM map with a hand-written backward through the windowed statistics.

    The backward is arranged so every term cancels exactly when ``x == y``,
    giving a gradient of exactly zero at a perfect fit instead of roundoff.
    """

    @staticmethod
    def forward(ctx, x, y):
        _, _, _, _, a1, b1, a2, b2 = _stats(x, y)
        ctx.save_for_backward(x, y)
        return (a1 / b1) * (a2 / b2)

    @staticmethod
    def backward(ctx, g):
        x, y = ctx.saved_tensors
        bh, bw, mu_x, mu_y, a1, b1, a2, b2 = _stats(x, y)
        r1, r2 = a1 / b1, a2 / b2
        c = g * r1 / b2
        g_xy = 2 * c  # dS / d sigma_xy
        g_sq = -c * r2  # dS / d sigma_xx = dS / d sigma_yy

        def grad(u, v, mu_u, mu_v):
            g_mu = g * (2 * r2) * (mu_v - mu_u * r1) / b1
            back = bh.T @ torch.stack([g_mu - (2 * mu_u) * g_sq - mu_v * g_xy, g_sq, g_xy]) @ bw
            return back[0] + (2 * u) * back[1] + v * back[2]

        gx = grad(x, y, mu_x, mu_y) if ctx.needs_input_grad[0] else None
        gy = grad(y, x, mu_y, mu_x) if ctx.needs_input_grad[1] else None
        return gx, gy


def ssim_map(a, b) -> torch.Tensor:
    """Local SSIM over fully covered 11x11 windows, shape ``(..., 3, H-10, W-10)``."""
    a, b = _pair(a, b)
    h, w = a.shape[-3], a.shape[-2]
    if min(h, w) < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")
    return _SSIMMap.apply(a.movedim(-1, -3), b.movedim(-1, -3))


def ssim(a, b) -> torch.Tensor:
    return ssim_map(a, b).mean()


def dssim_loss(a, b) -> torch.Tensor:
    return (1 - ssim(a, b)) / 2


def acc_loss(accumulation) -> torch.Tensor:
    """Negative log of a two-Laplacian prior pulling accumulation to 0 or 1."""
    t = _t(accumulation)
    if torch.isnan(t).any():
        raise ValueError("accumulation contains NaN")
    return -torch.logaddexp(-t.abs() / LAPLACE_WIDTH, -(1 - t).abs() / LAPLACE_WIDTH).mean()


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


@dataclass
class LossReport:
    l1: float
    dssim: float
    recon: float
    acc: float
    total: float
    lam: float

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def total_loss_tensors(rgb, truth, accumulation, lam: float = DEFAULT_LAMBDA, dssim_weight: float = 1.0):
    """``(total, parts)`` as tensors; ``parts`` holds l1, dssim, recon and acc."""
    l1 = l1_loss(rgb, truth)
    ds = dssim_loss(rgb, truth)
    recon = l1 + dssim_weight * ds
    acc = acc_loss(accumulation)
    return recon + lam * acc, {"l1": l1, "dssim": ds, "recon": recon, "acc": acc}


def report_from_parts(parts: dict, lam: float) -> LossReport:
    vals = {k: float(v) for k, v in parts.items()}
    return LossReport(vals["l1"], vals["dssim"], vals["recon"], vals["acc"],
                      vals["recon"] + lam * vals["acc"], lam)


def total_loss(render, truth, lam: float = DEFAULT_LAMBDA) -> LossReport:
    """Loss of a :class:`RenderOutput` against a ground-truth image."""
    _, parts = total_loss_tensors(render.rgb, truth, render.accumulation, lam)
    return report_from_parts(parts, lam)
