"""Joint optimisation of Gaussians, water and camera poses."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .geometry import rotmat_to_quat_np, so3_exp
from .losses import DEFAULT_LAMBDA, LossReport, report_from_parts, total_loss_tensors
from .medium import medium_fields, medium_from_tensors, medium_tensors
from .render import (
    RenderPlan,
    build_plan,
    camera_tensors,
    composite,
    pixel_dirs,
    project_tensors,
    scene_from_tensors,
    scene_tensors,
)
from .scene import PARAMETRIC, CameraView, GaussianScene, MediumModel

log = logging.getLogger(__name__)

PRESETS = {"S": 500, "M": 1000}
GAUSSIAN_KEYS = ("positions", "sh", "opacity_logit", "rotation", "log_scale")
BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
DIVERGENCE = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, trace=None):
        super().__init__(msg)
        self.trace = trace or []


def default_lrs(extent: float = 1.0) -> dict[str, float]:
    return {"positions": 1.6e-4 * extent, "sh": 2.5e-3, "opacity_logit": 5e-2, "rotation": 1e-3,
            "log_scale": 5e-3, "medium": 1e-3, "pose": 1e-4}


@dataclass
class OptimConfig:
    iterations: int = PRESETS["M"]
    lrs: dict = field(default_factory=default_lrs)
    lam: float = DEFAULT_LAMBDA
    dssim_weight: float = 1.0
    optimize_poses: bool = False
    optimize_medium: bool = True
    freeze_gaussians: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if any(v <= 0 for v in self.lrs.values()):
            raise ValueError("learning rates must be positive")

    @classmethod
    def preset(cls, name: str, **kw) -> "OptimConfig":
        return cls(iterations=PRESETS[name.upper()], **kw)


@dataclass
class FitState:
    """Leaf tensors for everything that can be optimised."""

    gaussians: dict[str, torch.Tensor]
    medium: dict[str, torch.Tensor]
    cams: list[dict[str, torch.Tensor]]
    variant: str = PARAMETRIC

    @classmethod
    def from_objects(cls, scene: GaussianScene, medium: MediumModel, views: list[CameraView]) -> "FitState":
        return cls(scene_tensors(scene), medium_tensors(medium), [camera_tensors(v) for v in views],
                   medium.variant)

    def scene(self) -> GaussianScene:
        return scene_from_tensors(self.gaussians)

    def medium_model(self) -> MediumModel:
        return medium_from_tensors(self.medium, self.variant)

    def views(self, templates: list[CameraView]) -> list[CameraView]:
        out = []
        for cam, v in zip(self.cams, templates):
            R = so3_exp(cam["pose_delta"][:3].detach()) @ cam["rotation"].detach()
            t = so3_exp(cam["pose_delta"][:3].detach()) @ cam["translation"].detach() + cam["pose_delta"][3:].detach()
            out.append(replace(v, rotation=rotmat_to_quat_np(R.numpy()), translation=t.numpy(),
                               pose_delta=np.zeros(6)))
        return out


@dataclass
class GradientSet:
    gaussians: dict[str, torch.Tensor]
    medium: dict[str, torch.Tensor]
    poses: list[torch.Tensor]

    def flat(self) -> dict[str, torch.Tensor]:
        out = {f"gaussians.{k}": v for k, v in self.gaussians.items()}
        out.update({f"medium.{k}": v for k, v in self.medium.items()})
        out.update({f"pose.{i}": v for i, v in enumerate(self.poses)})
        return out

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.flat().values())


def loss_tensors(state: FitState, views: list[CameraView], truths: list[torch.Tensor], lam: float,
                 plans: Optional[list[RenderPlan]] = None, dssim_weight: float = 1.0, frozen=None):
    """Mean total loss over views. ``frozen`` caches projections when geometry is fixed."""
    total = 0.0
    sums: dict[str, torch.Tensor] = {}
    new_plans = []
    for i, (view, truth) in enumerate(zip(views, truths)):
        cam = state.cams[i]
        if frozen is not None:
            proj, plan = frozen[i]
        else:
            proj = project_tensors(state.gaussians, cam, view)
            plan = plans[i] if plans is not None else build_plan(proj, view.height, view.width)
        color, sa, sb = medium_fields(state.medium, state.variant, lambda: pixel_dirs(view, cam))
        out = composite(proj, plan, color, sa, sb)
        rgb = out["rgb"].reshape(view.height, view.width, 3)
        acc = out["accumulation"].reshape(view.height, view.width)
        t, parts = total_loss_tensors(rgb, truth, acc, lam, dssim_weight)
        total = total + t / len(views)
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v.detach() / len(views)
        new_plans.append(plan)
    return total, sums, new_plans


def backward(state: FitState, views: list[CameraView], truths, lam: float = DEFAULT_LAMBDA,
             plans: Optional[list[RenderPlan]] = None, groups=("gaussians", "medium", "poses"),
             dssim_weight: float = 1.0, frozen=None) -> tuple[LossReport, GradientSet]:
    """Loss report and exact gradients for the requested parameter groups."""
    truths = [torch.as_tensor(np.asarray(t, dtype=np.float64)) if not isinstance(t, torch.Tensor) else t
              for t in truths]
    leaves = []
    if "gaussians" in groups and frozen is None:
        leaves += list(state.gaussians.values())
    if "medium" in groups:
        leaves += list(state.medium.values())
    if "poses" in groups and frozen is None:
        leaves += [c["pose_delta"] for c in state.cams]
    for x in leaves:
        x.requires_grad_(True)
        x.grad = None
    try:
        total, parts, _ = loss_tensors(state, views, truths, lam, plans, dssim_weight, frozen)
        report = report_from_parts(parts, lam)
        if not math.isfinite(report.total):
            raise DivergenceError(f"non-finite loss {report.total}")
        if leaves:
            total.backward()
    finally:
        for x in leaves:
            x.requires_grad_(False)

    def grad(x):
        return x.grad if x.grad is not None else torch.zeros_like(x)

    grads = GradientSet(
        {k: grad(v) for k, v in state.gaussians.items()},
        {k: grad(v) for k, v in state.medium.items()},
        [grad(c["pose_delta"]) for c in state.cams],
    )
    for x in leaves:
        x.grad = None
    if not grads.all_finite():
        raise DivergenceError("non-finite gradient")
    return report, grads


class Adam:
    """Plain Adam with one learning rate per named tensor."""

    def __init__(self, betas=(BETA1, BETA2), eps: float = EPS):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t: dict[str, int] = {}

    def update(self, name: str, grad: torch.Tensor, lr: float) -> torch.Tensor:
        """Parameter increment for ``grad``; advances this tensor's moment estimates."""
        if name not in self.m:
            self.m[name] = torch.zeros_like(grad)
            self.v[name] = torch.zeros_like(grad)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        self.m[name].mul_(self.b1).add_(grad, alpha=1 - self.b1)
        self.v[name].mul_(self.b2).addcmul_(grad, grad, value=1 - self.b2)
        m_hat = self.m[name] / (1 - self.b1 ** t)
        v_hat = self.v[name] / (1 - self.b2 ** t)
        return -lr * m_hat / (v_hat.sqrt() + self.eps)


def fold_pose(cam: dict[str, torch.Tensor]) -> None:
    """Bake the pending left increment into the pose and zero it."""
    with torch.no_grad():
        d = cam["pose_delta"]
        dR = so3_exp(d[:3])
        cam["rotation"] = dR @ cam["rotation"]
        cam["translation"] = dR @ cam["translation"] + d[3:]
        cam["pose_delta"] = torch.zeros_like(d)


def step(state: FitState, grads: GradientSet, adam: Adam, lrs: dict[str, float],
         groups=("gaussians", "medium", "poses")) -> FitState:
    """One Adam update in place, then re-impose parameter constraints."""
    with torch.no_grad():
        if "gaussians" in groups:
            for k in GAUSSIAN_KEYS:
                state.gaussians[k] += adam.update(f"gaussians.{k}", grads.gaussians[k], lrs[k])
            q = state.gaussians["rotation"]
            state.gaussians["rotation"] = q / torch.linalg.norm(q, dim=-1, keepdim=True)
        if "medium" in groups:
            for k, g in grads.medium.items():
                state.medium[k] += adam.update(f"medium.{k}", g, lrs["medium"])
            if state.variant == PARAMETRIC:
                state.medium["backscatter_color"].clamp_(0.0, 1.0)
                state.medium["sigma_attn"].clamp_(min=0.0)
                state.medium["sigma_bs"].clamp_(min=0.0)
        if "poses" in groups:
            for i, cam in enumerate(state.cams):
                cam["pose_delta"] += adam.update(f"pose.{i}", grads.poses[i], lrs["pose"])
                fold_pose(cam)
    return state


@dataclass
class FitResult:
    scene: GaussianScene
    medium: MediumModel
    views: list[CameraView]
    trace: list[LossReport]
    final: LossReport


def fit(scene: GaussianScene, medium: MediumModel, views: list[CameraView], truths,
        config: OptimConfig = None, callback=None) -> FitResult:
    """Run ``config.iterations`` backward/step rounds.

    ``trace[i]`` is the loss before step ``i``; ``final`` is measured after the
    last step. The Gaussian count never changes.
    """
    config = config or OptimConfig()
    if not views:
        raise ValueError("fit needs at least one view")
    torch.manual_seed(config.seed)
    state = FitState.from_objects(scene, medium, views)
    truths = [torch.as_tensor(np.asarray(t, dtype=np.float64)) for t in truths]
    groups = []
    if not config.freeze_gaussians:
        groups.append("gaussians")
    if config.optimize_medium:
        groups.append("medium")
    if config.optimize_poses:
        groups.append("poses")
    frozen = None
    if config.freeze_gaussians and not config.optimize_poses:
        with torch.no_grad():
            frozen = []
            for v, cam in zip(views, state.cams):
                proj = project_tensors(state.gaussians, cam, v)
                frozen.append((proj, build_plan(proj, v.height, v.width)))
    adam = Adam()
    trace: list[LossReport] = []
    for it in range(config.iterations):
        report, grads = backward(state, views, truths, config.lam, groups=groups,
                                 dssim_weight=config.dssim_weight, frozen=frozen)
        trace.append(report)
        if report.total > DIVERGENCE:
            raise DivergenceError(f"loss {report.total:.3e} exceeded {DIVERGENCE:g} at iteration {it}", trace)
        step(state, grads, adam, config.lrs, groups)
        if callback is not None:
            callback(it, report)
    final, _ = backward(state, views, truths, config.lam, groups=(), dssim_weight=config.dssim_weight,
                        frozen=frozen)
    if not math.isfinite(final.total) or final.total > DIVERGENCE:
        raise DivergenceError(f"final loss {final.total}", trace)
    return FitResult(state.scene(), state.medium_model(), state.views(views), trace, final)
