"""From pairwise point maps to an initial Gaussian scene.

The alignment model: edge ``e = (a, b)`` carries point maps for views ``a``
and ``b`` expressed in view ``a``'s frame at an unknown scale. Each frame owner
``a`` gets a rigid transform ``(R_a, t_a)``, each edge a scale ``s_e``, and
each view a fused per-pixel point ``chi_v``. The objective is::

    sum_e sum_{v in e} sum_p conf * || s_e (R_a X^{v,e}_p + t_a) - chi_v(p) ||^2

For fixed transforms and scales the optimal fused points are the
confidence-weighted means, so they are eliminated in closed form and only
transforms and scales are descended on.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import rotmat_to_quat_np, so3_exp
from .scene import GaussianScene, PointMap, color_to_sh0, logit

log = logging.getLogger(__name__)

DEFAULT_CONF_ALPHA = 0.2
DEFAULT_KNN = 6
INITIAL_OPACITY = 0.1


# --------------------------------------------------------------------------- losses

def _check_pair(pred: PointMap, truth: PointMap):
    if pred.shape != truth.shape:
        raise ValueError(f"point map shapes differ: {pred.shape} vs {truth.shape}")


def regression_residuals(pred: PointMap, truth: PointMap) -> np.ndarray:
    """Per-pixel distance between scale-normalised maps, shape ``(H, W)``."""
    _check_pair(pred, truth)
    diff = pred.points / pred.normalizer() - truth.points / truth.normalizer()
    return np.linalg.norm(diff, axis=-1)


def regression_loss(pred: PointMap, truth: PointMap) -> float:
    return float(regression_residuals(pred, truth).mean())


def confidence_loss(pred: PointMap, truth: PointMap, alpha: float = DEFAULT_CONF_ALPHA) -> float:
    """Confidence-weighted regression with a ``-alpha log(conf)`` penalty, summed over pixels."""
    gamma = pred.confidences
    if np.any(gamma <= 0):
        raise ValueError("confidences must be positive")
    r = regression_residuals(pred, truth)
    return float(np.sum(gamma * r - alpha * np.log(gamma)))


# --------------------------------------------------------------------------- graph

@dataclass
class Edge:
    a: int  # frame owner
    b: int
    map_a: PointMap
    map_b: PointMap

    def maps(self):
        return ((self.a, self.map_a), (self.b, self.map_b))


@dataclass
class ViewGraph:
    nodes: list[int]
    edges: list[Edge]

    def __post_init__(self):
        self.nodes = [int(n) for n in self.nodes]
        if not self.edges:
            raise ValueError("view graph needs at least one edge")
        known = set(self.nodes)
        for e in self.edges:
            if e.a == e.b:
                raise ValueError(f"self-edge on view {e.a}")
            if e.a not in known or e.b not in known:
                raise ValueError(f"edge ({e.a}, {e.b}) references an unknown view")
        if not self.is_connected():
            raise ValueError("view graph is not connected")

    def is_connected(self) -> bool:
        adj = {n: set() for n in self.nodes}
        for e in self.edges:
            adj[e.a].add(e.b)
            adj[e.b].add(e.a)
        seen = {self.nodes[0]}
        todo = deque(seen)
        while todo:
            for m in adj[todo.popleft()] - seen:
                seen.add(m)
                todo.append(m)
        return len(seen) == len(self.nodes)

    def view_shape(self, v: int) -> tuple[int, int]:
        for e in self.edges:
            for u, pm in e.maps():
                if u == v:
                    return pm.shape
        raise KeyError(v)


@dataclass
class AlignmentSolution:
    rotations: np.ndarray  # (V, 4), frame -> world
    translations: np.ndarray  # (V, 3)
    scales: np.ndarray  # (E,)
    fused: dict[int, np.ndarray]  # view -> (H, W, 3)
    fused_confidence: dict[int, np.ndarray]  # view -> (H, W)
    objective_trace: list[float] = field(default_factory=list)
    identity_objective: float = float("nan")

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    def cloud(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([self.fused[v].reshape(-1, 3) for v in sorted(self.fused)])
        conf = np.concatenate([self.fused_confidence[v].reshape(-1) for v in sorted(self.fused)])
        return pts, conf

    def report(self) -> dict:
        return {
            "rotations": self.rotations.tolist(),
            "translations": self.translations.tolist(),
            "scales": self.scales.tolist(),
            "objective_trace": self.objective_trace,
            "identity_objective": self.identity_objective,
        }


# --------------------------------------------------------------------------- alignment

def umeyama(src: np.ndarray, dst: np.ndarray, w: np.ndarray, with_scale: bool = True):
    """Weighted similarity ``dst ~ s R src + t`` (Umeyama 1991)."""
    w = w / w.sum()
    mu_s, mu_d = w @ src, w @ dst
    xs, xd = src - mu_s, dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var = float(w @ (xs ** 2).sum(1))
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale else 1.0
    return s, R, mu_d - s * R @ mu_s


class _Problem:
    """Flattened alignment data, one entry per (edge, view) block."""

    def __init__(self, graph: ViewGraph):
        self.graph = graph
        self.views = sorted(graph.nodes)
        self.vindex = {v: i for i, v in enumerate(self.views)}
        self.blocks = []  # (edge idx, owner, view, points (M,3), conf (M,))
        for k, e in enumerate(graph.edges):
            for v, pm in e.maps():
                self.blocks.append((k, e.a, v, torch.tensor(pm.points.reshape(-1, 3)),
                                    torch.tensor(pm.confidences.reshape(-1))))
        self.shapes = {v: graph.view_shape(v) for v in self.views}

    def world(self, R, t, log_s):
        s = torch.exp(log_s)
        return [s[k] * (pts @ R[self.vindex[a]].T + t[self.vindex[a]]) for k, a, _, pts, _ in self.blocks]

    def fuse(self, world):
        num, den = {}, {}
        for (_, _, v, _, conf), wpts in zip(self.blocks, world):
            num[v] = num.get(v, 0) + conf[:, None] * wpts
            den[v] = den.get(v, 0) + conf
        return {v: num[v] / den[v][:, None] for v in num}, den

    def objective(self, R, t, log_s) -> torch.Tensor:
        world = self.world(R, t, log_s)
        chi, _ = self.fuse(world)
        total = 0
        for (_, _, v, _, conf), wpts in zip(self.blocks, world):
            total = total + (conf * ((wpts - chi[v]) ** 2).sum(1)).sum()
        return total


def _initialise(prob: _Problem):
    """Chain edges outward from view 0, seeding fused points from the first incident edge."""
    g = prob.graph
    V = len(prob.views)
    R = np.tile(np.eye(3), (V, 1, 1))
    t = np.zeros((V, 3))
    s = np.ones(len(g.edges))
    owned = {prob.views[0]}
    chi: dict[int, np.ndarray] = {}
    pending = list(range(len(g.edges)))
    first = next((k for k in pending if g.edges[k].a == prob.views[0]), None)
    if first is None:
        first = next(k for k in pending if prob.views[0] in (g.edges[k].a, g.edges[k].b))
        owned.add(g.edges[first].a)
    for v, pm in g.edges[first].maps():
        chi[v] = pm.points.reshape(-1, 3)
    pending.remove(first)
    while pending:
        k = next((k for k in pending if any(v in chi for v, _ in g.edges[k].maps())), None)
        if k is None:
            raise ValueError("view graph is not connected")
        pending.remove(k)
        e = g.edges[k]
        ia = prob.vindex[e.a]
        placed = [(pm.points.reshape(-1, 3), chi[v], pm.confidences.reshape(-1)) for v, pm in e.maps() if v in chi]
        src = np.concatenate([p[0] for p in placed])
        dst = np.concatenate([p[1] for p in placed])
        w = np.concatenate([p[2] for p in placed])
        if e.a in owned:
            y = src @ R[ia].T + t[ia]
            s[k] = float((w * (y * dst).sum(1)).sum() / (w * (y * y).sum(1)).sum())
        else:
            sk, Rk, tk = umeyama(src, dst, w)
            R[ia], t[ia], s[k] = Rk, tk / sk, sk
            owned.add(e.a)
        for v, pm in e.maps():
            if v not in chi:
                chi[v] = s[k] * (pm.points.reshape(-1, 3) @ R[ia].T + t[ia])
    return R, t, s


def align(graph: ViewGraph, iters: int = 200, lr: float = 1e-2) -> AlignmentSolution:
    """Globally align pairwise point maps.

    Descends on per-view rotations/translations and per-edge log-scales with a
    backtracking step, so every accepted iteration lowers the objective. View 0
    is pinned to the identity and the scales keep unit geometric mean.
    """
    prob = _Problem(graph)
    V = len(prob.views)
    E = len(graph.edges)
    eye = torch.eye(3, dtype=torch.float64).expand(V, 3, 3)
    with torch.no_grad():
        identity_obj = float(prob.objective(eye, torch.zeros(V, 3, dtype=torch.float64),
                                            torch.zeros(E, dtype=torch.float64)))
    R0, t0, s0 = _initialise(prob)
    g_mean = np.exp(np.log(s0).mean())
    R0 = torch.tensor(R0)
    t = torch.tensor(t0)
    log_s = torch.tensor(np.log(s0 / g_mean))
    omega = torch.zeros(V, 3, dtype=torch.float64)
    free = torch.ones(V, 1, dtype=torch.float64)
    free[0] = 0.0

    def f(omega, t, log_s):
        return prob.objective(so3_exp(omega * free) @ R0, t * free, log_s)

    # translations of the pinned view stay zero; rotations are increments on the init
    with torch.no_grad():
        t[0] = 0.0
        current = float(f(omega, t, log_s))
    if not np.isfinite(current):
        raise FloatingPointError("alignment objective is not finite at initialisation")
    trace = [current]
    step = lr
    for _ in range(iters):
        params = [x.detach().clone().requires_grad_() for x in (omega, t, log_s)]
        obj = f(*params)
        obj.backward()
        grads = [p.grad * m for p, m in zip(params, (free, free, 1.0))]
        grads[2] = grads[2] - grads[2].mean()
        gnorm2 = float(sum((g_ * g_).sum() for g_ in grads))
        if gnorm2 == 0 or current == 0:
            break
        accepted = False
        for _ in range(30):
            with torch.no_grad():
                cand = [p - step * g_ for p, g_ in zip(params, grads)]
                val = float(f(*cand))
            if np.isfinite(val) and val <= current - 1e-4 * step * gnorm2:
                omega, t, log_s = (c.detach() for c in cand)
                current = val
                step *= 1.5
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        trace.append(current)
    if not np.isfinite(current):
        raise FloatingPointError("alignment objective became non-finite")

    with torch.no_grad():
        R = so3_exp(omega * free) @ R0
        world = prob.world(R, t * free, log_s)
        chi, den = prob.fuse(world)
    counts = {}
    for _, _, v, _, _ in prob.blocks:
        counts[v] = counts.get(v, 0) + 1
    fused = {v: chi[v].numpy().reshape(*prob.shapes[v], 3) for v in chi}
    fconf = {v: (den[v] / counts[v]).numpy().reshape(prob.shapes[v]) for v in chi}
    quats = np.stack([rotmat_to_quat_np(r) for r in R.numpy()])
    log.debug("align: %d accepted steps, objective %.3e -> %.3e", len(trace) - 1, trace[0], trace[-1])
    return AlignmentSolution(quats, (t * free).numpy(), torch.exp(log_s).numpy(), fused, fconf,
                             trace, identity_obj)


# --------------------------------------------------------------------------- downsampling

def downsample(points, confidences, voxel_size: float, return_index: bool = False):
    """Keep the most confident point of every occupied voxel.

    Ties go to the lowest input index; survivors keep their input order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if len(pts) != len(conf):
        raise ValueError("points and confidences differ in length")
    if len(pts) == 0:
        idx = np.zeros(0, dtype=np.int64)
    else:
        keys = np.floor(pts / voxel_size).astype(np.int64)
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        order = np.lexsort((np.arange(len(pts)), -conf, inv))
        first = np.ones(len(order), dtype=bool)
        first[1:] = inv[order][1:] != inv[order][:-1]
        idx = np.sort(order[first])
    if return_index:
        return pts[idx], conf[idx], idx
    return pts[idx], conf[idx]


# --------------------------------------------------------------------------- gaussians

def to_gaussians(points, colors, knn: int = DEFAULT_KNN, opacity: float = INITIAL_OPACITY,
                 min_scale: float = 1e-7) -> GaussianScene:
    """One isotropic Gaussian per point, sized by the mean distance to its ``knn`` neighbours."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(rgb) != len(pts):
        raise ValueError("points and colors differ in length")
    if len(pts) < knn + 1:
        raise ValueError(f"need at least {knn + 1} points for knn={knn}, got {len(pts)}")
    dist, _ = cKDTree(pts).query(pts, k=knn + 1)
    scale = np.maximum(dist[:, 1:].mean(1), min_scale)
    n = len(pts)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianScene(pts, color_to_sh0(rgb)[:, None, :], np.full(n, float(logit(opacity))), rot,
                         np.repeat(np.log(scale)[:, None], 3, axis=1))
