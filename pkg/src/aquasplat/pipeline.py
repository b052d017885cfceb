"""Initialisation glue: from pairwise point maps and images to an initial Gaussian scene."""
from __future__ import annotations

import numpy as np

from . import io
from .geometry import quat_to_rotmat_np
from .pointmap import AlignmentSolution, Edge, ViewGraph, downsample, to_gaussians
from .scene import CameraView, GaussianScene, MediumModel, PointMap

INIT_LONG_SIDE = 512
MIN_CONFIDENCE = 1.1
INITIAL_SIGMA = 0.1


def downsample_graph(graph: ViewGraph, voxel_size: float) -> ViewGraph:
    """Voxel-downsample every view's pixels before alignment.

    The kept pixel set of view ``v`` is chosen once, from the first edge that
    owns ``v``'s frame (or any edge containing ``v``), and applied to all of
    ``v``'s maps so the maps stay pixel-aligned across edges. Maps become
    ``1 x M`` grids.
    """
    keep: dict[int, np.ndarray] = {}
    for v in graph.nodes:
        e = next((e for e in graph.edges if e.a == v), None) or next(e for e in graph.edges if e.b == v)
        pm = e.map_a if e.a == v else e.map_b
        keep[v] = downsample(pm.points, pm.confidences, voxel_size, return_index=True)[2]

    def cut(pm: PointMap) -> PointMap:
        idx = keep[pm.view_id]
        return PointMap(pm.view_id, pm.points.reshape(-1, 3)[idx][None], pm.confidences.reshape(-1)[idx][None],
                        pm.scale)

    return ViewGraph(list(graph.nodes), [Edge(e.a, e.b, cut(e.map_a), cut(e.map_b)) for e in graph.edges])


def view_colors(image, shape: tuple[int, int]) -> np.ndarray:
    """Colours at point-map resolution from an image resized to the init resolution."""
    init = io.resize_long_side(image, INIT_LONG_SIDE)
    return np.clip(io.resize_to(init, shape[1], shape[0]), 0.0, 1.0)


def _rotation_mean(mats) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.sum(mats, axis=0))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def register_to_cameras(sol: AlignmentSolution, graph: ViewGraph, views: list[CameraView]):
    """Similarity ``(k, Q, u)`` taking the alignment frame into the cameras' world frame.

    Rotation is the chordal mean of ``R_c2w R_v^T`` over views; scale and offset
    are least squares on camera centres. Needs two views with distinct centres.
    """
    nodes = sorted(graph.nodes)
    scales: dict[int, list[float]] = {}
    for s, e in zip(sol.scales, graph.edges):
        scales.setdefault(e.a, []).append(float(s))
    owned = [v for v in nodes if v in scales]
    if len(owned) < 2:
        raise ValueError("registration needs at least two views that own an edge")
    rots, src, dst = [], [], []
    for v in owned:
        i = nodes.index(v)
        Rv = quat_to_rotmat_np(sol.rotations[i])
        sv = float(np.exp(np.mean(np.log(scales[v]))))
        Rw, tw = views[v].world_to_camera()
        rots.append(Rw.T @ Rv.T)
        src.append(sv * sol.translations[i])
        dst.append(-Rw.T @ tw)
    Q = _rotation_mean(rots)
    src, dst = np.asarray(src), np.asarray(dst)
    ps, pd = src - src.mean(0), dst - dst.mean(0)
    denom = float((ps ** 2).sum())
    if denom == 0:
        raise ValueError("camera centres coincide; registration scale is undefined")
    k = float((pd * (ps @ Q.T)).sum() / denom)
    if k <= 0:
        raise ValueError("registration produced a non-positive scale")
    u = dst.mean(0) - k * Q @ src.mean(0)
    return k, Q, u


def initial_medium(images) -> MediumModel:
    """Water colour guessed from the median image colour; small uniform coefficients."""
    px = np.concatenate([np.asarray(im).reshape(-1, 3) for im in images])
    return MediumModel(np.clip(np.median(px, axis=0), 0.0, 1.0), np.full(3, INITIAL_SIGMA), np.full(3, INITIAL_SIGMA))


def initialize(graph: ViewGraph, sol: AlignmentSolution, images, views: list[CameraView], voxel_size: float,
               min_confidence: float = MIN_CONFIDENCE, knn: int = 6) -> GaussianScene:
    """Fused cloud -> confidence filter -> voxel downsample -> Gaussians, in the camera frame."""
    k, Q, u = register_to_cameras(sol, graph, views)
    pts, conf, cols = [], [], []
    for v in sorted(sol.fused):
        f = sol.fused[v]
        pts.append(f.reshape(-1, 3))
        conf.append(sol.fused_confidence[v].reshape(-1))
        cols.append(view_colors(images[v], f.shape[:2]).reshape(-1, 3))
    pts = k * np.concatenate(pts) @ Q.T + u
    conf, cols = np.concatenate(conf), np.concatenate(cols)
    sel = conf > min_confidence
    if sel.sum() < knn + 1:
        raise ValueError(f"only {int(sel.sum())} points above confidence {min_confidence}")
    p, _, idx = downsample(pts[sel], conf[sel], voxel_size, return_index=True)
    if len(p) < knn + 1:
        raise ValueError(f"downsampling left {len(p)} points; use a smaller voxel size")
    return to_gaussians(p, cols[sel][idx], knn=knn)
