"""File formats: scene PLY, JSON sidecars, point-map binaries, clouds and images.

Property names and layouts are documented in SCHEMA.md.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from .pointmap import Edge, ViewGraph
from .scene import CameraView, GaussianScene, MediumModel, PointMap, sh_degree_from_count

PM_MAGIC = b"AQPM"
PM_VERSION = 1
PM_HEADER = struct.Struct("<4sIIIid")  # magic, version, height, width, view_id, scale (NaN = none)


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


# --------------------------------------------------------------------------- scenes

def _scene_props(n_rest: int) -> list[str]:
    return (["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] + [f"f_rest_{i}" for i in range(n_rest)]
            + ["opacity", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2"])


def write_scene(path, scene: GaussianScene) -> None:
    n, k = len(scene), scene.sh.shape[1]
    # higher-order coefficients are stored channel-major, as in common splatting tools
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (k - 1))
    cols = np.concatenate([scene.positions, scene.sh[:, 0, :], rest, scene.opacity_logit[:, None],
                           scene.rotation, scene.log_scale], axis=1)
    names = _scene_props(3 * (k - 1))
    arr = np.empty(n, dtype=[(p, "f8") for p in names])
    for i, p in enumerate(names):
        arr[p] = cols[:, i]
    el = PlyElement.describe(arr, "vertex")
    PlyData([el], byte_order="<", comments=[f"sh_degree {scene.sh_degree}"]).write(str(path))


def read_scene(path) -> GaussianScene:
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
    except (OSError, KeyError, ValueError, struct.error, PlyParseError) as exc:
        raise FormatError(f"{path}: not a scene PLY ({exc})") from exc
    names = v.dtype.names
    n_rest = sum(1 for p in names if p.startswith("f_rest_"))
    missing = [p for p in _scene_props(n_rest) if p not in names]
    if missing:
        raise FormatError(f"{path}: missing properties {missing}")
    k = n_rest // 3 + 1
    sh_degree_from_count(k)
    n = len(v)

    def cols(props):
        return np.stack([np.asarray(v[p], dtype=np.float64) for p in props], axis=1) if n else np.zeros((0, len(props)))

    sh = np.zeros((n, k, 3))
    sh[:, 0] = cols(["f_dc_0", "f_dc_1", "f_dc_2"])
    if k > 1:
        sh[:, 1:] = cols([f"f_rest_{i}" for i in range(n_rest)]).reshape(n, 3, k - 1).transpose(0, 2, 1)
    if n == 0:
        return GaussianScene.empty(sh_degree_from_count(k))
    return GaussianScene(cols(["x", "y", "z"]), sh, cols(["opacity"])[:, 0],
                         cols(["rot_0", "rot_1", "rot_2", "rot_3"]), cols(["scale_0", "scale_1", "scale_2"]))


# --------------------------------------------------------------------------- JSON sidecars

def medium_to_dict(m: MediumModel) -> dict:
    d = {"variant": m.variant, "backscatter_color": m.backscatter_color.tolist(),
         "sigma_attn": m.sigma_attn.tolist(), "sigma_bs": m.sigma_bs.tolist()}
    if m.net_params is not None:
        d["net_params"] = {k: v.tolist() for k, v in m.net_params.items()}
    return d


def medium_from_dict(d: dict) -> MediumModel:
    try:
        return MediumModel(d["backscatter_color"], d["sigma_attn"], d["sigma_bs"], d.get("variant", "parametric"),
                           d.get("net_params"))
    except KeyError as exc:
        raise FormatError(f"medium is missing field {exc}") from exc


def camera_to_dict(v: CameraView) -> dict:
    return {"fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy, "width": v.width, "height": v.height,
            "rotation": v.rotation.tolist(), "translation": v.translation.tolist(),
            "pose_delta": v.pose_delta.tolist()}


def camera_from_dict(d: dict) -> CameraView:
    try:
        return CameraView(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], d["rotation"],
                          d["translation"], d.get("pose_delta", np.zeros(6)))
    except KeyError as exc:
        raise FormatError(f"camera is missing field {exc}") from exc


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_medium(path, m: MediumModel) -> None:
    write_json(path, medium_to_dict(m))


def read_medium(path) -> MediumModel:
    return medium_from_dict(_read_json(path))


def write_cameras(path, views: list[CameraView]) -> None:
    write_json(path, {"cameras": [camera_to_dict(v) for v in views]})


def read_cameras(path) -> list[CameraView]:
    d = _read_json(path)
    if not isinstance(d, dict) or "cameras" not in d:
        raise FormatError(f"{path}: expected an object with a 'cameras' list")
    return [camera_from_dict(c) for c in d["cameras"]]


# --------------------------------------------------------------------------- point maps

def write_pointmap(path, pm: PointMap) -> None:
    h, w = pm.shape
    scale = float("nan") if pm.scale is None else float(pm.scale)
    with open(path, "wb") as f:
        f.write(PM_HEADER.pack(PM_MAGIC, PM_VERSION, h, w, pm.view_id, scale))
        f.write(pm.points.astype("<f4").tobytes())
        f.write(pm.confidences.astype("<f4").tobytes())


def read_pointmap(path) -> PointMap:
    data = Path(path).read_bytes()
    if len(data) < PM_HEADER.size:
        raise FormatError(f"{path}: truncated point-map header")
    magic, version, h, w, view_id, scale = PM_HEADER.unpack_from(data)
    if magic != PM_MAGIC or version != PM_VERSION:
        raise FormatError(f"{path}: not a point-map file")
    n = h * w
    if len(data) != PM_HEADER.size + 16 * n:
        raise FormatError(f"{path}: size does not match {h}x{w} header")
    body = np.frombuffer(data, dtype="<f4", offset=PM_HEADER.size)
    pts = body[:3 * n].reshape(h, w, 3).astype(np.float64)
    conf = body[3 * n:].reshape(h, w).astype(np.float64)
    return PointMap(view_id, pts, conf, None if np.isnan(scale) else scale)


def write_graph(directory, graph: ViewGraph) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    edges = []
    for e in graph.edges:
        fa, fb = f"edge_{e.a}_{e.b}_a.pm", f"edge_{e.a}_{e.b}_b.pm"
        write_pointmap(d / fa, e.map_a)
        write_pointmap(d / fb, e.map_b)
        edges.append({"a": e.a, "b": e.b, "map_a": fa, "map_b": fb})
    write_json(d / "graph.json", {"nodes": graph.nodes, "edges": edges})


def read_graph(directory) -> ViewGraph:
    d = Path(directory)
    if not (d / "graph.json").is_file():
        raise FileNotFoundError(f"{d}: no graph.json")
    meta = _read_json(d / "graph.json")
    edges = []
    for e in meta["edges"]:
        ma, mb = read_pointmap(d / e["map_a"]), read_pointmap(d / e["map_b"])
        if ma.view_id != e["a"] or mb.view_id != e["b"]:
            raise FormatError(f"edge ({e['a']}, {e['b']}): point-map view ids disagree with graph.json")
        edges.append(Edge(int(e["a"]), int(e["b"]), ma, mb))
    return ViewGraph(meta["nodes"], edges)


# --------------------------------------------------------------------------- clouds

def write_cloud(path, points, confidences, colors=None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("confidence", "f8")]
    if colors is not None:
        fields += [("red", "f8"), ("green", "f8"), ("blue", "f8")]
    arr = np.empty(len(points), dtype=fields)
    arr["x"], arr["y"], arr["z"] = points.T
    arr["confidence"] = confidences
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        arr["red"], arr["green"], arr["blue"] = colors.T
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(path))


def read_cloud(path):
    """``(points, confidences, colors or None)``; colours are linear floats."""
    try:
        v = PlyData.read(str(path))["vertex"].data
    except (OSError, KeyError, ValueError, struct.error, PlyParseError) as exc:
        raise FormatError(f"{path}: not a cloud PLY ({exc})") from exc
    names = v.dtype.names
    if "confidence" not in names:
        raise FormatError(f"{path}: cloud has no confidence property")
    pts = np.stack([np.asarray(v[c], dtype=np.float64) for c in "xyz"], axis=1).reshape(-1, 3)
    conf = np.asarray(v["confidence"], dtype=np.float64)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([np.asarray(v[c], dtype=np.float64) for c in ("red", "green", "blue")], axis=1)
    return pts, conf, colors


# --------------------------------------------------------------------------- images

def to_uint8(img, gamma: bool = False) -> np.ndarray:
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if gamma:
        x = x ** (1 / 2.2)
    return np.round(x * 255).astype(np.uint8)


def write_png(path, img, gamma: bool = False) -> None:
    Image.fromarray(to_uint8(img, gamma)).save(str(path), optimize=False)


def read_image(path, gamma: bool = False) -> np.ndarray:
    """Linear float RGB ``(H, W, 3)`` from ``.npy`` (raw) or an 8-bit image."""
    p = Path(path)
    if p.suffix == ".npy":
        a = np.load(p)
        if a.ndim != 3 or a.shape[-1] != 3:
            raise FormatError(f"{p}: expected an H x W x 3 array")
        return a.astype(np.float64)
    try:
        a = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"{p}: unreadable image ({exc})") from exc
    return a ** 2.2 if gamma else a


def resize_long_side(img, long_side: int) -> np.ndarray:
    """Bicubic resize of a float image so its longer side equals ``long_side``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    s = long_side / max(h, w)
    size = (max(1, round(w * s)), max(1, round(h * s)))
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize(size, Image.BICUBIC))
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)


def resize_to(img, width: int, height: int) -> np.ndarray:
    """Box-filter resample to an exact size (used to colour point-map pixels)."""
    img = np.asarray(img, dtype=np.float64)
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize((width, height), Image.BOX))
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)


def save_npy(path, a) -> None:
    np.save(path, np.asarray(a))

