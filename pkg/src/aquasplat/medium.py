"""Medium evaluation: stored coefficients or a tiny direction-conditioned MLP."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .scene import PARAMETRIC, TINYNET, MediumModel

NET_KEYS = ("w1", "b1", "w2", "b2", "w_color", "b_color", "w_attn", "b_attn", "w_bs", "b_bs")


def medium_tensors(medium: MediumModel, dtype=torch.float64) -> dict[str, torch.Tensor]:
    """Leaf tensors for the medium's trainable parameters."""
    if medium.variant == TINYNET:
        return {k: torch.tensor(medium.net_params[k], dtype=dtype) for k in NET_KEYS}
    return {
        "backscatter_color": torch.tensor(medium.backscatter_color, dtype=dtype),
        "sigma_attn": torch.tensor(medium.sigma_attn, dtype=dtype),
        "sigma_bs": torch.tensor(medium.sigma_bs, dtype=dtype),
    }


def medium_from_tensors(tensors: dict[str, torch.Tensor], variant: str = PARAMETRIC) -> MediumModel:
    arr = {k: v.detach().cpu().numpy().astype(np.float64) for k, v in tensors.items()}
    if variant == TINYNET:
        return MediumModel(variant=TINYNET, net_params=arr)
    return MediumModel(arr["backscatter_color"], arr["sigma_attn"], arr["sigma_bs"])


def tinynet_forward(net: dict[str, torch.Tensor], dirs: torch.Tensor):
    h = torch.sigmoid(dirs @ net["w1"] + net["b1"])
    h = torch.sigmoid(h @ net["w2"] + net["b2"])
    color = torch.sigmoid(h @ net["w_color"] + net["b_color"])
    attn = F.softplus(h @ net["w_attn"] + net["b_attn"])
    bs = F.softplus(h @ net["w_bs"] + net["b_bs"])
    return color, attn, bs


def medium_fields(tensors: dict[str, torch.Tensor], variant: str, dirs_fn):
    """``(color, sigma_attn, sigma_bs)``, each ``(3,)`` or per-ray ``(P, 3)``.

    ``dirs_fn`` is only called for the network variant, so parametric renders
    never pay for ray directions.
    """
    if variant == TINYNET:
        return tinynet_forward(tensors, dirs_fn())
    return tensors["backscatter_color"], tensors["sigma_attn"], tensors["sigma_bs"]


def medium_query(medium: MediumModel, ray_dir) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = np.asarray(ray_dir, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("ray_dir must be unit length")
    if medium.variant == PARAMETRIC:
        return medium.backscatter_color.copy(), medium.sigma_attn.copy(), medium.sigma_bs.copy()
    out = tinynet_forward(medium_tensors(medium), torch.tensor(d)[None])
    return tuple(o[0].numpy() for o in out)
