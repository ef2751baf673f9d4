"""Class-activation maps: Grad-CAM, Grad-CAM++ and Eigen-CAM, plus overlays.

A map is computed from an :class:`ActivationCapture` (activations of one
layer for one image, and optionally the gradient of a class logit w.r.t.
those activations). Maps live on the layer's spatial grid; ``upsample`` and
``overlay`` bring them to input resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from matplotlib import colormaps

logger = logging.getLogger(__name__)

EPS = 1e-12
COLORMAP = "jet"


@dataclass(frozen=True)
class ActivationCapture:
    layer: str
    activations: np.ndarray  # (K, h, w)
    gradients: Optional[np.ndarray] = None  # d logit_c / dA, same shape
    class_index: Optional[int] = None
    input_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.activations.ndim != 3:
            raise ValueError(f"activations must be (K, h, w), got {self.activations.shape}")
        if self.gradients is not None and self.gradients.shape != self.activations.shape:
            raise ValueError("activation and gradient shapes differ")

    def require_gradients(self) -> np.ndarray:
        if self.gradients is None:
            raise ValueError("this map needs gradients; capture with with_gradients=True")
        return self.gradients


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    normalization: str = "raw"
    method: str = ""
    class_index: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def minmax(self) -> "Heatmap":
        """Rescale to ``[0, 1]``. A constant map becomes all ones if positive, else all zeros."""
        v = self.values.astype(np.float64)
        lo, hi = float(v.min()), float(v.max())
        # relative test so the result does not depend on the map's overall scale
        if hi - lo <= EPS * max(abs(hi), abs(lo)):
            out = np.full_like(v, 1.0 if hi > 0 else 0.0)
        else:
            out = (v - lo) / (hi - lo)
        return replace(self, values=out, normalization="minmax")

    def upsample(self, size: tuple[int, int]) -> "Heatmap":
        t = torch.from_numpy(np.ascontiguousarray(self.values, dtype=np.float64))[None, None]
        up = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()
        if self.normalization == "minmax":
            up = np.clip(up, 0.0, 1.0)
        return replace(self, values=up)


def capture(
    model: nn.Module,
    image: torch.Tensor,
    layer: Optional[nn.Module] = None,
    class_index: Optional[int] = None,
    with_gradients: bool = True,
    layer_name: str = "encoder.stages[-1]",
) -> ActivationCapture:
    """Run one forward (and backward) pass and record the target layer.

    ``model`` maps images to class logits and must expose ``encoder.target_layer``
    unless ``layer`` is given. The explained class defaults to the predicted one.
    Parameter gradients are not touched.
    """
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise ValueError("capture explains one image at a time")
    layer = layer if layer is not None else model.encoder.target_layer
    store: dict[str, torch.Tensor] = {}
    handle = layer.register_forward_hook(lambda m, i, o: store.__setitem__("a", o))
    was_training = model.training
    model.eval()
    try:
        with torch.set_grad_enabled(with_gradients):
            logits = model(image)
    finally:
        handle.remove()
        model.train(was_training)
    act = store["a"]
    c = int(logits[0].argmax()) if class_index is None else int(class_index)
    grads = None
    if with_gradients:
        (g,) = torch.autograd.grad(logits[0, c], act)
        grads = g[0].detach().double().numpy()
    return ActivationCapture(layer_name, act[0].detach().double().numpy(), grads, c, tuple(image.shape[-2:]))


def grad_cam(cap: ActivationCapture) -> Heatmap:
    """ReLU of the activations weighted by spatially averaged gradients."""
    g = cap.require_gradients()
    if not np.any(g):
        logger.warning("all-zero gradients; Grad-CAM map is zero")
    alpha = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, cap.activations, axes=1), 0.0)
    return Heatmap(cam, "raw", "gradcam", cap.class_index)


def grad_cam_pp(cap: ActivationCapture) -> Heatmap:
    """Grad-CAM++: per-pixel weights from second and third gradient powers."""
    a = cap.activations
    g = cap.require_gradients()
    if not np.any(g):
        logger.warning("all-zero gradients; Grad-CAM++ map is zero")
    g2, g3 = g**2, g**3
    denom = 2 * g2 + a.sum(axis=(1, 2), keepdims=True) * g3
    alpha = np.zeros_like(g)
    ok = np.abs(denom) >= EPS
    alpha[ok] = g2[ok] / denom[ok]
    weights = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    return Heatmap(cam, "raw", "gradcampp", cap.class_index)


def eigen_cam(cap: ActivationCapture) -> Heatmap:
    """Magnitude of the activations' projection on their first right singular vector."""
    a = cap.activations
    k, h, w = a.shape
    m = a.reshape(k, h * w).T
    if not np.any(m):
        logger.warning("all-zero activations; Eigen-CAM map is zero")
        return Heatmap(np.zeros((h, w)), "raw", "eigencam", cap.class_index)
    _, _, vt = np.linalg.svd(m, full_matrices=False)
    proj = m @ vt[0]
    if proj.mean() < 0:
        proj = -proj
    return Heatmap(np.abs(proj).reshape(h, w), "raw", "eigencam", cap.class_index)


CAM_METHODS = {"gradcam": grad_cam, "gradcampp": grad_cam_pp, "eigencam": eigen_cam}


def overlay(heatmap: Heatmap, image: np.ndarray) -> np.ndarray:
    """Blend a colour-mapped heatmap over a grayscale ``[0, 1]`` image.

    The per-pixel blend weight equals the (min-max normalized) map value, so
    zero-valued pixels show the input unchanged. Returns ``(H, W, 3)`` floats.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=-1)
    hm = heatmap if heatmap.normalization == "minmax" else heatmap.minmax()
    if hm.shape != image.shape:
        hm = hm.upsample(image.shape)
    weight = hm.values[..., None]
    colour = colormaps[COLORMAP](hm.values)[..., :3]
    gray = np.repeat(image[..., None], 3, axis=-1)
    return (1 - weight) * gray + weight * colour


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def map_statistics(heatmap: Heatmap, region: Optional[tuple[int, int, int, int]] = None) -> dict:
    """``min``, ``max``, ``mean`` and, for a ``(top, left, bottom, right)`` region, the mass fraction inside it."""
    v = heatmap.values
    stats = {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean())}
    if region is not None:
        t, l, b, r = region
        total = float(v.sum())
        stats["mass_in_region"] = float(v[t:b, l:r].sum() / total) if total > 0 else 0.0
    return stats


def top_fraction_mask(heatmap: Heatmap, fraction: float) -> np.ndarray:
    """Boolean mask of the ``fraction`` highest-valued pixels (ties broken by position)."""
    flat = heatmap.values.ravel()
    n = int(round(fraction * flat.size))
    mask = np.zeros(flat.size, dtype=bool)
    mask[np.argsort(-flat, kind="stable")[:n]] = True
    return mask.reshape(heatmap.values.shape)


def random_fraction_mask(shape: tuple[int, int], fraction: float, rng: np.random.Generator,
                         grid: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Random mask covering ``fraction`` of the pixels.

    With ``grid`` the mask is the top ``fraction`` of uniform noise drawn on
    that grid and bilinearly upsampled, so it has the same blockiness as an
    upsampled heatmap; otherwise pixels are drawn independently.
    """
    if grid is not None:
        noise = Heatmap(rng.random(grid)).upsample(shape)
        return top_fraction_mask(noise, fraction)
    size = shape[0] * shape[1]
    n = int(round(fraction * size))
    mask = np.zeros(size, dtype=bool)
    mask[rng.choice(size, n, replace=False)] = True
    return mask.reshape(shape)
