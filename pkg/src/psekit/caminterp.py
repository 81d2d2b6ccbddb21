"""Class activation maps from the GAP-linear head, Boolean discriminative
maps, and the interpretability score of a perturbation.

Because the classifier head acts on globally averaged last-conv features,
the CAM here is exact: the map for class c is the head-weighted sum of the
last conv layer's activation maps, upsampled to input resolution. No
normalization is applied; scaling for display is the writer's concern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .micronet import MicroCnn
from .tensor import bilinear_upsample, quantile

DEFAULT_NU_QUANTILE = 0.7


@dataclass
class Cam:
    class_index: int
    raw: np.ndarray        # feature-resolution map (8x8 for the micro CNN)
    upsampled: np.ndarray  # input-resolution map (32x32)
    nu: float | None = None  # threshold used by the latest boolean_map call


def cam(model: MicroCnn, image: np.ndarray, class_index: int) -> Cam:
    if not 0 <= class_index < model.num_classes:
        raise ValueError(f"class index {class_index} out of range")
    acts = model.forward(np.asarray(image, np.float32))
    w = model.weights["head.weight"][class_index].astype(acts.conv3.dtype)
    raw = np.einsum("k,khw->hw", w, acts.conv3)
    h, wdt = image.shape[-2], image.shape[-1]
    return Cam(class_index, raw, bilinear_upsample(raw[None], h, wdt)[0])


def boolean_map(cam_obj: Cam, nu_quantile: float = DEFAULT_NU_QUANTILE) -> np.ndarray:
    """Binary map of the most discriminative region: pixels whose upsampled
    CAM value reaches the nearest-rank nu-quantile."""
    nu = quantile(cam_obj.upsampled.ravel(), nu_quantile)
    cam_obj.nu = nu
    return (cam_obj.upsampled >= nu).astype(np.float32)


def interpretability_score(delta: np.ndarray, bmap: np.ndarray) -> float:
    """Fraction of perturbation l2 energy inside the discriminative region."""
    d = np.asarray(delta, np.float64)
    total = float((d * d).sum())
    if total == 0.0:
        raise ValueError("undefined IS for zero perturbation")
    inside = d * np.asarray(bmap, np.float64)[None]
    return float(np.sqrt((inside * inside).sum() / total))


def is_sweep(delta: np.ndarray, cam_obj: Cam, nu_grid) -> list[tuple[float, float]]:
    out = []
    for q in nu_grid:
        bmap = boolean_map(cam_obj, q)
        out.append((float(q), interpretability_score(delta, bmap)))
    return out
