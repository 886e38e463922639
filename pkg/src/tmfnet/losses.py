"""Training losses: robust alpha/composition terms plus a Laplacian
pyramid term, combined as 0.5*alpha + 1.5*composition + 0.2*laplacian.

Alpha and composition losses average over the trimap's unknown region;
the Laplacian term covers the full image. All losses are differentiable
through the prediction and return scalar tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import functional as F
from .autograd import Tensor, as_tensor  # noqa: F401  (Tensor used in cached helper)

ROBUST_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    comp: float = 1.5
    lap: float = 0.2

    def __post_init__(self):
        if min(self.alpha, self.comp, self.lap) < 0:
            raise ValueError("loss weights must be non-negative")


def _zero_like(pred: Tensor) -> Tensor:
    return as_tensor(np.zeros((), dtype=pred.dtype))


def _robust_abs(diff: Tensor) -> Tensor:
    # sqrt(d^2 + eps^2): smooth L1 with a floor of eps at zero error
    return F.sqrt(F.add(F.mul(diff, diff), ROBUST_EPS * ROBUST_EPS))


def alpha_loss(pred: Tensor, gt, region: np.ndarray) -> Tensor:
    """Mean robust L1 between predicted and true alpha over the region."""
    gt = as_tensor(gt, dtype=pred.dtype)
    region = np.asarray(region, dtype=pred.dtype)
    count = float(region.sum())
    if count == 0:
        return _zero_like(pred)
    per_pixel = _robust_abs(F.sub(pred, gt))
    return F.div(F.total_sum(F.mul(per_pixel, as_tensor(region, dtype=pred.dtype))), count)


def composition_loss(pred: Tensor, gt_fg, gt_bg, image, region: np.ndarray) -> Tensor:
    """Robust L1 between the pred-composited image and the input image.

    The composite is pred*fg + (1-pred)*bg per RGB channel; the loss
    averages over the region and the three channels.
    """
    gt_fg = as_tensor(gt_fg, dtype=pred.dtype)
    gt_bg = as_tensor(gt_bg, dtype=pred.dtype)
    image = as_tensor(image, dtype=pred.dtype)
    region = np.asarray(region, dtype=pred.dtype)
    count = float(region.sum())
    if count == 0:
        return _zero_like(pred)
    recomposited = F.add(F.mul(pred, gt_fg), F.mul(F.sub(1.0, pred), gt_bg))
    per_pixel = _robust_abs(F.sub(recomposited, image))
    masked = F.mul(per_pixel, as_tensor(region, dtype=pred.dtype))
    return F.div(F.total_sum(masked), 3.0 * count)


@lru_cache(maxsize=4)
def _binomial_kernel(dtype_name: str) -> np.ndarray:
    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    return np.outer(k, k).astype(dtype_name)[None, None]


def pyramid_levels(h: int, w: int, max_levels: int = 5) -> int:
    side = min(h, w)
    if side < 2:
        return 1
    return min(max_levels, int(np.floor(np.log2(side))))


@lru_cache(maxsize=64)
def _blur_normalizer(h: int, w: int, dtype_name: str) -> np.ndarray:
    # blurred-ones field of the stride-2 binomial convolution
    ones = Tensor(np.ones((1, 1, h, w), dtype=dtype_name))
    weight = as_tensor(_binomial_kernel(dtype_name))
    return F.conv2d(ones, weight, stride=2, padding=2).data


def _laplacian_pyramid(x: Tensor, levels: int) -> list[Tensor]:
    """Bandpass residuals plus the final lowpass of a Gaussian pyramid.

    The 5-tap binomial blur is renormalized by the blurred-ones field so
    constants survive the zero-padded borders exactly.
    """
    weight = as_tensor(_binomial_kernel(str(x.dtype)))
    pyramid = []
    current = x
    for _ in range(levels - 1):
        h, w = current.shape[-2:]
        norm = _blur_normalizer(h, w, str(x.dtype))
        down = F.div(F.conv2d(current, weight, stride=2, padding=2),
                     as_tensor(norm))
        up = F.bilinear_resize(down, h, w)
        pyramid.append(F.sub(current, up))
        current = down
    pyramid.append(current)
    return pyramid


def laplacian_loss(pred: Tensor, gt) -> Tensor:
    """Sum over pyramid levels of 2^level * mean(|residual difference|).

    Five levels for inputs of at least 32 px; smaller inputs use fewer
    levels (down to the single lowpass).
    """
    gt = as_tensor(gt, dtype=pred.dtype)
    h, w = pred.shape[-2:]
    levels = pyramid_levels(h, w)
    pred_pyr = _laplacian_pyramid(pred, levels)
    gt_pyr = _laplacian_pyramid(gt, levels)
    total = None
    for lvl, (p, g) in enumerate(zip(pred_pyr, gt_pyr)):
        term = F.mul(F.mean(F.absolute(F.sub(p, g))), float(2 ** lvl))
        total = term if total is None else F.add(total, term)
    return total


def total_loss(pred: Tensor, gt, gt_fg, gt_bg, image, region: np.ndarray,
               weights: LossWeights = LossWeights()) -> dict:
    """Weighted sum of the three terms; returns each component and the total."""
    la = alpha_loss(pred, gt, region)
    lc = composition_loss(pred, gt_fg, gt_bg, image, region)
    ll = laplacian_loss(pred, gt)
    total = F.add(F.add(F.mul(la, weights.alpha), F.mul(lc, weights.comp)),
                  F.mul(ll, weights.lap))
    return {"alpha": la, "comp": lc, "lap": ll, "total": total}
