"""Matting benchmark metrics over the trimap's unknown region.

SAD, MSE, gradient error and connectivity error with the usual benchmark
scalings (sums divided by 1000, MSE scaled by 1e3) so magnitudes are
comparable across reported results. Inputs are single-image (H, W)
arrays in [0, 1]; the region is a boolean mask.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import Trimap

GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_THETA = 0.15


def eval_region(trimap: Trimap) -> np.ndarray:
    """Unknown-pixel mask over which all metrics are computed."""
    return trimap.unknown_mask()


def metric_sad(pred: np.ndarray, gt: np.ndarray, region: np.ndarray) -> float:
    region = region.astype(bool)
    return float(np.abs(pred - gt)[region].sum() / 1000.0)


def metric_mse(pred: np.ndarray, gt: np.ndarray, region: np.ndarray) -> float:
    region = region.astype(bool)
    if not region.any():
        return 0.0
    return float(((pred - gt)[region] ** 2).mean() * 1e3)


def _gaussian_derivative_filters(sigma: float):
    # first-order Gaussian derivative pair, truncated at 3*sigma,
    # normalized to unit L2 norm
    half = int(np.ceil(3.0 * sigma))
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-ax ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -ax * g / sigma ** 2
    hx = np.outer(g, dg)
    hx /= np.sqrt((hx ** 2).sum())
    return hx, hx.T


def gradient_magnitude(x: np.ndarray, sigma: float = GRAD_SIGMA) -> np.ndarray:
    hx, hy = _gaussian_derivative_filters(sigma)
    gx = ndimage.convolve(x.astype(np.float64), hx, mode="nearest")
    gy = ndimage.convolve(x.astype(np.float64), hy, mode="nearest")
    return np.sqrt(gx ** 2 + gy ** 2)


def metric_grad(pred: np.ndarray, gt: np.ndarray, region: np.ndarray) -> float:
    region = region.astype(bool)
    if not region.any():
        return 0.0
    diff = gradient_magnitude(pred) - gradient_magnitude(gt)
    return float((diff[region] ** 2).sum() / 1000.0)


def _largest_component(binary: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(binary)  # 4-connectivity
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.reshape(-1))
    sizes[0] = 0
    return labels == sizes.argmax()


def metric_conn(pred: np.ndarray, gt: np.ndarray, region: np.ndarray,
                step: float = CONN_STEP) -> float:
    """Connectivity error: degree of disconnection from the jointly
    largest connected source region, swept over alpha thresholds."""
    region = region.astype(bool)
    if not region.any():
        return 0.0
    pred = pred.astype(np.float64)
    gt = gt.astype(np.float64)
    thresholds = np.arange(0.0, 1.0 + step, step)
    l_map = np.full(pred.shape, -1.0)
    for i in range(1, thresholds.size):
        joint = (pred >= thresholds[i]) & (gt >= thresholds[i])
        if not joint.any():
            continue
        omega = _largest_component(joint)
        newly_cut = (l_map == -1.0) & ~omega
        l_map[newly_cut] = thresholds[i - 1]
    l_map[l_map == -1.0] = 1.0
    pred_d = pred - l_map
    gt_d = gt - l_map
    pred_phi = 1.0 - pred_d * (pred_d >= CONN_THETA)
    gt_phi = 1.0 - gt_d * (gt_d >= CONN_THETA)
    return float(np.abs(pred_phi - gt_phi)[region].sum() / 1000.0)


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, region: np.ndarray) -> dict:
    return {
        "sad": metric_sad(pred, gt, region),
        "mse": metric_mse(pred, gt, region),
        "grad": metric_grad(pred, gt, region),
        "conn": metric_conn(pred, gt, region),
    }


def aggregate(records: list[dict]) -> dict:
    """Mean of each metric across per-image records."""
    if not records:
        return {"sad": 0.0, "mse": 0.0, "grad": 0.0, "conn": 0.0}
    return {key: float(np.mean([r[key] for r in records]))
            for key in ("sad", "mse", "grad", "conn")}
