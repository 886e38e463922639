"""Pure-numpy kernel implementations (fallback backend)."""

from __future__ import annotations

import numpy as np


def box_sum(x: np.ndarray, k: int) -> np.ndarray:
    # Summed-area table per channel; rectangle sums with clipped bounds
    # equal zero-padded window sums. float64 accumulation keeps the
    # cancellation error of large partial sums below the 1e-5 contract.
    n, c, h, w = x.shape
    r = k // 2
    sat = np.zeros((n, c, h + 1, w + 1), dtype=np.float64)
    sat[:, :, 1:, 1:] = x.astype(np.float64).cumsum(axis=2).cumsum(axis=3)
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    out = (
        sat[:, :, i1[:, None], j1[None, :]]
        - sat[:, :, i0[:, None], j1[None, :]]
        - sat[:, :, i1[:, None], j0[None, :]]
        + sat[:, :, i0[:, None], j0[None, :]]
    )
    return out.astype(x.dtype, copy=False)


def group_fusion_forward(xg: np.ndarray, kg: np.ndarray) -> np.ndarray:
    n, g, cg, h, w = xg.shape
    xp = np.zeros((n, g, cg, h + 2, w + 2), dtype=xg.dtype)
    xp[:, :, :, 1:-1, 1:-1] = xg
    y = np.zeros_like(xg)
    for u in range(3):
        for v in range(3):
            y += kg[:, :, u, v][:, :, None] * xp[:, :, :, u:u + h, v:v + w]
    return y


def group_fusion_backward(xg, kg, gy):
    n, g, cg, h, w = xg.shape
    xp = np.zeros((n, g, cg, h + 2, w + 2), dtype=xg.dtype)
    xp[:, :, :, 1:-1, 1:-1] = xg
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kg)
    for u in range(3):
        for v in range(3):
            gxp[:, :, :, u:u + h, v:v + w] += kg[:, :, u, v][:, :, None] * gy
            gk[:, :, u, v] = (gy * xp[:, :, :, u:u + h, v:v + w]).sum(axis=2)
    return gxp[:, :, :, 1:-1, 1:-1], gk
