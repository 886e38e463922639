"""Matting building blocks.

* ``nbp`` / ``nbp_fast`` — non-background pooling: mask-weighted stride-1
  average pooling over foreground/unknown pixels (naive and
  summed-area-table routes with the same contract).
* ``TmpContext`` — trimap-guided non-background multi-scale pooling
  context module; ``PpmContext`` — the pyramid-pooling baseline with the
  identical parameter layout.
* ``GlfFusion`` — global-local context-aware fusion: per-pixel grouped
  3x3 kernels predicted from local features plus a broadcast global
  feature; ``StaticFusion`` — the upsample/concat/conv baseline.
"""

from __future__ import annotations

import functools
import warnings

import numpy as np

from . import functional as F
from .autograd import Tensor
from .data import Trimap, write_image, read_image
from .nn import BatchNorm2d, Conv2d, ConvBnLeaky, Module

NBP_EPS = 1e-6


def non_background_mask(trimap: Trimap, out_h: int, out_w: int) -> np.ndarray:
    """Binary not-background mask resized bilinearly to (out_h, out_w)."""
    return F.bilinear_resize_array(trimap.non_background(), out_h, out_w)


def batch_non_background_mask(trimaps, out_h: int, out_w: int, dtype=np.float32) -> Tensor:
    """Stack per-sample masks into a constant (N, 1, H, W) tensor."""
    masks = np.stack([non_background_mask(t, out_h, out_w) for t in trimaps])
    return Tensor(masks[:, None].astype(dtype))


def _nbp_impl(feat: Tensor, mask: Tensor, k: int, eps: float, pool) -> Tensor:
    if feat.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"nbp: mask spatial size {mask.shape[-2:]} must match feature {feat.shape[-2:]}"
        )
    num = pool(F.mul(feat, mask), k)
    den = F.add(pool(mask, k), eps)
    return F.div(num, den)


def nbp(feat: Tensor, mask: Tensor, k: int, eps: float = NBP_EPS) -> Tensor:
    """Mask-weighted stride-1 average pooling (naive reference route).

    Because average pooling divides by k*k including the padded cells, the
    divisors cancel and the result equals the mask-weighted window mean
    with an eps-regularized denominator.
    """
    return _nbp_impl(feat, mask, k, eps, F.avg_pool)


def nbp_fast(feat: Tensor, mask: Tensor, k: int, eps: float = NBP_EPS) -> Tensor:
    """Summed-area-table route of :func:`nbp`; O(H*W) per channel in k."""
    return _nbp_impl(feat, mask, k, eps, F.avg_pool_sat)


@functools.lru_cache(maxsize=512)
def clamp_pool_kernels(kernel_sizes: tuple, h: int, w: int) -> tuple:
    """Shrink pooling kernels that exceed the feature: largest odd <= min(H, W)."""
    limit = min(h, w)
    cap = limit if limit % 2 == 1 else limit - 1
    out = []
    clipped = False
    for k in kernel_sizes:
        if k > limit:
            out.append(max(cap, 1))
            clipped = True
        else:
            out.append(k)
    if clipped:
        warnings.warn(
            f"pooling kernels {tuple(kernel_sizes)} exceed the {h}x{w} feature; "
            f"clamped to {tuple(out)}",
            stacklevel=3,
        )
    return tuple(out)


class TmpContext(Module):
    """Trimap-guided non-background multi-scale pooling context module.

    Four parallel 1x1 reductions feed non-background pooling units with
    decreasing kernel sizes; the pooled maps are concatenated with the
    input feature and fused by two 3x3 conv/bn/leaky layers. Parameter
    layout matches :class:`PpmContext` exactly for the same channel
    configuration.
    """

    def __init__(self, in_channels: int, out_channels: int, rng,
                 reduce_channels: int | None = None,
                 pool_kernels=(31, 17, 11, 5), eps: float = NBP_EPS,
                 dtype=np.float32):
        super().__init__()
        for k in pool_kernels:
            if k % 2 == 0 or k < 1:
                raise ValueError(f"pooling kernels must be odd, got {tuple(pool_kernels)}")
        if reduce_channels is None:
            reduce_channels = in_channels // 4
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.reduce_channels = reduce_channels
        self.pool_kernels = tuple(pool_kernels)
        self.eps = eps
        self.reduce = [Conv2d(in_channels, reduce_channels, 1, rng, dtype=dtype)
                       for _ in pool_kernels]
        cat_channels = in_channels + 4 * reduce_channels
        self.fuse1 = ConvBnLeaky(cat_channels, out_channels, 3, rng, dtype=dtype)
        self.fuse2 = ConvBnLeaky(out_channels, out_channels, 3, rng, dtype=dtype)

    def forward(self, feat: Tensor, nbg_mask: Tensor) -> Tensor:
        h, w = feat.shape[-2:]
        ks = clamp_pool_kernels(self.pool_kernels, h, w)
        branches = [nbp_fast(conv(feat), nbg_mask, k, self.eps)
                    for conv, k in zip(self.reduce, ks)]
        return self.fuse2(self.fuse1(F.concat([feat] + branches)))

    def macs(self, h: int, w: int):
        m = 0
        for conv, k in zip(self.reduce, self.pool_kernels):
            cm, _, _ = conv.macs(h, w)
            # nbp: feature and mask pooling at k*k per output element,
            # plus the mask product and the normalizing division
            m += cm
            m += h * w * self.reduce_channels * k * k
            m += h * w * k * k
            m += 2 * h * w * self.reduce_channels
        f1, _, _ = self.fuse1.macs(h, w)
        f2, _, _ = self.fuse2.macs(h, w)
        return m + f1 + f2, h, w


class PpmContext(Module):
    """Pyramid-pooling baseline: adaptive bins, 1x1 reductions, resize back."""

    def __init__(self, in_channels: int, out_channels: int, rng,
                 reduce_channels: int | None = None, bins=(1, 2, 3, 6),
                 dtype=np.float32):
        super().__init__()
        if reduce_channels is None:
            reduce_channels = in_channels // 4
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.reduce_channels = reduce_channels
        self.bins = tuple(bins)
        self.reduce = [Conv2d(in_channels, reduce_channels, 1, rng, dtype=dtype)
                       for _ in bins]
        cat_channels = in_channels + len(bins) * reduce_channels
        self.fuse1 = ConvBnLeaky(cat_channels, out_channels, 3, rng, dtype=dtype)
        self.fuse2 = ConvBnLeaky(out_channels, out_channels, 3, rng, dtype=dtype)

    def forward(self, feat: Tensor) -> Tensor:
        h, w = feat.shape[-2:]
        if min(h, w) < max(self.bins):
            raise ValueError(
                f"ppm needs spatial size >= {max(self.bins)}, got {h}x{w}"
            )
        branches = [
            F.bilinear_resize(conv(F.adaptive_avg_pool(feat, b)), h, w)
            for conv, b in zip(self.reduce, self.bins)
        ]
        return self.fuse2(self.fuse1(F.concat([feat] + branches)))

    def macs(self, h: int, w: int):
        m = 0
        for conv, b in zip(self.reduce, self.bins):
            m += h * w * self.in_channels          # adaptive pooling reads input once
            cm, _, _ = conv.macs(b, b)
            m += cm
            m += h * w * self.reduce_channels * 4  # bilinear resize back
        f1, _, _ = self.fuse1.macs(h, w)
        f2, _, _ = self.fuse2.macs(h, w)
        return m + f1 + f2, h, w


class GlfFusion(Module):
    """Global-local context-aware fusion of a high/low feature pair.

    distribute:  x = conv1x1(concat(pixel_shuffle(x_high), x_low))
    kernels:     k = conv3x3(leaky(conv1x1(x) (+ conv1x1(g) broadcast)))
    fuse:        y = grouped per-pixel 3x3 spatial fusion of x with k
    mix:         z = leaky(bn(conv1x1(y)))

    ``global_channels=None`` drops the global branch entirely (the
    local-only ablation).
    """

    def __init__(self, low_channels: int, high_channels: int, internal_channels: int,
                 out_channels: int, rng, group_width: int = 16,
                 global_channels: int | None = None, dtype=np.float32):
        super().__init__()
        if high_channels % 4 != 0:
            raise ValueError(f"high feature channels must divide by 4, got {high_channels}")
        if internal_channels % group_width != 0:
            raise ValueError(
                f"internal channels {internal_channels} not divisible by group width {group_width}"
            )
        self.low_channels = low_channels
        self.high_channels = high_channels
        self.internal_channels = internal_channels
        self.out_channels = out_channels
        self.group_width = group_width
        self.groups = internal_channels // group_width
        self.global_channels = global_channels
        hidden = self.groups * 9
        self.hidden = hidden
        self.distribute_conv = Conv2d(high_channels // 4 + low_channels,
                                      internal_channels, 1, rng, dtype=dtype)
        self.kg_local = Conv2d(internal_channels, hidden, 1, rng, dtype=dtype)
        self.kg_global = (Conv2d(global_channels, hidden, 1, rng, bias=False, dtype=dtype)
                          if global_channels else None)
        self.kg_out = Conv2d(hidden, hidden, 3, rng, dtype=dtype)
        self.mix = Conv2d(internal_channels, out_channels, 1, rng, bias=False, dtype=dtype)
        self.mix_bn = BatchNorm2d(out_channels, dtype=dtype)
        self.last_kernels: np.ndarray | None = None
        self.record_kernels = False

    def distribute(self, x_high: Tensor, x_low: Tensor) -> Tensor:
        hh, hw = x_high.shape[-2:]
        lh, lw = x_low.shape[-2:]
        if (2 * hh, 2 * hw) != (lh, lw):
            raise ValueError(
                f"glf: high feature {hh}x{hw} must be half of low feature {lh}x{lw}"
            )
        return self.distribute_conv(F.concat([F.pixel_shuffle(x_high), x_low]))

    def generate_kernels(self, x: Tensor, g: Tensor | None) -> Tensor:
        h = self.kg_local(x)
        if self.kg_global is not None:
            if g is None:
                raise ValueError("glf configured with a global branch but no global feature given")
            if g.shape[1] != self.global_channels:
                raise ValueError(
                    f"global feature has {g.shape[1]} channels, expected {self.global_channels}"
                )
            h = F.add(h, self.kg_global(g))
        return self.kg_out(F.leaky_relu(h, 0.01))

    def forward(self, x_low: Tensor, x_high: Tensor, g: Tensor | None = None) -> Tensor:
        x = self.distribute(x_high, x_low)
        k = self.generate_kernels(x, g)
        if self.record_kernels:
            self.last_kernels = k.data.copy()
        y = F.group_fusion(x, k, self.groups)
        return F.leaky_relu(self.mix_bn(self.mix(y)), 0.01)

    def macs(self, low_h: int, low_w: int):
        h, w = low_h, low_w
        m, _, _ = self.distribute_conv.macs(h, w)
        km, _, _ = self.kg_local.macs(h, w)
        m += km
        if self.kg_global is not None:
            m += self.hidden * self.global_channels  # 1x1 on a 1x1 global vector
            m += h * w * self.hidden                 # broadcast addition
        m += h * w * self.hidden                     # leaky
        ko, _, _ = self.kg_out.macs(h, w)
        m += ko
        m += h * w * self.internal_channels * 9      # per-pixel grouped fusion
        mm, _, _ = self.mix.macs(h, w)
        m += mm + 2 * h * w * self.out_channels      # bn + leaky
        return m, h, w


class StaticFusion(Module):
    """Baseline fusion: bilinear upsample, concat, 3x3 conv, leaky ReLU.

    The high feature is upsampled to the low feature's size (ratio 2 in
    the usual wiring; the pyramid-pooling baseline's first stage bridges
    a ratio-4 gap the same way).
    """

    def __init__(self, low_channels: int, high_channels: int, out_channels: int,
                 rng, dtype=np.float32):
        super().__init__()
        self.low_channels = low_channels
        self.high_channels = high_channels
        self.out_channels = out_channels
        self.conv = Conv2d(high_channels + low_channels, out_channels, 3, rng, dtype=dtype)

    def forward(self, x_low: Tensor, x_high: Tensor, g: Tensor | None = None) -> Tensor:
        lh, lw = x_low.shape[-2:]
        up = F.bilinear_resize(x_high, lh, lw)
        return F.leaky_relu(self.conv(F.concat([up, x_low])), 0.01)

    def macs(self, low_h: int, low_w: int):
        m = low_h * low_w * self.high_channels * 4  # bilinear
        cm, _, _ = self.conv.macs(low_h, low_w)
        m += cm + low_h * low_w * self.out_channels
        return m, low_h, low_w


def kernel_field_view(kern: np.ndarray, groups: int) -> np.ndarray:
    """Reshape a raw (N, groups*9, H, W) kernel tensor to (N, groups, 3, 3, H, W)."""
    n, c, h, w = kern.shape
    if c != groups * 9:
        raise ValueError(f"kernel tensor has {c} channels, expected {groups * 9}")
    return kern.reshape(n, groups, 3, 3, h, w)


def export_kernel_maps(kern: np.ndarray, out_dir, groups: int,
                       prefix: str = "kernel") -> list:
    """Write one min-max normalized grayscale PNG per (group, u, v) slice.

    A constant slice normalizes against the whole field's range instead
    (so a delta-kernel field renders center taps white and the rest
    black); a fully constant field maps to mid-gray. Only the first batch
    item is exported. Returns the written paths in (g, u, v) order.
    """
    field = kernel_field_view(np.asarray(kern), groups)
    if not np.isfinite(field).all():
        raise ValueError("kernel field contains non-finite values")
    from pathlib import Path

    out = Path(out_dir)
    glo = float(field[0].min())
    ghi = float(field[0].max())
    paths = []
    for g in range(groups):
        for u in range(3):
            for v in range(3):
                sl = field[0, g, u, v].astype(np.float64)
                lo, hi = sl.min(), sl.max()
                if hi - lo >= 1e-12:
                    norm = (sl - lo) / (hi - lo)
                elif ghi - glo >= 1e-12:
                    norm = np.full_like(sl, (float(sl[0, 0]) - glo) / (ghi - glo))
                else:
                    norm = np.full_like(sl, 0.5)
                path = out / f"{prefix}_g{g:02d}_u{u}_v{v}.png"
                write_image(path, norm, bits=8)
                paths.append(path)
    return paths


def load_kernel_maps(out_dir, groups: int, prefix: str = "kernel") -> np.ndarray:
    """Reload exported kernel maps into a (groups, 3, 3, H, W) array in [0,1]."""
    from pathlib import Path

    out = Path(out_dir)
    slices = []
    for g in range(groups):
        for u in range(3):
            for v in range(3):
                slices.append(read_image(out / f"{prefix}_g{g:02d}_u{u}_v{v}.png"))
    h, w = slices[0].shape
    return np.stack(slices).reshape(groups, 3, 3, h, w)
