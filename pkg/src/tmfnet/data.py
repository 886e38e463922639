"""Synthetic matting data: compositing, trimap synthesis, crops, image I/O.

Conventions: images are channel-first float arrays in [0, 1]; alpha mattes
are (H, W) floats in [0, 1]; trimaps hold per-pixel labels
{background=0, unknown=1, foreground=2}. PNG encoding uses gray levels
0/128/255 for the three labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

BACKGROUND = 0
UNKNOWN = 1
FOREGROUND = 2

_LABEL_TO_GRAY = np.array([0, 128, 255], dtype=np.uint8)

# alpha values within delta of 0/1 count as pure background/foreground
# when binarizing for trimap morphology
PURITY_DELTA = 1e-3


class Trimap:
    """Per-pixel three-way label field."""

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.uint8)
        if labels.ndim != 2 or labels.max(initial=0) > FOREGROUND:
            raise ValueError("trimap labels must be a 2-D array of {0,1,2}")
        self.labels = labels

    @property
    def shape(self):
        return self.labels.shape

    def one_hot(self) -> np.ndarray:
        """(3, H, W) float32 channels ordered (background, unknown, foreground)."""
        return np.stack(
            [(self.labels == lab).astype(np.float32)
             for lab in (BACKGROUND, UNKNOWN, FOREGROUND)]
        )

    def non_background(self) -> np.ndarray:
        """(H, W) float32 mask, 1 on foreground/unknown pixels."""
        return (self.labels != BACKGROUND).astype(np.float32)

    def unknown_mask(self) -> np.ndarray:
        return self.labels == UNKNOWN

    def to_gray(self) -> np.ndarray:
        return _LABEL_TO_GRAY[self.labels]

    @classmethod
    def from_gray(cls, gray: np.ndarray) -> "Trimap":
        """Decode a 0/128/255 grayscale image (nearest label wins)."""
        gray = np.asarray(gray)
        labels = np.full(gray.shape, UNKNOWN, dtype=np.uint8)
        labels[gray < 64] = BACKGROUND
        labels[gray >= 192] = FOREGROUND
        return cls(labels)


def one_hot_trimap(trimap: Trimap) -> np.ndarray:
    return trimap.one_hot()


def composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Pointwise convex combination alpha*fg + (1-alpha)*bg per channel."""
    if fg.shape != bg.shape or fg.shape[-2:] != alpha.shape:
        raise ValueError(
            f"composite size mismatch: fg {fg.shape}, bg {bg.shape}, alpha {alpha.shape}"
        )
    a = alpha[None] if fg.ndim == 3 else alpha
    return a * fg + (1.0 - a) * bg


def gen_trimap(alpha: np.ndarray, k_dilate: int, k_erode: int) -> Trimap:
    """Trimap from an alpha matte via binary dilation/erosion.

    Foreground = erosion of {alpha >= 1-delta} with a k_erode square;
    background = complement of the dilation of {alpha > delta} with a
    k_dilate square; the rest is unknown. Pixels outside the image count
    as foreground for the erosion and as background for the dilation, so
    constant mattes map to constant trimaps for any kernel size.
    """
    for k in (k_dilate, k_erode):
        if not 1 <= k <= 30:
            raise ValueError(f"morphology kernel sizes must be in [1, 30], got {k}")
    fg_core = alpha >= 1.0 - PURITY_DELTA
    not_bg = alpha > PURITY_DELTA
    if k_erode > 1:
        fg_core = ndimage.binary_erosion(
            fg_core, structure=np.ones((k_erode, k_erode), bool), border_value=1
        )
    if k_dilate > 1:
        not_bg = ndimage.binary_dilation(
            not_bg, structure=np.ones((k_dilate, k_dilate), bool), border_value=0
        )
    labels = np.full(alpha.shape, UNKNOWN, dtype=np.uint8)
    labels[~not_bg] = BACKGROUND
    labels[fg_core] = FOREGROUND
    return Trimap(labels)


@dataclass
class MattingSample:
    foreground: np.ndarray
    background: np.ndarray
    alpha: np.ndarray
    composite: np.ndarray
    trimap: Trimap

    def validate(self, tol: float = 1e-6) -> None:
        err = np.abs(self.composite - composite(self.foreground, self.background, self.alpha)).max()
        if err > tol:
            raise ValueError(f"sample violates the compositing identity by {err:.2e}")


def make_sample(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray,
                k_dilate: int, k_erode: int) -> MattingSample:
    return MattingSample(
        foreground=fg,
        background=bg,
        alpha=alpha,
        composite=composite(fg, bg, alpha),
        trimap=gen_trimap(alpha, k_dilate, k_erode),
    )


def crop_unknown_centered(sample: MattingSample, size: int,
                          rng: np.random.Generator) -> MattingSample:
    """Square crop whose center is a uniformly drawn unknown pixel.

    The window is clamped to the image bounds; images smaller than the
    crop are reflect-padded first.
    """
    ys, xs = np.nonzero(sample.trimap.unknown_mask())
    if ys.size == 0:
        raise ValueError("cannot crop: trimap has no unknown pixels")
    h, w = sample.alpha.shape
    if h < size or w < size:
        ph, pw = max(0, size - h), max(0, size - w)
        sample = MattingSample(
            foreground=np.pad(sample.foreground, ((0, 0), (0, ph), (0, pw)), mode="reflect"),
            background=np.pad(sample.background, ((0, 0), (0, ph), (0, pw)), mode="reflect"),
            alpha=np.pad(sample.alpha, ((0, ph), (0, pw)), mode="reflect"),
            composite=np.pad(sample.composite, ((0, 0), (0, ph), (0, pw)), mode="reflect"),
            trimap=Trimap(np.pad(sample.trimap.labels, ((0, ph), (0, pw)), mode="reflect")),
        )
        h, w = sample.alpha.shape
    pick = rng.integers(ys.size)
    cy, cx = int(ys[pick]), int(xs[pick])
    y0 = min(max(cy - size // 2, 0), h - size)
    x0 = min(max(cx - size // 2, 0), w - size)
    return MattingSample(
        foreground=sample.foreground[:, y0:y0 + size, x0:x0 + size].copy(),
        background=sample.background[:, y0:y0 + size, x0:x0 + size].copy(),
        alpha=sample.alpha[y0:y0 + size, x0:x0 + size].copy(),
        composite=sample.composite[:, y0:y0 + size, x0:x0 + size].copy(),
        trimap=Trimap(sample.trimap.labels[y0:y0 + size, x0:x0 + size].copy()),
    )


def flip_sample(sample: MattingSample) -> MattingSample:
    return MattingSample(
        foreground=sample.foreground[:, :, ::-1].copy(),
        background=sample.background[:, :, ::-1].copy(),
        alpha=sample.alpha[:, ::-1].copy(),
        composite=sample.composite[:, :, ::-1].copy(),
        trimap=Trimap(sample.trimap.labels[:, ::-1].copy()),
    )


# ---------------------------------------------------------------------------
# procedural foregrounds and backgrounds
# ---------------------------------------------------------------------------

def _disc_mask(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2


def _polygon_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    n_vertices = rng.integers(3, 8)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
    radii = rng.uniform(0.15, 0.38, size=n_vertices) * size
    ys = cy + radii * np.sin(angles)
    xs = cx + radii * np.cos(angles)
    yy, xx = np.mgrid[0:size, 0:size]
    inside = np.zeros((size, size), bool)
    # even-odd ray casting against each edge
    j = n_vertices - 1
    crossing = np.zeros((size, size), bool)
    for i in range(n_vertices):
        cond = (ys[i] > yy) != (ys[j] > yy)
        slope_x = xs[i] + (yy - ys[i]) / (ys[i] - ys[j] + 1e-12) * (xs[i] - xs[j])
        crossing ^= cond & (xx < slope_x)
        j = i
    inside |= crossing
    return inside


def _strand_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    # thick random-walk stroke, hair/rope-like
    mask = np.zeros((size, size), bool)
    y = rng.uniform(0.25, 0.75) * size
    x = rng.uniform(0.1, 0.3) * size
    angle = rng.uniform(-0.5, 0.5)
    thickness = rng.uniform(1.5, size * 0.06)
    for _ in range(int(size * 1.6)):
        yy, xx = int(round(y)), int(round(x))
        r = int(np.ceil(thickness))
        y0, y1 = max(0, yy - r), min(size, yy + r + 1)
        x0, x1 = max(0, xx - r), min(size, xx + r + 1)
        if y0 < y1 and x0 < x1:
            gy, gx = np.mgrid[y0:y1, x0:x1]
            mask[y0:y1, x0:x1] |= (gy - y) ** 2 + (gx - x) ** 2 <= thickness ** 2
        angle += rng.normal(0, 0.25)
        y += np.sin(angle)
        x += np.cos(angle)
        if not (0 <= x < size and -size * 0.2 < y < size * 1.2):
            break
    return mask


def _shape_alpha(size: int, rng: np.random.Generator) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:
        radius = rng.uniform(0.18, 0.36) * size
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        mask = _disc_mask(size, cy, cx, radius)
    elif kind == 1:
        mask = _polygon_mask(size, rng)
    else:
        mask = _strand_mask(size, rng)
    sigma = rng.uniform(0.5, 3.0)
    alpha = ndimage.gaussian_filter(mask.astype(np.float32), sigma)
    # rescale so the matte keeps exact 0/1 plateaus after blurring
    alpha = np.clip((alpha - 0.02) / 0.96, 0.0, 1.0)
    alpha[alpha > 0.995] = 1.0
    alpha[alpha < 0.005] = 0.0
    return alpha.astype(np.float32)


def _texture(size: int, rng: np.random.Generator, base_strength=0.6) -> np.ndarray:
    """Smooth colored texture: per-channel gradients plus blurred noise."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((3, size, size), dtype=np.float32)
    for c in range(3):
        gy, gx, bias = rng.uniform(-base_strength, base_strength, size=3)
        noise = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), rng.uniform(2, 6))
        span = max(noise.max() - noise.min(), 1e-6)
        img[c] = 0.5 + bias * 0.3 + gy * (yy - 0.5) + gx * (xx - 0.5) + 0.25 * (
            (noise - noise.min()) / span - 0.5
        )
    return np.clip(img, 0.0, 1.0)


def synth_toy_foregrounds(n: int, seed: int, size: int = 96):
    """Procedural soft-edged foregrounds: list of (rgb, alpha) pairs.

    Every matte contains exact-0 and exact-1 pixels and yields a trimap
    with a non-empty unknown band for morphology kernels >= 3.
    """
    if n < 1:
        raise ValueError("need n >= 1 foregrounds")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        alpha = _shape_alpha(size, rng)
        # degenerate draws (empty or full mattes) are re-rolled
        tries = 0
        while (alpha.max() < 1.0 or alpha.min() > 0.0
               or not gen_trimap(alpha, 3, 3).unknown_mask().any()):
            tries += 1
            rng2 = np.random.default_rng([seed, i, tries])
            alpha = _shape_alpha(size, rng2)
        fg = _texture(size, rng)
        out.append((fg, alpha))
    return out


def synth_background(seed_parts, size: int, distractor: bool = True,
                     near: tuple[float, float] | None = None) -> np.ndarray:
    """Background texture, optionally with a salient distractor shape.

    The distractor is part of the background (its pixels have alpha 0) but
    is placed close to ``near`` so it intrudes into the trimap's unknown
    band without entering the non-background region.
    """
    rng = np.random.default_rng(seed_parts)
    bg = _texture(size, rng)
    if distractor:
        if near is None:
            near = (rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7))
        cy = np.clip(near[0] + rng.normal(0, 0.12), 0.05, 0.95) * size
        cx = np.clip(near[1] + rng.normal(0, 0.12), 0.05, 0.95) * size
        mask = _disc_mask(size, cy, cx, rng.uniform(0.06, 0.16) * size)
        color = rng.uniform(0, 1, size=3).astype(np.float32)
        # push toward an extreme color so the shape is salient
        color = np.where(color > 0.5, 0.9 + 0.1 * color, 0.1 * color)
        bg = np.where(mask[None], color[:, None, None], bg)
    return bg.astype(np.float32)


# ---------------------------------------------------------------------------
# padding helpers
# ---------------------------------------------------------------------------

def pad_to_multiple(image: np.ndarray, trimap: Trimap, m: int = 16):
    """Reflect-pad image and trimap to the next multiple of ``m``.

    Returns (padded image, padded trimap, original (h, w)) for unpadding.
    """
    h, w = trimap.shape
    ph = (-h) % m
    pw = (-w) % m
    if ph == 0 and pw == 0:
        return image, trimap, (h, w)
    image_p = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    trimap_p = Trimap(np.pad(trimap.labels, ((0, ph), (0, pw)), mode="reflect"))
    return image_p, trimap_p, (h, w)


def unpad(pred: np.ndarray, original_hw: tuple[int, int]) -> np.ndarray:
    h, w = original_hw
    return pred[..., :h, :w]


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

class ImageDecodeError(RuntimeError):
    pass


def write_image(path, arr: np.ndarray, bits: int = 8) -> None:
    """Write [0,1] floats as PNG: (3,H,W) -> 8-bit RGB, (H,W) -> 8/16-bit gray."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    if arr.ndim == 3:
        if arr.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) rgb array, got {arr.shape}")
        data = quantize(arr, 8).transpose(1, 2, 0)
        Image.fromarray(data, mode="RGB").save(path)
    elif arr.ndim == 2:
        if bits == 8:
            Image.fromarray(quantize(arr, 8), mode="L").save(path)
        elif bits == 16:
            Image.fromarray(quantize(arr, 16)).save(path)  # uint16 -> I;16
        else:
            raise ValueError(f"unsupported grayscale bit depth {bits}")
    else:
        raise ValueError(f"cannot write array of shape {arr.shape}")


def quantize(arr: np.ndarray, bits: int) -> np.ndarray:
    top = (1 << bits) - 1
    q = np.floor(np.clip(arr, 0.0, 1.0) * top + 0.5)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def read_image(path) -> np.ndarray:
    """Read a PNG back to [0,1] floats ((3,H,W) rgb or (H,W) gray)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    if mode == "RGB":
        return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)
    if mode == "RGBA":
        return (arr[..., :3].astype(np.float32) / 255.0).transpose(2, 0, 1)
    if mode == "L":
        return arr.astype(np.float32) / 255.0
    if mode in ("I", "I;16", "I;16B"):
        return arr.astype(np.float32) / 65535.0
    raise ImageDecodeError(f"unsupported PNG mode {mode!r} in {path}")


def read_gray_levels(path) -> np.ndarray:
    """Read a grayscale PNG as raw 8-bit levels (for trimap decoding)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    split: str
    entries: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"split": self.split, "entries": self.entries}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(split=doc["split"], entries=list(doc["entries"]))

    def validate(self, root: Path) -> None:
        for e in self.entries:
            for key in ("fg_path", "alpha_path"):
                p = root / e[key]
                if not p.exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")
            for bg in e["bg_paths"]:
                if not (root / bg).exists():
                    raise FileNotFoundError(f"manifest references missing file {root / bg}")


def generate_dataset(n: int, seed: int, out_dir, size: int = 96,
                     split: str = "train") -> DatasetManifest:
    """Write a synthetic dataset under the standard directory layout.

    Layout: {fg,alpha,bg,composite,trimap}/NNNN.png plus manifest.json.
    Fully reproducible from the seed; per-sample streams are derived from
    (seed, index).
    """
    out = Path(out_dir)
    fgs = synth_toy_foregrounds(n, seed, size)
    manifest = DatasetManifest(split=split)
    for i, (fg, alpha) in enumerate(fgs):
        rng = np.random.default_rng([seed, i, 7])
        ys, xs = np.nonzero((alpha > 0) & (alpha < 1))
        near = None
        if ys.size:
            pick = rng.integers(ys.size)
            near = (float(ys[pick]) / size, float(xs[pick]) / size)
        bg = synth_background([seed, i, 11], size, distractor=bool(i % 2 == 0), near=near)
        k_d, k_e = int(rng.integers(1, 31)), int(rng.integers(1, 31))
        sample = make_sample(fg, bg, alpha, k_d, k_e)
        sample.validate()
        name = f"{i:04d}.png"
        write_image(out / "fg" / name, sample.foreground)
        write_image(out / "alpha" / name, sample.alpha, bits=16)
        write_image(out / "bg" / name, sample.background)
        write_image(out / "composite" / name, sample.composite)
        write_image(out / "trimap" / name, sample.trimap.to_gray() / 255.0, bits=8)
        manifest.entries.append(
            {"fg_path": f"fg/{name}", "alpha_path": f"alpha/{name}",
             "bg_paths": [f"bg/{name}"]}
        )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_dataset(root) -> list[tuple[np.ndarray, np.ndarray, list[np.ndarray]]]:
    """Load (fg, alpha, [bg...]) triples from a generated dataset directory."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = DatasetManifest.from_json(manifest_path.read_text())
    manifest.validate(root)
    out = []
    for e in manifest.entries:
        fg = read_image(root / e["fg_path"])
        alpha = read_image(root / e["alpha_path"])
        bgs = [read_image(root / p) for p in e["bg_paths"]]
        out.append((fg, alpha, bgs))
    return out
