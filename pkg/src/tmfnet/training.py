"""Desk-scale training loop over synthetic composites.

Each iteration draws foreground/background pairs, synthesizes a trimap
with random morphology kernels, crops a patch centered on an unknown
pixel, optionally flips it, and optimizes the combined matting loss with
Adam (linear warmup, then constant learning rate). Fully deterministic
under a fixed seed in a single-threaded run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tape, Tensor
from .data import (MattingSample, crop_unknown_centered, flip_sample,
                   make_sample, synth_background, synth_toy_foregrounds)
from .losses import LossWeights, total_loss
from .metrics import evaluate_pair, metric_sad
from .model import MattingNetwork, save_weights
from .optim import Adam, WarmupConstant


@dataclass
class TrainConfig:
    iterations: int = 500
    batch_size: int = 4
    crop_size: int = 64
    lr: float = 0.01
    warmup: int = 100
    seed: int = 0
    checkpoint_every: int = 500
    loss_weights: LossWeights = field(default_factory=LossWeights)


class SyntheticMattingData:
    """In-memory pool of procedural foregrounds and backgrounds."""

    def __init__(self, n: int, seed: int, size: int = 128):
        self.size = size
        self.foregrounds = synth_toy_foregrounds(n, seed, size)
        self.backgrounds = [
            synth_background([seed, i, 11], size, distractor=(i % 2 == 0))
            for i in range(n)
        ]

    def __len__(self):
        return len(self.foregrounds)

    def draw_sample(self, rng: np.random.Generator) -> MattingSample:
        fg, alpha = self.foregrounds[rng.integers(len(self.foregrounds))]
        bg = self.backgrounds[rng.integers(len(self.backgrounds))]
        k_dilate = int(rng.integers(1, 31))
        k_erode = int(rng.integers(1, 31))
        sample = make_sample(fg, bg, alpha, k_dilate, k_erode)
        if not sample.trimap.unknown_mask().any():
            # tiny kernels on a hard-edged matte can close the band; widen it
            sample = make_sample(fg, bg, alpha, max(k_dilate, 3), max(k_erode, 3))
        return sample

    def eval_samples(self, n: int, seed: int, k: int = 9) -> list[MattingSample]:
        """Deterministic held-out full-size samples with fixed trimap kernels."""
        fgs = synth_toy_foregrounds(n, seed, self.size)
        out = []
        for i, (fg, alpha) in enumerate(fgs):
            bg = synth_background([seed, i, 11], self.size, distractor=(i % 2 == 0))
            out.append(make_sample(fg, bg, alpha, k, k))
        return out


class LoadedMattingData:
    """Pool built from (fg, alpha, [bgs]) triples read off disk."""

    def __init__(self, triples):
        if not triples:
            raise ValueError("dataset is empty")
        self.triples = triples

    def __len__(self):
        return len(self.triples)

    def draw_sample(self, rng: np.random.Generator) -> MattingSample:
        fg, alpha, bgs = self.triples[rng.integers(len(self.triples))]
        bg = bgs[rng.integers(len(bgs))]
        k_dilate = int(rng.integers(1, 31))
        k_erode = int(rng.integers(1, 31))
        sample = make_sample(fg, bg, alpha, k_dilate, k_erode)
        if not sample.trimap.unknown_mask().any():
            sample = make_sample(fg, bg, alpha, max(k_dilate, 3), max(k_erode, 3))
        return sample


def _draw_batch(data, rng: np.random.Generator, batch_size: int, crop_size: int,
                dtype):
    samples = []
    for _ in range(batch_size):
        s = data.draw_sample(rng)
        s = crop_unknown_centered(s, crop_size, rng)
        if rng.random() < 0.5:
            s = flip_sample(s)
        samples.append(s)
    image = Tensor(np.stack([s.composite for s in samples]).astype(dtype))
    gt = Tensor(np.stack([s.alpha for s in samples])[:, None].astype(dtype))
    fg = Tensor(np.stack([s.foreground for s in samples]).astype(dtype))
    bg = Tensor(np.stack([s.background for s in samples]).astype(dtype))
    trimaps = [s.trimap for s in samples]
    region = np.stack([t.unknown_mask() for t in trimaps])[:, None]
    return image, gt, fg, bg, region, trimaps


def train_network(net: MattingNetwork, data, tc: TrainConfig,
                  log_path=None, checkpoint_dir=None,
                  progress_cb=None) -> list[dict]:
    """Run the training loop; returns one log row per iteration.

    Rows carry iter and the loss components; they are also streamed to
    ``log_path`` as CSV (iter, L_alpha, L_c, L_lap, L_total) when given.
    Checkpoints land under ``checkpoint_dir`` every ``checkpoint_every``
    iterations and at the end.
    """
    rng = np.random.default_rng([tc.seed, 0x7261])
    adam = Adam(net.parameters(), lr=tc.lr)
    schedule = WarmupConstant(tc.lr, tc.warmup)
    rows = []
    writer = None
    handle = None
    if log_path is not None:
        handle = open(log_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(["iter", "L_alpha", "L_c", "L_lap", "L_total"])
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        save_weights(net, checkpoint_dir / "checkpoint_0000000.tmfw")
    try:
        net.train()
        for it in range(tc.iterations):
            adam.lr = schedule(it)
            image, gt, fg, bg, region, trimaps = _draw_batch(
                data, rng, tc.batch_size, tc.crop_size, net.dtype)
            adam.zero_grad()
            with Tape() as tape:
                pred = net.forward(image, trimaps)
                losses = total_loss(pred, gt, fg, bg, image, region, tc.loss_weights)
                tape.backward(losses["total"])
            adam.step()
            row = {
                "iter": it + 1,
                "L_alpha": float(losses["alpha"].data),
                "L_c": float(losses["comp"].data),
                "L_lap": float(losses["lap"].data),
                "L_total": float(losses["total"].data),
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([row["iter"], f"{row['L_alpha']:.6f}",
                                 f"{row['L_c']:.6f}", f"{row['L_lap']:.6f}",
                                 f"{row['L_total']:.6f}"])
            if checkpoint_dir is not None and (it + 1) % tc.checkpoint_every == 0:
                save_weights(net, checkpoint_dir / f"checkpoint_{it + 1:07d}.tmfw")
            if progress_cb is not None:
                progress_cb(it + 1, row)
        if checkpoint_dir is not None and tc.iterations % tc.checkpoint_every != 0:
            save_weights(net, checkpoint_dir / f"checkpoint_{tc.iterations:07d}.tmfw")
    finally:
        if handle is not None:
            handle.close()
    net.eval()
    return rows


def evaluate_on_samples(net: MattingNetwork, samples: list[MattingSample],
                        full_metrics: bool = False) -> dict:
    """Mean unknown-region metrics of eval-mode predictions over samples."""
    records = []
    for s in samples:
        pred = net.predict(s.composite.astype(net.dtype), s.trimap)
        region = s.trimap.unknown_mask()
        if full_metrics:
            records.append(evaluate_pair(pred, s.alpha, region))
        else:
            records.append({"sad": metric_sad(pred, s.alpha, region)})
    keys = records[0].keys()
    return {k: float(np.mean([r[k] for r in records])) for k in keys}
