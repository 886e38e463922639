"""Network assembly from a declarative config, cost accounting, weights I/O.

The decoder follows the encoder stages C1..C5 (output strides 2, 4, 8,
16, 16). Fusion stage F1 fuses the context output with the C2 feature,
F2 with the C1 feature, F3 with the 6-channel network input; the head is
two 3x3 convolutions followed by a clamp to [0, 1]. When F1 uses dynamic
fusion a x2 bilinear upsample precedes it so the high/low spatial ratio
is exactly 2 (the static baseline bridges the ratio-4 gap at F1 itself).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .autograd import Tensor
from .blocks import (GlfFusion, PpmContext, StaticFusion, TmpContext,
                     batch_non_background_mask)
from .data import Trimap
from .nn import BatchNorm2d, Conv2d, ConvBnLeaky, Module

ENCODERS = ("toy", "paper_shape")
CONTEXTS = ("tmp", "ppm")
FUSIONS = ("glf", "static")
GLOBAL_SOURCES = ("tmp_output", "high_feature_pool", "c5_pool", "none")


class ConfigError(ValueError):
    pass


class ArchMismatchError(RuntimeError):
    pass


@dataclass
class ArchConfig:
    """Declarative architecture description (JSON-serializable)."""

    encoder: str = "toy"
    toy_channels: tuple = (12, 16, 24, 32, 48)
    decoder_context: str = "tmp"
    fusion: tuple = ("glf", "glf", "glf")          # F1, F2, F3
    global_source: str = "tmp_output"
    context_out: int = 48
    stage_internal: tuple = (48, 32, 16)           # per-fusion internal widths
    stage_out: tuple = (48, 32, 8)
    group_width: int = 16
    pool_kernels: tuple = (31, 17, 11, 5)
    ppm_bins: tuple = (1, 2, 3, 6)
    reduce_channels: int | None = None
    global_channels: int = 48                      # projection target for c5_pool
    head_channels: int = 8

    def validate(self) -> None:
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.decoder_context not in CONTEXTS:
            raise ConfigError(f"unknown decoder context {self.decoder_context!r}")
        if len(self.fusion) != 3 or any(f not in FUSIONS for f in self.fusion):
            raise ConfigError(f"fusion must be three of {FUSIONS}, got {self.fusion}")
        if self.global_source not in GLOBAL_SOURCES:
            raise ConfigError(f"unknown global source {self.global_source!r}")
        if "glf" in self.fusion and self.global_source == "tmp_output" \
                and self.decoder_context != "tmp":
            raise ConfigError(
                "global_source 'tmp_output' requires decoder_context 'tmp'"
            )
        for c3 in self.stage_internal:
            if c3 % self.group_width != 0:
                raise ConfigError(
                    f"stage internal width {c3} not divisible by group width {self.group_width}"
                )
        highs = (self.context_out, self.stage_out[0], self.stage_out[1])
        for stage, (kind, hc) in enumerate(zip(self.fusion, highs), start=1):
            if kind == "glf" and hc % 4 != 0:
                raise ConfigError(
                    f"F{stage} dynamic fusion needs a high feature divisible by 4, got {hc}"
                )
        for k in self.pool_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"pool kernels must be odd, got {self.pool_kernels}")
        if self.encoder == "toy" and len(self.toy_channels) != 5:
            raise ConfigError("toy encoder needs 5 stage channels")

    # ---- serialization ----
    def to_dict(self) -> dict:
        doc = asdict(self)
        for key, value in doc.items():
            if isinstance(value, tuple):
                doc[key] = list(value)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(doc)
        for key in ("toy_channels", "fusion", "stage_internal", "stage_out",
                    "pool_kernels", "ppm_bins"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # ---- presets ----
    @classmethod
    def toy_ours(cls) -> "ArchConfig":
        return cls()

    @classmethod
    def toy_baseline(cls) -> "ArchConfig":
        return cls(decoder_context="ppm", fusion=("static",) * 3, global_source="none")

    @classmethod
    def paper_ours(cls) -> "ArchConfig":
        return cls(encoder="paper_shape", context_out=256,
                   stage_internal=(256, 256, 32), stage_out=(256, 256, 32),
                   global_channels=256, head_channels=32)

    @classmethod
    def paper_baseline(cls) -> "ArchConfig":
        cfg = cls.paper_ours()
        cfg.decoder_context = "ppm"
        cfg.fusion = ("static",) * 3
        cfg.global_source = "none"
        return cfg

    def baseline_twin(self) -> "ArchConfig":
        """Same encoder and widths, pyramid-pooling context, static fusion."""
        twin = ArchConfig.from_dict(self.to_dict())
        twin.decoder_context = "ppm"
        twin.fusion = ("static",) * 3
        twin.global_source = "none"
        twin.validate()
        return twin


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class ToyEncoder(Module):
    """Plain conv/bn/leaky stages with strides 2,2,2,2,1 (output stride 16)."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        strides = (2, 2, 2, 2, 1)
        self.stages = []
        cin = 6
        for cout, s in zip(channels, strides):
            self.stages.append(ConvBnLeaky(cin, cout, 3, rng, stride=s, dtype=dtype))
            cin = cout
        self.c1_channels = channels[0]
        self.c2_channels = channels[1]
        self.c5_channels = channels[4]

    def forward(self, x: Tensor):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[0], feats[1], feats[4]

    def macs(self, h: int, w: int):
        total = 0
        for stage in self.stages:
            m, h, w = stage.macs(h, w)
            total += m
        return total, h, w


class Bottleneck(Module):
    def __init__(self, in_channels, width, rng, stride=1, dtype=np.float32):
        super().__init__()
        out_channels = width * 4
        self.a = ConvBnLeaky(in_channels, width, 1, rng, dtype=dtype)
        self.b = ConvBnLeaky(width, width, 3, rng, stride=stride, dtype=dtype)
        self.c = Conv2d(width, out_channels, 1, rng, bias=False, dtype=dtype)
        self.c_bn = BatchNorm2d(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv2d(in_channels, out_channels, 1, rng,
                               stride=stride, bias=False, dtype=dtype)
            self.proj_bn = BatchNorm2d(out_channels, dtype=dtype)
        else:
            self.proj = None
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        y = self.c_bn(self.c(self.b(self.a(x))))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return F.leaky_relu(F.add(y, skip), 0.01)

    def macs(self, h: int, w: int):
        m1, h1, w1 = self.a.macs(h, w)
        m2, h2, w2 = self.b.macs(h1, w1)
        m3, _, _ = self.c.macs(h2, w2)
        total = m1 + m2 + m3 + h2 * w2 * self.out_channels * 2
        if self.proj is not None:
            mp, _, _ = self.proj.macs(h, w)
            total += mp + h2 * w2 * self.out_channels
        total += h2 * w2 * self.out_channels * 2  # add + activation
        return total, h2, w2


class BottleneckEncoder(Module):
    """ResNet-50-style bottleneck layout at output stride 16.

    Exists for cost accounting and shape checks; the stem max pool is
    replaced by a 2x2 average pool (parameter-free either way) and the
    final stage keeps stride 1.
    """

    def __init__(self, rng, dtype=np.float32):
        super().__init__()
        self.stem = ConvBnLeaky(6, 64, 7, rng, stride=2, dtype=dtype)
        blocks_per_layer = (3, 4, 6, 3)
        widths = (64, 128, 256, 512)
        strides = (1, 2, 2, 1)
        self.layers = []
        cin = 64
        for blocks, width, stride in zip(blocks_per_layer, widths, strides):
            layer = [Bottleneck(cin, width, rng, stride=stride, dtype=dtype)]
            cin = width * 4
            for _ in range(blocks - 1):
                layer.append(Bottleneck(cin, width, rng, dtype=dtype))
            self.layers.append(layer)
        self.c1_channels = 64
        self.c2_channels = 256
        self.c5_channels = 2048

    def forward(self, x: Tensor):
        c1 = self.stem(x)
        x = F.downsample_avg2(c1)
        for block in self.layers[0]:
            x = block(x)
        c2 = x
        for layer in self.layers[1:]:
            for block in layer:
                x = block(x)
        return c1, c2, x

    def macs(self, h: int, w: int):
        total, h, w = self.stem.macs(h, w)
        total += h * w * 64
        h, w = h // 2, w // 2
        for layer in self.layers:
            for block in layer:
                m, h, w = block.macs(h, w)
                total += m
        return total, h, w


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

class MattingNetwork(Module):
    def __init__(self, cfg: ArchConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        if cfg.encoder == "toy":
            self.encoder = ToyEncoder(cfg.toy_channels, rng, dtype=dtype)
        else:
            self.encoder = BottleneckEncoder(rng, dtype=dtype)
        c5 = self.encoder.c5_channels
        if cfg.decoder_context == "tmp":
            self.context = TmpContext(c5, cfg.context_out, rng,
                                      reduce_channels=cfg.reduce_channels,
                                      pool_kernels=cfg.pool_kernels, dtype=dtype)
        else:
            self.context = PpmContext(c5, cfg.context_out, rng,
                                      reduce_channels=cfg.reduce_channels,
                                      bins=cfg.ppm_bins, dtype=dtype)
        self.global_proj = None
        if cfg.global_source == "c5_pool" and "glf" in cfg.fusion:
            self.global_proj = Conv2d(c5, cfg.global_channels, 1, rng, dtype=dtype)

        lows = (self.encoder.c2_channels, self.encoder.c1_channels, 6)
        highs = (cfg.context_out, cfg.stage_out[0], cfg.stage_out[1])
        self.stages = []
        for i in range(3):
            if cfg.fusion[i] == "glf":
                gch = self._stage_global_channels(i, highs[i])
                self.stages.append(GlfFusion(
                    lows[i], highs[i], cfg.stage_internal[i], cfg.stage_out[i],
                    rng, group_width=cfg.group_width, global_channels=gch,
                    dtype=dtype,
                ))
            else:
                self.stages.append(StaticFusion(lows[i], highs[i],
                                                cfg.stage_out[i], rng, dtype=dtype))
        self.pre_f1_upsample = cfg.fusion[0] == "glf"
        self.head1 = Conv2d(cfg.stage_out[2], cfg.head_channels, 3, rng, dtype=dtype)
        self.head2 = Conv2d(cfg.head_channels, 1, 3, rng, dtype=dtype)
        # start predictions mid-range so the clamp passes gradient everywhere
        self.head2.bias.data[:] = 0.5

    def _stage_global_channels(self, index: int, high_channels: int):
        src = self.cfg.global_source
        if src == "none":
            return None
        if src == "tmp_output":
            return self.cfg.context_out
        if src == "c5_pool":
            return self.cfg.global_channels
        return high_channels  # high_feature_pool: that stage's own high feature

    def forward(self, image: Tensor, trimaps: list[Trimap]) -> Tensor:
        n, c, h, w = image.shape
        if c != 3:
            raise ValueError(f"expected a 3-channel image batch, got {c} channels")
        if h % 16 or w % 16:
            raise ValueError(
                f"input size {h}x{w} not divisible by 16; pad first (see pad_to_multiple)"
            )
        if len(trimaps) != n or any(t.shape != (h, w) for t in trimaps):
            raise ValueError("trimap batch must match the image batch spatially")
        onehot = Tensor(np.stack([t.one_hot() for t in trimaps]).astype(self.dtype))
        x6 = F.concat([image, onehot])
        c1, c2, c5 = self.encoder(x6)
        if self.cfg.decoder_context == "tmp":
            mask = batch_non_background_mask(trimaps, *c5.shape[-2:], dtype=self.dtype)
            ctx = self.context(c5, mask)
        else:
            ctx = self.context(c5)
        g_shared = None
        if self.cfg.global_source == "tmp_output":
            g_shared = F.global_avg_pool(ctx)
        elif self.cfg.global_source == "c5_pool" and self.global_proj is not None:
            g_shared = self.global_proj(F.global_avg_pool(c5))

        x_high = ctx
        if self.pre_f1_upsample:
            ch, cw = ctx.shape[-2:]
            x_high = F.bilinear_resize(ctx, 2 * ch, 2 * cw)
        for stage, low in zip(self.stages, (c2, c1, x6)):
            g = None
            if isinstance(stage, GlfFusion) and stage.global_channels:
                g = g_shared if g_shared is not None else F.global_avg_pool(x_high)
            x_high = stage(low, x_high, g)
        return F.clamp01(self.head2(F.leaky_relu(self.head1(x_high), 0.01)))

    def predict(self, image: np.ndarray, trimap: Trimap) -> np.ndarray:
        """Single-image eval-mode alpha prediction (no padding applied)."""
        was_training = self.training
        self.eval()
        try:
            out = self.forward(Tensor(image[None].astype(self.dtype)), [trimap])
        finally:
            self.train(was_training)
        return out.data[0, 0]

    def fingerprint(self) -> str:
        return self.cfg.fingerprint()

    # ---- cost accounting ----
    def component_map(self) -> dict:
        comps = {"encoder": self.encoder, "context": self.context}
        if self.global_proj is not None:
            comps["global_proj"] = self.global_proj
        for i, stage in enumerate(self.stages, start=1):
            comps[f"f{i}"] = stage
        comps["head"] = _HeadView(self.head1, self.head2)
        return comps

    def component_macs(self, h: int, w: int) -> dict:
        if h % 16 or w % 16:
            raise ValueError("cost accounting expects sizes divisible by 16")
        enc_m, c5h, c5w = self.encoder.macs(h, w)
        out = {"encoder": enc_m}
        ctx_m, _, _ = self.context.macs(c5h, c5w)
        if self.cfg.decoder_context == "tmp":
            ctx_m += c5h * c5w * 4  # mask resize
        out["context"] = ctx_m
        if self.global_proj is not None:
            gp = self.encoder.c5_channels * self.cfg.global_channels
            gp += c5h * c5w * self.encoder.c5_channels  # global pooling read
            out["global_proj"] = gp
        stage_low_sizes = ((h // 4, w // 4), (h // 2, w // 2), (h, w))
        for i, (stage, (lh, lw)) in enumerate(zip(self.stages, stage_low_sizes), start=1):
            m, _, _ = stage.macs(lh, lw)
            if i == 1 and self.pre_f1_upsample:
                m += (h // 8) * (w // 8) * self.cfg.context_out * 4
            out[f"f{i}"] = m
        hm1, _, _ = self.head1.macs(h, w)
        hm2, _, _ = self.head2.macs(h, w)
        out["head"] = hm1 + hm2 + h * w * (self.cfg.head_channels + 1)
        return out


class _HeadView(Module):
    def __init__(self, conv1, conv2):
        super().__init__()
        self.conv1 = conv1
        self.conv2 = conv2


@dataclass
class CostReport:
    """Per-component parameter and multiply-accumulate counts."""

    rows: list = field(default_factory=list)   # {"module", "params", "macs"}

    @property
    def total_params(self) -> int:
        return sum(r["params"] for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r["macs"] for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }


def count_params(net: MattingNetwork) -> CostReport:
    report = CostReport()
    for name, comp in net.component_map().items():
        report.rows.append({"module": name, "params": comp.param_count(), "macs": 0})
    return report


def count_flops(net: MattingNetwork, input_h: int, input_w: int) -> CostReport:
    """Analytic multiply-accumulate counts at a given input size.

    Counting rules: convolutions cost out_elems * in_ch * k^2; stride-1
    pooling costs out_elems * k^2; adaptive pooling reads each input
    element once; bilinear resizing costs 4 per output element; batch
    norm, activations and elementwise ops cost 1 per element; the
    per-pixel grouped fusion costs H*W*C3*9.
    """
    macs = net.component_macs(input_h, input_w)
    params = {name: comp.param_count() for name, comp in net.component_map().items()}
    report = CostReport()
    for name in params:
        report.rows.append({"module": name, "params": params[name],
                            "macs": int(macs[name])})
    return report


def build_network(cfg: ArchConfig, seed: int = 0, dtype=np.float32) -> MattingNetwork:
    cfg.validate()
    rng = np.random.default_rng([seed, 0xABCD])
    return MattingNetwork(cfg, rng, dtype=dtype)


# ---------------------------------------------------------------------------
# weight container
# ---------------------------------------------------------------------------

_MAGIC = b"TMFW"
_VERSION = 1


def state_items(net: MattingNetwork) -> list:
    items = [(name, p.data) for name, p in net.named_parameters()]
    items += [(name, buf) for name, buf in net.named_buffers()]
    return items


def save_weights(net: MattingNetwork, path) -> None:
    """Versioned binary container: config, fingerprint, named LE f32 blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_json = net.cfg.to_json().encode()
    fp = net.fingerprint().encode()
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(cfg_json)), cfg_json,
              struct.pack("<I", len(fp)), fp]
    items = state_items(net)
    chunks.append(struct.pack("<I", len(items)))
    for name, arr in items:
        blob = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode()
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", blob.ndim))
        chunks.append(struct.pack(f"<{blob.ndim}I", *blob.shape))
        chunks.append(blob.tobytes())
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchMismatchError("weight file truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_weight_file(path):
    """Parse a weight container into (ArchConfig, fingerprint, {name: array})."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != _MAGIC:
        raise ArchMismatchError(f"{path}: not a weight container (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != _VERSION:
        raise ArchMismatchError(f"{path}: unsupported container version {version}")
    cfg = ArchConfig.from_json(r.take(cfg_len).decode())
    (fp_len,) = r.unpack("<I")
    fingerprint = r.take(fp_len).decode()
    (n_items,) = r.unpack("<I")
    blobs = {}
    for _ in range(n_items):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        blobs[name] = data
    return cfg, fingerprint, blobs


def load_weights(net: MattingNetwork, path) -> None:
    """Restore parameters and running statistics into a matching network."""
    _, fingerprint, blobs = read_weight_file(path)
    if fingerprint != net.fingerprint():
        raise ArchMismatchError(
            f"{path}: architecture fingerprint {fingerprint[:12]}... does not match "
            f"this network ({net.fingerprint()[:12]}...)"
        )
    expected = dict(state_items(net))
    if set(blobs) != set(expected):
        raise ArchMismatchError(f"{path}: parameter names do not match the architecture")
    for name, arr in expected.items():
        blob = blobs[name]
        if blob.shape != arr.shape:
            raise ArchMismatchError(f"{path}: shape mismatch for {name}")
        arr[...] = blob.astype(arr.dtype)


def load_network(path, seed: int = 0, dtype=np.float32) -> MattingNetwork:
    """Rebuild a network from the config embedded in a weight container."""
    cfg, _, _ = read_weight_file(path)
    net = build_network(cfg, seed=seed, dtype=dtype)
    load_weights(net, path)
    return net
