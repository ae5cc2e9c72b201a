"""GTFMN: illumination stream, IGM blocks, texture stream and sub-pixel reconstruction."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import serialize
from . import tensor as T
from .nn import ChannelNorm, Conv2d, Module
from .tensor import Tensor

GUIDE_MODES = ("off", "const1")


@dataclass(frozen=True)
class GtfmnConfig:
    scale: int = 2
    width: int = 32
    depth: int = 4
    epsilon: float = 1e-4
    use_illumination_stream: bool = True
    # only consulted when the illumination stream is disabled:
    # "off" drops the adapter entirely, "const1" keeps it and feeds M = 1
    guide_mode: str = "off"
    msa_kernel_sizes: tuple[int, ...] = (3, 5, 7)
    ffn_expansion: int = 2
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.width < 1 or self.depth < 1:
            raise ValueError(f"width and depth must be >= 1, got C={self.width}, N={self.depth}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.guide_mode not in GUIDE_MODES:
            raise ValueError(f"guide_mode must be one of {GUIDE_MODES}, got {self.guide_mode!r}")
        if not self.msa_kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.msa_kernel_sizes):
            raise ValueError(f"msa_kernel_sizes must be odd positive ints, got {self.msa_kernel_sizes}")
        if self.ffn_expansion < 1:
            raise ValueError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        object.__setattr__(self, "msa_kernel_sizes", tuple(int(k) for k in self.msa_kernel_sizes))

    @property
    def has_adapter(self) -> bool:
        return self.use_illumination_stream or self.guide_mode == "const1"

    @property
    def min_input_size(self) -> int:
        return max(self.msa_kernel_sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["msa_kernel_sizes"] = list(self.msa_kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GtfmnConfig":
        d = dict(d)
        if "msa_kernel_sizes" in d:
            d["msa_kernel_sizes"] = tuple(d["msa_kernel_sizes"])
        return cls(**d)


@dataclass
class IlluminationMap:
    values: Tensor  # N x 1 x H x W, in [0, 1]
    global_intensity: Tensor  # N x 1 x 1 x 1, in [0, 1]


def synthesize_illumination_map(m_spatial: Tensor, g: Tensor, epsilon: float) -> IlluminationMap:
    """M = clamp(M_spatial / (mean(M_spatial) + eps) * g, 0, 1), mean taken per sample."""
    if m_spatial.ndim != 4 or m_spatial.shape[1] != 1:
        raise ValueError(f"spatial map must be N x 1 x H x W, got {m_spatial.shape}")
    if g.shape != (m_spatial.shape[0], 1, 1, 1):
        raise ValueError(f"global intensity must be N x 1 x 1 x 1, got {g.shape}")
    denom = T.add_scalar(T.spatial_mean(m_spatial), epsilon)
    m = T.clamp(T.mul(T.div(m_spatial, denom), g), 0.0, 1.0)
    return IlluminationMap(m, g)


class IlluminationStream(Module):
    """Encoder, structure decoder and global predictor."""

    def __init__(self, cfg: GtfmnConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.width
        hidden = max(1, c // 2)
        self.slope = cfg.negative_slope
        self.epsilon = cfg.epsilon
        self.enc = [
            Conv2d(3, c, 3, rng=rng, dtype=dtype),
            Conv2d(c, c, 3, rng=rng, dtype=dtype),
            Conv2d(c, c, 3, rng=rng, dtype=dtype),
        ]
        self.struct_dec = Conv2d(c, 1, 3, rng=rng, dtype=dtype)
        self.global_fc1 = Conv2d(c, hidden, 1, rng=rng, dtype=dtype)
        self.global_fc2 = Conv2d(hidden, 1, 1, rng=rng, dtype=dtype)

    def encode(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"illumination encoder expects N x 3 x H x W, got {x.shape}")
        h = self.enc[0](x)
        for conv in self.enc[1:]:
            h = conv(T.leaky_relu(h, self.slope))
        return h

    def spatial_map(self, f_enc: Tensor) -> Tensor:
        return T.sigmoid(self.struct_dec(f_enc))

    def global_intensity(self, f_enc: Tensor) -> Tensor:
        pooled = T.adaptive_avg_pool_global(f_enc)
        return T.sigmoid(self.global_fc2(T.leaky_relu(self.global_fc1(pooled), self.slope)))

    def forward(self, x: Tensor) -> IlluminationMap:
        f_enc = self.encode(x)
        return synthesize_illumination_map(self.spatial_map(f_enc), self.global_intensity(f_enc), self.epsilon)


class IGMBlock(Module):
    """Illumination-guided modulation block.

    norm -> (A_self + A_guide) * F_norm -> inner residual with a 1x1 projection
    -> feed-forward -> outer residual onto the block input.
    """

    def __init__(self, cfg: GtfmnConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.width
        self.slope = cfg.negative_slope
        self.norm = ChannelNorm(c, dtype=dtype)
        self.msa = [Conv2d(c, c, k, groups=c, rng=rng, dtype=dtype) for k in cfg.msa_kernel_sizes]
        self.msa_proj = Conv2d(c, c, 1, rng=rng, dtype=dtype)
        if cfg.has_adapter:
            self.adapter1 = Conv2d(1, c, 1, rng=rng, dtype=dtype)
            self.adapter2 = Conv2d(c, c, 1, rng=rng, dtype=dtype)
        else:
            self.adapter1 = self.adapter2 = None
        self.attn_proj = Conv2d(c, c, 1, rng=rng, dtype=dtype)
        hidden = c * cfg.ffn_expansion
        self.ffn1 = Conv2d(c, hidden, 1, rng=rng, dtype=dtype)
        self.ffn2 = Conv2d(hidden, c, 1, rng=rng, dtype=dtype)
        self._map_reads = 0

    def self_attention(self, f_norm: Tensor) -> Tensor:
        acc = self.msa[0](f_norm)
        for conv in self.msa[1:]:
            acc = T.add(acc, conv(f_norm))
        return T.sigmoid(self.msa_proj(acc))

    def guided_attention(self, m: Tensor) -> Tensor:
        self._map_reads += 1
        return T.sigmoid(self.adapter2(T.leaky_relu(self.adapter1(m), self.slope)))

    def attention(self, f_norm: Tensor, m: Tensor | None) -> Tensor:
        a = self.self_attention(f_norm)
        if m is not None and self.adapter1 is not None:
            a = T.add(a, self.guided_attention(m))
        return a

    def forward(self, f_in: Tensor, m: Tensor | None) -> Tensor:
        if m is not None and m.shape[2:] != f_in.shape[2:]:
            raise ValueError(f"illumination map {m.shape[2:]} does not match features {f_in.shape[2:]}")
        f_norm = self.norm(f_in)
        f_mod = T.mul(self.attention(f_norm, m), f_norm)
        u = T.add(f_mod, self.attn_proj(f_mod))
        return T.add(f_in, self.ffn2(T.leaky_relu(self.ffn1(u), self.slope)))


class GtfmnModel(Module):
    """(I_SR, M) = G(I_LR)."""

    def __init__(self, config: GtfmnConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        c, s = config.width, config.scale
        self.illumination = IlluminationStream(config, rng, dtype) if config.use_illumination_stream else None
        self.head = Conv2d(3, c, 3, rng=rng, dtype=dtype)
        self.blocks = [IGMBlock(config, rng, dtype) for _ in range(config.depth)]
        self.recon = Conv2d(c, 3 * s * s, 3, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.head.weight.dtype

    @property
    def map_reads(self) -> int:
        """How many times any block consumed the illumination map."""
        return sum(b._map_reads for b in self.blocks)

    def reset_instrumentation(self) -> None:
        for b in self.blocks:
            b._map_reads = 0

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W input, got shape {x.shape}")
        h, w = x.shape[2:]
        k = self.config.min_input_size
        if h < k or w < k:
            raise ValueError(f"input {h}x{w} too small: both spatial dims must be >= {k}")

    def estimate_illumination(self, x: Tensor) -> IlluminationMap:
        if self.illumination is None:
            raise RuntimeError("model was built without the illumination stream")
        return self.illumination(x)

    def forward(self, x: Tensor) -> tuple[Tensor, IlluminationMap]:
        self._check_input(x)
        n, _, h, w = x.shape
        if self.illumination is not None:
            illum = self.illumination(x)
            guide = illum.values
        else:
            ones = Tensor(np.ones((n, 1, h, w), dtype=x.dtype))
            illum = IlluminationMap(ones, Tensor(np.ones((n, 1, 1, 1), dtype=x.dtype)))
            guide = ones if self.config.guide_mode == "const1" else None
        f = self.head(x)
        for block in self.blocks:
            f = block(f, guide)
        sr = T.pixel_shuffle(self.recon(f), self.config.scale)
        return sr, illum


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def expected_parameter_count(cfg: GtfmnConfig) -> int:
    """Closed form of :func:`count_parameters` for a config.

    With C = width, h = max(1, C // 2), e = ffn_expansion, s = scale and the
    attention kernel sizes k:

    * illumination stream: (27C + C) + 2(9C^2 + C) + (9C + 1) + (Ch + h) + (h + 1)
    * head: 27C + C
    * each block: 2C + sum_k (k^2 C + C) + 2(C^2 + C) + adapter + 2eC^2 + eC + C,
      adapter = (C + C) + (C^2 + C) when present
    * reconstruction: 27 s^2 C + 3 s^2
    """
    c, s, e = cfg.width, cfg.scale, cfg.ffn_expansion
    h = max(1, c // 2)
    total = 28 * c + 3 * s * s * (9 * c + 1)
    if cfg.use_illumination_stream:
        total += 28 * c + 2 * (9 * c * c + c) + 9 * c + 1 + c * h + h + h + 1
    block = 2 * c + sum(k * k * c + c for k in cfg.msa_kernel_sizes) + 2 * (c * c + c)
    block += 2 * e * c * c + e * c + c
    if cfg.has_adapter:
        block += 2 * c + c * c + c
    return total + cfg.depth * block


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"GTFMNCKP"


def save_checkpoint(model: GtfmnModel, path: str | Path, extra: dict | None = None) -> None:
    """Text header (JSON config) followed by the tensor container."""
    header = {"config": model.config.to_dict(), "dtype": str(model.dtype)}
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    serialize.write_tensors(buf, model.state_dict())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise serialize.FormatError(f"{path}: not a GTFMN checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        state = serialize.read_tensors(fh)
    return header, state


def load_checkpoint(path: str | Path, expect: GtfmnConfig | None = None) -> GtfmnModel:
    """Rebuild the model from a checkpoint; rejects config or shape mismatches."""
    header, state = read_checkpoint(path)
    cfg = GtfmnConfig.from_dict(header["config"])
    if expect is not None and expect != cfg:
        raise ValueError(f"checkpoint config {cfg} does not match expected {expect}")
    model = GtfmnModel(cfg, dtype=np.dtype(header.get("dtype", "float32")))
    model.load_state_dict(state)
    return model
