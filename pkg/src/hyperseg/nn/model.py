"""Hierarchical vision-transformer segmenter for hyperspectral tiles.

Four encoder stages of overlapped patch embedding + transformer blocks
(spatial-reduction attention, depthwise-conv feed-forward), an all-MLP
decoder that projects and fuses multi-scale features, and three modular
adaptations for high spectral dimension:

* spectral layers: a 1x1 convolution inside every encoder block that mixes
  bands/channels per pixel without touching spatial context;
* a learned upscale tail in the decoder (bilinear x2 followed by two
  conv3x3 + ReLU + BatchNorm stacks) instead of plain interpolation;
* a first-stage stride of 2 instead of 4, halving the resolution loss.

Variants: ``base`` (stride 4, no upscale tail, native logits at 1/4 input
resolution), ``convup`` (stride 4 + one upscale tail, 1/2) and
``convupstride`` (stride 2 + one upscale tail, full resolution). The stride
change does not alter the parameter count, so convup and convupstride have
identical parameter tallies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import DataError
from . import tensor as T
from .tensor import Tensor

VARIANTS = ("base", "convup", "convupstride")


def canonical_variant(name: str) -> str:
    key = name.replace("_", "").replace("-", "").lower()
    if key not in VARIANTS:
        raise DataError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return key


@dataclass
class ModelConfig:
    in_bands: int
    num_classes: int = 1
    multi_hot: bool = False
    variant: str = "base"
    stage_dims: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    patch_sizes: tuple[int, ...] = (7, 3, 3, 3)
    mlp_ratio: int = 4
    spectral_layer: bool = False
    decoder_dim: int = 32

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.in_bands < 1 or self.num_classes < 1:
            raise DataError("in_bands and num_classes must be >= 1")
        if not self.multi_hot and self.num_classes != 1:
            raise DataError("single-hot config requires num_classes == 1")
        n = len(self.stage_dims)
        if not (len(self.stage_depths) == len(self.heads) == len(self.sr_ratios)
                == len(self.patch_sizes) == n):
            raise DataError("per-stage config tuples must have equal length")
        for d, h in zip(self.stage_dims, self.heads):
            if d % h:
                raise DataError(f"stage dim {d} not divisible by heads {h}")

    @property
    def first_stride(self) -> int:
        return 2 if self.variant == "convupstride" else 4

    @property
    def output_scale(self) -> float:
        return {"base": 0.25, "convup": 0.5, "convupstride": 1.0}[self.variant]

    @property
    def num_upscale_blocks(self) -> int:
        return 0 if self.variant == "base" else 1

    def to_dict(self) -> dict:
        return {
            "in_bands": self.in_bands, "num_classes": self.num_classes,
            "multi_hot": self.multi_hot, "variant": self.variant,
            "stage_dims": list(self.stage_dims), "stage_depths": list(self.stage_depths),
            "heads": list(self.heads), "sr_ratios": list(self.sr_ratios),
            "patch_sizes": list(self.patch_sizes), "mlp_ratio": self.mlp_ratio,
            "spectral_layer": self.spectral_layer, "decoder_dim": self.decoder_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("stage_dims", "stage_depths", "heads", "sr_ratios", "patch_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def b0_config(in_bands: int, **kw) -> ModelConfig:
    """Full-size encoder dims matching the published B0 scale."""
    return ModelConfig(in_bands=in_bands, stage_dims=(32, 64, 160, 256),
                       stage_depths=(2, 2, 2, 2), heads=(1, 2, 5, 8),
                       decoder_dim=256, **kw)


def bottleneck_ratio(in_bands: int, out_channels: int, stride: int) -> float:
    """Signed percentage change in data volume across the first embedding layer."""
    return 100.0 * (out_channels / (in_bands * stride * stride) - 1.0)


# ---------------------------------------------------------------------------
# module machinery
# ---------------------------------------------------------------------------

class Module:
    """Tiny module tree: parameter discovery by attribute walk, in order."""

    _buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise DataError(f"checkpoint is missing parameter {name}")
            if tuple(state[name].shape) != tuple(p.data.shape):
                raise DataError(f"shape mismatch for {name}: "
                                f"{state[name].shape} vs {p.data.shape}")
            p.data = state[name].astype(np.float32).copy()
        for name, b in self.named_buffers():
            if name in state:
                b[...] = state[name]

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self):
        for m in self.modules():
            if hasattr(m, "training"):
                m.training = True

    def eval(self):
        for m in self.modules():
            if hasattr(m, "training"):
                m.training = False


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    if std == 0.0:
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
    vals = np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)
    return Tensor(vals.astype(np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int):
        self.weight = _param(rng, (in_dim, out_dim), 0.02)
        self.bias = _param(rng, (out_dim,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        self.weight = _param(rng, (out_ch, in_ch, kernel, kernel), np.sqrt(2.0 / fan_in))
        self.bias = _param(rng, (out_ch,), 0.0)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=np.float32)
        self.running_var = np.ones(dim, dtype=np.float32)
        self.momentum = momentum
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, self.training, self.momentum)


def to_tokens(x: Tensor) -> tuple[Tensor, int, int]:
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c)), h, w


def to_spatial(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    return T.transpose(T.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class SpectralBlock(Module):
    """1x1 convolution mixing channels per pixel, followed by the block
    activation; spatial and channel extents are unchanged."""

    def __init__(self, rng, dim: int):
        self.conv = Conv2d(rng, dim, dim, kernel=1)
        self.dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        return T.gelu(self.conv(x))

    def apply_tokens(self, x: Tensor) -> Tensor:
        """Same map on (B, N, C) tokens: a 1x1 conv is a per-pixel linear."""
        w = T.transpose(T.reshape(self.conv.weight, (self.dim, self.dim)), (1, 0))
        return T.gelu(T.matmul(x, w) + self.conv.bias)


class PatchEmbed(Module):
    """Overlapped patch embedding: strided conv + layer norm on tokens."""

    def __init__(self, rng, in_ch: int, out_ch: int, patch: int, stride: int):
        self.conv = Conv2d(rng, in_ch, out_ch, kernel=patch, stride=stride,
                           padding=patch // 2)
        self.norm = LayerNorm(out_ch)

    def __call__(self, x: Tensor) -> tuple[Tensor, int, int]:
        emb = self.conv(x)
        tokens, h, w = to_tokens(emb)
        return self.norm(tokens), h, w


class EfficientSelfAttention(Module):
    """Multi-head attention with keys/values on spatially reduced tokens."""

    def __init__(self, rng, dim: int, heads: int, sr_ratio: int):
        if dim % heads:
            raise DataError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.sr_ratio = sr_ratio
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        if sr_ratio > 1:
            self.sr = Conv2d(rng, dim, dim, kernel=sr_ratio, stride=sr_ratio)
            self.sr_norm = LayerNorm(dim)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        b, n, c = x.shape
        q = self._split_heads(self.q(x))
        if self.sr_ratio > 1:
            if h % self.sr_ratio or w % self.sr_ratio:
                raise DataError(
                    f"feature map {h}x{w} not divisible by sr_ratio {self.sr_ratio}")
            red = self.sr(to_spatial(x, h, w))
            red_tokens, _, _ = to_tokens(red)
            kv_src = self.sr_norm(red_tokens)
        else:
            kv_src = x
        k = self._split_heads(self.k(kv_src))
        v = self._split_heads(self.v(kv_src))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        att = T.softmax(scores, axis=-1)
        ctx = T.matmul(att, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, c))
        return self.proj(merged)


class MixFFN(Module):
    """Feed-forward with a 3x3 depthwise convolution between the linears."""

    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.dw_weight = _param(rng, (hidden, 3, 3), np.sqrt(2.0 / 9.0))
        self.dw_bias = _param(rng, (hidden,), 0.0)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        t = self.fc1(x)
        spatial = to_spatial(t, h, w)
        spatial = T.depthwise_conv3x3(spatial, self.dw_weight, self.dw_bias)
        t, _, _ = to_tokens(spatial)
        return self.fc2(T.gelu(t))


class EncoderBlock(Module):
    def __init__(self, rng, dim: int, heads: int, sr_ratio: int, mlp_ratio: int,
                 spectral: bool):
        self.norm1 = LayerNorm(dim)
        self.attn = EfficientSelfAttention(rng, dim, heads, sr_ratio)
        self.spectral = SpectralBlock(rng, dim) if spectral else None
        self.norm2 = LayerNorm(dim)
        self.ffn = MixFFN(rng, dim, dim * mlp_ratio)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        if self.spectral is not None:
            x = self.spectral.apply_tokens(x)
        return x + self.ffn(self.norm2(x), h, w)


class EncoderStage(Module):
    def __init__(self, rng, in_ch: int, dim: int, depth: int, heads: int,
                 sr_ratio: int, patch: int, stride: int, mlp_ratio: int,
                 spectral: bool):
        self.embed = PatchEmbed(rng, in_ch, dim, patch, stride)
        self.blocks = [EncoderBlock(rng, dim, heads, sr_ratio, mlp_ratio, spectral)
                       for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        tokens, h, w = self.embed(x)
        for block in self.blocks:
            tokens = block(tokens, h, w)
        return to_spatial(self.norm(tokens), h, w)


class UpscaleBlock(Module):
    """Learned x2 upscaling: bilinear resize then two conv3x3+ReLU+BN stacks."""

    def __init__(self, rng, dim: int):
        self.conv1 = Conv2d(rng, dim, dim, kernel=3, stride=1, padding=1)
        self.bn1 = BatchNorm2d(dim)
        self.conv2 = Conv2d(rng, dim, dim, kernel=3, stride=1, padding=1)
        self.bn2 = BatchNorm2d(dim)

    def __call__(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        x = T.bilinear_resize(x, 2 * h, 2 * w)
        x = self.bn1(T.relu(self.conv1(x)))
        x = self.bn2(T.relu(self.conv2(x)))
        return x


class Decoder(Module):
    """Project each stage to a common width, resize to the stage-1 grid,
    concatenate, fuse, optionally upscale, classify."""

    def __init__(self, rng, stage_dims, decoder_dim: int, num_classes: int,
                 num_upscale: int):
        self.projs = [Conv2d(rng, d, decoder_dim, kernel=1) for d in stage_dims]
        self.fuse = Conv2d(rng, decoder_dim * len(stage_dims), decoder_dim, kernel=1)
        self.upscales = [UpscaleBlock(rng, decoder_dim) for _ in range(num_upscale)]
        self.classifier = Conv2d(rng, decoder_dim, num_classes, kernel=1)

    def __call__(self, features: list[Tensor]) -> Tensor:
        _, _, h0, w0 = features[0].shape
        resized = []
        for proj, f in zip(self.projs, features):
            p = proj(f)
            if p.shape[2:] != (h0, w0):
                p = T.bilinear_resize(p, h0, w0)
            resized.append(p)
        x = T.relu(self.fuse(T.concat(resized, axis=1)))
        for up in self.upscales:
            x = up(x)
        return self.classifier(x)


class HyperspectralViT(Module):
    """Encoder-decoder segmenter over band-first NCHW tiles.

    ``forward`` returns native-resolution logits (input / first_stride,
    recovered x2 per upscale block); ``full_logits`` bilinearly closes any
    remaining gap to the input resolution for loss and evaluation.

    ``input_mean``/``input_std`` hold per-band standardization statistics,
    fitted from the training set and stored with every checkpoint.
    """

    _buffers = ("input_mean", "input_std")

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.input_mean = np.zeros(config.in_bands, dtype=np.float32)
        self.input_std = np.ones(config.in_bands, dtype=np.float32)
        rng = np.random.default_rng([int(seed), 0x5E6])
        strides = (config.first_stride, 2, 2, 2)
        in_chs = (config.in_bands,) + tuple(config.stage_dims[:-1])
        self.stages = [
            EncoderStage(rng, in_chs[i], config.stage_dims[i], config.stage_depths[i],
                         config.heads[i], config.sr_ratios[i], config.patch_sizes[i],
                         strides[i], config.mlp_ratio, config.spectral_layer)
            for i in range(len(config.stage_dims))
        ]
        self.decoder = Decoder(rng, config.stage_dims, config.decoder_dim,
                               config.num_classes, config.num_upscale_blocks)

    def set_input_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.input_mean[...] = np.asarray(mean, dtype=np.float32)
        self.input_std[...] = np.maximum(np.asarray(std, dtype=np.float32), 1e-6)

    def forward(self, x: Tensor) -> Tensor:
        shift = Tensor(-self.input_mean[None, :, None, None])
        scale = Tensor(1.0 / self.input_std[None, :, None, None])
        cur = (x + shift) * scale
        features = []
        for stage in self.stages:
            cur = stage(cur)
            features.append(cur)
        return self.decoder(features)

    __call__ = forward

    def full_logits(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        logits = self.forward(x)
        if logits.shape[2:] != (h, w):
            logits = T.bilinear_resize(logits, h, w)
        return logits
