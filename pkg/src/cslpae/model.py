"""Split-latent convolutional autoencoder.

Encoder: ``n_blocks`` x (ConvBlock -> stride-2 convolution), a transformer
stack over the bottleneck frames, and a linear head whose output channels are
split into a subject half and a task half. The decoder mirrors it: a linear
join head, a transformer stack, then ``n_blocks`` x (stride-2 transposed
convolution -> ConvBlock) and a 1x1 output convolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    as_tensor,
    attention_block,
    attention_block_shapes,
    concat,
    conv1d,
    conv1d_transposed,
    instance_norm,
    layer_norm,
    linear,
    positional_encoding,
)

# stride-2 transposed convolution that exactly doubles the length
UPSAMPLE_KERNEL = 4
UPSAMPLE_PADDING = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 8
    n_time: int = 256
    n_blocks: int = 4
    conv_width: int = 64
    d_latent: int = 32
    n_transformer_layers: int = 4
    n_heads: int = 4
    kernel_size: int = 3
    padding: int = 1
    ff_mult: int = 2

    def __post_init__(self):
        if self.n_blocks < 1 or self.d_latent < 1:
            raise ConfigError("n_blocks and d_latent must be at least 1")
        if min(self.n_channels, self.n_time, self.conv_width, self.n_heads, self.kernel_size) < 1:
            raise ConfigError("channel, time, width, head and kernel sizes must be positive")
        if self.n_transformer_layers < 0 or self.padding < 0:
            raise ConfigError("n_transformer_layers and padding must be nonnegative")
        if self.n_time % (2**self.n_blocks) or self.n_time & (self.n_time - 1):
            raise ConfigError(
                f"n_time={self.n_time} must be a power of two divisible by 2**n_blocks={2**self.n_blocks}"
            )
        if self.kernel_size != 2 * self.padding + 1:
            raise ConfigError("ConvBlock convolutions must preserve length (kernel_size == 2*padding + 1)")
        if self.conv_width % self.n_heads:
            raise ConfigError(f"conv_width={self.conv_width} not divisible by n_heads={self.n_heads}")

    @property
    def n_frames(self) -> int:
        """Bottleneck length."""
        return self.n_time // 2**self.n_blocks

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class SplitLatents(NamedTuple):
    """Subject and task latents, each (frames, d_latent) or (N, frames, d_latent)."""

    subject: Tensor
    task: Tensor

    def pooled(self) -> tuple[Tensor, Tensor]:
        """Temporal mean of each split."""
        return self.subject.mean(axis=-2), self.task.mean(axis=-2)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    w, k = cfg.conv_width, cfg.kernel_size
    ff = cfg.ff_mult * w
    shapes: dict[str, tuple] = {}

    def conv_block(prefix, c_in):
        for i in range(3):
            shapes[f"{prefix}.conv{i}.weight"] = (w, c_in, k)
            shapes[f"{prefix}.conv{i}.bias"] = (w,)
            if c_in != w:
                shapes[f"{prefix}.conv{i}.proj"] = (w, c_in, 1)
            c_in = w

    for b in range(cfg.n_blocks):
        conv_block(f"enc.block{b}", cfg.n_channels if b == 0 else w)
        shapes[f"enc.block{b}.down.weight"] = (w, w, k)
        shapes[f"enc.block{b}.down.bias"] = (w,)
    for i in range(cfg.n_transformer_layers):
        shapes.update(attention_block_shapes(f"enc.tf{i}.", w, ff))
    shapes["enc.norm.gain"] = (w,)
    shapes["enc.norm.bias"] = (w,)
    shapes["enc.split.weight"] = (w, 2 * cfg.d_latent)
    shapes["enc.split.bias"] = (2 * cfg.d_latent,)

    shapes["dec.join.weight"] = (2 * cfg.d_latent, w)
    shapes["dec.join.bias"] = (w,)
    for i in range(cfg.n_transformer_layers):
        shapes.update(attention_block_shapes(f"dec.tf{i}.", w, ff))
    shapes["dec.norm.gain"] = (w,)
    shapes["dec.norm.bias"] = (w,)
    for b in range(cfg.n_blocks):
        shapes[f"dec.block{b}.up.weight"] = (w, w, UPSAMPLE_KERNEL)
        shapes[f"dec.block{b}.up.bias"] = (w,)
        conv_block(f"dec.block{b}", w)
    shapes["dec.out.weight"] = (cfg.n_channels, w, 1)
    shapes["dec.out.bias"] = (cfg.n_channels,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith("up.weight"):
        # (C_in, C_out, k): each output sees C_in * k / stride inputs
        return shape[0] * shape[2] // 2
    if len(shape) == 3:
        return shape[1] * shape[2]
    return shape[0]


def _init_param(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    # He-style uniform for ReLU inputs; linear maps use unit gain and the
    # output layer starts small so initial reconstructions are near zero
    if name == "dec.out.weight":
        gain = 0.01
    elif name.endswith(("o.weight", "ff2.weight", "proj", "down.weight", "up.weight",
                        "split.weight", "join.weight")):
        gain = 1.0
    else:
        gain = 2.0
    bound = np.sqrt(3.0 * gain / _fan_in(name, shape))
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Parameters plus the encode/decode functions over them."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._pe_cache: dict = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Model(self.config, params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _pe(self) -> np.ndarray:
        key = self.dtype
        if key not in self._pe_cache:
            cfg = self.config
            self._pe_cache[key] = positional_encoding(cfg.n_frames, cfg.conv_width, dtype=key)
        return self._pe_cache[key]

    def _conv_block(self, h: Tensor, prefix: str) -> Tensor:
        p = self.params
        pad = self.config.padding
        for i in range(3):
            name = f"{prefix}.conv{i}"
            y = conv1d(h, p[name + ".weight"], p[name + ".bias"], padding=pad).relu()
            y = instance_norm(y)
            skip = conv1d(h, p[name + ".proj"]) if name + ".proj" in p else h
            h = y + skip
        return h

    def _transformer(self, h: Tensor, side: str) -> Tensor:
        p = self.params
        h = h + self._pe()
        for i in range(self.config.n_transformer_layers):
            h = attention_block(h, p, f"{side}.tf{i}.", self.config.n_heads)
        return layer_norm(h, p[f"{side}.norm.gain"], p[f"{side}.norm.bias"])

    def encode(self, X) -> SplitLatents:
        """Map (C, T) or (N, C, T) epochs to subject and task latents."""
        cfg, p = self.config, self.params
        X = as_tensor(X, dtype=self.dtype)
        squeeze = X.ndim == 2
        if squeeze:
            X = X.reshape(1, *X.shape)
        if X.ndim != 3 or X.shape[1:] != (cfg.n_channels, cfg.n_time):
            raise ValueError(
                f"expected epochs of shape ({cfg.n_channels}, {cfg.n_time}), got {X.shape}"
            )
        h = X
        for b in range(cfg.n_blocks):
            h = self._conv_block(h, f"enc.block{b}")
            h = conv1d(
                h, p[f"enc.block{b}.down.weight"], p[f"enc.block{b}.down.bias"],
                stride=2, padding=cfg.padding,
            )
        h = self._transformer(h.transpose(0, 2, 1), "enc")
        z = linear(h, p["enc.split.weight"], p["enc.split.bias"])
        d = cfg.d_latent
        zs, zt = z[:, :, :d], z[:, :, d:]
        if squeeze:
            zs, zt = zs.reshape(zs.shape[1:]), zt.reshape(zt.shape[1:])
        return SplitLatents(zs, zt)

    def decode(self, latents) -> Tensor:
        """Join subject and task latents and reconstruct epochs."""
        cfg, p = self.config, self.params
        zs, zt = (as_tensor(z, dtype=self.dtype) for z in latents)
        if zs.shape != zt.shape:
            raise ValueError(f"latent splits differ in shape: {zs.shape} vs {zt.shape}")
        squeeze = zs.ndim == 2
        if squeeze:
            zs, zt = zs.reshape(1, *zs.shape), zt.reshape(1, *zt.shape)
        if zs.ndim != 3 or zs.shape[1:] != (cfg.n_frames, cfg.d_latent):
            raise ValueError(
                f"expected latents of shape ({cfg.n_frames}, {cfg.d_latent}), got {zs.shape}"
            )
        h = linear(concat([zs, zt], axis=-1), p["dec.join.weight"], p["dec.join.bias"])
        h = self._transformer(h, "dec").transpose(0, 2, 1)
        for b in range(cfg.n_blocks):
            h = conv1d_transposed(
                h, p[f"dec.block{b}.up.weight"], p[f"dec.block{b}.up.bias"],
                stride=2, padding=UPSAMPLE_PADDING,
            )
            h = self._conv_block(h, f"dec.block{b}")
        out = conv1d(h, p["dec.out.weight"], p["dec.out.bias"])
        return out.reshape(out.shape[1:]) if squeeze else out

    def reconstruct(self, X) -> Tensor:
        return self.decode(self.encode(X))


def build_model(config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> Model:
    """Deterministically initialise a model from ``seed``."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("config must be a ModelConfig")
    rng = np.random.default_rng(seed)
    params = {
        name: Tensor(_init_param(name, shape, rng).astype(dtype), requires_grad=True, name=name)
        for name, shape in _param_shapes(config).items()
    }
    return Model(config, params)


def encode(model: Model, X) -> SplitLatents:
    return model.encode(X)


def decode(model: Model, latents) -> Tensor:
    return model.decode(latents)
