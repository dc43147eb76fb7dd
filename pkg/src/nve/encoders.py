"""Encoders mapping EEG segments and images into the joint embedding space.

The EEG encoder runs three stages over the input viewed as a one-map
[1, channels, samples] image: a bank of parallel dilated within-channel
convolutions (temporal), a bank of parallel cross-channel convolutions
(spatial), then residual 2D stages and a strided projection head.  The image
encoder is a compact strided CNN with a per-stage feature-map registry so
analyses can suppress individual feature maps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import (
    DiffArray,
    Parameter,
    Tape,
    load_checkpoint,
    ops,
    save_checkpoint,
    uniform_fan_in,
)


def same_pad(kernel: int, stride: int, dilation: int = 1) -> int:
    """Padding making the output extent ceil(n / stride) for any input n
    that is compatible with the stride (used throughout both encoders)."""
    span = dilation * (kernel - 1) + 1
    return max(0, (span - stride + 1) // 2)


def ceil_div(n: int, s: int) -> int:
    return -(-n // s)


@dataclass(frozen=True)
class EEGEncoderConfig:
    in_channels: int = 128
    in_samples: int = 440
    temporal_dilations: tuple = (1, 2, 4, 8, 16)
    temporal_kernel: int = 33
    temporal_stride: int = 2
    temporal_maps: int = 10
    spatial_heights: tuple = (128, 64, 32, 16)
    spatial_stride: int = 2
    spatial_maps: int = 32
    residual_layers: int = 4
    embedding_dim: int = 1000

    @classmethod
    def desk(cls, in_samples: int = 440, embedding_dim: int = 64,
             temporal_maps: int = 2, spatial_maps: int = 4) -> "EEGEncoderConfig":
        """Reduced widths for desktop-scale experiments; same topology."""
        return cls(in_samples=in_samples, embedding_dim=embedding_dim,
                   temporal_maps=temporal_maps, spatial_maps=spatial_maps)

    @property
    def temporal_out(self) -> int:
        return ceil_div(self.in_samples, self.temporal_stride)

    @property
    def spatial_out(self) -> int:
        return ceil_div(self.in_channels, self.spatial_stride)

    @property
    def trunk_maps(self) -> int:
        return self.spatial_maps * len(self.spatial_heights)

    @property
    def final_shape(self) -> tuple[int, int, int]:
        return (self.trunk_maps, ceil_div(self.spatial_out, 2),
                ceil_div(self.temporal_out, 2))


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 64
    in_channels: int = 3
    stage_widths: tuple = (16, 32, 64, 128)
    embedding_dim: int = 1000

    @classmethod
    def desk(cls, image_size: int = 64, embedding_dim: int = 64,
             stage_widths: tuple = (8, 16, 32, 64)) -> "ImageEncoderConfig":
        return cls(image_size=image_size, embedding_dim=embedding_dim,
                   stage_widths=stage_widths)

    @property
    def registry(self) -> list[tuple[int, int]]:
        """Suppressible feature maps as (layer index from 1, width)."""
        return [(l, w) for l, w in enumerate(self.stage_widths, start=1)]


class _ParamStore:
    """Shared parameter bookkeeping for the encoder classes."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, values: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name}")
        p = Parameter(name, DiffArray(np.asarray(values, dtype=self.dtype)), trainable)
        self._params[name] = p
        return p

    @property
    def params(self) -> dict[str, Parameter]:
        return self._params

    def parameter_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.values).tobytes()
                        for p in self._params.values())

    def load_values(self, loaded: dict[str, Parameter]) -> None:
        missing = set(self._params) - set(loaded)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        for name, p in self._params.items():
            src = loaded[name].values
            if src.shape != p.values.shape:
                raise ValueError(f"{name}: checkpoint shape {src.shape} != {p.values.shape}")
            p.array.values = src.astype(self.dtype)


class _ConvBN:
    """Convolution + batch norm + ReLU block."""

    def __init__(self, store: _ParamStore, prefix: str, cin: int, cout: int,
                 kernel: tuple[int, int], stride: tuple[int, int],
                 padding: tuple[int, int], dilation: tuple[int, int],
                 rng: np.random.Generator):
        kh, kw = kernel
        fan_in = cin * kh * kw
        self.kernel = store.add(f"{prefix}.kernel",
                                uniform_fan_in((cout, cin, kh, kw), fan_in, rng,
                                               store.dtype))
        self.bias = store.add(f"{prefix}.bias", np.zeros(cout))
        self.gamma = store.add(f"{prefix}.bn.gamma", np.ones(cout))
        self.beta = store.add(f"{prefix}.bn.beta", np.zeros(cout))
        self.run_mean = store.add(f"{prefix}.bn.mean", np.zeros(cout), trainable=False)
        self.run_var = store.add(f"{prefix}.bn.var", np.ones(cout), trainable=False)
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def __call__(self, x: DiffArray, mode: str, activate: bool = True) -> DiffArray:
        out = ops.conv2d(x, self.kernel.array, self.bias.array, stride=self.stride,
                         padding=self.padding, dilation=self.dilation)
        out = ops.batch_norm(out, self.gamma.array, self.beta.array,
                             self.run_mean.values, self.run_var.values, mode=mode)
        return ops.relu(out) if activate else out


class EEGEncoder:
    """Multi-branch dilated EEG encoder producing a D-dimensional embedding."""

    ARCH = "eeg_encoder"

    def __init__(self, config: EEGEncoderConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.store = _ParamStore(dtype)
        self.input_channel_mask: np.ndarray | None = None
        rng = np.random.default_rng((seed, 1))
        c = config

        self.temporal = []
        for i, dil in enumerate(c.temporal_dilations):
            pad = same_pad(c.temporal_kernel, c.temporal_stride, dil)
            self.temporal.append(_ConvBN(
                self.store, f"eeg.temporal.branch{i}", 1, c.temporal_maps,
                kernel=(1, c.temporal_kernel), stride=(1, c.temporal_stride),
                padding=(0, pad), dilation=(1, dil), rng=rng))

        t_maps = c.temporal_maps * len(c.temporal_dilations)
        self.spatial = []
        for i, kh in enumerate(c.spatial_heights):
            pad = same_pad(kh, c.spatial_stride)
            self.spatial.append(_ConvBN(
                self.store, f"eeg.spatial.branch{i}", t_maps, c.spatial_maps,
                kernel=(kh, 1), stride=(c.spatial_stride, 1),
                padding=(pad, 0), dilation=(1, 1), rng=rng))

        trunk = c.trunk_maps
        self.residual = []
        for i in range(c.residual_layers):
            pair = (
                _ConvBN(self.store, f"eeg.residual.layer{i}.conv0", trunk, trunk,
                        kernel=(3, 3), stride=(1, 1), padding=(1, 1),
                        dilation=(1, 1), rng=rng),
                _ConvBN(self.store, f"eeg.residual.layer{i}.conv1", trunk, trunk,
                        kernel=(3, 3), stride=(1, 1), padding=(1, 1),
                        dilation=(1, 1), rng=rng),
            )
            self.residual.append(pair)

        self.final_conv = _ConvBN(self.store, "eeg.final.conv", trunk, trunk,
                                  kernel=(3, 3), stride=(2, 2), padding=(1, 1),
                                  dilation=(1, 1), rng=rng)
        flat = int(np.prod(c.final_shape))
        self.fc_w = self.store.add("eeg.final.fc.weight",
                                   uniform_fan_in((c.embedding_dim, flat), flat, rng,
                                                  dtype))
        self.fc_b = self.store.add("eeg.final.fc.bias", np.zeros(c.embedding_dim))

    @property
    def params(self) -> dict[str, Parameter]:
        return self.store.params

    def forward(self, segments: np.ndarray, tape: Tape | None = None,
                mode: str = "eval") -> DiffArray:
        """Encode [B, C, L] segments into [B, D] embeddings."""
        c = self.config
        x = np.asarray(segments, dtype=self.store.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != c.in_channels:
            raise ValueError(f"expected [B, {c.in_channels}, L] input, got {x.shape}")
        if x.shape[2] != c.in_samples:
            raise ValueError(f"encoder built for {c.in_samples} samples, "
                             f"got {x.shape[2]}")
        if self.input_channel_mask is not None:
            x = x * self.input_channel_mask[None, :, None]
        h = DiffArray(x[:, None, :, :], tape)

        h = ops.concat([branch(h, mode) for branch in self.temporal], axis=1)
        h = ops.concat([branch(h, mode) for branch in self.spatial], axis=1)
        for conv0, conv1 in self.residual:
            inner = conv1(conv0(h, mode), mode, activate=False)
            h = ops.relu(ops.add(inner, h))
        h = self.final_conv(h, mode)
        h = ops.reshape(h, (h.shape[0], -1))
        return ops.linear(h, self.fc_w.array, self.fc_b.array)

    def intermediate_shapes(self, batch: int = 1) -> dict[str, tuple]:
        """Stage output shapes implied by the config (no forward pass)."""
        c = self.config
        return {
            "temporal": (batch, c.temporal_maps * len(c.temporal_dilations),
                         c.in_channels, c.temporal_out),
            "spatial": (batch, c.trunk_maps, c.spatial_out, c.temporal_out),
            "residual": (batch, c.trunk_maps, c.spatial_out, c.temporal_out),
            "final": (batch,) + c.final_shape,
            "embedding": (batch, c.embedding_dim),
        }

    def ignore_channel(self, channel: int | None) -> None:
        """Mask one input channel to zero (None clears the mask).

        Temporal/spatial kernels are shared across the channel axis, so a
        provably channel-blind encoder is constructed by masking the input
        row rather than zeroing weights.
        """
        if channel is None:
            self.input_channel_mask = None
            return
        mask = np.ones(self.config.in_channels, dtype=self.store.dtype)
        mask[channel] = 0.0
        self.input_channel_mask = mask

    def save(self, path) -> None:
        save_checkpoint(path, self.store.params,
                        {"arch": self.ARCH, "config": asdict(self.config)})

    @classmethod
    def load(cls, path, dtype=np.float64) -> "EEGEncoder":
        loaded, meta = load_checkpoint(path)
        if meta.get("arch") != cls.ARCH:
            raise ValueError(f"{path}: not an {cls.ARCH} checkpoint")
        cfg = meta["config"]
        for key in ("temporal_dilations", "spatial_heights"):
            cfg[key] = tuple(cfg[key])
        model = cls(EEGEncoderConfig(**cfg), dtype=dtype)
        model.store.load_values(loaded)
        return model


class ImageEncoder:
    """Compact strided CNN with a suppressible feature-map registry."""

    ARCH = "image_encoder"

    def __init__(self, config: ImageEncoderConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.store = _ParamStore(dtype)
        rng = np.random.default_rng((seed, 2))
        self.stages = []
        cin = config.in_channels
        for i, width in enumerate(config.stage_widths):
            self.stages.append(_ConvBN(self.store, f"img.stage{i}", cin, width,
                                       kernel=(3, 3), stride=(2, 2), padding=(1, 1),
                                       dilation=(1, 1), rng=rng))
            cin = width
        self.fc_w = self.store.add("img.fc.weight",
                                   uniform_fan_in((config.embedding_dim, cin), cin,
                                                  rng, dtype))
        self.fc_b = self.store.add("img.fc.bias", np.zeros(config.embedding_dim))

    @property
    def params(self) -> dict[str, Parameter]:
        return self.store.params

    @property
    def registry(self) -> list[tuple[int, int]]:
        return self.config.registry

    def forward(self, images: np.ndarray, tape: Tape | None = None,
                mode: str = "eval", suppress: tuple[int, int] | None = None) -> DiffArray:
        """Encode [B, 3, H, W] images to [B, D]; optionally zero feature map
        ``suppress=(layer, feature)`` (1-based layer) before the next stage."""
        c = self.config
        x = np.asarray(images, dtype=self.store.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != c.in_channels or x.shape[2] != c.image_size \
                or x.shape[3] != c.image_size:
            raise ValueError(
                f"expected [B, {c.in_channels}, {c.image_size}, {c.image_size}] "
                f"images, got {x.shape}")
        if suppress is not None:
            layer, feature = suppress
            if not (1 <= layer <= len(c.stage_widths)) \
                    or not (0 <= feature < c.stage_widths[layer - 1]):
                raise ValueError(f"suppress target {suppress} outside registry")
        h = DiffArray(x, tape)
        for i, stage in enumerate(self.stages, start=1):
            h = stage(h, mode)
            if suppress is not None and suppress[0] == i:
                mask = np.ones(h.shape[1], dtype=self.store.dtype)
                mask[suppress[1]] = 0.0
                h = ops.mul(h, mask[None, :, None, None])
        h = ops.mean(h, axis=(2, 3))
        return ops.linear(h, self.fc_w.array, self.fc_b.array)

    def save(self, path) -> None:
        save_checkpoint(path, self.store.params,
                        {"arch": self.ARCH, "config": asdict(self.config)})

    @classmethod
    def load(cls, path, dtype=np.float64) -> "ImageEncoder":
        loaded, meta = load_checkpoint(path)
        if meta.get("arch") != cls.ARCH:
            raise ValueError(f"{path}: not an {cls.ARCH} checkpoint")
        cfg = meta["config"]
        cfg["stage_widths"] = tuple(cfg["stage_widths"])
        model = cls(ImageEncoderConfig(**cfg), dtype=dtype)
        model.store.load_values(loaded)
        return model


class SoftmaxHead:
    """Linear projection to class logits (softmax applied at evaluation)."""

    ARCH = "softmax_head"

    def __init__(self, dim: int, n_classes: int, seed: int = 0, dtype=np.float32,
                 prefix: str = "head"):
        self.dim = dim
        self.n_classes = n_classes
        self.store = _ParamStore(dtype)
        rng = np.random.default_rng((seed, 3))
        self.w = self.store.add(f"{prefix}.weight",
                                uniform_fan_in((n_classes, dim), dim, rng, dtype))
        self.b = self.store.add(f"{prefix}.bias", np.zeros(n_classes))

    @property
    def params(self) -> dict[str, Parameter]:
        return self.store.params

    def forward(self, embedding: DiffArray) -> DiffArray:
        return ops.linear(embedding, self.w.array, self.b.array)

    def probabilities(self, embedding_values: np.ndarray) -> np.ndarray:
        logits = embedding_values @ self.w.values.T + self.b.values
        return ops.softmax_values(logits)

    def save(self, path) -> None:
        save_checkpoint(path, self.store.params,
                        {"arch": self.ARCH,
                         "config": {"dim": self.dim, "n_classes": self.n_classes}})

    @classmethod
    def load(cls, path, dtype=np.float64) -> "SoftmaxHead":
        loaded, meta = load_checkpoint(path)
        if meta.get("arch") != cls.ARCH:
            raise ValueError(f"{path}: not a {cls.ARCH} checkpoint")
        model = cls(meta["config"]["dim"], meta["config"]["n_classes"], dtype=dtype)
        model.store.load_values(loaded)
        return model
