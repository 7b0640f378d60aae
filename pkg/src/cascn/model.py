"""Segmentation model assembly, ablation variants, cost accounting, and
checkpoint round-trips.

Geometry: a dense-block encoder taps features at strides 2/4/8/16, a
bridge (pyramid pooling or a 1x1 pass-through) sits at the bottom, and a
five-stage decoder returns to full resolution. With the two-halving stem
(7x7/2 conv + maxpool) the bottom stride is 32 and every decoder stage
upsamples; with the single-halving stem (desk scale) the bottom stride is
16 and the first decoder stage merges the stride-16 skip at the same
resolution instead of upsampling. Both shapes use exactly four
attention-refined skip connections.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import ops
from .aspp import Aspp, AsppSpec
from .attention import Meca, MecaSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DimensionError
from .layers import (ConvBnRelu, Conv2d, DenseBlock, DenseBlockSpec, Module,
                     Transition, TransitionSpec, Upsample2x, make_block)
from .tensor import Tensor, scope


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model bit-for-bit."""

    input_size: tuple[int, int] = (192, 256)
    conv_mode: str = "separable"            # "separable" | "standard"
    use_aspp: bool = True
    use_meca: bool = True
    blocks: tuple[int, ...] = (6, 12, 24, 16)
    growth: int = 32
    stem_channels: int = 64
    stem_pool: bool = True                  # two-halving stem when True
    compression: float = 0.5
    decoder_widths: tuple[int, ...] = (512, 256, 128, 64, 32)
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    aspp_out: int = 256
    aspp_1x1: bool = True
    aspp_image_pool: bool = True
    meca_kernel: int | None = None          # None = adaptive
    precision: str = "double"
    seed: int = 0

    @property
    def total_stride(self) -> int:
        return 32 if self.stem_pool else 16

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def validate(self) -> None:
        h, w = self.input_size
        s = self.total_stride
        if h <= 0 or w <= 0 or h % s or w % s:
            raise ConfigError(
                f"input_size must be positive and divisible by {s} "
                f"(the encoder's total stride), got {h}x{w}")
        if self.conv_mode not in ("separable", "standard"):
            raise ConfigError(f"conv_mode must be separable|standard, "
                              f"got '{self.conv_mode}'")
        if len(self.blocks) != 4 or any(n < 1 for n in self.blocks):
            raise ConfigError(f"blocks must be four positive counts, "
                              f"got {self.blocks}")
        if len(self.decoder_widths) != 5:
            raise ConfigError(f"decoder_widths must list 5 stage widths, "
                              f"got {len(self.decoder_widths)}")
        if self.growth < 1 or self.stem_channels < 1:
            raise ConfigError("growth and stem_channels must be positive")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must be in (0, 1], "
                              f"got {self.compression}")
        if self.aspp_out < 1:
            raise ConfigError("aspp_out must be positive")
        if self.meca_kernel is not None and self.meca_kernel % 2 == 0:
            raise ConfigError(f"meca_kernel must be odd, got {self.meca_kernel}")
        if self.precision not in ("double", "single"):
            raise ConfigError(f"precision must be double|single, "
                              f"got '{self.precision}'")
        if self.use_aspp:
            AsppSpec(1, self.aspp_out, self.aspp_rates, self.aspp_1x1,
                     self.aspp_image_pool)

    @staticmethod
    def paper(input_size: tuple[int, int] = (192, 256), **overrides
              ) -> "ModelConfig":
        """Full-scale configuration (121-layer encoder schedule)."""
        return dataclasses.replace(ModelConfig(input_size=input_size),
                                   **overrides)

    @staticmethod
    def desk(input_size: tuple[int, int] = (48, 64), **overrides
             ) -> "ModelConfig":
        """Scaled-down configuration for CPU-sized tests and runs."""
        cfg = ModelConfig(
            input_size=input_size, blocks=(2, 2, 2, 2), growth=8,
            stem_channels=16, stem_pool=False,
            decoder_widths=(64, 48, 32, 24, 16),
            aspp_rates=(1, 2, 3), aspp_out=32)
        return dataclasses.replace(cfg, **overrides)

    # -- flat key=value serialization ---------------------------------

    def to_pairs(self) -> list[tuple[str, str]]:
        def fmt(value):
            if isinstance(value, bool):
                return "true" if value else "false"
            if isinstance(value, tuple):
                return ",".join(str(v) for v in value)
            return str(value)

        pairs = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "input_size":
                pairs.append((f.name, f"{value[0]}x{value[1]}"))
            elif f.name == "meca_kernel":
                pairs.append((f.name, "adaptive" if value is None else str(value)))
            else:
                pairs.append((f.name, fmt(value)))
        return pairs

    @staticmethod
    def from_pairs(pairs) -> "ModelConfig":
        kwargs = {}
        for key, raw in pairs:
            if "." in key:
                continue  # namespaced extras (training state etc.)
            kwargs[key] = _parse_field(key, raw)
        cfg = ModelConfig(**kwargs)
        cfg.validate()
        return cfg


_BOOL_FIELDS = {"use_aspp", "use_meca", "stem_pool", "aspp_1x1",
                "aspp_image_pool"}
_INT_FIELDS = {"growth", "stem_channels", "aspp_out", "seed"}
_TUPLE_FIELDS = {"blocks", "decoder_widths", "aspp_rates"}


def _parse_field(key: str, raw: str):
    valid = {f.name for f in dataclasses.fields(ModelConfig)}
    if key not in valid:
        raise ConfigError(f"unknown model config key '{key}'")
    raw = raw.strip()
    if key == "input_size":
        try:
            h, w = raw.lower().split("x")
            return (int(h), int(w))
        except ValueError:
            raise ConfigError(f"input_size must look like 192x256, got '{raw}'")
    if key == "meca_kernel":
        return None if raw == "adaptive" else int(raw)
    if key in _BOOL_FIELDS:
        if raw not in ("true", "false"):
            raise ConfigError(f"{key} must be true|false, got '{raw}'")
        return raw == "true"
    if key in _INT_FIELDS:
        return int(raw)
    if key in _TUPLE_FIELDS:
        return tuple(int(v) for v in raw.split(","))
    if key == "compression":
        return float(raw)
    return raw


VARIANT_FLAGS = {
    "stConv": ("standard", False, False),
    "seConv": ("separable", False, False),
    "seConv+ASPP": ("separable", True, False),
    "seConv+MECA": ("separable", False, True),
    "full": ("separable", True, True),
}

VARIANT_LABELS = {
    "stConv": "DenseNet121 + stConv",
    "seConv": "DenseNet121 + seConv",
    "seConv+ASPP": "DenseNet121 + seConv + ASPP",
    "seConv+MECA": "DenseNet121 + seConv + MECA",
    "full": "CASCN",
}


def variant(config: ModelConfig, name: str) -> ModelConfig:
    """Ablation variant: same schedule, flags set for the named row."""
    if name not in VARIANT_FLAGS:
        raise ConfigError(f"unknown variant '{name}'; expected one of "
                          f"{sorted(VARIANT_FLAGS)}")
    conv_mode, use_aspp, use_meca = VARIANT_FLAGS[name]
    return dataclasses.replace(config, conv_mode=conv_mode, use_aspp=use_aspp,
                               use_meca=use_meca)


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class LayerCost:
    """Multiply-accumulate cost of one conv-like layer (integer exact)."""

    name: str
    kind: str            # standard | separable | transposed | attention
    out_h: int
    out_w: int
    kernel: int
    in_channels: int
    out_channels: int

    @property
    def macs(self) -> int:
        hw = self.out_h * self.out_w
        if self.kind == "standard":
            return hw * self.kernel ** 2 * self.in_channels * self.out_channels
        if self.kind == "separable":
            return hw * self.in_channels * (self.kernel ** 2 + self.out_channels)
        if self.kind == "transposed":
            return hw * self.in_channels * self.out_channels
        if self.kind == "attention":
            return 2 * self.kernel * self.out_channels
        raise ValueError(f"unknown layer kind '{self.kind}'")

    @property
    def standard_macs(self) -> int:
        """Cost of the standard conv with the same geometry."""
        return (self.out_h * self.out_w * self.kernel ** 2
                * self.in_channels * self.out_channels)

    @property
    def separable_ratio(self) -> Fraction:
        """standard/separable cost ratio: k^2*M / (k^2 + M), exact."""
        k2 = self.kernel ** 2
        return Fraction(k2 * self.out_channels, k2 + self.out_channels)


@dataclass
class FlopReport:
    rows: list[LayerCost]

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def by_kind(self, kind: str) -> list[LayerCost]:
        return [r for r in self.rows if r.kind == kind]


def flop_count(model: "CascnModel") -> FlopReport:
    return FlopReport(list(model.layer_costs))


# ---------------------------------------------------------------------------
# model


class DecoderStage(Module):
    """Optional 2x upsample, optional attention-refined skip concat, then
    two convolution blocks."""

    def __init__(self, up: Upsample2x | None, skip_stride: int | None,
                 attention: Meca | None, block1: Module, block2: Module):
        super().__init__()
        self.up = up
        self.skip_stride = skip_stride
        self.attention = attention
        if up is not None:
            self._child("up", up)
        if attention is not None:
            self._child("attention", attention)
        self.block1 = self._child("block1", block1)
        self.block2 = self._child("block2", block2)

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        if self.up is not None:
            x = self.up.forward(x)
        if self.skip_stride is not None:
            refined = self.attention.forward(skip) if self.attention else skip
            x = ops.concat_channels([x, refined])
        return self.block2.forward(self.block1.forward(x))


class CascnModel(Module):
    """Dense encoder, bridge, attention-skipped decoder, sigmoid head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        dtype = config.dtype
        rng = np.random.default_rng(config.seed)
        costs: list[LayerCost] = []
        h, w = config.input_size

        stem_kernel = 7 if config.stem_pool else 3
        self.stem = self._child(
            "stem", ConvBnRelu(3, config.stem_channels, stem_kernel, rng,
                               stride=2, padding=stem_kernel // 2, dtype=dtype))
        h, w = h // 2, w // 2
        costs.append(LayerCost("stem.conv", "standard", h, w, stem_kernel, 3,
                               config.stem_channels))

        # encoder: four dense blocks, transitions between, taps at 2/4/8/16
        self.tap_channels: dict[int, int] = {}
        self.tap_shapes: dict[int, tuple[int, int]] = {}
        stride = 2
        if config.stem_pool:
            self.tap_channels[2] = config.stem_channels
            self.tap_shapes[2] = (h, w)
            h, w = h // 2, w // 2
            stride = 4
        ch = config.stem_channels
        self.enc_blocks: list[DenseBlock] = []
        self.enc_transitions: list[Transition | None] = []
        self.block_strides: list[int] = []
        block_spec = lambda n: DenseBlockSpec(n, config.growth)
        for i, n_layers in enumerate(config.blocks):
            block = DenseBlock(ch, block_spec(n_layers), rng, dtype=dtype)
            self._child(f"encoder_block{i + 1}", block)
            self.enc_blocks.append(block)
            self.block_strides.append(stride)
            for j, layer in enumerate(block.layers):
                base = f"encoder_block{i + 1}.layer{j}"
                mid = layer.conv1.out_channels
                costs.append(LayerCost(f"{base}.conv1", "standard", h, w, 1,
                                       layer.in_channels, mid))
                costs.append(LayerCost(f"{base}.conv2", "standard", h, w, 3,
                                       mid, config.growth))
            ch = block.out_channels
            last = i == len(config.blocks) - 1
            if not last or not config.stem_pool:
                self.tap_channels[stride] = ch
                self.tap_shapes[stride] = (h, w)
            if not last:
                trans = Transition(ch, TransitionSpec(config.compression), rng,
                                   dtype=dtype)
                self._child(f"encoder_trans{i + 1}", trans)
                self.enc_transitions.append(trans)
                costs.append(LayerCost(f"encoder_trans{i + 1}.conv", "standard",
                                       h, w, 1, ch, trans.out_channels))
                ch = trans.out_channels
                h, w = h // 2, w // 2
                stride *= 2
            else:
                self.enc_transitions.append(None)
        assert sorted(self.tap_channels) == [2, 4, 8, 16]
        self.bottom_stride = stride
        self.bottom_shape = (h, w)

        self.tail = self._child("tail",
                                make_block(config.conv_mode, ch, ch, rng,
                                           dtype=dtype))
        costs.append(LayerCost(
            "tail", "separable" if config.conv_mode == "separable"
            else "standard", h, w, 3, ch, ch))

        if config.use_aspp:
            spec = AsppSpec(ch, config.aspp_out, config.aspp_rates,
                            config.aspp_1x1, config.aspp_image_pool)
            self.bridge = self._child("bridge", Aspp(spec, rng, dtype=dtype))
            if spec.include_1x1:
                costs.append(LayerCost("bridge.branch_1x1", "standard", h, w,
                                       1, ch, config.aspp_out))
            for r in spec.rates:
                costs.append(LayerCost(f"bridge.branch_rate{r}", "standard",
                                       h, w, 3, ch, config.aspp_out))
            if spec.include_image_pool:
                costs.append(LayerCost("bridge.pool_conv", "standard", 1, 1,
                                       1, ch, config.aspp_out))
            costs.append(LayerCost("bridge.project", "standard", h, w, 1,
                                   spec.branch_count * config.aspp_out,
                                   config.aspp_out))
            ch = config.aspp_out
        else:
            self.bridge = self._child("bridge",
                                      ConvBnRelu(ch, ch, 1, rng, dtype=dtype))
            costs.append(LayerCost("bridge.conv", "standard", h, w, 1, ch, ch))

        # decoder: skips deepest-first, then a final plain upsample stage
        block_kind = ("separable" if config.conv_mode == "separable"
                      else "standard")
        self.decoder_stages: list[DecoderStage] = []
        widths = config.decoder_widths
        stage_idx = 0
        for s in (16, 8, 4, 2):
            width = widths[stage_idx]
            skip_ch = self.tap_channels[s]
            if stride > s:
                up = Upsample2x(ch, width, rng, dtype=dtype)
                h, w = h * 2, w * 2
                costs.append(LayerCost(f"decoder_stage{stage_idx + 1}.up",
                                       "transposed", h, w, 2, ch, width))
                concat_in = width + skip_ch
                stride = s
            else:
                up = None
                concat_in = ch + skip_ch
            attention = None
            if config.use_meca:
                attention = Meca(MecaSpec(skip_ch, config.meca_kernel), rng,
                                 dtype=dtype)
                costs.append(LayerCost(
                    f"decoder_stage{stage_idx + 1}.attention", "attention",
                    1, 1, attention.kernel, skip_ch, skip_ch))
            block1 = make_block(config.conv_mode, concat_in, width, rng,
                                dtype=dtype)
            block2 = make_block(config.conv_mode, width, width, rng,
                                dtype=dtype)
            costs.append(LayerCost(f"decoder_stage{stage_idx + 1}.block1",
                                   block_kind, h, w, 3, concat_in, width))
            costs.append(LayerCost(f"decoder_stage{stage_idx + 1}.block2",
                                   block_kind, h, w, 3, width, width))
            stage = DecoderStage(up, s, attention, block1, block2)
            self._child(f"decoder_stage{stage_idx + 1}", stage)
            self.decoder_stages.append(stage)
            ch = width
            stage_idx += 1
        while stride > 1:
            width = widths[stage_idx]
            up = Upsample2x(ch, width, rng, dtype=dtype)
            h, w = h * 2, w * 2
            costs.append(LayerCost(f"decoder_stage{stage_idx + 1}.up",
                                   "transposed", h, w, 2, ch, width))
            block1 = make_block(config.conv_mode, width, width, rng,
                                dtype=dtype)
            block2 = make_block(config.conv_mode, width, width, rng,
                                dtype=dtype)
            costs.append(LayerCost(f"decoder_stage{stage_idx + 1}.block1",
                                   block_kind, h, w, 3, width, width))
            costs.append(LayerCost(f"decoder_stage{stage_idx + 1}.block2",
                                   block_kind, h, w, 3, width, width))
            stage = DecoderStage(up, None, None, block1, block2)
            self._child(f"decoder_stage{stage_idx + 1}", stage)
            self.decoder_stages.append(stage)
            ch = width
            stride //= 2
            stage_idx += 1
        assert stage_idx == 5 and (h, w) == config.input_size

        self.head = self._child("head", Conv2d(ch, 1, 1, rng, bias=True,
                                               dtype=dtype))
        costs.append(LayerCost("head", "standard", h, w, 1, ch, 1))
        self.layer_costs = costs

    def forward(self, x: Tensor) -> Tensor:
        """Probability map forward pass: [N,3,H,W] -> [N,1,H,W] in (0,1)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"input must be [N,3,H,W], got {x.shape}")
        if x.shape[2:] != self.config.input_size:
            raise DimensionError(
                f"input spatial dims {x.shape[2:]} do not match configured "
                f"{self.config.input_size}")
        with scope("stem"):
            f = self.stem.forward(x)
        skips: dict[int, Tensor] = {}
        if self.config.stem_pool:
            skips[2] = f
            f = ops.maxpool2d(f, window=3, stride=2, padding=1)
        for i, (block, trans) in enumerate(zip(self.enc_blocks,
                                               self.enc_transitions)):
            with scope(f"encoder_block{i + 1}"):
                f = block.forward(f)
            s = self.block_strides[i]
            if s in self.tap_channels and (trans is not None
                                           or not self.config.stem_pool):
                skips[s] = f
            if trans is not None:
                with scope(f"encoder_trans{i + 1}"):
                    f = trans.forward(f)
        with scope("tail"):
            f = self.tail.forward(f)
        with scope("bridge"):
            f = self.bridge.forward(f)
        for i, stage in enumerate(self.decoder_stages):
            skip = skips[stage.skip_stride] if stage.skip_stride else None
            with scope(f"decoder_stage{i + 1}"):
                f = stage.forward(f, skip)
        with scope("head"):
            return ops.sigmoid(self.head.forward(f))

    def infer(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode probabilities for a [N,3,H,W] float array; no recording."""
        was_training = self.training
        self.set_mode(False)
        try:
            out = self.forward(Tensor(np.asarray(images, dtype=self.config.dtype)))
        finally:
            self.set_mode(was_training)
        return out.data


def build(config: ModelConfig) -> CascnModel:
    """Construct a model with seed-deterministic parameter initialization."""
    return CascnModel(config)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: CascnModel, path, extra_pairs=(), extra_tensors=()) -> None:
    pairs = list(model.config.to_pairs()) + list(extra_pairs)
    tensors = [("param." + n, t.data) for n, t in model.named_parameters()]
    tensors += [("buffer." + n, b) for n, b in model.named_buffers()]
    tensors += list(extra_tensors)
    save_checkpoint(path, pairs, tensors)


def load_model(path, expect_input_size: tuple[int, int] | None = None
               ) -> tuple[CascnModel, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint.

    Returns (model, config/extra pairs as dict, raw tensor map) so callers
    can pick up any namespaced training state they stored.
    """
    pairs, tensors = load_checkpoint(path)
    config = ModelConfig.from_pairs(pairs)
    if expect_input_size is not None and \
            tuple(expect_input_size) != config.input_size:
        raise ConfigError(
            f"checkpoint declares input size {config.input_size}, "
            f"expected {tuple(expect_input_size)}")
    model = build(config)
    dtype = config.dtype
    for name, tensor in model.named_parameters():
        key = "param." + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing parameter '{name}'")
        arr = tensors[key]
        if arr.shape != tensor.shape:
            raise ConfigError(
                f"parameter '{name}' shape {arr.shape} does not match "
                f"model shape {tensor.shape}")
        tensor.data = arr.astype(dtype)
    for name, buf in model.named_buffers():
        key = "buffer." + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing buffer '{name}'")
        if tensors[key].shape != buf.shape:
            raise ConfigError(
                f"buffer '{name}' shape {tensors[key].shape} does not match "
                f"model shape {buf.shape}")
        buf[...] = tensors[key].astype(buf.dtype)
    return model, dict(pairs), tensors
