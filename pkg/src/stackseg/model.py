"""U-Net construction and end-to-end stacking of several U-Nets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import ops
from .ops import BatchNormState
from .tensor import Parameter, Tensor, he_uniform_init, no_record

STACKING_INPUTS = ("image_plus_prob", "prob_only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_filters: int = 32
    in_channels: int = 3
    crop_margin: int = 16
    input_size: int = 224

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be at least 1")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be at least 1")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2^{self.depth}")
        if self.crop_margin < 0 or 2 * self.crop_margin >= self.input_size:
            raise ConfigError(f"crop_margin {self.crop_margin} too large for input_size {self.input_size}")

    @property
    def output_size(self) -> int:
        return self.input_size - 2 * self.crop_margin


@dataclass(frozen=True)
class StackConfig:
    levels: int = 1
    per_level: tuple[UNetConfig, ...] = (UNetConfig(),)
    stacking_input: str = "image_plus_prob"

    @classmethod
    def uniform(cls, base: UNetConfig, levels: int, stacking_input: str = "image_plus_prob") -> "StackConfig":
        """Same architecture at every level, input channels adjusted for stacking."""
        extra = base.in_channels + 1 if stacking_input == "image_plus_prob" else 1
        per_level = (base,) + tuple(replace(base, in_channels=extra) for _ in range(levels - 1))
        return cls(levels=levels, per_level=per_level, stacking_input=stacking_input)

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("a stack needs at least one level")
        if len(self.per_level) != self.levels:
            raise ConfigError(f"{self.levels} levels but {len(self.per_level)} level configs")
        if self.stacking_input not in STACKING_INPUTS:
            raise ConfigError(f"stacking_input must be one of {STACKING_INPUTS}")
        first = self.per_level[0]
        for k, cfg in enumerate(self.per_level):
            cfg.validate()
            if (cfg.input_size, cfg.crop_margin) != (first.input_size, first.crop_margin):
                raise ConfigError("all levels must share input_size and crop_margin")
            if k == 0:
                continue
            want = first.in_channels + 1 if self.stacking_input == "image_plus_prob" else 1
            if cfg.in_channels != want:
                raise ConfigError(f"level {k} needs in_channels={want} for {self.stacking_input}, got {cfg.in_channels}")


class Conv3x3:
    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.weight = Parameter(he_uniform_init((c_out, c_in, 3, 3), c_in * 9, rng).data, f"{name}/weight")
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32), f"{name}/bias")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class BatchNorm:
    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Parameter(np.ones(channels, dtype=np.float32), f"{name}/gamma")
        self.beta = Parameter(np.zeros(channels, dtype=np.float32), f"{name}/beta")
        self.state = BatchNormState(channels)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.state, mode)


class DoubleConv:
    """[conv3x3 -> batch norm -> ReLU] twice."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        self.name = name
        self.out_channels = c_out
        self.conv1 = Conv3x3(f"{name}/conv1", c_in, c_out, rng)
        self.bn1 = BatchNorm(f"{name}/bn1", c_out)
        self.conv2 = Conv3x3(f"{name}/conv2", c_out, c_out, rng)
        self.bn2 = BatchNorm(f"{name}/bn2", c_out)

    def layers(self):
        return [self.conv1, self.bn1, self.conv2, self.bn2]

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        x = ops.relu(self.bn1(self.conv1(x), mode))
        return ops.relu(self.bn2(self.conv2(x), mode))


class UNet:
    """A built U-Net: encoder stages, bottleneck, decoder stages and a sigmoid head.

    Encoder stage ``i`` produces ``base_filters * 2**i`` channels and is
    followed by 2x2 max pooling. Each decoder stage replicates its input to
    twice the resolution, concatenates the matching encoder output and
    applies a double convolution back down to that encoder's width. The head
    is a 3x3 convolution to one channel, a sigmoid and a centre crop.
    """

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator, prefix: str = ""):
        cfg.validate()
        self.cfg = cfg
        self.prefix = prefix
        b = cfg.base_filters
        self.encoders = []
        c_in = cfg.in_channels
        for i in range(cfg.depth):
            self.encoders.append(DoubleConv(f"{prefix}enc{i}", c_in, b * 2**i, rng))
            c_in = b * 2**i
        self.bottleneck = DoubleConv(f"{prefix}bottleneck", c_in, b * 2**cfg.depth, rng)
        self.decoders = []
        c_up = b * 2**cfg.depth
        for j in reversed(range(cfg.depth)):
            c_skip = b * 2**j
            self.decoders.append(DoubleConv(f"{prefix}dec{j}", c_up + c_skip, c_skip, rng))
            c_up = c_skip
        self.head = Conv3x3(f"{prefix}head", b, 1, rng)

    @property
    def layers(self) -> list:
        out = []
        for block in [*self.encoders, self.bottleneck, *self.decoders]:
            out.extend(block.layers())
        out.append(self.head)
        return out

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def batchnorms(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        cfg = self.cfg
        want = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.data.ndim != 4 or x.shape[1:] != want:
            raise ValueError(f"expected input (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
        skips = []
        for enc in self.encoders:
            x = enc(x, mode)
            skips.append(x)
            x = ops.maxpool2x2(x)
        x = self.bottleneck(x, mode)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = ops.concat_channels(ops.upsample2x_replicate(x), skip)
            x = dec(x, mode)
        x = ops.sigmoid(self.head(x))
        return ops.crop_center(x, cfg.crop_margin)

    __call__ = forward

    # state handling

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for p in layer.parameters():
                out[p.name] = p.data
            if isinstance(layer, BatchNorm) and layer.state.populated:
                out[f"{layer.name}/running_mean"] = layer.state.running_mean
                out[f"{layer.name}/running_var"] = layer.state.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            arr = np.asarray(state[name])
            if arr.size != p.size:
                raise ValueError(f"{name}: stored size {arr.size} != expected {p.size}")
            p.data = arr.reshape(p.shape).astype(p.dtype)
        for bn in self.batchnorms():
            mean = state.get(f"{bn.name}/running_mean")
            var = state.get(f"{bn.name}/running_var")
            if mean is not None and var is not None:
                bn.state.running_mean = np.asarray(mean, dtype=np.float32).reshape(-1)
                bn.state.running_var = np.asarray(var, dtype=np.float32).reshape(-1)
            elif strict:
                raise KeyError(f"missing running statistics for {bn.name!r}")

    def to_dtype(self, dtype) -> "UNet":
        """Cast parameters in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def build_unet(cfg: UNetConfig, rng: np.random.Generator, prefix: str = "") -> UNet:
    return UNet(cfg, rng, prefix)


def forward(model: UNet, batch: Tensor, mode: str = "eval") -> Tensor:
    return model.forward(batch, mode)


def parameter_count(model) -> int:
    return int(sum(p.size for p in model.parameters()))


@dataclass
class StackedModel:
    """U-Nets applied in sequence, each refining the previous probability map."""

    cfg: StackConfig
    levels: list[UNet] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        return [p for level in self.levels for p in level.parameters()]

    def level_input(self, image: Tensor, prev_prob: Tensor) -> Tensor:
        """Input of a level > 0: the previous map, zero-padded back to patch size."""
        margin = self.cfg.per_level[0].crop_margin
        prob = ops.pad_zeros(prev_prob, margin)
        if self.cfg.stacking_input == "prob_only":
            return prob
        return ops.concat_channels(image, prob)

    def forward(self, batch: Tensor, upto_level: int | None = None, mode: str = "eval") -> Tensor:
        if upto_level is None:
            upto_level = len(self.levels) - 1
        if not 0 <= upto_level < len(self.levels):
            raise IndexError(f"level {upto_level} out of range for a {len(self.levels)}-level stack")
        prob = None
        if upto_level > 0:
            # predecessors are frozen: eval-mode BN and no gradient recording
            with no_record():
                prob = self.levels[0].forward(batch, "eval")
                for k in range(1, upto_level):
                    prob = self.levels[k].forward(self.level_input(batch, prob), "eval")
        top = self.levels[upto_level]
        x = batch if upto_level == 0 else self.level_input(batch, prob)
        return top.forward(x, mode)

    __call__ = forward

    def init_from_previous(self, level: int) -> None:
        """Start ``level`` as a copy of ``level - 1``.

        Parameters and running statistics are copied by name. Where the
        first convolution has extra input channels (the injected probability
        map), those weights are zero, so the new level initially reproduces
        its predecessor's output exactly. Tensors whose shapes cannot be
        aligned keep their fresh initialisation.
        """
        if not 1 <= level < len(self.levels):
            raise IndexError(f"level {level} has no predecessor in a {len(self.levels)}-level stack")
        src, dst = self.levels[level - 1], self.levels[level]
        image_channels = self.cfg.per_level[0].in_channels
        same_inputs = self.cfg.stacking_input == "image_plus_prob" or level > 1
        src_params = {p.name[len(src.prefix):]: p for p in src.parameters()}
        for p in dst.parameters():
            q = src_params.get(p.name[len(dst.prefix):])
            if q is None:
                continue
            if q.shape == p.shape:
                p.data = q.data.copy()
            elif same_inputs and p.shape[0] == q.shape[0] and p.data.ndim == 4 and q.shape[1] == image_channels:
                # image channels carried over, probability channel starts at zero
                w = np.zeros_like(p.data)
                w[:, :image_channels] = q.data
                p.data = w
        for a, b in zip(src.batchnorms(), dst.batchnorms()):
            if a.state.populated and a.gamma.shape == b.gamma.shape:
                b.state.running_mean = a.state.running_mean.copy()
                b.state.running_var = a.state.running_var.copy()

    def iter_levels(self) -> Iterator[tuple[int, UNet]]:
        return iter(enumerate(self.levels))


def build_stack(cfg: StackConfig, rng: np.random.Generator) -> StackedModel:
    cfg.validate()
    levels = [UNet(level_cfg, rng, prefix=f"level{k}/") for k, level_cfg in enumerate(cfg.per_level)]
    return StackedModel(cfg, levels)


def stack_forward(stack: StackedModel, batch: Tensor, upto_level: int, mode: str = "eval") -> Tensor:
    return stack.forward(batch, upto_level, mode)
