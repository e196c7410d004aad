"""Residual networks (basic and bottleneck blocks), head replacement and freezing.

Parameter names follow the usual ResNet layout so checkpoints stay readable::

    conv1.weight, bn1.weight, bn1.bias, bn1.running_mean, bn1.running_var,
    layer{s}.{b}.conv{i}.weight, layer{s}.{b}.bn{i}.*,
    layer{s}.{b}.downsample.0.weight, layer{s}.{b}.downsample.1.*,
    fc.weight (in_features, num_classes), fc.bias

``bn*.weight``/``bn*.bias`` are the batch-norm scale and shift.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import ModelError, ShapeError
from .tensor import Tensor

VARIANTS = ("resnet_mini", "resnet18", "resnet50")

_DEFAULT_LAYOUT = {
    "resnet_mini": ("basic", [16, 32, 64], [2, 2, 2]),
    "resnet18": ("basic", [64, 128, 256, 512], [2, 2, 2, 2]),
    "resnet50": ("bottleneck", [64, 128, 256, 512], [3, 4, 6, 3]),
}

# (kernel, stride, padding, channels-from-first-stage, maxpool after stem)
_STEMS = {
    "resnet_mini": (5, 2, 2, True, False),
    "resnet18": (7, 2, 3, False, True),
    "resnet50": (7, 2, 3, False, True),
}
_STEM_WIDTH = 64

BOTTLENECK_EXPANSION = 4
HEAD_NAME = "fc"


@dataclass
class ModelConfig:
    variant: str = "resnet_mini"
    input_channels: int = 1
    input_size: int = 64
    num_classes: int = 10
    stage_widths: list[int] | None = None
    blocks_per_stage: list[int] | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        _, widths, blocks = _DEFAULT_LAYOUT[self.variant]
        if self.stage_widths is None:
            self.stage_widths = list(widths)
        if self.blocks_per_stage is None:
            self.blocks_per_stage = list(blocks)
        self.stage_widths = [int(w) for w in self.stage_widths]
        self.blocks_per_stage = [int(b) for b in self.blocks_per_stage]
        if len(self.stage_widths) != len(self.blocks_per_stage) or not self.stage_widths:
            raise ModelError("stage_widths and blocks_per_stage must be non-empty and of equal length")
        if min(self.stage_widths) < 1 or min(self.blocks_per_stage) < 1:
            raise ModelError("stage widths and block counts must be positive")
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ModelError("input_channels must be positive")

    @property
    def block_kind(self) -> str:
        return _DEFAULT_LAYOUT[self.variant][0]


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    padding: int

    @property
    def bn(self) -> str:
        # conv1 -> bn1, downsample.0 -> downsample.1
        if self.name.endswith("downsample.0"):
            return self.name[:-1] + "1"
        return re.sub(r"conv(\d+)$", r"bn\1", self.name)


@dataclass(frozen=True)
class BlockSpec:
    name: str
    stage: int
    branch: tuple[ConvSpec, ...]
    shortcut: ConvSpec | None


def _layout(config: ModelConfig) -> tuple[ConvSpec, bool, list[BlockSpec], int]:
    k, s, p, narrow, pool = _STEMS[config.variant]
    stem_width = config.stage_widths[0] if narrow else _STEM_WIDTH
    stem = ConvSpec("conv1", config.input_channels, stem_width, k, s, p)
    blocks: list[BlockSpec] = []
    cin = stem_width
    expansion = BOTTLENECK_EXPANSION if config.block_kind == "bottleneck" else 1
    for si, (width, count) in enumerate(zip(config.stage_widths, config.blocks_per_stage), start=1):
        for bi in range(count):
            stride = 2 if (si > 1 and bi == 0) else 1
            name = f"layer{si}.{bi}"
            cout = width * expansion
            if config.block_kind == "basic":
                branch = (
                    ConvSpec(f"{name}.conv1", cin, width, 3, stride, 1),
                    ConvSpec(f"{name}.conv2", width, width, 3, 1, 1),
                )
            else:
                branch = (
                    ConvSpec(f"{name}.conv1", cin, width, 1, 1, 0),
                    ConvSpec(f"{name}.conv2", width, width, 3, stride, 1),
                    ConvSpec(f"{name}.conv3", width, cout, 1, 1, 0),
                )
            shortcut = None
            if stride != 1 or cin != cout:
                shortcut = ConvSpec(f"{name}.downsample.0", cin, cout, 1, stride, 0)
            blocks.append(BlockSpec(name, si, branch, shortcut))
            cin = cout
    return stem, pool, blocks, cin


def _check_input_size(config: ModelConfig, stem: ConvSpec, pool: bool, blocks: list[BlockSpec]) -> None:
    def step(size: int, where: str, kernel: int, stride: int, padding: int) -> int:
        if stride > 1 and size < 2:
            raise ModelError(
                f"input_size {config.input_size} too small: {where} receives {size}x{size} before stride-{stride} downsampling"
            )
        out = F.conv_output_size(size, kernel, stride, padding)
        if out < 1:
            raise ModelError(f"input_size {config.input_size} too small: {where} output would be empty")
        return out

    size = step(config.input_size, "stem", stem.kernel, stem.stride, stem.padding)
    if pool:
        size = step(size, "stem maxpool", 3, 2, 1)
    for block in blocks:
        stride = max(c.stride for c in block.branch)
        if stride > 1:
            size = step(size, f"stage{block.stage}", 3, stride, 1)


class Model:
    """A residual network: named parameters, BN buffers and a trainability mask."""

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self.stem, self.stem_pool, self.blocks, self.feature_width = _layout(config)
        _check_input_size(config, self.stem, self.stem_pool, self.blocks)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.state_order: list[str] = []
        self.trainable: dict[str, bool] = {}
        self.head_name = HEAD_NAME
        self.bn_freeze = False
        self.bn_momentum = 0.1
        self.bn_eps = 1e-5
        self.metadata: dict[str, str] = {}

    # ------------------------------------------------------------ registration

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)
        self.trainable[name] = True
        self.state_order.append(name)

    def _add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = np.asarray(value, dtype=np.float32)
        self.state_order.append(name)

    def _add_conv_bn(self, conv: ConvSpec, rng: np.random.Generator) -> None:
        fan_in = conv.cin * conv.kernel * conv.kernel
        bound = np.sqrt(6.0 / fan_in)
        shape = (conv.cout, conv.cin, conv.kernel, conv.kernel)
        self._add_param(f"{conv.name}.weight", rng.uniform(-bound, bound, shape).astype(np.float32))
        bn = conv.bn
        self._add_param(f"{bn}.weight", np.ones(conv.cout, np.float32))
        self._add_param(f"{bn}.bias", np.zeros(conv.cout, np.float32))
        self._add_buffer(f"{bn}.running_mean", np.zeros(conv.cout, np.float32))
        self._add_buffer(f"{bn}.running_var", np.ones(conv.cout, np.float32))

    def _head_arrays(self, num_classes: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        bound = 1.0 / np.sqrt(self.feature_width)
        w = rng.uniform(-bound, bound, (self.feature_width, num_classes)).astype(np.float32)
        b = rng.uniform(-bound, bound, num_classes).astype(np.float32)
        return w, b

    # ------------------------------------------------------------------ access

    @property
    def head_weight(self) -> Tensor:
        """W_fc: the final affine weight penalised by the Frobenius regulariser."""
        return self.params[f"{self.head_name}.weight"]

    @property
    def head_bias(self) -> Tensor:
        return self.params[f"{self.head_name}.bias"]

    @property
    def num_stages(self) -> int:
        return len(self.config.stage_widths)

    @property
    def dtype(self) -> np.dtype:
        return self.head_weight.dtype

    def state(self) -> list[tuple[str, np.ndarray]]:
        """All parameters and buffers, in their stable registration order."""
        return [(n, self.params[n].data if n in self.params else self.buffers[n]) for n in self.state_order]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.params.items() if self.trainable[n]]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        """Cast every parameter and buffer in place (e.g. to float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for n in self.buffers:
            self.buffers[n] = self.buffers[n].astype(dtype)
        return self

    # ----------------------------------------------------------------- forward

    def _conv_bn(self, x: Tensor, conv: ConvSpec, training: bool) -> Tensor:
        h = F.conv2d(x, self.params[f"{conv.name}.weight"], None, conv.stride, conv.padding)
        bn = conv.bn
        return F.batchnorm2d(
            h,
            self.params[f"{bn}.weight"],
            self.params[f"{bn}.bias"],
            self.buffers[f"{bn}.running_mean"],
            self.buffers[f"{bn}.running_var"],
            training=training and not self.bn_freeze,
            momentum=self.bn_momentum,
            eps=self.bn_eps,
        )

    def block_forward(self, block: BlockSpec, x: Tensor, training: bool) -> Tensor:
        h = x
        last = len(block.branch) - 1
        for i, conv in enumerate(block.branch):
            h = self._conv_bn(h, conv, training)
            if i < last:
                h = F.relu(h)
        shortcut = x if block.shortcut is None else self._conv_bn(x, block.shortcut, training)
        if h.shape != shortcut.shape:
            raise ShapeError(f"{block.name}: residual branch {h.shape} and shortcut {shortcut.shape} differ")
        return F.relu(F.add(h, shortcut))

    def features(self, x: Tensor, training: bool) -> Tensor:
        h = F.relu(self._conv_bn(x, self.stem, training))
        if self.stem_pool:
            h = F.maxpool2d(h, 3, 2, 1)
        for block in self.blocks:
            h = self.block_forward(block, h, training)
        return F.global_avg_pool(h)

    def forward(self, batch: Tensor | np.ndarray, mode: str = "eval") -> Tensor:
        """Logits (B, num_classes). ``mode`` picks batch-norm behaviour: "train" or "eval"."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.dtype)
        c, s = self.config.input_channels, self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ShapeError(f"forward: batch {x.shape} does not match model input (B, {c}, {s}, {s})")
        feats = self.features(x, mode == "train")
        return F.affine(feats, self.head_weight, self.head_bias)

    __call__ = forward


def build_resnet(config: ModelConfig, init_seed: int = 0) -> Model:
    """Build and initialise a network; the result depends only on (config, init_seed).

    Conv weights are He-uniform (bound sqrt(6/fan_in)); the head is uniform
    with bound 1/sqrt(fan_in); batch-norm starts at scale 1, shift 0, running
    mean 0 and running variance 1.
    """
    model = Model(config)
    rng = np.random.default_rng(init_seed)
    model._add_conv_bn(model.stem, rng)
    for block in model.blocks:
        for conv in block.branch:
            model._add_conv_bn(conv, rng)
        if block.shortcut is not None:
            model._add_conv_bn(block.shortcut, rng)
    w, b = model._head_arrays(config.num_classes, rng)
    model._add_param(f"{HEAD_NAME}.weight", w)
    model._add_param(f"{HEAD_NAME}.bias", b)
    return model


def replace_head(model: Model, num_classes: int, init_seed: int = 0) -> Model:
    """Swap the final affine layer for a freshly initialised one of width ``num_classes``.

    Works in place and returns ``model``. Every other tensor is left untouched.
    """
    if num_classes < 2:
        raise ModelError(f"num_classes must be at least 2, got {num_classes}")
    w, b = model._head_arrays(num_classes, np.random.default_rng(init_seed))
    dtype = model.dtype
    for name, value in ((f"{model.head_name}.weight", w), (f"{model.head_name}.bias", b)):
        model.params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    model.config.num_classes = num_classes
    return model


_STAGES_FROM = re.compile(r"^stages_from\((\d+)\)$")


def parse_selector(selector: str) -> tuple[str, int]:
    selector = selector.strip()
    if selector in ("all", "head_only"):
        return selector, 0
    m = _STAGES_FROM.match(selector.replace(" ", ""))
    if not m:
        raise ModelError(f"unknown trainable selector {selector!r}; use all, head_only or stages_from(k)")
    return "stages_from", int(m.group(1))


def _stage_of(name: str) -> int:
    """1-based stage a parameter belongs to; the stem counts as stage 1, the head as 0."""
    if name.startswith(f"{HEAD_NAME}."):
        return 0
    m = re.match(r"layer(\d+)\.", name)
    return int(m.group(1)) if m else 1


def set_trainable(model: Model, selector: str) -> Model:
    """Update the trainability mask.

    ``all`` fine-tunes everything, ``head_only`` treats the backbone as a fixed
    feature extractor, ``stages_from(k)`` freezes the stem and stages 1..k-1.
    """
    kind, k = parse_selector(selector)
    if kind == "stages_from" and not 1 <= k <= model.num_stages:
        raise ModelError(f"stages_from({k}) is out of range; model has {model.num_stages} stages")
    for name in model.params:
        stage = _stage_of(name)
        if kind == "all" or stage == 0:
            model.trainable[name] = True
        elif kind == "head_only":
            model.trainable[name] = False
        else:
            model.trainable[name] = stage >= k
    return model
