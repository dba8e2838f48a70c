"""Layer modules: thin parameter-owning wrappers over the tensor ops.

A Module owns Parameters and child Modules in registration order, which
makes parameter naming, counting, and checkpointing deterministic. Leaf
modules report a cost row (output shape, own params, MACs) whenever a
summary recorder is active.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import summary
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor

NORM_KINDS = ("batch", "layer")
ACT_KINDS = ("relu", "gelu", "elu", "celu")


class Module:
    """Base class: tracks child modules and parameters in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_qualname", "")

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Parameter):
            self._params[name] = value
        object.__setattr__(self, name, value)

    # -- traversal --------------------------------------------------------

    def own_parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def assign_qualnames(self, prefix: str = "") -> None:
        for name, mod in self.named_modules(prefix):
            object.__setattr__(mod, "_qualname", name)

    # -- state switches -----------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast every parameter (gradient checks run the graph in float64)."""
        for p in self.parameters():
            p.value.data = p.value.data.astype(dtype)
            p.value.grad = None
        return self

    # -- running a module ---------------------------------------------------

    def forward(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _record(self, out: Tensor, macs: int = 0) -> None:
        if summary.recorder_active():
            own = self.own_parameters()
            summary.record_row(summary.CostRow(
                name=self._qualname or type(self).__name__,
                kind=type(self).__name__,
                out_shape=tuple(out.shape[1:]),
                params=sum(p.size() for p in own),
                params_trainable=sum(p.size() for p in own if p.trainable),
                macs=int(macs),
            ))


class Sequential(Module):
    def __init__(self, *mods: Module):
        super().__init__()
        for i, m in enumerate(mods):
            setattr(self, f"s{i}", m)
        self.order = [f"s{i}" for i in range(len(mods))]

    def forward(self, x):
        for name in self.order:
            x = self._modules[name](x)
        return x

    def __iter__(self):
        return (self._modules[name] for name in self.order)

    def __len__(self):
        return len(self.order)


# -- primitive layers --------------------------------------------------------


class Conv2d(Module):
    """Standard convolution, He-normal init, zero bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, *, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"groups={groups} must divide in_ch={in_ch}, out_ch={out_ch}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        self.groups = groups
        fan_in = (in_ch // groups) * kernel * kernel
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = Parameter(Tensor(
            rng.normal(0.0, std, size=(out_ch, in_ch // groups, kernel, kernel))
            .astype(np.float32)))
        self.bias = Parameter(Tensor(np.zeros(out_ch, dtype=np.float32)),
                              weight_decay_exempt=True) if bias else None

    def forward(self, x):
        out = T.conv2d(x, self.weight.value,
                       self.bias.value if self.bias is not None else None,
                       stride=self.stride, padding=self.padding, groups=self.groups)
        self._record(out, summary.conv_macs(out.shape[2], out.shape[3], self.out_ch,
                                            self.in_ch, self.kernel, self.groups))
        return out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        std = float(np.sqrt(1.0 / in_features))
        self.weight = Parameter(Tensor(
            rng.normal(0.0, std, size=(out_features, in_features)).astype(np.float32)))
        self.bias = Parameter(Tensor(np.zeros(out_features, dtype=np.float32)),
                              weight_decay_exempt=True) if bias else None

    def forward(self, x):
        out = T.linear(x, self.weight.value,
                       self.bias.value if self.bias is not None else None)
        self._record(out, self.in_features * self.out_features)
        return out


class BatchNorm(Module):
    """Batch normalization; momentum 0.1, eps 1e-5.

    Running statistics are non-trainable Parameters so they are counted and
    checkpointed with the rest of the model state.
    """

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(Tensor(np.ones(channels, dtype=np.float32)),
                               weight_decay_exempt=True)
        self.beta = Parameter(Tensor(np.zeros(channels, dtype=np.float32)),
                              weight_decay_exempt=True)
        self.running_mean = Parameter(Tensor(np.zeros(channels, dtype=np.float32)),
                                      trainable=False, weight_decay_exempt=True)
        self.running_var = Parameter(Tensor(np.ones(channels, dtype=np.float32)),
                                     trainable=False, weight_decay_exempt=True)

    def forward(self, x):
        out = T.batch_norm(x, self.gamma.value, self.beta.value,
                           self.running_mean.data, self.running_var.data,
                           training=self.training, momentum=self.momentum, eps=self.eps)
        self._record(out)
        return out


class LayerNorm(Module):
    """Channel-wise layer normalization, eps 1e-6, per-channel affine."""

    def __init__(self, channels: int, *, eps: float = 1e-6):
        super().__init__()
        self.channels, self.eps = channels, eps
        self.gamma = Parameter(Tensor(np.ones(channels, dtype=np.float32)),
                               weight_decay_exempt=True)
        self.beta = Parameter(Tensor(np.zeros(channels, dtype=np.float32)),
                              weight_decay_exempt=True)

    def forward(self, x):
        out = T.layer_norm(x, self.gamma.value, self.beta.value, eps=self.eps)
        self._record(out)
        return out


def make_norm(kind: str, channels: int) -> Module:
    if kind == "batch":
        return BatchNorm(channels)
    if kind == "layer":
        return LayerNorm(channels)
    raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got '{kind}'")


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ACT_KINDS:
            raise ConfigError(f"act_kind must be one of {ACT_KINDS}, got '{kind}'")
        self.kind = kind

    def forward(self, x):
        out = T.activation(x, self.kind)
        self._record(out)
        return out


class MaxPool2d(Module):
    def __init__(self, kernel: int = 3, stride: int = 2, padding: int = 1):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        out = T.max_pool2d(x, self.kernel, self.stride, self.padding)
        self._record(out)
        return out


class GlobalAvgPool(Module):
    def forward(self, x):
        out = T.global_avg_pool(x)
        self._record(out)
        return out


def blur_kernel() -> np.ndarray:
    """3x3 binomial filter: outer([1,2,1]/4, [1,2,1]/4). Sums to 1 exactly."""
    row = np.array([1.0, 2.0, 1.0], dtype=np.float32) / 4.0
    return np.outer(row, row)


class MaxBlurPool(Module):
    """Anti-aliased downsampling: stride-1 max, then strided binomial blur.

    Dense 3x3 max pooling keeps the shape; the fixed depthwise blur at
    stride 2 halves each spatial side (ceil division). The blur weights are
    constants, not Parameters: they carry no state worth counting or saving,
    though their conv MACs are real and are recorded.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        k = np.broadcast_to(blur_kernel(), (channels, 1, 3, 3)).copy()
        self._blur = Tensor(k)

    def forward(self, x):
        y = T.max_pool2d(x, 3, 1, 1)
        if y.data.dtype != self._blur.data.dtype:
            self._blur = Tensor(self._blur.data.astype(y.data.dtype))
        out = T.conv2d(y, self._blur, stride=2, padding=1, groups=self.channels)
        self._record(out, summary.conv_macs(out.shape[2], out.shape[3],
                                            self.channels, self.channels, 3,
                                            groups=self.channels))
        return out


POOL_KINDS = ("max_pool", "strided_conv", "blur_pool")


def make_pool(kind: str, channels: int, rng: np.random.Generator | None = None) -> Module:
    """Stride-2 spatial downsampling in one of the three searched flavors."""
    if kind == "max_pool":
        return MaxPool2d(3, 2, 1)
    if kind == "blur_pool":
        return MaxBlurPool(channels)
    if kind == "strided_conv":
        return Conv2d(channels, channels, 3, stride=2, padding=1, bias=True, rng=rng)
    raise ConfigError(f"pool must be one of {POOL_KINDS}, got '{kind}'")


# -- composites ---------------------------------------------------------------


class SeparableConv(Module):
    """Depthwise k x k followed by a pointwise 1x1 projection.

    The depthwise half never carries a bias; the pointwise half carries one
    only when no normalization directly follows (callers pass ``bias``
    accordingly). Parameter count: in_ch*k^2 + in_ch*out_ch (+ out_ch).
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, *, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.depthwise = Conv2d(in_ch, in_ch, kernel, groups=in_ch, bias=False, rng=rng)
        self.pointwise = Conv2d(in_ch, out_ch, 1, bias=bias, rng=rng)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class SEModule(Module):
    """Squeeze-and-excitation channel gate.

    Global average pool -> bottleneck MLP (floor(c/reduction), at least 1)
    -> sigmoid, multiplied back onto the feature map. ``bypass`` pins the
    gate to 1 so tests can isolate the surrounding block.
    """

    def __init__(self, channels: int, reduction: int = 16,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, self.hidden, rng=rng)
        self.fc2 = Linear(self.hidden, channels, rng=rng)
        self.bypass = False

    def forward(self, x):
        if self.bypass:
            return x
        s = T.global_avg_pool(x)
        s = T.relu(self.fc1(s))
        s = T.sigmoid(self.fc2(s))
        gate = T.reshape(s, (x.shape[0], self.channels, 1, 1))
        return T.mul(x, gate)


class StochasticDepth(Module):
    """Whole-branch drop regularizer.

    In training, with probability p the branch output is replaced by zeros;
    otherwise it is scaled by 1/(1-p) so the expectation is unchanged. Eval
    mode is the identity. Draws come from an explicitly assigned Generator;
    there is no hidden global stream.
    """

    def __init__(self, p: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"stochastic depth probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, branch):
        if not self.training or self.p == 0.0:
            return branch
        if self.rng is None:
            raise ConfigError("stochastic depth with p > 0 needs a seeded rng "
                              "before training-mode forward")
        if self.rng.random() < self.p:
            return Tensor(np.zeros_like(branch.data))
        return branch * (1.0 / (1.0 - self.p))


# -- stems --------------------------------------------------------------------


class PatchifyStem(Module):
    """Non-overlapping patch embedding: conv k=s=patch, then norm."""

    def __init__(self, patch: int, out_ch: int, norm_kind: str = "batch",
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.patch, self.out_ch = patch, out_ch
        self.conv = Conv2d(3, out_ch, patch, stride=patch, padding=0, bias=True, rng=rng)
        self.norm = make_norm(norm_kind, out_ch)

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if h % self.patch or w % self.patch:
            raise ShapeError(
                f"patchify stem needs input divisible by {self.patch}, got {h}x{w}")
        return self.norm(self.conv(x))


class ConvStem(Module):
    """Two-conv stem: 3x3 s2 -> 32 ch, then 3x3 s1 -> 64 ch, norm+act each."""

    out_ch = 64

    def __init__(self, norm_kind: str = "batch", act_kind: str = "relu",
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.body = Sequential(
            Conv2d(3, 32, 3, stride=2, bias=True, rng=rng),
            make_norm(norm_kind, 32),
            Activation(act_kind),
            Conv2d(32, 64, 3, stride=1, bias=True, rng=rng),
            make_norm(norm_kind, 64),
            Activation(act_kind),
        )

    def forward(self, x):
        return self.body(x)


STEM_KINDS = ("conv_stem", "patchify2x2")


def make_stem(kind: str, out_ch: int, norm_kind: str, act_kind: str,
              rng: np.random.Generator | None = None) -> tuple[Module, int]:
    """Build a stem; returns (module, actual output channels).

    conv_stem has fixed widths (32 then 64), so its output width ignores
    ``out_ch``; patchify honors it.
    """
    if kind == "conv_stem":
        return ConvStem(norm_kind, act_kind, rng=rng), ConvStem.out_ch
    if kind == "patchify2x2":
        return PatchifyStem(2, out_ch, norm_kind, rng=rng), out_ch
    raise ConfigError(f"stem must be one of {STEM_KINDS}, got '{kind}'")
