"""Block definitions, the architecture configuration space, and builders.

The configuration space has eleven factored choices (three kernel sizes,
stem, downsampling flavor, bottleneck, SE presence, activation kind and
position, norm kind and position). A residual block is three separable
convolutions (widen, project, refine) with SE at the end of the branch; a
downsampling block is two separable convolutions, a stride-2 pool, and SE
on the branch plus a strided 1x1 shortcut.

Builders return a ModelGraph with named stages and an analytically derived
per-stage shape ledger; running the graph must reproduce that ledger, which
the tests enforce.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from math import prod

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import (Activation, Conv2d, GlobalAvgPool, Linear, Module,
                     PatchifyStem, SEModule, SeparableConv, Sequential,
                     StochasticDepth, make_norm, make_pool, make_stem)

KERNEL_CHOICES = (3, 5, 7, 9)
STEM_CHOICES = ("conv_stem", "patchify2x2")
POOL_CHOICES = ("max_pool", "strided_conv", "blur_pool")
BOTTLENECK_CHOICES = ("off", "inverted3")
SE_CHOICES = ("on", "off")
ACT_KIND_CHOICES = ("relu", "gelu", "elu", "celu")
ACT_POSITION_CHOICES = ("after_expand_only", "after_all_convs", "pre_block", "none")
NORM_KIND_CHOICES = ("batch", "layer")
NORM_POSITION_CHOICES = ("after_first_conv", "after_all_convs", "pre_block", "post_block")


@dataclass
class ArchConfig:
    """One point in the block-design search space.

    Defaults are the found configuration the named variants use: 5x5
    kernels, patchify stem, max-blur-pool downsampling, inverted bottleneck
    with expansion 3, SE on, GELU after the expansion conv only, batch norm
    after the first conv only.
    """

    kernel_entry: int = 5
    kernel_middle: int = 5
    kernel_exit: int = 5
    stem: str = "patchify2x2"
    pool: str = "blur_pool"
    bottleneck: str = "inverted3"
    se: str = "on"
    act_kind: str = "gelu"
    act_position: str = "after_expand_only"
    norm_kind: str = "batch"
    norm_position: str = "after_first_conv"

    def validate(self) -> "ArchConfig":
        for f, choices in DOMAINS.items():
            v = getattr(self, f)
            if v not in choices:
                raise ConfigError(f"{f}={v!r} not in {choices}")
        return self

    @property
    def expansion(self) -> int:
        return 3 if self.bottleneck == "inverted3" else 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(**d).validate()


DOMAINS: dict[str, tuple] = {
    "kernel_entry": KERNEL_CHOICES,
    "kernel_middle": KERNEL_CHOICES,
    "kernel_exit": KERNEL_CHOICES,
    "stem": STEM_CHOICES,
    "pool": POOL_CHOICES,
    "bottleneck": BOTTLENECK_CHOICES,
    "se": SE_CHOICES,
    "act_kind": ACT_KIND_CHOICES,
    "act_position": ACT_POSITION_CHOICES,
    "norm_kind": NORM_KIND_CHOICES,
    "norm_position": NORM_POSITION_CHOICES,
}


def space_cardinality() -> int:
    return prod(len(v) for v in DOMAINS.values())


def xception_config() -> ArchConfig:
    """The plain baseline: 3x3 kernels, conv stem, max pool, no bottleneck,
    no SE, ReLU and batch norm after every conv."""
    return ArchConfig(kernel_entry=3, kernel_middle=3, kernel_exit=3,
                      stem="conv_stem", pool="max_pool", bottleneck="off",
                      se="off", act_kind="relu", act_position="after_all_convs",
                      norm_kind="batch", norm_position="after_all_convs")


# -- block assembly -----------------------------------------------------------


def _conv_stack(specs: list[tuple[int, int]], kernel: int, cfg: ArchConfig,
                rng) -> list[Module]:
    """Separable convs with norm/act placed per the config.

    Placement rules: conv -> norm -> act at each slot. "after_first_conv"
    and "after_expand_only" attach to conv 0 (the widening conv);
    "post_block" attaches the norm to the final conv. A pointwise conv
    directly followed by a norm drops its bias.
    """
    mods: list[Module] = []
    if cfg.norm_position == "pre_block":
        mods.append(make_norm(cfg.norm_kind, specs[0][0]))
    if cfg.act_position == "pre_block":
        mods.append(Activation(cfg.act_kind))
    last = len(specs) - 1
    for i, (cin, cout) in enumerate(specs):
        norm_here = (
            (cfg.norm_position == "after_first_conv" and i == 0)
            or cfg.norm_position == "after_all_convs"
            or (cfg.norm_position == "post_block" and i == last)
        )
        act_here = (
            (cfg.act_position == "after_expand_only" and i == 0)
            or cfg.act_position == "after_all_convs"
        )
        mods.append(SeparableConv(cin, cout, kernel, bias=not norm_here, rng=rng))
        if norm_here:
            mods.append(make_norm(cfg.norm_kind, cout))
        if act_here:
            mods.append(Activation(cfg.act_kind))
    return mods


class NexceptionBlock(Module):
    """Constant-width residual block.

    Branch: sepconv C -> C*expansion, sepconv back to C, sepconv C -> C,
    then SE; added to the identity through stochastic depth. Spatial size
    is unchanged.
    """

    def __init__(self, channels: int, kernel: int, cfg: ArchConfig,
                 drop_prob: float = 0.0, rng=None):
        super().__init__()
        self.channels = channels
        width = channels * cfg.expansion
        specs = [(channels, width), (width, channels), (channels, channels)]
        mods = _conv_stack(specs, kernel, cfg, rng)
        if cfg.se == "on":
            mods.append(SEModule(channels, rng=rng))
        self.branch = Sequential(*mods)
        self.drop = StochasticDepth(drop_prob)

    def forward(self, x):
        return T.add(x, self.drop(self.branch(x)))


class DownsampleBlock(Module):
    """Stride-2 residual block that changes width.

    Branch: sepconv in -> mid, sepconv mid -> out, stride-2 pool, SE.
    Shortcut: 1x1 stride-2 conv (with a trailing norm only in the
    norm-after-every-conv configuration). ``mid`` defaults to ``out``;
    the final widening block of a trunk uses mid == in instead.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, cfg: ArchConfig,
                 mid_ch: int | None = None, rng=None):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        mid = out_ch if mid_ch is None else mid_ch
        specs = [(in_ch, mid), (mid, out_ch)]
        mods = _conv_stack(specs, kernel, cfg, rng)
        mods.append(make_pool(cfg.pool, out_ch, rng=rng))
        if cfg.se == "on":
            mods.append(SEModule(out_ch, rng=rng))
        self.branch = Sequential(*mods)
        sc_norm = cfg.norm_position == "after_all_convs"
        sc: list[Module] = [Conv2d(in_ch, out_ch, 1, stride=2, padding=0,
                                   bias=not sc_norm, rng=rng)]
        if sc_norm:
            sc.append(make_norm(cfg.norm_kind, out_ch))
        self.shortcut = Sequential(*sc)

    def forward(self, x):
        return T.add(self.branch(x), self.shortcut(x))


class StageDownsample(Module):
    """Between-stage reduction for the patchify trunk: norm + 2x2 s2 conv."""

    def __init__(self, in_ch: int, out_ch: int, cfg: ArchConfig, rng=None):
        super().__init__()
        self.norm = make_norm(cfg.norm_kind, in_ch)
        self.conv = Conv2d(in_ch, out_ch, 2, stride=2, padding=0, bias=True, rng=rng)

    def forward(self, x):
        return self.conv(self.norm(x))


class Classifier(Module):
    """Global average pool, optional norm, single fully connected layer."""

    def __init__(self, in_ch: int, num_classes: int, cfg: ArchConfig | None = None,
                 with_norm: bool = False, rng=None):
        super().__init__()
        self.pool = GlobalAvgPool()
        self.norm = make_norm(cfg.norm_kind, in_ch) if with_norm else None
        self.fc = Linear(in_ch, num_classes, rng=rng)

    def forward(self, x):
        x = self.pool(x)
        if self.norm is not None:
            x = self.norm(x)
        return self.fc(x)


# -- the executable graph ------------------------------------------------------


class ModelGraph(Module):
    """Named stage sequence with a parameter registry and a shape ledger.

    ``expected_shapes`` is derived arithmetically at build time;
    ``forward_trace`` returns the realized shapes so tests can hold the two
    together.
    """

    def __init__(self, name: str, stages: list[tuple[str, Module]],
                 num_classes: int, input_hw: tuple[int, int],
                 arch_config: ArchConfig | None = None,
                 expected_shapes: dict[str, tuple] | None = None):
        super().__init__()
        self.name = name
        self.num_classes = num_classes
        self.input_hw = tuple(input_hw)
        self.arch_config = arch_config
        self.stage_names = [s for s, _ in stages]
        for sname, mod in stages:
            setattr(self, sname, mod)
        self.expected_shapes = expected_shapes or {}
        self.assign_qualnames()
        self.registry: dict[str, T.Parameter] = {}
        for pname, p in self.named_parameters():
            if pname in self.registry:
                raise ConfigError(f"duplicate parameter name '{pname}'")
            p.name = pname
            self.registry[pname] = p

    def forward(self, x):
        for sname in self.stage_names:
            x = self._modules[sname](x)
        return x

    def forward_trace(self, x):
        shapes = {}
        for sname in self.stage_names:
            x = self._modules[sname](x)
            shapes[sname] = tuple(x.shape[1:])
        return x, shapes

    def seed_stochastic_depth(self, seed: int) -> None:
        i = 0
        for _, mod in self.named_modules():
            if isinstance(mod, StochasticDepth):
                mod.rng = np.random.default_rng([int(seed), 0x5D, i])
                i += 1


# -- builders -------------------------------------------------------------------

VARIANT_NAMES = ("nexception_t", "nexception_s", "nexception_tp",
                 "xception", "reduced_nas")


def _ceil_half(n: int) -> int:
    return (n + 1) // 2


def _entry_exit_trunk(name: str, cfg: ArchConfig, *, stem_ch: int,
                      entry_widths: list[int], middle_blocks: int,
                      exit_out: int, exit_convs: tuple[int, int],
                      num_classes: int, input_hw: tuple[int, int],
                      drop_prob: float, rng) -> ModelGraph:
    """Shared skeleton: stem, widening entry ladder, constant middle stack,
    one exit downsample, two plain separable convs, classifier."""
    h, w = input_hw
    stem, ch = make_stem(cfg.stem, stem_ch, cfg.norm_kind, cfg.act_kind, rng=rng)
    stages: list[tuple[str, Module]] = [("stem", stem)]
    shapes: dict[str, tuple] = {}
    h, w = _ceil_half(h), _ceil_half(w)
    shapes["stem"] = (ch, h, w)

    for i, width in enumerate(entry_widths, start=1):
        stages.append((f"entry{i}",
                       DownsampleBlock(ch, width, cfg.kernel_entry, cfg, rng=rng)))
        ch = width
        h, w = _ceil_half(h), _ceil_half(w)
        shapes[f"entry{i}"] = (ch, h, w)

    middle = Sequential(*[NexceptionBlock(ch, cfg.kernel_middle, cfg,
                                          drop_prob=drop_prob, rng=rng)
                          for _ in range(middle_blocks)])
    stages.append(("middle", middle))
    shapes["middle"] = (ch, h, w)

    stages.append(("exit_ds", DownsampleBlock(ch, exit_out, cfg.kernel_exit, cfg,
                                              mid_ch=ch, rng=rng)))
    ch = exit_out
    h, w = _ceil_half(h), _ceil_half(w)
    shapes["exit_ds"] = (ch, h, w)

    c1, c2 = exit_convs
    stages.append(("exit_convs",
                   Sequential(*_conv_stack([(ch, c1), (c1, c2)], 3, cfg, rng))))
    ch = c2
    shapes["exit_convs"] = (ch, h, w)

    stages.append(("head", Classifier(ch, num_classes, rng=rng)))
    shapes["head"] = (num_classes,)
    return ModelGraph(name, stages, num_classes, input_hw, arch_config=cfg,
                      expected_shapes=shapes)


def _patchify_trunk(name: str, cfg: ArchConfig, *, widths: list[int],
                    depths: list[int], num_classes: int,
                    input_hw: tuple[int, int], drop_prob: float, rng) -> ModelGraph:
    """Four-stage patchify trunk with norm+2x2-conv reductions between
    stages and a norm in the classifier."""
    h, w = input_hw
    if h % 4 or w % 4:
        raise ConfigError(f"patchify trunk needs input divisible by 4, got {h}x{w}")
    stages: list[tuple[str, Module]] = [
        ("stem", PatchifyStem(4, widths[0], cfg.norm_kind, rng=rng))]
    h, w = h // 4, w // 4
    shapes: dict[str, tuple] = {"stem": (widths[0], h, w)}

    ch = widths[0]
    for i, (width, depth) in enumerate(zip(widths, depths), start=1):
        if width != ch:
            stages.append((f"down{i - 1}", StageDownsample(ch, width, cfg, rng=rng)))
            ch = width
            h, w = h // 2, w // 2
            shapes[f"down{i - 1}"] = (ch, h, w)
        stage = Sequential(*[NexceptionBlock(ch, cfg.kernel_middle, cfg,
                                             drop_prob=drop_prob, rng=rng)
                             for _ in range(depth)])
        stages.append((f"stage{i}", stage))
        shapes[f"stage{i}"] = (ch, h, w)

    stages.append(("head", Classifier(ch, num_classes, cfg, with_norm=True, rng=rng)))
    shapes["head"] = (num_classes,)
    return ModelGraph(name, stages, num_classes, input_hw, arch_config=cfg,
                      expected_shapes=shapes)


def build_variant(name: str, *, num_classes: int = 1000,
                  config: ArchConfig | None = None, drop_prob: float = 0.0,
                  input_hw: tuple[int, int] | None = None,
                  seed: int = 0) -> ModelGraph:
    """Construct one of the published variants or the config-driven search
    network.

    ``config`` applies only to ``reduced_nas``; the named variants are fixed
    designs. Weight init is fully determined by ``seed``.
    """
    if name not in VARIANT_NAMES:
        raise ConfigError(f"unknown variant '{name}', expected one of {VARIANT_NAMES}")
    if config is not None and name != "reduced_nas":
        raise ConfigError(f"variant '{name}' is a fixed design; config only "
                          "applies to reduced_nas")
    rng = np.random.default_rng([int(seed), 0xA11])

    if name == "nexception_t":
        return _entry_exit_trunk(
            name, ArchConfig().validate(), stem_ch=96,
            entry_widths=[128, 256, 512], middle_blocks=8, exit_out=1024,
            exit_convs=(1536, 2048), num_classes=num_classes,
            input_hw=input_hw or (224, 224), drop_prob=drop_prob, rng=rng)
    if name == "nexception_s":
        return _entry_exit_trunk(
            name, ArchConfig().validate(), stem_ch=96,
            entry_widths=[128, 256, 752], middle_blocks=8, exit_out=1024,
            exit_convs=(1536, 2048), num_classes=num_classes,
            input_hw=input_hw or (224, 224), drop_prob=drop_prob, rng=rng)
    if name == "nexception_tp":
        return _patchify_trunk(
            name, ArchConfig().validate(), widths=[96, 192, 384, 768],
            depths=[3, 4, 9, 3], num_classes=num_classes,
            input_hw=input_hw or (224, 224), drop_prob=drop_prob, rng=rng)
    if name == "xception":
        return _entry_exit_trunk(
            name, xception_config().validate(), stem_ch=64,
            entry_widths=[128, 256, 728], middle_blocks=8, exit_out=1024,
            exit_convs=(1536, 2048), num_classes=num_classes,
            input_hw=input_hw or (299, 299), drop_prob=drop_prob, rng=rng)

    cfg = (config or ArchConfig()).validate()
    return _entry_exit_trunk(
        name, cfg, stem_ch=64, entry_widths=[128], middle_blocks=4,
        exit_out=256, exit_convs=(384, 512), num_classes=num_classes,
        input_hw=input_hw or (32, 32), drop_prob=drop_prob, rng=rng)
