"""Cost accounting: exact parameter counts and conv-MAC totals.

FLOPs follow the multiply-accumulate convention: a convolution costs
``out_h * out_w * out_ch * (in_ch / groups) * k^2`` MACs, a linear layer
``in * out``; bias adds, normalizations, activations, and max pooling count
zero. Anti-alias blur and strided-conv downsampling are convolutions and are
counted as such. Parameter totals include non-trainable state (normalization
running statistics) because it is stored and checkpointed; the trainable
subtotal is reported alongside.

MAC rows are captured by running a real batch-1 forward pass with a recorder
active, so the accounting can never drift from what the graph executes.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass
class CostRow:
    name: str
    kind: str
    out_shape: tuple[int, ...] | None
    params: int
    params_trainable: int
    macs: int


@dataclass
class CostReport:
    model: str
    input_hw: tuple[int, int] | None
    num_classes: int | None
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_params_trainable(self) -> int:
        return sum(r.params_trainable for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "input_hw": list(self.input_hw) if self.input_hw else None,
            "num_classes": self.num_classes,
            "total_params": self.total_params,
            "total_params_trainable": self.total_params_trainable,
            "total_macs": self.total_macs,
            "layers": [
                {
                    "name": r.name,
                    "kind": r.kind,
                    "out_shape": list(r.out_shape) if r.out_shape else None,
                    "params": r.params,
                    "params_trainable": r.params_trainable,
                    "macs": r.macs,
                }
                for r in self.rows
            ],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def render_text(self) -> str:
        headers = ("layer", "kind", "out shape", "params", "macs")
        lines = []
        for r in self.rows:
            shape = "x".join(str(d) for d in r.out_shape) if r.out_shape else "-"
            lines.append((r.name, r.kind, shape, f"{r.params:,}", f"{r.macs:,}"))
        widths = [max(len(h), *(len(row[i]) for row in lines)) if lines else len(h)
                  for i, h in enumerate(headers)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths[:3]) + "  " + \
              "  ".join(f"{{:>{w}}}" for w in widths[3:])
        out = [fmt.format(*headers), fmt.format(*("-" * w for w in widths))]
        out += [fmt.format(*row) for row in lines]
        out.append(fmt.format(*("-" * w for w in widths)))
        res = "" if self.input_hw is None else f" at {self.input_hw[0]}x{self.input_hw[1]}"
        out.append(f"{self.model}{res}: {self.total_params:,} params "
                   f"({self.total_params_trainable:,} trainable), "
                   f"{self.total_macs:,} MACs ({self.gmacs:.3f} G)")
        return "\n".join(out)


# -- forward-pass row recorder ----------------------------------------------

_RECORDERS: list[list[CostRow]] = []


@contextlib.contextmanager
def recording(rows: list[CostRow]):
    _RECORDERS.append(rows)
    try:
        yield rows
    finally:
        _RECORDERS.pop()


def recorder_active() -> bool:
    return bool(_RECORDERS)


def record_row(row: CostRow) -> None:
    if _RECORDERS:
        _RECORDERS[-1].append(row)


# -- entry points ------------------------------------------------------------


def count_params(model) -> CostReport:
    """Per-module parameter counts from the registry; no forward pass.

    Resolution-independent by construction, which is the cross-check against
    the traced report from count_flops.
    """
    report = CostReport(model=getattr(model, "name", type(model).__name__),
                        input_hw=None,
                        num_classes=getattr(model, "num_classes", None))
    for name, mod in model.named_modules():
        own = [p for p in mod.own_parameters()]
        if not own:
            continue
        report.rows.append(CostRow(
            name=name or report.model,
            kind=type(mod).__name__,
            out_shape=None,
            params=sum(p.size() for p in own),
            params_trainable=sum(p.size() for p in own if p.trainable),
            macs=0,
        ))
    return report


def count_flops(model, input_hw: tuple[int, int] | None = None,
                in_channels: int = 3) -> CostReport:
    """Trace a batch-1 forward pass and collect per-layer cost rows."""
    if input_hw is None:
        input_hw = model.input_hw
    h, w = input_hw
    report = CostReport(model=getattr(model, "name", type(model).__name__),
                        input_hw=(h, w),
                        num_classes=getattr(model, "num_classes", None))
    was_training = model.training
    model.eval()
    x = T.Tensor(np.zeros((1, in_channels, h, w), dtype=np.float32))
    try:
        with T.no_grad(), recording(report.rows):
            model(x)
    finally:
        model.train(was_training)
    return report


def conv_macs(out_h: int, out_w: int, out_ch: int, in_ch: int,
              kernel: int, groups: int = 1) -> int:
    return out_h * out_w * out_ch * (in_ch // groups) * kernel * kernel
