"""Backpropagation memory: the per-layer analytic model and tape measurements.

Analytic cost over the trainable layers ``T`` at batch size ``B``::

    cost = sum_{l in T} (param_bytes(l) + act_bytes(l) * B)

where ``act_bytes(l)`` is the per-sample size of the layer input. Bytes the
tape keeps only to pass gradients through frozen layers (ReLU masks, pooling
indices, BN statistics) and Adam moment buffers are reported in their own
columns and are not part of that sum.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import engine
from .engine import Tape
from .errors import PlanError
from .nn import ModelSplit
from .ops import BATCH_STATS


@dataclass
class LayerRow:
    layer_id: int
    kind: str
    trainable: bool
    param_bytes: int
    activation_bytes_per_sample: int
    analytic_activation_bytes: int
    predicted_passthrough_bytes: int
    measured_weight_grad_bytes: int | None = None
    measured_passthrough_bytes: int | None = None


@dataclass
class MemoryReport:
    batch_size: int
    element_width: int
    rows: list[LayerRow] = field(default_factory=list)
    total_param_bytes: int = 0
    measured: bool = False

    @property
    def trainable_rows(self) -> list[LayerRow]:
        return [r for r in self.rows if r.trainable]

    @property
    def analytic_param_bytes(self) -> int:
        return sum(r.param_bytes for r in self.trainable_rows)

    @property
    def analytic_activation_bytes(self) -> int:
        return sum(r.analytic_activation_bytes for r in self.rows)

    @property
    def analytic_total(self) -> int:
        return self.analytic_param_bytes + self.analytic_activation_bytes

    @property
    def optimizer_state_bytes(self) -> int:
        return 2 * self.analytic_param_bytes

    @property
    def predicted_passthrough_bytes(self) -> int:
        return sum(r.predicted_passthrough_bytes for r in self.rows)

    @property
    def measured_weight_grad_bytes(self) -> int | None:
        if not self.measured:
            return None
        return sum(r.measured_weight_grad_bytes or 0 for r in self.rows)

    @property
    def measured_passthrough_bytes(self) -> int | None:
        if not self.measured:
            return None
        return sum(r.measured_passthrough_bytes or 0 for r in self.rows)

    @property
    def measured_total(self) -> int | None:
        if not self.measured:
            return None
        return self.measured_weight_grad_bytes + self.measured_passthrough_bytes

    def totals(self) -> dict[str, int | None]:
        return {
            "total_param_bytes": self.total_param_bytes,
            "analytic_param_bytes": self.analytic_param_bytes,
            "analytic_activation_bytes": self.analytic_activation_bytes,
            "analytic_total": self.analytic_total,
            "predicted_passthrough_bytes": self.predicted_passthrough_bytes,
            "optimizer_state_bytes": self.optimizer_state_bytes,
            "measured_weight_grad_bytes": self.measured_weight_grad_bytes,
            "measured_passthrough_bytes": self.measured_passthrough_bytes,
            "measured_total": self.measured_total,
        }

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "element_width": self.element_width,
            "rows": [asdict(r) for r in self.rows],
            "totals": self.totals(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        head = ("layer", "kind", "train", "m(theta)", "m(a)*B", "weight-grad", "pass-through")
        lines = []
        for r in self.rows:
            lines.append((str(r.layer_id), r.kind, "yes" if r.trainable else "-", str(r.param_bytes),
                          str(r.analytic_activation_bytes),
                          "-" if r.measured_weight_grad_bytes is None else str(r.measured_weight_grad_bytes),
                          "-" if r.measured_passthrough_bytes is None else str(r.measured_passthrough_bytes)))
        widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(head)]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        out = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
        out += [fmt.format(*l) for l in lines]
        t = self.totals()
        out.append("")
        out.append(f"B={self.batch_size} width={self.element_width}B  "
                   f"analytic={t['analytic_total']} (params {t['analytic_param_bytes']}, "
                   f"activations {t['analytic_activation_bytes']})  "
                   f"optimizer={t['optimizer_state_bytes']}  all-params={t['total_param_bytes']}")
        if self.measured:
            out.append(f"measured: weight-grad={t['measured_weight_grad_bytes']} "
                       f"pass-through={t['measured_passthrough_bytes']} total={t['measured_total']}")
        return "\n".join(out)


def _saved_elements(name: str, in_shape: tuple[int, ...], out_shape: tuple[int, ...],
                    batch: int) -> int:
    """Element count of a saved tensor for a whole batch (per-op tables in ``ops``)."""
    if name == "inv_std":
        return in_shape[0]
    if name == "argmax":
        return int(np.prod(out_shape)) * batch
    return int(np.prod(in_shape)) * batch


def predict_cost(model: ModelSplit, layer_ids: Iterable[int], batch_size: int,
                 element_width: int | None = None, bn_mode: str = BATCH_STATS) -> MemoryReport:
    """Analytic report for training the parameters of ``layer_ids``."""
    ids = set(layer_ids)
    for lid in ids:
        if not 1 <= lid <= len(model.layers) or not model.layer(lid).parameterized:
            raise PlanError(f"layer {lid} is not a parameterized layer of the model")
    width = element_width or model.dtype.itemsize
    shapes = engine.infer_shapes(model.layers, model.input_shape)
    trainable = {p.id for lid in ids for p in model.layer(lid).params.values()}
    retention = engine.analyze_retention(model.layers, trainable, bn_mode)
    rep = MemoryReport(batch_size, width)
    rep.total_param_bytes = sum(p.data.size for p in model.parameters()) * width
    for op, s_in, s_out in zip(model.layers, shapes, shapes[1:]):
        t = op.layer_id in ids
        act = int(np.prod(s_in)) * width
        sset = retention[op.layer_id]
        passthrough = sum(_saved_elements(n, s_in, s_out, batch_size)
                          for n in sset.input if n not in sset.weight)
        rep.rows.append(LayerRow(
            layer_id=op.layer_id, kind=op.kind, trainable=t,
            param_bytes=sum(p.data.size for p in op.params.values()) * width,
            activation_bytes_per_sample=act if op.parameterized else 0,
            analytic_activation_bytes=act * batch_size if t else 0,
            predicted_passthrough_bytes=passthrough * width,
        ))
    return rep


def measure_cost(tape: Tape, report: MemoryReport | None = None) -> MemoryReport:
    """Fill measured columns from a tape (creating bare rows if no report is given)."""
    if report is None:
        width = tape.nodes[0].width if tape.nodes else 8
        report = MemoryReport(tape.batch, width)
        for node in tape.nodes:
            report.rows.append(LayerRow(node.layer_id, node.op_kind, node.need_weight, 0, 0, 0, 0))
    by_id = {r.layer_id: r for r in report.rows}
    for node in tape.nodes:
        row = by_id[node.layer_id]
        row.measured_weight_grad_bytes = node.weight_grad_bytes
        row.measured_passthrough_bytes = node.passthrough_bytes
    report.measured = True
    return report
