"""Alignment measures, gradient norms and per-step metrics records."""
import copy
import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, TextIO

import numpy as np

from .network import ForwardTrace, Network
from .numerics import Matrix, ShapeError, inf_norm
from .rules import FeedbackKind, FeedbackSet, GradientSet, UpdateRule, backprop

logger = logging.getLogger(__name__)

# None marks a missing value (e.g. alignment of a zero matrix); it is written
# as an empty CSV field and as null in JSON lines.
MaybeFloat = Optional[float]


class UndefinedAlignmentError(ValueError):
    """Raised when the alignment of a zero matrix is requested."""


def alignment(a: Matrix, b: Matrix) -> float:
    """Inner product of the flattened matrices divided by their norms.

    Columns are stacked to flatten; any fixed flattening gives the same value.
    """
    if a.shape != b.shape:
        raise ShapeError(f"alignment: shape mismatch {a.shape} vs {b.shape}")
    va = a.ravel(order="F")
    vb = b.ravel(order="F")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise UndefinedAlignmentError("alignment is undefined for a zero matrix")
    value = float(np.dot(va, vb)) / (na * nb)
    return min(1.0, max(-1.0, value))


def _alignment_or_none(a: Matrix, b: Matrix) -> MaybeFloat:
    try:
        return alignment(a, b)
    except UndefinedAlignmentError:
        return None


def gradient_alignment(
    net: Network,
    trace: ForwardTrace,
    onehot: Matrix,
    rule: UpdateRule,
    update: Optional[GradientSet] = None,
) -> tuple[MaybeFloat, ...]:
    """Per-layer alignment of a rule's update with the exact BP gradient.

    Pass ``update`` when the rule has already been evaluated on this state.
    Otherwise the rule runs on a deep copy, so random streams owned by the
    rule are not advanced and the training trajectory is unaffected.
    """
    if update is None:
        update = copy.deepcopy(rule).compute(net, trace, onehot)
    exact = backprop(net, trace, onehot)
    return tuple(_alignment_or_none(u, g) for u, g in zip(update.deltas, exact.deltas))


def weight_alignment(net: Network, feedback: FeedbackSet) -> tuple[MaybeFloat, ...]:
    """Alignment of W^(l) with R^(l) for layers 2..L."""
    if feedback.kind is not FeedbackKind.FA:
        raise ValueError(f"weight alignment needs FA feedback, got {feedback.kind.value}")
    feedback.validate(net.arch)
    return tuple(_alignment_or_none(w, r) for w, r in zip(net.weights[1:], feedback.matrices[1:]))


def cross_run_weight_alignment(net_a: Network, net_b: Network) -> tuple[MaybeFloat, ...]:
    if net_a.arch.layer_sizes != net_b.arch.layer_sizes:
        raise ShapeError(f"architectures differ: {net_a.arch.layer_sizes} vs {net_b.arch.layer_sizes}")
    return tuple(_alignment_or_none(a, b) for a, b in zip(net_a.weights, net_b.weights))


def grad_inf_norms(grads: GradientSet) -> tuple[float, ...]:
    return tuple(inf_norm(g) for g in grads.deltas)


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    epoch: int
    train_loss: float
    test_accuracy: MaybeFloat = None
    gradient_alignment: tuple[MaybeFloat, ...] = ()
    weight_alignment: tuple[MaybeFloat, ...] = ()
    grad_inf_norm: tuple[float, ...] = ()
    cross_alignment: tuple[MaybeFloat, ...] = ()

    def to_dict(self, depth: int, cross: bool = False) -> dict[str, MaybeFloat]:
        row: dict[str, MaybeFloat] = {
            "step": self.step,
            "epoch": self.epoch,
            "test_accuracy": self.test_accuracy,
            "train_loss": self.train_loss,
        }
        row.update(_layer_fields("ga", range(1, depth + 1), self.gradient_alignment))
        row.update(_layer_fields("wa", range(2, depth + 1), self.weight_alignment))
        row.update(_layer_fields("ginf", range(1, depth + 1), self.grad_inf_norm))
        if cross:
            row.update(_layer_fields("xa", range(1, depth + 1), self.cross_alignment))
        return row

    @classmethod
    def from_dict(cls, row: dict, depth: int) -> "MetricsRecord":
        def layers(prefix, layer_range):
            if not layer_range or f"{prefix}_l{layer_range[0]}" not in row:
                return ()
            return tuple(_maybe_float(row.get(f"{prefix}_l{l}")) for l in layer_range)

        return cls(
            step=int(row["step"]),
            epoch=int(row["epoch"]),
            train_loss=float(row["train_loss"]),
            test_accuracy=_maybe_float(row.get("test_accuracy")),
            gradient_alignment=layers("ga", range(1, depth + 1)),
            weight_alignment=layers("wa", range(2, depth + 1)),
            grad_inf_norm=layers("ginf", range(1, depth + 1)),
            cross_alignment=layers("xa", range(1, depth + 1)),
        )


def _layer_fields(prefix: str, layer_range: range, values: tuple) -> dict[str, MaybeFloat]:
    return {f"{prefix}_l{l}": (values[k] if k < len(values) else None) for k, l in enumerate(layer_range)}


def _maybe_float(value) -> MaybeFloat:
    if value is None or value == "":
        return None
    value = float(value)
    return None if math.isnan(value) else value


def metrics_columns(depth: int, cross: bool = False) -> list[str]:
    cols = ["step", "epoch", "test_accuracy", "train_loss"]
    cols += [f"ga_l{l}" for l in range(1, depth + 1)]
    cols += [f"wa_l{l}" for l in range(2, depth + 1)]
    cols += [f"ginf_l{l}" for l in range(1, depth + 1)]
    if cross:
        cols += [f"xa_l{l}" for l in range(1, depth + 1)]
    return cols


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


class MetricsWriter:
    """Streams metrics records to CSV (header first) or JSON lines.

    Floats are written with ``repr`` so reading them back is lossless and a
    rerun with the same seed reproduces the file byte for byte.
    """

    def __init__(self, path: str | Path, depth: int, fmt: str = "csv", cross: bool = False):
        if fmt not in ("csv", "jsonl"):
            raise ValueError(f"unknown metrics format '{fmt}'")
        self.path = Path(path)
        self.depth = depth
        self.fmt = fmt
        self.cross = cross
        self.columns = metrics_columns(depth, cross)
        self._file: Optional[TextIO] = None
        self._writer = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        if self.fmt == "csv":
            self._writer = csv.writer(self._file, lineterminator="\n")
            self._writer.writerow(self.columns)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        if self._file is not None:
            self._file.close()
            self._file = None

    def write(self, record: MetricsRecord) -> None:
        if self._file is None:
            raise RuntimeError("MetricsWriter is not open. Use it as a context manager.")
        row = record.to_dict(self.depth, self.cross)
        if self.fmt == "csv":
            self._writer.writerow([_csv_cell(row[c]) for c in self.columns])
        else:
            self._file.write(json.dumps({c: row[c] for c in self.columns}) + "\n")

    def write_all(self, records: Iterable[MetricsRecord]) -> None:
        for record in records:
            self.write(record)


def read_metrics_csv(path: str | Path, depth: int) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        return [MetricsRecord.from_dict(row, depth) for row in csv.DictReader(f)]


def read_metrics_jsonl(path: str | Path, depth: int) -> list[MetricsRecord]:
    with open(path, encoding="utf-8") as f:
        return [MetricsRecord.from_dict(json.loads(line), depth) for line in f if line.strip()]
