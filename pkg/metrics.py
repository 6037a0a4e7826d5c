from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from imc_io import ClassLabel

logger = logging.getLogger(__name__)

SEED_LABELS = tuple(f"RS-{chr(ord('A') + i)}" for i in range(26))
COMPARTMENTS = ("hole", "membrane", "subsarcolemmal", "interior")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed (true class, predicted class), control = 0 and patient = 1."""

    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    test_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    patient_precision: float
    patient_recall: float
    patient_f1: float
    seed: int | None = None
    warnings: tuple = field(default=())

    def to_dict(self):
        values = asdict(self)
        values["warnings"] = "; ".join(self.warnings)
        return values


@dataclass(frozen=True)
class RankingRow:
    model: str
    dataset: str
    channel: str
    accuracies: tuple
    mean: float
    sd: float
    var: float


@dataclass
class RankingTable:
    rows: list

    def to_frame(self):
        n_seeds = len(self.rows[0].accuracies) if self.rows else 0
        records = []
        for row in self.rows:
            record = {"model": row.model, "dataset": row.dataset, "channel": row.channel}
            for label, value in zip(SEED_LABELS[:n_seeds], row.accuracies):
                record[f"ta_{label}"] = value
            record.update(mean_ta=row.mean, sd_ta=row.sd, var_ta=row.var)
            records.append(record)
        return pd.DataFrame(records)

    def to_markdown(self):
        """Renders the table with two-decimal truncated cells, one row per model."""
        if not self.rows:
            return ""
        n_seeds = len(self.rows[0].accuracies)
        header = (
            ["Model", "Dataset", "Channel"]
            + [f"TA {label}(%)" for label in SEED_LABELS[:n_seeds]]
            + ["Mean TA(%)", "SD TA", "Var TA"]
        )
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for row in self.rows:
            cells = [row.model, row.dataset, row.channel]
            cells += [format_percent(v, trim=True) for v in row.accuracies]
            cells += [format_percent(row.mean), format_percent(row.sd), format_percent(row.var)]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def truncate(value, decimals=2):
    scale = 10**decimals
    return math.floor(value * scale + 1e-9) / scale


def format_percent(value, trim=False):
    """Two-decimal display by truncation; `trim` drops trailing zeros (100.00 -> 100, 75.00 -> 75)."""
    text = f"{truncate(value):.2f}"
    if trim:
        text = text.rstrip("0").rstrip(".")
    return text


def _class_index(value):
    if isinstance(value, ClassLabel):
        return value.value
    return ClassLabel.parse(value).value


def confusion(predictions, labels):
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise ValueError("confusion needs at least one prediction")
    counts = np.zeros((2, 2), dtype=np.int64)
    for predicted, true in zip(predictions, labels):
        counts[_class_index(true), _class_index(predicted)] += 1
    return ConfusionMatrix(counts)


def _ratio(numerator, denominator, name, warnings):
    if denominator == 0:
        warnings.append(f"{name} has a zero denominator; reported as 0")
        return 0.0
    return numerator / denominator


def _f1(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def classification_report(cm, seed=None):
    """
    Accuracy plus macro (unweighted two-class mean) and patient-class precision, recall and F1.

    Precision or recall with a zero denominator is 0, and the report carries a warning for it.
    """
    if cm.total <= 0:
        raise ValueError("classification_report needs a non-empty confusion matrix")
    counts = cm.counts
    warnings = []
    precision = []
    recall = []
    for k, name in enumerate(("control", "patient")):
        precision.append(_ratio(counts[k, k], counts[:, k].sum(), f"{name} precision", warnings))
        recall.append(_ratio(counts[k, k], counts[k, :].sum(), f"{name} recall", warnings))
    f1 = [_f1(p, r) for p, r in zip(precision, recall)]
    for message in warnings:
        logger.warning("Seed %s: %s", seed, message)
    return MetricsReport(
        test_accuracy=float(np.trace(counts) / cm.total),
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        patient_precision=float(precision[1]),
        patient_recall=float(recall[1]),
        patient_f1=float(f1[1]),
        seed=seed,
        warnings=tuple(warnings),
    )


def aggregate_seeds(accuracies):
    """Returns (mean, sd, var) with the n - 1 sample variance."""
    values = np.asarray(list(accuracies), dtype=np.float64)
    if values.size < 2:
        raise ValueError(f"aggregate_seeds needs at least 2 values, got {values.size}")
    var = float(np.var(values, ddof=1))
    return float(values.mean()), math.sqrt(var), var


def rank_models(rows):
    """
    Ranks (model, dataset, channel, per-seed accuracies) rows by mean accuracy.

    Ties fall to the lower SD, then to the channel name.

    Raises:
        ValueError: If rows carry different numbers of seeds.
    """
    rows = list(rows)
    counts = {len(row[3]) for row in rows}
    if len(counts) > 1:
        raise ValueError(f"Rows have different seed counts: {sorted(counts)}")
    ranked = []
    for model, dataset, channel, accuracies in rows:
        mean, sd, var = aggregate_seeds(accuracies)
        ranked.append(RankingRow(model, dataset, channel, tuple(accuracies), mean, sd, var))
    ranked.sort(key=lambda r: (-r.mean, r.sd, r.channel))
    return RankingTable(ranked)


def region_relevance(relevance_map, truth, origin):
    """
    Splits a map's absolute relevance over the tissue compartments of its window.

    Compartments are holes, membrane, the subsarcolemmal band and the rest of
    the fibre interior. Parts of the window beyond the image count as hole.

    Returns:
        pd.DataFrame: One row per compartment with relevance_fraction and area_fraction.
    """
    values = np.abs(relevance_map.values)
    magnitude = values.sum(axis=-1) if values.ndim == 3 else values
    height, width = magnitude.shape
    row, col = origin

    def window(mask, fill):
        cut = mask[row : row + height, col : col + width]
        pad = ((0, height - cut.shape[0]), (0, width - cut.shape[1]))
        return np.pad(cut, pad, constant_values=fill)

    labels = window(truth.fiber_label_mask, 0)
    membrane = window(truth.membrane_mask, False)
    band = window(truth.subsarcolemmal_mask, False)
    masks = {
        "hole": labels == 0,
        "membrane": membrane,
        "subsarcolemmal": band,
        "interior": (labels > 0) & ~membrane & ~band,
    }
    total = magnitude.sum()
    return pd.DataFrame(
        [
            {
                "compartment": name,
                "relevance_fraction": float(magnitude[mask].sum() / total) if total > 0 else 0.0,
                "area_fraction": float(mask.mean()),
            }
            for name, mask in masks.items()
        ]
    )
