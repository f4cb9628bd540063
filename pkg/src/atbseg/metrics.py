"""Segmentation metrics, per-round records, and aggregation.

Conventions fixed here:
  * dice of two empty masks is 1.0; one empty mask against a non-empty one
    scores 0.0;
  * evaluation computes each metric per frame, then averages uniformly over
    frames (a pooled-pixel alternative exists behind a flag);
  * aggregate standard deviations use the population convention (divide by
    the number of rounds).

``k`` in a record is the adaptation frame count; 0 marks an unadapted base
model and -1 the matched-condition benchmark.

All functions are pure over immutable inputs; evaluating distinct models in
parallel is safe.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import DataError
from .rasterize import resize_frame, resize_mask

MATCHED_K = -1
BASE_K = 0

RECORDS_CSV_HEADER = ["model", "k", "round", "mask", "pca", "dice", "n_frames"]


@dataclass(frozen=True)
class MetricRecord:
    model_name: str
    k: int
    round: int
    mask_id: int
    pca: float
    dice: float
    n_frames: int

    def __post_init__(self) -> None:
        if self.mask_id not in (1, 2, 3):
            raise DataError(f"mask_id must be 1, 2 or 3, got {self.mask_id}")
        if not (0.0 <= self.pca <= 1.0) or not (0.0 <= self.dice <= 1.0):
            raise DataError("pca and dice must lie in [0, 1]")


@dataclass(frozen=True)
class AggregateRecord:
    model_name: str
    k: int
    mask_id: int
    mean_pca: float
    std_pca: float
    mean_dice: float
    std_dice: float
    relative_to_matched_pca: float
    relative_to_matched_dice: float
    delta_percent_pca: float
    delta_percent_dice: float
    rounds: int


def _check_same_dims(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    return pred != 0, gt != 0


def pca(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of pixels whose predicted class matches ground truth."""
    p, g = _check_same_dims(pred, gt)
    return float(np.count_nonzero(p == g)) / p.size


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2 |pred & gt| / (|pred| + |gt|) over tissue pixels; empty-empty = 1."""
    p, g = _check_same_dims(pred, gt)
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / denom


class MaskPredictor(Protocol):
    """Anything that maps frame batches to per-head tissue probabilities."""

    def predict_proba(self, frames: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class EvalSample:
    """One test frame with its native-resolution ground truth masks."""

    image: np.ndarray  # (H, W) float32
    masks: np.ndarray  # (3, H, W) uint8


def _model_dims(model) -> tuple[int, int]:
    cfg = getattr(model, "config", None)
    if cfg is not None:
        return cfg.input_width, cfg.input_height
    raise DataError("model does not expose a config with input dims")


def evaluate_model(
    model: MaskPredictor,
    test_set: Sequence[EvalSample],
    *,
    model_name: str,
    k: int = BASE_K,
    round_index: int = 0,
    pooled: bool = False,
    batch_size: int = 32,
) -> list[MetricRecord]:
    """Score a model on a test set; returns one record per mask.

    Frames whose resolution differs from the model input are resized
    bilinearly for prediction, and the predicted masks are resized back
    (nearest) so scoring happens at native resolution.
    """
    if not test_set:
        raise DataError("test set is empty")
    mw, mh = _model_dims(model)

    per_frame = np.zeros((len(test_set), 3, 2))  # (frame, mask, [pca, dice])
    pooled_counts = np.zeros((3, 3))  # (mask, [n_equal, n_pred+n_gt, 2*n_intersect])
    pooled_pixels = 0

    for start in range(0, len(test_set), batch_size):
        chunk = test_set[start : start + batch_size]
        images = [
            s.image
            if s.image.shape == (mh, mw)
            else resize_frame(s.image, mw, mh)
            for s in chunk
        ]
        probs = model.predict_proba(np.stack(images))
        pred = (probs >= 0.5).astype(np.uint8)
        for j, sample in enumerate(chunk):
            h, w = sample.image.shape
            for m in range(3):
                pm = pred[j, m]
                if (h, w) != (mh, mw):
                    pm = resize_mask(pm, w, h)
                gm = sample.masks[m]
                per_frame[start + j, m, 0] = pca(pm, gm)
                per_frame[start + j, m, 1] = dice(pm, gm)
                if pooled:
                    pooled_counts[m, 0] += np.count_nonzero(pm == gm)
                    pooled_counts[m, 1] += np.count_nonzero(pm) + np.count_nonzero(gm)
                    pooled_counts[m, 2] += 2 * np.count_nonzero(pm & gm)
            pooled_pixels += sample.masks[0].size

    records = []
    for m in range(3):
        if pooled:
            pca_val = float(pooled_counts[m, 0] / pooled_pixels)
            dice_val = (
                1.0
                if pooled_counts[m, 1] == 0
                else float(pooled_counts[m, 2] / pooled_counts[m, 1])
            )
        else:
            pca_val = float(per_frame[:, m, 0].mean())
            dice_val = float(per_frame[:, m, 1].mean())
        records.append(
            MetricRecord(
                model_name=model_name,
                k=k,
                round=round_index,
                mask_id=m + 1,
                pca=pca_val,
                dice=dice_val,
                n_frames=len(test_set),
            )
        )
    return records


def aggregate(
    records: Iterable[MetricRecord], matched: Iterable[MetricRecord]
) -> list[AggregateRecord]:
    """Mean/std over rounds per (model, k, mask), with matched-relative values.

    ``relative_to_matched`` is 100 * metric / matched_metric; ``delta_percent``
    is 100 * (metric - matched_metric) / matched_metric.
    """
    matched_by_mask: dict[int, list[MetricRecord]] = {}
    for r in matched:
        matched_by_mask.setdefault(r.mask_id, []).append(r)

    groups: dict[tuple[str, int, int], list[MetricRecord]] = {}
    for r in records:
        groups.setdefault((r.model_name, r.k, r.mask_id), []).append(r)

    out = []
    for (name, k, mask_id), rs in sorted(groups.items()):
        if mask_id not in matched_by_mask:
            raise DataError(f"no matched-condition record for mask {mask_id}")
        m_pca = float(np.mean([m.pca for m in matched_by_mask[mask_id]]))
        m_dice = float(np.mean([m.dice for m in matched_by_mask[mask_id]]))
        pcas = np.array([r.pca for r in rs])
        dices = np.array([r.dice for r in rs])
        out.append(
            AggregateRecord(
                model_name=name,
                k=k,
                mask_id=mask_id,
                mean_pca=float(pcas.mean()),
                std_pca=float(pcas.std()),  # population convention
                mean_dice=float(dices.mean()),
                std_dice=float(dices.std()),
                relative_to_matched_pca=100.0 * float(pcas.mean()) / m_pca,
                relative_to_matched_dice=100.0 * float(dices.mean()) / m_dice,
                delta_percent_pca=100.0 * (float(pcas.mean()) - m_pca) / m_pca,
                delta_percent_dice=100.0 * (float(dices.mean()) - m_dice) / m_dice,
                rounds=len(rs),
            )
        )
    return out


# ---------------------------------------------------------------------------
# CSV / JSON persistence
# ---------------------------------------------------------------------------

def write_records_csv(path: Path, records: Iterable[MetricRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORDS_CSV_HEADER)
        for r in records:
            writer.writerow(
                [r.model_name, r.k, r.round, r.mask_id, repr(r.pca), repr(r.dice), r.n_frames]
            )
    return path


def append_records_csv(path: Path, records: Iterable[MetricRecord]) -> Path:
    path = Path(path)
    if not path.is_file():
        return write_records_csv(path, records)
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        for r in records:
            writer.writerow(
                [r.model_name, r.k, r.round, r.mask_id, repr(r.pca), repr(r.dice), r.n_frames]
            )
    return path


def read_records_csv(path: Path) -> list[MetricRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing records file: {path}")
    records = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RECORDS_CSV_HEADER:
            raise DataError(
                f"{path}: unexpected header {reader.fieldnames}, "
                f"expected {RECORDS_CSV_HEADER}"
            )
        for row in reader:
            records.append(
                MetricRecord(
                    model_name=row["model"],
                    k=int(row["k"]),
                    round=int(row["round"]),
                    mask_id=int(row["mask"]),
                    pca=float(row["pca"]),
                    dice=float(row["dice"]),
                    n_frames=int(row["n_frames"]),
                )
            )
    return records


AGGREGATE_CSV_HEADER = [
    "model", "k", "mask",
    "mean_pca", "std_pca", "mean_dice", "std_dice",
    "relative_to_matched_pca", "relative_to_matched_dice",
    "delta_percent_pca", "delta_percent_dice", "rounds",
]


def write_aggregates_csv(path: Path, aggregates: Sequence[AggregateRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_CSV_HEADER)
        for a in aggregates:
            writer.writerow(
                [
                    a.model_name, a.k, a.mask_id,
                    repr(a.mean_pca), repr(a.std_pca),
                    repr(a.mean_dice), repr(a.std_dice),
                    repr(a.relative_to_matched_pca), repr(a.relative_to_matched_dice),
                    repr(a.delta_percent_pca), repr(a.delta_percent_dice),
                    a.rounds,
                ]
            )
    return path


def write_aggregates_json(path: Path, aggregates: Sequence[AggregateRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [
        {
            "model": a.model_name,
            "k": a.k,
            "mask": a.mask_id,
            "mean_pca": a.mean_pca,
            "std_pca": a.std_pca,
            "mean_dice": a.mean_dice,
            "std_dice": a.std_dice,
            "relative_to_matched_pca": a.relative_to_matched_pca,
            "relative_to_matched_dice": a.relative_to_matched_dice,
            "delta_percent_pca": a.delta_percent_pca,
            "delta_percent_dice": a.delta_percent_dice,
            "rounds": a.rounds,
        }
        for a in aggregates
    ]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
