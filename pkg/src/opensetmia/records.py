"""Target-model outputs per sample, the raw material of every attack."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._util import ContractError, DataFormatError

NORMALIZATION_TOL = 1e-4


@dataclass(frozen=True)
class PredictionRecord:
    """One confidence vector with its labels.

    ``true_label`` is the output index of the sample's identity, or -1 when
    the identity is not one of the target's classes (an unknown individual).
    ``membership`` is 1, 0 or None (unknown).
    """

    sample_id: str
    confidences: tuple[float, ...]
    true_label: int
    predicted_label: int
    membership: int | None = None

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "true_label": self.true_label,
            "predicted_label": self.predicted_label,
            "confidences": list(self.confidences),
            "membership": self.membership,
        }


def validate_prediction(conf, tol=1e-6) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 1 or conf.size < 2:
        raise ContractError("a prediction vector needs at least 2 entries")
    if not np.all(np.isfinite(conf)) or conf.min() < 0:
        raise ContractError("confidences must be finite and non-negative")
    if abs(conf.sum() - 1.0) > tol:
        raise ContractError(f"confidences sum to {conf.sum():.6g}, not 1")
    return conf


def records_from_arrays(sample_ids, probs, true_labels, membership=None) -> list[PredictionRecord]:
    probs = np.asarray(probs, dtype=np.float64)
    predicted = np.argmax(probs, axis=1)
    if membership is None:
        membership = [None] * len(sample_ids)
    return [
        PredictionRecord(sid, tuple(p.tolist()), int(t), int(k), None if m is None else int(m))
        for sid, p, t, k, m in zip(sample_ids, probs, true_labels, predicted, membership)
    ]


def record_arrays(records: Sequence[PredictionRecord]):
    """(confidences, true_labels, predicted_labels, membership) as arrays."""
    if not records:
        raise ContractError("no records")
    widths = {len(r.confidences) for r in records}
    if len(widths) != 1:
        raise ContractError("records disagree in class count")
    conf = np.array([r.confidences for r in records], dtype=np.float64)
    true = np.array([r.true_label for r in records], dtype=np.int64)
    pred = np.array([r.predicted_label for r in records], dtype=np.int64)
    memb = np.array([-1 if r.membership is None else r.membership for r in records], dtype=np.int64)
    return conf, true, pred, memb


def export_prediction_records(records: Sequence[PredictionRecord], path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def import_prediction_records(path) -> list[PredictionRecord]:
    """Parse a JSON Lines records file, validating every confidence vector.

    Rows whose confidences do not sum to 1 within 1e-4 are rejected rather
    than renormalized.
    """
    path = Path(path)
    out: list[PredictionRecord] = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                conf = [float(c) for c in obj["confidences"]]
                rec = PredictionRecord(
                    str(obj["sample_id"]),
                    tuple(conf),
                    int(obj["true_label"]),
                    int(obj["predicted_label"]),
                    None if obj.get("membership") is None else int(obj["membership"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{n}: malformed record ({exc})") from None
            try:
                validate_prediction(conf, tol=NORMALIZATION_TOL)
            except ContractError as exc:
                raise DataFormatError(f"{path}:{n}: {exc}") from None
            if width is None:
                width = len(conf)
            elif len(conf) != width:
                raise DataFormatError(f"{path}:{n}: expected {width} confidences, got {len(conf)}")
            if rec.membership not in (None, 0, 1):
                raise DataFormatError(f"{path}:{n}: membership must be 0, 1 or null")
            if not -1 <= rec.true_label < width or not 0 <= rec.predicted_label < width:
                raise DataFormatError(f"{path}:{n}: label index out of range")
            if conf[rec.predicted_label] != max(conf):
                raise DataFormatError(f"{path}:{n}: predicted_label is not the argmax of confidences")
            out.append(rec)
    if not out:
        raise DataFormatError(f"{path}: no records")
    return out
