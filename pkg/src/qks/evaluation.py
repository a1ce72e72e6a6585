"""ZSL / GZSL evaluation: label-centric mAP, top-K precision/recall/F1,
attention-map export and token preference statistics.

mAP here ranks *images* for each label and averages the per-label AP. This
is the convention of the multi-label zero-shot literature; image-centric mAP
(ranking labels per image) gives different numbers.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dataset_io import Manifest, SplitData, load_split
from .model import QksHead
from .prompt_pool import LabelEmbeddingTable

log = logging.getLogger(__name__)

TASKS = ("zsl", "gzsl")


class UndefinedMetricError(ValueError):
    """AP of a label without relevant items."""


class MetricWarning(UserWarning):
    pass


def _rank(scores) -> np.ndarray:
    # descending score, ties by ascending index
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, relevance) -> float:
    rel = np.asarray(relevance, dtype=bool)
    npos = int(rel.sum())
    if npos == 0:
        raise UndefinedMetricError("no relevant items")
    hits = rel[_rank(scores)]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, npos + 1) / ranks))


def mean_ap(scores, targets, candidates=None):
    """Mean AP over candidate labels; labels with no positive image are
    skipped with a warning. Returns ``(mAP, {label: AP})``."""
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=bool)
    cands = range(scores.shape[1]) if candidates is None else candidates
    per_label = {}
    skipped = []
    for j in cands:
        try:
            per_label[int(j)] = average_precision(scores[:, j], targets[:, j])
        except UndefinedMetricError:
            skipped.append(int(j))
    if skipped:
        warnings.warn(f"skipping {len(skipped)} label(s) without positives: {skipped}",
                      MetricWarning, stacklevel=2)
    if not per_label:
        raise UndefinedMetricError("every candidate label was skipped")
    return float(np.mean(list(per_label.values()))), per_label


def topk_prf(scores, targets, K: int, candidates=None):
    """Precision, recall and F1 of each image's top-K candidate labels.

    P divides the hit count by ``K * N`` over all ``N`` images; R divides by
    the total number of positives, so an image with more than ``K``
    positives can never reach full recall.
    """
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=bool)
    cands = np.arange(scores.shape[1]) if candidates is None else np.asarray(candidates)
    if K > cands.size:
        raise ValueError(f"K={K} exceeds the {cands.size} candidate labels")
    s = scores[:, cands]
    t = targets[:, cands]
    total_pos = int(t.sum())
    if total_pos == 0:
        raise UndefinedMetricError("no annotated positives among the candidates")
    order = np.argsort(-s.astype(np.float64), axis=1, kind="stable")[:, :K]
    hits = int(np.take_along_axis(t, order, axis=1).sum())
    n = s.shape[0]
    p = hits / (K * n)
    r = hits / total_pos
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


# ---------------------------------------------------------------------------
# running a head over a split
# ---------------------------------------------------------------------------


@dataclass
class Predictions:
    scores: np.ndarray          # (N, n_labels)
    argmax: np.ndarray          # (N, n_labels)
    attention: Optional[np.ndarray] = None  # (N, heads, m, HW), final layer


def predict(head: QksHead, features, table, batch_size: int = 256,
            final_attention: bool = False) -> Predictions:
    sc, am, at = [], [], []
    for i in range(0, len(features), batch_size):
        s, a, tr = head.forward(features[i:i + batch_size], table, trace=final_attention)
        sc.append(s)
        am.append(a)
        if final_attention:
            at.append(tr[:, -1])
    return Predictions(
        np.concatenate(sc), np.concatenate(am),
        np.concatenate(at) if final_attention else None,
    )


def candidate_labels(manifest: Manifest, task: str) -> List[int]:
    task = task.lower()
    if task == "zsl":
        return sorted(manifest.unseen)
    if task == "gzsl":
        return sorted(manifest.seen + manifest.unseen)
    raise ValueError(f"task must be one of {TASKS}, got {task!r}")


@dataclass
class EvalReport:
    task: str
    mAP: float
    prf: Dict[int, Dict[str, float]]
    per_label_ap: Dict[int, float]
    n_images: int
    candidates: List[int]

    def to_dict(self) -> dict:
        return {
            "task": self.task.upper(),
            "mAP": self.mAP,
            "topk": {str(k): v for k, v in self.prf.items()},
            "per_label_ap": {str(k): v for k, v in self.per_label_ap.items()},
            "n_images": self.n_images,
            "candidates": self.candidates,
        }

    def table(self) -> str:
        lines = [f"task {self.task.upper()}  images {self.n_images}  "
                 f"candidates {len(self.candidates)}",
                 f"  mAP   {100 * self.mAP:6.2f}"]
        for k, m in self.prf.items():
            lines.append(f"  K={k:<3d} P {100 * m['P']:6.2f}  R {100 * m['R']:6.2f}"
                         f"  F1 {100 * m['F1']:6.2f}")
        return "\n".join(lines)


def report_from_scores(scores, targets, candidates, task, ks=(3, 5)) -> EvalReport:
    mAP, per_label = mean_ap(scores, targets, candidates)
    prf = {}
    for k in ks:
        p, r, f1 = topk_prf(scores, targets, k, candidates)
        prf[int(k)] = {"P": p, "R": r, "F1": f1}
    return EvalReport(task.lower(), mAP, prf, per_label, int(np.asarray(scores).shape[0]),
                      [int(c) for c in candidates])


def evaluate(head: QksHead, manifest: Manifest, task: str, ks=(3, 5),
             data: SplitData = None, table: LabelEmbeddingTable = None,
             preds: Predictions = None) -> EvalReport:
    """Score every test image once and report metrics over the task's
    candidate labels."""
    check_compatible(head, manifest)
    data = data if data is not None else load_split(manifest, "test")
    table = table if table is not None else manifest.label_table()
    if preds is None:
        preds = predict(head, data.features, table)
    return report_from_scores(preds.scores, data.targets, candidate_labels(manifest, task),
                              task, ks)


def check_compatible(head: QksHead, manifest: Manifest) -> None:
    c, d = head.cfg, manifest.data
    if (c.d, c.C, c.H, c.W) != (d["d"], d["C"], d["H"], d["W"]):
        raise ValueError(
            f"checkpoint geometry d={c.d} C={c.C} {c.H}x{c.W} does not match dataset "
            f"d={d['d']} C={d['C']} {d['H']}x{d['W']}"
        )


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------


def attention_row(head: QksHead, features, table, label: int) -> np.ndarray:
    """Head-averaged final-layer cross-attention of the token that wins
    ``label``, shaped ``H x W`` (sums to 1)."""
    s, arg, tr = head.forward(np.asarray(features)[None] if np.ndim(features) == 2 else features,
                              table, trace=True)
    j = int(arg[0, label])
    row = tr[0, -1, :, j, :].mean(axis=0)
    return row.reshape(head.cfg.H, head.cfg.W)


def normalize_map(row: np.ndarray) -> np.ndarray:
    lo, hi = float(row.min()), float(row.max())
    if hi - lo <= 0:
        warnings.warn("attention map is constant; emitting zeros", MetricWarning, stacklevel=2)
        return np.zeros_like(row, dtype=np.float64)
    return (row - lo) / (hi - lo)


def export_attention_map(head: QksHead, features, table, label: int, out_prefix=None):
    """Min-max normalized attention grid for ``label``; with ``out_prefix``
    also writes ``.csv``, an 8-bit ``.gray`` raster and a ``.json`` sidecar."""
    if not 0 <= label < _n_labels(table):
        raise IndexError(f"label {label} not in the embedding table")
    grid = normalize_map(attention_row(head, features, table, label))
    if out_prefix is not None:
        write_attention_files(grid, out_prefix, label=label)
    return grid


def _n_labels(table):
    return table.n_labels if isinstance(table, LabelEmbeddingTable) else len(table)


def write_attention_files(grid: np.ndarray, out_prefix, **meta) -> Dict[str, Path]:
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_prefix.with_suffix(".csv"),
        "raster": out_prefix.with_suffix(".gray"),
        "sidecar": out_prefix.with_suffix(".json"),
    }
    np.savetxt(paths["csv"], grid, delimiter=",", fmt="%.8f")
    raster = np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    paths["raster"].write_bytes(raster.tobytes())
    side = {"height": int(grid.shape[0]), "width": int(grid.shape[1]),
            "dtype": "uint8", "order": "row-major", "raster": paths["raster"].name}
    side.update(meta)
    paths["sidecar"].write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return paths


def region_mass(row: np.ndarray, region: np.ndarray) -> float:
    """Share of an attention distribution that falls inside a boolean region."""
    return float(row[region].sum() / row.sum())


# ---------------------------------------------------------------------------
# token preferences
# ---------------------------------------------------------------------------


@dataclass
class PreferenceStats:
    labels: List[int]
    matrix: np.ndarray      # (len(labels), m) positive occurrences won per token
    histogram: np.ndarray   # (m,) column sums

    def concentration(self) -> np.ndarray:
        """Per label, the largest share of its mass held by one token
        (NaN for labels without positives)."""
        tot = self.matrix.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, self.matrix.max(axis=1) / np.maximum(tot, 1), np.nan)

    def write_csv(self, path, label_names=None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        m = self.matrix.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "name"] + [f"token_{j}" for j in range(m)])
            for lab, row in zip(self.labels, self.matrix):
                name = label_names[lab] if label_names else str(lab)
                w.writerow([lab, name] + [int(v) for v in row])
            w.writerow(["total", ""] + [int(v) for v in self.histogram])


def preference_from_predictions(argmax, targets, candidates, m: int) -> PreferenceStats:
    argmax = np.asarray(argmax)
    targets = np.asarray(targets, dtype=bool)
    mat = np.zeros((len(candidates), m), dtype=np.int64)
    for r, lab in enumerate(candidates):
        np.add.at(mat[r], argmax[targets[:, lab], lab], 1)
    return PreferenceStats(list(map(int, candidates)), mat, mat.sum(axis=0))


def token_preference_stats(head: QksHead, manifest: Manifest, task: str,
                           data: SplitData = None, table=None,
                           preds: Predictions = None) -> PreferenceStats:
    data = data if data is not None else load_split(manifest, "test")
    table = table if table is not None else manifest.label_table()
    if preds is None:
        preds = predict(head, data.features, table)
    return preference_from_predictions(preds.argmax, data.targets,
                                       candidate_labels(manifest, task), head.cfg.m)
