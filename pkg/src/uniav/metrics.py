"""Evaluation metrics for the three tasks.

Localization: per-pixel heatmaps scored by average precision (tie-aware,
trapezoidal) plus thresholded precision/recall/F1. Separation: projection
based SDR/SAR against a known reference and interferer. Recognition:
cross-modal retrieval and nearest-neighbor label consistency.

All functions are pure numpy/float64 and independent of the training stack,
so they double as oracles for it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .dsp import resize_bilinear
from .errors import InputError

SDR_CAP_DB = 100.0

_CONSTANT_EPS = 1e-12


@dataclass
class Heatmap:
    """H x W localization scores, min-max normalized into [0, 1].

    A constant map normalizes to 0.5 everywhere by convention so that
    thresholding and ranking both stay well defined.
    """

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise InputError(f"heatmap must be 2-D, got shape {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise InputError("heatmap contains NaN or Inf")
        if self.grid.min() < 0.0 or self.grid.max() > 1.0:
            raise InputError("heatmap values must lie in [0, 1]; normalize first")


def normalize_heatmap(raw: np.ndarray) -> Heatmap:
    """Min-max normalize arbitrary real scores into a Heatmap."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo < _CONSTANT_EPS:
        return Heatmap(np.full_like(raw, 0.5))
    return Heatmap((raw - lo) / (hi - lo))


def localization_heatmap(a_loc: np.ndarray, v_loc_grid: np.ndarray, out_size: int = 224) -> Heatmap:
    """Audio-query localization map.

    Cosine similarity between the audio vector and each spatial cell of the
    visual grid (both unit-norm), bilinearly upsampled to out_size and
    min-max normalized.
    """
    a = np.asarray(a_loc, dtype=np.float64)
    grid = np.asarray(v_loc_grid, dtype=np.float64)
    if grid.ndim != 3:
        raise InputError(f"expected H x W x D visual grid, got shape {grid.shape}")
    if a.ndim != 1 or a.shape[0] != grid.shape[2]:
        raise InputError(
            f"audio vector dim {a.shape} does not match grid channels {grid.shape[2]}"
        )
    sims = grid @ a
    up = resize_bilinear(sims, (out_size, out_size))
    return normalize_heatmap(up)


def pixel_average_precision(heatmap, gt_mask: np.ndarray) -> float | None:
    """Average precision of per-pixel scores against a binary mask.

    Pixels are ranked by score; equal scores form one tie group evaluated as
    a single operating point; the PR curve is integrated trapezoidally with
    the curve anchored at (R=0, P=P_first). Returns None when the mask has
    no positive pixels (caller decides how to count the skip).
    """
    scores = heatmap.grid if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    gt = np.asarray(gt_mask)
    if scores.shape != gt.shape:
        raise InputError(f"heatmap shape {scores.shape} != mask shape {gt.shape}")
    g = gt.ravel().astype(bool)
    n_pos = int(g.sum())
    if n_pos == 0:
        return None

    s = scores.ravel()
    # unique sorts ascending; negate so group 0 is the highest score
    _, inv = np.unique(-s, return_inverse=True)
    n_groups = inv.max() + 1
    pos_per_group = np.bincount(inv, weights=g.astype(np.float64), minlength=n_groups)
    cnt_per_group = np.bincount(inv, minlength=n_groups).astype(np.float64)

    cum_pos = np.cumsum(pos_per_group)
    cum_cnt = np.cumsum(cnt_per_group)
    precision = cum_pos / cum_cnt
    recall = cum_pos / n_pos

    p = np.concatenate(([precision[0]], precision))
    r = np.concatenate(([0.0], recall))
    return float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2.0))


def piap(heatmaps, gt_masks) -> tuple[float, int]:
    """Mean per-sample average precision as a percentage.

    Samples with empty ground truth are skipped; returns (piap_percent,
    n_skipped). Raises if every sample was skipped.
    """
    if len(heatmaps) != len(gt_masks):
        raise InputError("heatmaps and masks must be paired")
    aps = []
    skipped = 0
    for hm, gt in zip(heatmaps, gt_masks):
        ap = pixel_average_precision(hm, gt)
        if ap is None:
            skipped += 1
        else:
            aps.append(ap)
    if not aps:
        raise InputError("no sample had a nonempty ground-truth mask")
    return 100.0 * float(np.mean(aps)), skipped


def precision_f1(heatmap, gt_mask: np.ndarray, threshold: float = 0.5):
    """Thresholded localization scores for one sample, as percentages.

    The heatmap is binarized at `threshold` (it is already min-max
    normalized), then precision = |pred & gt| / |pred| with the empty-
    prediction convention precision = 0, recall = |pred & gt| / |gt|,
    f1 = harmonic mean. Returns None for an empty ground truth (skip).
    """
    scores = heatmap.grid if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    gt = np.asarray(gt_mask).astype(bool)
    if scores.shape != gt.shape:
        raise InputError(f"heatmap shape {scores.shape} != mask shape {gt.shape}")
    if not gt.any():
        return None
    pred = scores >= threshold
    inter = float(np.logical_and(pred, gt).sum())
    n_pred = float(pred.sum())
    n_gt = float(gt.sum())
    precision = inter / n_pred if n_pred > 0 else 0.0
    recall = inter / n_gt
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return 100.0 * precision, 100.0 * recall, 100.0 * f1


def f1_from_percent(precision: float, recall: float) -> float:
    """Harmonic mean of aggregate precision/recall, both in percent."""
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def sdr_sar(estimate, reference, interference) -> tuple[float, float]:
    """Signal-to-distortion and signal-to-artifact ratios in dB.

    Orthogonal decomposition of the estimate with a known interferer:
    s_target is the projection onto the reference, e_interf the projection
    of the remainder onto the component of the interference orthogonal to
    the reference, e_artif the rest. SDR = 10 log10(|s_target|^2 /
    |e_interf + e_artif|^2), SAR = 10 log10(|s_target + e_interf|^2 /
    |e_artif|^2), both clamped to +-100 dB.
    """
    e = _as_signal(estimate)
    r = _as_signal(reference)
    i = _as_signal(interference)
    if e.shape != r.shape or e.shape != i.shape:
        raise InputError(
            f"length mismatch: estimate {e.shape}, reference {r.shape}, interference {i.shape}"
        )
    rr = float(r @ r)
    if rr <= 0.0:
        raise InputError("reference signal is identically zero")

    s_target = (float(e @ r) / rr) * r
    i_perp = i - (float(i @ r) / rr) * r
    ii = float(i_perp @ i_perp)
    if ii > _CONSTANT_EPS * max(1.0, rr):
        e_interf = (float(e @ i_perp) / ii) * i_perp
    else:
        e_interf = np.zeros_like(e)
    e_artif = e - s_target - e_interf

    sdr = _power_ratio_db(s_target, e_interf + e_artif)
    sar = _power_ratio_db(s_target + e_interf, e_artif)
    return sdr, sar


def _as_signal(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"expected a nonempty 1-D signal, got shape {arr.shape}")
    return arr


def _power_ratio_db(signal: np.ndarray, error: np.ndarray) -> float:
    num = float(signal @ signal)
    den = float(error @ error)
    if den <= 0.0:
        return SDR_CAP_DB if num > 0.0 else -SDR_CAP_DB
    if num <= 0.0:
        return -SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -SDR_CAP_DB, SDR_CAP_DB))


def retrieval_accuracy(audio_embs: np.ndarray, visual_embs: np.ndarray) -> float:
    """Top-1 cross-modal retrieval accuracy, averaged over both directions.

    Row i of each input is one sample's embedding; the pairing is by index.
    """
    a = np.asarray(audio_embs, dtype=np.float64)
    v = np.asarray(visual_embs, dtype=np.float64)
    if a.ndim != 2 or v.ndim != 2 or a.shape != v.shape:
        raise InputError(f"expected matching N x D embeddings, got {a.shape} and {v.shape}")
    sim = a @ v.T
    idx = np.arange(a.shape[0])
    acc_av = float(np.mean(np.argmax(sim, axis=1) == idx))
    acc_va = float(np.mean(np.argmax(sim, axis=0) == idx))
    return 100.0 * (acc_av + acc_va) / 2.0


def nn_accuracy(embs, labels, mode: str = "within") -> float:
    """Nearest-neighbor label consistency, as a percentage.

    mode="within": embs is an N x D matrix; each sample's cosine nearest
    neighbor (self excluded) must share its label.
    mode="cross": embs is a pair (audio N x D, visual N x D); each sample
    queries the other modality with its own paired item excluded, and the
    two directions are averaged.
    """
    labels = np.asarray(labels)
    if mode == "within":
        x = np.asarray(embs, dtype=np.float64)
        if x.ndim != 2:
            raise InputError(f"expected N x D embeddings, got shape {x.shape}")
        if x.shape[0] != labels.shape[0]:
            raise InputError("labels and embeddings disagree on N")
        if x.shape[0] < 2:
            raise InputError("need at least 2 samples for nearest-neighbor accuracy")
        sim = x @ x.T
        np.fill_diagonal(sim, -np.inf)
        nn = np.argmax(sim, axis=1)
        return 100.0 * float(np.mean(labels[nn] == labels))
    if mode == "cross":
        a, v = embs
        a = np.asarray(a, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if a.shape != v.shape or a.ndim != 2:
            raise InputError(f"expected matching N x D pairs, got {a.shape} and {v.shape}")
        if a.shape[0] != labels.shape[0]:
            raise InputError("labels and embeddings disagree on N")
        if a.shape[0] < 2:
            raise InputError("need at least 2 samples for nearest-neighbor accuracy")
        sim = a @ v.T
        masked = sim.copy()
        np.fill_diagonal(masked, -np.inf)  # own pair excluded, else it is retrieval
        acc_av = float(np.mean(labels[np.argmax(masked, axis=1)] == labels))
        acc_va = float(np.mean(labels[np.argmax(masked, axis=0)] == labels))
        return 100.0 * (acc_av + acc_va) / 2.0
    raise InputError(f"unknown mode {mode!r}, expected 'within' or 'cross'")


@dataclass
class MetricsReport:
    """One evaluation report covering whichever tasks were requested.

    Fields for tasks that did not run stay None. f1 is always the harmonic
    mean of the aggregate precision/recall. task_errors records tasks that
    were requested but could not run (missing ground truth).
    """

    piap: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    sdr: float | None = None
    sar: float | None = None
    ir_acc: float | None = None
    xnn_acc: float | None = None
    wnn_acc: float | None = None
    n_samples: int = 0
    extras: dict = field(default_factory=dict)
    task_errors: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("piap", "precision", "recall", "f1", "ir_acc", "xnn_acc", "wnn_acc"):
            val = getattr(self, name)
            if val is not None and not (0.0 <= val <= 100.0):
                raise InputError(f"{name}={val} outside [0, 100]")
        if self.precision is not None and self.recall is not None:
            self.f1 = f1_from_percent(self.precision, self.recall)

    def to_json(self) -> str:
        payload = {
            "piap": self.piap, "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "sdr": self.sdr, "sar": self.sar, "ir_acc": self.ir_acc,
            "xnn_acc": self.xnn_acc, "wnn_acc": self.wnn_acc,
            "n_samples": self.n_samples, "extras": self.extras,
            "task_errors": self.task_errors,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(**{k: d.get(k) for k in (
            "piap", "precision", "recall", "f1", "sdr", "sar",
            "ir_acc", "xnn_acc", "wnn_acc")},
            n_samples=d.get("n_samples", 0),
            extras=d.get("extras", {}) or {},
            task_errors=d.get("task_errors", {}) or {})


def write_per_sample_csv(rows: list[dict], path) -> None:
    """Dump per-sample metric rows for plotting; keys become the header."""
    if not rows:
        raise InputError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
