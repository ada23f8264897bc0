"""Two-fold verification protocol and metrics.

Labels are 1 for matching and 0 for non-matching pairs.  Scores come with an
orientation: for distances a pair is declared matching when ``score <= t``,
for similarities when ``score >= t``.  Ties always go to "matching".
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Hashable, Mapping, Sequence

import numpy as np

from .errors import DataError, ProtocolError
from .preprocess import AlignedFace, hflip, jitter

DISTANCE = "distance"
SIMILARITY = "similarity"
METRIC_KEYS = ("accuracy", "auc", "confusion", "fold", "method", "seed")


@dataclass(frozen=True)
class FoldSplit:
    assignment: dict[str, int]
    method: str = "alphabetical-alternating"

    def members(self, fold: int) -> list[str]:
        return [name for name, f in self.assignment.items() if f == fold]


def _sort_key(name: str):
    return (name.casefold(), name)


def make_folds(identities: Sequence[str]) -> FoldSplit:
    """Case-insensitive sort, then alternate: even ranks fold 0, odd ranks fold 1."""
    names = list(identities)
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise DataError(f"duplicate identity names: {dup}")
    ordered = sorted(names, key=_sort_key)
    return FoldSplit({name: rank % 2 for rank, name in enumerate(ordered)})


def pair_id(key_a: str, key_b: str) -> str:
    """Canonical unordered pair key, smaller member first."""
    return f"{key_a}|{key_b}" if key_a <= key_b else f"{key_b}|{key_a}"


@dataclass
class PairRecord:
    a: Any
    b: Any
    label: int
    fold: int = 0

    @property
    def pair_id(self) -> str:
        return pair_id(_source(self.a), _source(self.b))


def _source(item) -> str:
    return item.source_id if isinstance(item, AlignedFace) else str(item)


@dataclass
class PairSet:
    pairs: list[PairRecord]
    fold: int = 0
    role: str = "train"
    augmented: bool = False

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs], dtype=np.int64)

    @property
    def n_matching(self) -> int:
        return int(self.labels.sum()) if self.pairs else 0

    @property
    def n_nonmatching(self) -> int:
        return len(self.pairs) - self.n_matching

    def as_role(self, role: str) -> "PairSet":
        return PairSet(self.pairs, self.fold, role, self.augmented)


def gen_pairs(
    images: Mapping[Hashable, Sequence[Any]],
    rng: np.random.Generator,
    fold: int = 0,
    role: str = "train",
) -> PairSet:
    """All within-identity pairs plus as many random cross-identity pairs.

    Non-matching pairs are drawn uniformly without replacement from every
    cross-identity image pair in ``images``.
    """
    matching = []
    for ident, items in images.items():
        if len(items) < 2:
            raise DataError(f"identity {ident!r} has {len(items)} image(s); need >= 2 for matching pairs")
        matching.extend(PairRecord(a, b, 1, fold) for a, b in combinations(items, 2))
    flat = [(ident, item) for ident, items in images.items() for item in items]
    ident_index = {ident: i for i, ident in enumerate(images)}
    owner = np.array([ident_index[ident] for ident, _ in flat])
    ii, jj = np.triu_indices(len(flat), k=1)
    cross = owner[ii] != owner[jj]
    ii, jj = ii[cross], jj[cross]
    if len(ii) < len(matching):
        raise DataError(
            f"only {len(ii)} cross-identity pairs available for {len(matching)} matching pairs"
        )
    pick = np.sort(rng.choice(len(ii), size=len(matching), replace=False))
    nonmatching = [PairRecord(flat[ii[k]][1], flat[jj[k]][1], 0, fold) for k in pick]
    return PairSet(matching + nonmatching, fold, role)


def augment(
    pairs: PairSet,
    enable_flips: bool = True,
    jitter_cfg: Mapping[str, float] | None = None,
    rng: np.random.Generator | None = None,
) -> PairSet:
    """Expand each training pair to the four flip combinations, optionally jittered.

    Flipped images are shared between the pairs that use them; jitter, when
    enabled, is drawn independently for every image occurrence.
    """
    if pairs.role != "train":
        raise ProtocolError("augmentation is only allowed on training pairs")
    if jitter_cfg is not None and rng is None:
        raise ValueError("jitter needs an rng")
    flipped: dict[int, AlignedFace] = {}

    def flip(face):
        key = id(face)
        if key not in flipped:
            flipped[key] = hflip(face)
        return flipped[key]

    def maybe_jitter(face):
        if jitter_cfg is None:
            return face
        return jitter(face, rng, **jitter_cfg)

    out = []
    for rec in pairs.pairs:
        if enable_flips:
            combos = [(rec.a, rec.b), (flip(rec.a), rec.b), (rec.a, flip(rec.b)), (flip(rec.a), flip(rec.b))]
        else:
            combos = [(rec.a, rec.b)]
        for a, b in combos:
            out.append(PairRecord(maybe_jitter(a), maybe_jitter(b), rec.label, rec.fold))
    return PairSet(out, pairs.fold, pairs.role, augmented=enable_flips or jitter_cfg is not None)


# -- metrics ---------------------------------------------------------------


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise DataError(f"length mismatch: {scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise DataError("empty input")
    return scores, labels


def decide(scores, threshold: float, orientation: str = DISTANCE) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if orientation == DISTANCE:
        return (scores <= threshold).astype(np.int64)
    if orientation == SIMILARITY:
        return (scores >= threshold).astype(np.int64)
    raise ValueError(f"bad orientation {orientation!r}")


def accuracy(scores, labels, threshold: float, orientation: str = DISTANCE) -> float:
    scores, labels = _check(scores, labels)
    return float(np.mean(decide(scores, threshold, orientation) == labels))


def best_threshold(scores, labels, orientation: str = DISTANCE) -> tuple[float, float]:
    """Exhaustive sweep over midpoints of the sorted scores (plus both ends).

    Returns ``(threshold, accuracy)``; the first maximizer in sweep order wins.
    """
    scores, labels = _check(scores, labels)
    uniq = np.unique(scores)
    span = max(1.0, float(uniq[-1] - uniq[0]))
    cands = np.concatenate([[uniq[0] - span], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + span]])
    # vectorised count of correct decisions at every candidate
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    pos_le = np.concatenate([[0], np.cumsum(y)])
    idx = np.searchsorted(s, cands, side="right")  # number of scores <= cand
    n, n_pos = len(s), int(y.sum())
    n_neg = n - n_pos
    if orientation == DISTANCE:
        tp = pos_le[idx]
        fp = idx - tp
        correct = tp + (n_neg - fp)
    elif orientation == SIMILARITY:
        idx_lt = np.searchsorted(s, cands, side="left")
        tp = n_pos - pos_le[idx_lt]
        fp = (n - idx_lt) - tp
        correct = tp + (n_neg - fp)
    else:
        raise ValueError(f"bad orientation {orientation!r}")
    k = int(np.argmax(correct))
    return float(cands[k]), float(correct[k] / n)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc(scores, labels, orientation: str = SIMILARITY) -> RocCurve:
    """ROC from every distinct threshold; AUC by the trapezoid rule.

    Tied scores move the curve diagonally, which makes the AUC equal to
    the Mann-Whitney statistic with ties counted one half.
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both matching and non-matching pairs")
    if orientation == DISTANCE:
        keyed = -scores
    elif orientation == SIMILARITY:
        keyed = scores
    else:
        raise ValueError(f"bad orientation {orientation!r}")
    order = np.argsort(-keyed, kind="stable")
    k, y = keyed[order], labels[order]
    last = np.flatnonzero(np.diff(k) != 0)
    ends = np.concatenate([last, [k.size - 1]])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thr_keyed = np.concatenate([[np.inf], k[ends]])
    thresholds = -thr_keyed if orientation == DISTANCE else thr_keyed
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocCurve(fpr, tpr, thresholds, auc)


@dataclass
class ConfusionMatrix:
    """Row-normalised rates; rows are the true class (non-matching, matching)."""

    rates: np.ndarray
    counts: np.ndarray = field(repr=False, default=None)

    def to_list(self) -> list[list[float]]:
        return [[float(v) for v in row] for row in self.rates]


def confusion(decisions, labels) -> ConfusionMatrix:
    decisions = np.asarray(decisions).ravel().astype(np.int64)
    labels = np.asarray(labels).ravel().astype(np.int64)
    if decisions.shape != labels.shape:
        raise DataError(f"length mismatch: {decisions.size} decisions vs {labels.size} labels")
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (labels, decisions), 1)
    rows = counts.sum(axis=1)
    if np.any(rows == 0):
        missing = "non-matching" if rows[0] == 0 else "matching"
        raise DataError(f"confusion matrix needs both classes; no {missing} pairs")
    return ConfusionMatrix(counts / rows[:, None], counts)


# -- reports ---------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    auc: float
    confusion: ConfusionMatrix
    threshold: float
    roc: RocCurve


def fold_result(test_scores, test_labels, threshold: float, orientation: str, fold: int) -> FoldResult:
    curve = roc(test_scores, test_labels, orientation)
    return FoldResult(
        fold=fold,
        accuracy=accuracy(test_scores, test_labels, threshold, orientation),
        auc=curve.auc,
        confusion=confusion(decide(test_scores, threshold, orientation), test_labels),
        threshold=threshold,
        roc=curve,
    )


def metric_records(results: Sequence[FoldResult], method: str, seed: int) -> list[dict]:
    """One record per fold plus a 'mean' record, each with exactly METRIC_KEYS."""
    records = [
        {
            "accuracy": r.accuracy,
            "auc": r.auc,
            "confusion": r.confusion.to_list(),
            "fold": r.fold,
            "method": method,
            "seed": seed,
        }
        for r in results
    ]
    if len(results) > 1:
        records.append(
            {
                "accuracy": float(np.mean([r.accuracy for r in results])),
                "auc": float(np.mean([r.auc for r in results])),
                "confusion": np.mean([r.confusion.rates for r in results], axis=0).tolist(),
                "fold": "mean",
                "method": method,
                "seed": seed,
            }
        )
    return records


def dumps_metrics(records) -> str:
    return json.dumps(records, indent=2, sort_keys=True) + "\n"


def write_metrics_json(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_metrics(records))


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            w.writerow([repr(float(f)), repr(float(t)), repr(float(th))])
