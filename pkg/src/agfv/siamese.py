"""Siamese fine-tuning with contrastive loss and fc6 feature injection.

Both branches share one set of weights.  A pair-level score vector ``d``
(z-scored with statistics frozen on the training fold) is concatenated to
the fc6 activations of *both* branches before fc7; the embedding is the
L2-normalised fc7 output and the pair distance is the Euclidean distance
between the two embeddings, so it lies in [0, 2].

For speed a branch is run in three segments: an optional frozen prefix
whose outputs are computed once per image, the trainable trunk up to fc6
(run once per distinct image in a minibatch), and the head from the
injection point on (run once per pair side).  Gradients flowing back into
the trunk are summed over all pair sides that share an image, which is the
same gradient as running the two full branches separately.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, TrainingDiverged
from .evaluation import DISTANCE, PairSet, best_threshold
from .network import (
    ModelParams,
    NetworkConfig,
    back_layers,
    run_layers,
    sgd_step,
)
from .tensor import DTYPES

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6


def contrastive_loss(D: float, y: int, margin: float = 1.0) -> tuple[float, float]:
    """y*D^2 + (1-y)*max(0, m-D)^2 and its derivative in D."""
    if D < 0:
        raise ValueError(f"distance must be >= 0, got {D}")
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if y == 1:
        return D * D, 2.0 * D
    gap = max(0.0, margin - D)
    return gap * gap, -2.0 * gap


def contrastive_loss_batch(D: np.ndarray, y: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    gap = np.maximum(0.0, margin - D)
    loss = np.where(y == 1, D * D, gap * gap)
    grad = np.where(y == 1, 2.0 * D, -2.0 * gap)
    return loss, grad


@dataclass
class InjectionStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, scores: np.ndarray) -> "InjectionStats":
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] == 0:
            raise DataError("need a non-empty (pairs, providers) score matrix")
        return cls(scores.mean(axis=0), np.maximum(scores.std(axis=0), STD_FLOOR))

    @classmethod
    def empty(cls) -> "InjectionStats":
        return cls(np.zeros(0), np.ones(0))

    @property
    def width(self) -> int:
        return self.mean.size

    def normalize(self, scores: np.ndarray) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape[-1] != self.width:
            raise DimensionError(f"score vector length {scores.shape[-1]} != injected width {self.width}")
        z = (scores - self.mean) / self.std
        if not np.all(np.isfinite(z)):
            raise DataError("non-finite normalised injected score")
        return z


def inject_concat(fc6_act: np.ndarray, d, stats: InjectionStats) -> np.ndarray:
    """[fc6 activations || z-scored d]; works on one vector or a batch."""
    fc6_act = np.asarray(fc6_act)
    scores = getattr(d, "scores", d)
    if stats.width == 0:
        if scores is not None and np.size(scores):
            raise DimensionError("injection is off but scores were given")
        return fc6_act
    z = stats.normalize(scores).astype(fc6_act.dtype, copy=False)
    if fc6_act.ndim == 1:
        return np.concatenate([fc6_act, z])
    return np.concatenate([fc6_act, np.broadcast_to(z, (fc6_act.shape[0], stats.width))], axis=1)


@dataclass
class SiameseConfig:
    network: NetworkConfig  # embedding network (see network.embedding_config)
    margin: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 64
    threshold: float = 1.0
    frozen_until: str | None = None
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if not 0.0 <= self.threshold <= 2.0:
            raise ValueError("threshold must lie in [0, 2]")

    @property
    def inject_width(self) -> int:
        return self.network.inject_width


@dataclass
class Segments:
    frozen: tuple
    trunk: tuple
    head: tuple


def split_layers(cfg: NetworkConfig, frozen_until: str | None = None) -> Segments:
    names = [l.name for l in cfg.layers]
    if cfg.has_layer("inject"):
        cut = names.index("inject")
    elif cfg.has_layer("fc7"):
        cut = names.index("fc7")
    else:
        cut = len(names)
    start = 0 if frozen_until is None else names.index(frozen_until) + 1
    if start > cut:
        raise ValueError(f"cannot freeze past the injection point ({frozen_until})")
    return Segments(cfg.layers[:start], cfg.layers[start:cut], cfg.layers[cut:])


def faces_to_batch(faces: Sequence, dtype=np.float64) -> np.ndarray:
    return np.stack([np.asarray(getattr(f, "pixels", f), dtype=dtype) for f in faces])[:, None]


@dataclass
class SiameseModel:
    config: SiameseConfig
    params: ModelParams
    stats: InjectionStats = field(default_factory=InjectionStats.empty)
    tau: float = 1.0
    provider_ids: tuple[str, ...] = ()


class ImageBank:
    """Distinct images of a pair list, with frozen-prefix features cached."""

    def __init__(self, faces: Sequence, params: ModelParams, segments: Segments, dtype):
        self.index: dict[int, int] = {}
        unique = []
        for f in faces:
            if id(f) not in self.index:
                self.index[id(f)] = len(unique)
                unique.append(f)
        x = faces_to_batch(unique, dtype)
        if segments.frozen:
            chunks = []
            for s in range(0, len(x), 256):
                _, out = run_layers(segments.frozen, params, x[s : s + 256])
                chunks.append(out)
            x = np.concatenate(chunks) if chunks else x
        self.features = x

    def lookup(self, faces: Sequence) -> np.ndarray:
        return np.array([self.index[id(f)] for f in faces], dtype=np.int64)


def _check_input(cfg: NetworkConfig, faces: Sequence) -> None:
    for f in faces[:1]:
        shape = np.shape(getattr(f, "pixels", f))
        if shape != (cfg.input_side, cfg.input_side):
            raise DimensionError(
                f"layer 0 ({cfg.layers[0].name}): expected {cfg.input_side}x{cfg.input_side} face, got {shape}"
            )


def _embed_pairs(segments, params, feats, ia, ib, z, train=False, rng=None):
    """Embeddings of both sides for pairs (ia[k], ib[k]) of rows in ``feats``."""
    uniq, inv = np.unique(np.concatenate([ia, ib]), return_inverse=True)
    trunk_cache, t = run_layers(segments.trunk, params, feats[uniq], train, rng)
    b = len(ia)
    h_in = t[inv]
    inj = None if z is None else np.concatenate([z, z])
    head_cache, e = run_layers(segments.head, params, h_in, train, rng, inj)
    return e[:b], e[b:], (uniq, inv, trunk_cache, head_cache, t.shape)


def pair_loss_and_grads(segments, params, feats, ia, ib, labels, z, margin, train=False, rng=None):
    """Mean contrastive loss of a minibatch and its gradient for every trainable weight."""
    ea, eb, (uniq, inv, trunk_cache, head_cache, t_shape) = _embed_pairs(
        segments, params, feats, ia, ib, z, train, rng
    )
    diff = ea - eb
    D = np.sqrt(np.sum(diff * diff, axis=1))
    losses, dD = contrastive_loss_batch(D.astype(np.float64), labels, margin)
    b = len(ia)
    safe = np.where(D > 0, D, 1.0)
    dea = (dD / b / safe)[:, None] * diff
    dea[D == 0] = 0.0
    de = np.concatenate([dea, -dea]).astype(ea.dtype, copy=False)
    grads, dh = back_layers(segments.head, params, head_cache, de)
    dt = np.zeros(t_shape, dtype=dh.dtype)
    np.add.at(dt, inv, dh)
    grads, _ = back_layers(segments.trunk, params, trunk_cache, dt, grads)
    return float(losses.mean()), grads, D


def pair_distances(
    model: SiameseModel, pairs, scores: np.ndarray | None = None, batch: int = 512
) -> np.ndarray:
    """Eval-mode distances for a list of (face_a, face_b) pairs or a PairSet."""
    recs = [(p.a, p.b) if hasattr(p, "a") else p for p in pairs]
    if not recs:
        return np.zeros(0)
    cfg = model.config.network
    _check_input(cfg, [recs[0][0]])
    z = _normalized_scores(model, scores, len(recs))
    segments = split_layers(cfg)
    dtype = DTYPES[model.params.precision]
    bank = ImageBank([f for r in recs for f in r], model.params, Segments((), (), ()), dtype)
    ia = bank.lookup([r[0] for r in recs])
    ib = bank.lookup([r[1] for r in recs])
    out = np.empty(len(recs))
    for s in range(0, len(recs), batch):
        sl = slice(s, s + batch)
        zz = None if z is None else z[sl]
        ea, eb, _ = _embed_pairs(segments, model.params, bank.features, ia[sl], ib[sl], zz)
        out[sl] = np.linalg.norm(ea - eb, axis=1)
    return out


def _normalized_scores(model: SiameseModel, scores, n: int):
    width = model.config.inject_width
    if width == 0:
        if scores is not None and np.size(scores):
            raise DimensionError("network has no injection layer but scores were given")
        return None
    if scores is None:
        raise DimensionError(f"network injects {width} scores per pair but none were given")
    scores = np.asarray(getattr(scores, "scores", scores), dtype=np.float64).reshape(n, -1)
    return model.stats.normalize(scores).astype(DTYPES[model.params.precision])


def siamese_distance(pair, d, model: SiameseModel) -> float:
    scores = None if d is None else np.asarray(getattr(d, "scores", d), dtype=np.float64)[None]
    return float(pair_distances(model, [pair], scores)[0])


def verify(pair, d, model: SiameseModel) -> tuple[str, float]:
    """('matching' | 'non-matching', D); D == tau counts as matching."""
    D = siamese_distance(pair, d, model)
    return ("matching" if D <= model.tau else "non-matching"), D


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    train_accuracy: float | None = None


def finetune(
    pairs: PairSet,
    scores: np.ndarray | None,
    cfg: SiameseConfig,
    params: ModelParams,
    rng: np.random.Generator,
    provider_ids: Sequence[str] = (),
) -> tuple[SiameseModel, list[EpochLog]]:
    """Minibatch SGD on the contrastive loss, then pick tau on the training pairs.

    ``params`` is copied, never modified.  ``scores`` is the raw (pairs,
    providers) matrix of injected features, or None without injection.
    """
    net = cfg.network
    params = params.copy()
    params.velocity = {}
    params.check(net)
    recs = list(pairs)
    if not recs:
        raise DataError("no training pairs")
    _check_input(net, [recs[0].a])
    labels = np.array([r.label for r in recs], dtype=np.int64)
    width = cfg.inject_width
    if width:
        if scores is None:
            raise DimensionError(f"injection width {width} needs a score matrix")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (len(recs), width):
            raise DimensionError(f"score matrix {scores.shape} != ({len(recs)}, {width})")
        stats = InjectionStats.fit(scores)
    else:
        stats = InjectionStats.empty()
    model = SiameseModel(cfg, params, stats, cfg.threshold, tuple(provider_ids))
    z = _normalized_scores(model, scores if width else None, len(recs))

    segments = split_layers(net, cfg.frozen_until)
    dtype = DTYPES[params.precision]
    bank = ImageBank([f for r in recs for f in (r.a, r.b)], params, segments, dtype)
    ia = bank.lookup([r.a for r in recs])
    ib = bank.lookup([r.b for r in recs])
    frozen = {f"{l.name}.{k}" for l in segments.frozen for k in ("W", "b")}

    history: list[EpochLog] = []
    n = len(recs)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads, _ = pair_loss_and_grads(
                segments, params, bank.features, ia[idx], ib[idx], labels[idx],
                None if z is None else z[idx], cfg.margin, train=True, rng=rng,
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", f"epoch {epoch - 1}")
            for key in frozen:
                grads.pop(key, None)
            if cfg.lr > 0:
                sgd_step(params, grads, cfg.lr, cfg.momentum, cfg.weight_decay)
            total += loss * len(idx)
        entry = EpochLog(epoch, total / n)
        if cfg.target_accuracy is not None:
            D = _train_distances(segments, params, bank.features, ia, ib, z)
            entry.train_accuracy = best_threshold(D, labels, DISTANCE)[1]
        history.append(entry)
        log.info("epoch %d loss %.6f acc %s", epoch, entry.mean_loss, entry.train_accuracy)
        if cfg.target_accuracy is not None and entry.train_accuracy >= cfg.target_accuracy:
            break

    D = _train_distances(segments, params, bank.features, ia, ib, z)
    tau, _ = best_threshold(D, labels, DISTANCE)
    model.params = params
    model.tau = float(np.clip(tau, 0.0, 2.0))
    return model, history


def _train_distances(segments, params, feats, ia, ib, z, batch: int = 512) -> np.ndarray:
    out = np.empty(len(ia))
    for s in range(0, len(ia), batch):
        sl = slice(s, s + batch)
        ea, eb, _ = _embed_pairs(segments, params, feats, ia[sl], ib[sl], None if z is None else z[sl])
        out[sl] = np.linalg.norm(ea - eb, axis=1)
    return out
