"""Identity-classification pretraining of the embedding network."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import TrainingDiverged, UsageError
from .network import ModelParams, NetworkConfig, backward, forward, init_params, sgd_step, softmax_xent_loss

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 32
    target_accuracy: float | None = None


def classify(cfg: NetworkConfig, params: ModelParams, x: np.ndarray, batch: int = 256) -> np.ndarray:
    preds = []
    for s in range(0, len(x), batch):
        _, logits = forward(cfg, params, x[s : s + batch])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def pretrain(
    x: np.ndarray,
    labels: np.ndarray,
    net: NetworkConfig,
    hp: PretrainConfig,
    rng: np.random.Generator,
    params: ModelParams | None = None,
    precision: str = "float64",
) -> tuple[ModelParams, list[dict]]:
    """Softmax cross-entropy training; returns params and a per-epoch log."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = net.output_shape[0]
    if len(np.unique(labels)) < 2:
        raise UsageError("pretraining needs at least 2 identities")
    if labels.max() >= n_classes:
        raise UsageError(f"{labels.max() + 1} identities but the classifier head has {n_classes} outputs")
    if params is None:
        params = init_params(net, rng, precision)
    history = []
    n = len(x)
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, hp.batch_size):
            idx = order[s : s + hp.batch_size]
            caches, logits = forward(net, params, x[idx], train=True, rng=rng)
            loss, grad = softmax_xent_loss(logits, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", f"epoch {epoch - 1}")
            grads, _ = backward(net, params, caches, grad.astype(logits.dtype))
            sgd_step(params, grads, hp.lr, hp.momentum, hp.weight_decay)
            total += loss * len(idx)
        acc = float(np.mean(classify(net, params, x) == labels))
        history.append({"epoch": epoch, "loss": total / n, "train_accuracy": acc})
        log.info("pretrain epoch %d loss %.5f top-1 %.4f", epoch, total / n, acc)
        if hp.target_accuracy is not None and acc >= hp.target_accuracy:
            break
    return params, history
