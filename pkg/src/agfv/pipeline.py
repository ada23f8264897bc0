"""End-to-end desk-scale experiment: synthetic data, pretraining, baselines,
stacking and Siamese fine-tuning with and without injection, under the
two-fold identity-disjoint protocol.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset_io import SynthConfig, SynthSample, synth_generate
from .evaluation import (
    DISTANCE,
    SIMILARITY,
    FoldResult,
    FoldSplit,
    PairSet,
    augment,
    best_threshold,
    fold_result,
    gen_pairs,
    make_folds,
    metric_records,
)
from .network import (
    ModelParams,
    NetworkConfig,
    desk32,
    embedding_config,
    forward,
    transfer_params,
)
from .preprocess import AlignedFace, align
from .pretrain import PretrainConfig, pretrain
from .siamese import SiameseConfig, finetune, pair_distances
from .similarity import BUILTINS, ProviderRegistry, score_matrix
from .stacking import stack
from .tensor import make_rng

log = logging.getLogger(__name__)

DEFAULT_PROVIDERS = ("euclid", "l2euclid", "hellinger", "cosine")


def align_samples(samples: Sequence[SynthSample], side: int) -> dict[str, list[AlignedFace]]:
    faces: dict[str, list[AlignedFace]] = {}
    for s in samples:
        faces.setdefault(s.record.id, []).append(align(s.image, s.record.eyes, side))
    return faces


def protocol_pairs(faces: dict[str, list[AlignedFace]], rng: np.random.Generator) -> tuple[FoldSplit, list[PairSet]]:
    """Identity folds and the pair set of each fold (fold 0 drawn first)."""
    split = make_folds(list(faces))
    return split, [gen_pairs({name: faces[name] for name in split.members(f)}, rng, fold=f) for f in (0, 1)]


def trunk_end(cfg: NetworkConfig) -> str:
    """Name of the last layer before fc6: freezing up to here keeps only the FC head trainable."""
    names = [l.name for l in cfg.layers]
    return names[names.index("fc6") - 1]


def feature_config(cfg: NetworkConfig) -> NetworkConfig:
    """Classifier truncated after relu7: the fc7 representation."""
    names = [l.name for l in cfg.layers]
    return replace(cfg, layers=cfg.layers[: names.index("relu7") + 1])


class FeatureCache:
    """fc7 features of a pretrained network, computed once per face object."""

    def __init__(self, cfg: NetworkConfig, params: ModelParams):
        self.cfg = feature_config(cfg)
        self.params = params
        self._rows: dict[int, np.ndarray] = {}

    def add(self, faces: Sequence[AlignedFace]) -> None:
        todo = list({id(f): f for f in faces if id(f) not in self._rows}.values())
        for s in range(0, len(todo), 256):
            chunk = todo[s : s + 256]
            x = np.stack([f.pixels for f in chunk])[:, None]
            _, out = forward(self.cfg, self.params, x)
            for f, row in zip(chunk, out):
                self._rows[id(f)] = row.astype(np.float64)

    def __getitem__(self, face) -> np.ndarray:
        return self._rows[id(face)]

    def pair_features(self, pairs: PairSet) -> tuple[np.ndarray, np.ndarray]:
        self.add([f for p in pairs for f in (p.a, p.b)])
        return np.array([self[p.a] for p in pairs]), np.array([self[p.b] for p in pairs])


def provider_scores(cache: FeatureCache, pairs: PairSet, provider_ids: Sequence[str], registry=None) -> np.ndarray:
    registry = registry or ProviderRegistry()
    if not len(pairs):
        return np.zeros((0, len(provider_ids)))
    providers = [registry.get(p) for p in provider_ids]
    if all(p.id not in BUILTINS for p in providers):
        # table providers look scores up by pair id and never touch embeddings
        fa = fb = [None] * len(pairs)
    else:
        fa, fb = cache.pair_features(pairs)
    return score_matrix(fa, fb, providers, [p.pair_id for p in pairs])


@dataclass
class BenchmarkConfig:
    n_identities: int = 40
    images_per_identity: int = 8
    gamma: float = 0.7
    seeds: tuple[int, ...] = (1, 2, 3)
    side: int = 32
    precision: str = "float32"
    providers: tuple[str, ...] = DEFAULT_PROVIDERS
    # stand-in for the large recognition set: disjoint synthetic identities, no age gap
    pretrain_identities: int = 60
    pretrain_images: int = 10
    pretrain_gamma: float = 0.0
    pretrain_seed: int = 0
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(lr=0.02, epochs=25, batch_size=32))
    margin: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 6
    batch_size: int = 64
    flips: bool = True
    jitter: dict | None = None
    # conv trunk stays at its pretrained values; its features are cached once
    frozen_until: str | None = "relu3"
    inject: bool = True
    inject_init: float = 2.0
    svm_lambda: float = 1e-2
    svm_epochs: int = 500
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainedNet:
    config: NetworkConfig
    params: ModelParams
    history: list


def pretrain_backbone(cfg: BenchmarkConfig) -> PretrainedNet:
    rng = make_rng(cfg.pretrain_seed)
    samples = synth_generate(
        cfg.pretrain_identities, cfg.pretrain_images, cfg.pretrain_gamma, rng, cfg.synth, prefix="p"
    )
    faces = align_samples(samples, cfg.side)
    x = np.stack([f.pixels for fs in faces.values() for f in fs])[:, None]
    labels = np.array([i for i, fs in enumerate(faces.values()) for _ in fs])
    net = desk32(num_classes=len(faces))
    params, history = pretrain(x, labels, net, cfg.pretrain, rng, precision=cfg.precision)
    return PretrainedNet(net, params, history)


def siamese_config(base: NetworkConfig, cfg: BenchmarkConfig, inject_width: int) -> SiameseConfig:
    return SiameseConfig(
        network=embedding_config(base, inject_width),
        margin=cfg.margin,
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        frozen_until=cfg.frozen_until,
    )


@dataclass
class MethodResult:
    method: str
    folds: list[FoldResult]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))


def run_seed(cfg: BenchmarkConfig, backbone: PretrainedNet, seed: int) -> dict[str, MethodResult]:
    rng = make_rng(seed)
    data_rng, pair_rng, aug_rng, train_rng, init_rng = rng.spawn(5)
    samples = synth_generate(cfg.n_identities, cfg.images_per_identity, cfg.gamma, data_rng, cfg.synth)
    faces = align_samples(samples, cfg.side)
    _, pairsets = protocol_pairs(faces, pair_rng)
    registry = ProviderRegistry()
    cache = FeatureCache(backbone.config, backbone.params)
    results: dict[str, MethodResult] = {}

    def record(method, fold_res):
        results.setdefault(method, MethodResult(method, [])).folds.append(fold_res)

    for train_fold in (0, 1):
        test_fold = 1 - train_fold
        train = pairsets[train_fold]
        test = pairsets[test_fold].as_role("test")
        train_aug = augment(train, cfg.flips, cfg.jitter, aug_rng) if (cfg.flips or cfg.jitter) else train
        ytr, yte = train.labels, test.labels

        d_train = provider_scores(cache, train, cfg.providers, registry)
        d_test = provider_scores(cache, test, cfg.providers, registry)
        for j, pid in enumerate(cfg.providers):
            orient = registry.orientation(pid)
            tau, _ = best_threshold(d_train[:, j], ytr, orient)
            record(pid, fold_result(d_test[:, j], yte, tau, orient, test_fold))

        ids = list(cfg.providers)
        fused, _ = stack(
            ids,
            {p: d_train[:, j] for j, p in enumerate(ids)},
            ytr,
            {p: d_test[:, j] for j, p in enumerate(ids)},
            {p: registry.orientation(p) for p in ids},
            cfg.svm_lambda,
            cfg.svm_epochs,
        )
        record("stacking:" + "+".join(ids), fold_result(fused, yte, 0.0, SIMILARITY, test_fold))

        base = transfer_params(backbone.params, embedding_config(backbone.config, 0))
        t0 = time.perf_counter()
        plain, _ = finetune(train_aug, None, siamese_config(backbone.config, cfg, 0), base, train_rng)
        D = pair_distances(plain, test)
        record("siamese", fold_result(D, yte, plain.tau, DISTANCE, test_fold))
        t1 = time.perf_counter()
        if not cfg.inject:
            log.info("seed %d fold %d: plain %.1fs", seed, test_fold, t1 - t0)
            continue

        n = len(cfg.providers)
        d_aug = provider_scores(cache, train_aug, cfg.providers, registry)
        inj_cfg = siamese_config(backbone.config, cfg, n)
        inj_base = transfer_params(backbone.params, inj_cfg.network, cfg.inject_init, init_rng)
        injected, _ = finetune(train_aug, d_aug, inj_cfg, inj_base, train_rng, cfg.providers)
        D = pair_distances(injected, test, d_test)
        record("siamese+injection", fold_result(D, yte, injected.tau, DISTANCE, test_fold))
        t2 = time.perf_counter()
        log.info("seed %d fold %d: plain %.1fs, injected %.1fs", seed, test_fold, t1 - t0, t2 - t1)
    return results


def run_benchmark(cfg: BenchmarkConfig, backbone: PretrainedNet | None = None) -> dict:
    """Mean two-fold accuracies per method and seed plus the metric records."""
    if backbone is None:
        backbone = pretrain_backbone(cfg)
    per_seed = {}
    records = []
    for seed in cfg.seeds:
        res = run_seed(cfg, backbone, seed)
        per_seed[seed] = {m: r.mean_accuracy for m, r in res.items()}
        for m, r in res.items():
            records.extend(metric_records(r.folds, m, seed))
    methods = list(next(iter(per_seed.values())))
    mean = {m: float(np.mean([per_seed[s][m] for s in cfg.seeds])) for m in methods}
    return {"per_seed": per_seed, "mean": mean, "records": records, "pretrain": backbone.history}
