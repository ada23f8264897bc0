"""Command line entry point: ``agfv <command> [flags]``.

Every command writes ``run.json`` into its output directory with the
resolved configuration, the seed, the argv needed to replay it and sha256
hashes of its inputs and outputs.  Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset_io import (
    Checkpoint,
    Manifest,
    ManifestRecord,
    file_digest,
    load_checkpoint,
    load_external_scores,
    load_images,
    load_manifest,
    save_checkpoint,
    save_manifest,
    synth_generate,
    write_dataset,
    write_pgm,
)
from .errors import AgfvError, DataError, NumericalError, UsageError
from .evaluation import (
    DISTANCE,
    SIMILARITY,
    augment,
    best_threshold,
    dumps_metrics,
    fold_result,
    metric_records,
    roc,
    write_roc_csv,
)
from .network import embedding_config, preset, transfer_params
from .pipeline import (
    BenchmarkConfig,
    FeatureCache,
    protocol_pairs,
    provider_scores,
    run_benchmark,
    trunk_end,
)
from .preprocess import AlignedFace, align, canonical_eyes
from .pretrain import PretrainConfig, pretrain
from .siamese import InjectionStats, SiameseConfig, SiameseModel, finetune, pair_distances
from .similarity import BUILTINS, ProviderRegistry, parse_feature_string
from .stacking import stack
from .tensor import make_rng

log = logging.getLogger("agfv")

PRESET_SIDES = {"desk32": 32, "paper200": 200}


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- shared helpers --------------------------------------------------------


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    return out


def _write_run(out: Path, args, argv, inputs=(), extra=None) -> None:
    """run.json: resolved flags, seed, argv and hashes of every file produced or read."""
    config = {k: v for k, v in vars(args).items() if k != "func"}
    artifacts = {
        str(p.relative_to(out)): file_digest(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "run.json"
    }
    run = {
        "argv": list(argv),
        "artifacts": artifacts,
        "command": args.command,
        "config": config,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }
    if extra:
        run.update(extra)
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True, default=str) + "\n")


def _faces(manifest: Manifest, side: int) -> dict[str, list[AlignedFace]]:
    images = load_images(manifest)
    faces: dict[str, list[AlignedFace]] = {}
    for rec, img in zip(manifest, images):
        faces.setdefault(rec.id, []).append(align(img, rec.eyes, side))
    return faces


def _protocol_rngs(seed: int):
    pair_rng, aug_rng, train_rng, init_rng = make_rng(seed).spawn(4)
    return pair_rng, aug_rng, train_rng, init_rng


def _registry(score_files, pair_ids) -> ProviderRegistry:
    reg = ProviderRegistry()
    for path in score_files or ():
        reg.register(load_external_scores(path, pair_ids))
    return reg


def _siamese_from_checkpoint(ck: Checkpoint) -> SiameseModel:
    meta = ck.meta
    cfg = SiameseConfig(network=ck.network, margin=meta.get("margin", 1.0))
    if ck.stats_mean is not None:
        stats = InjectionStats(ck.stats_mean, ck.stats_std)
    else:
        stats = InjectionStats.empty()
    return SiameseModel(cfg, ck.params, stats, ck.tau if ck.tau is not None else 1.0, tuple(meta.get("providers", ())))


def _resolve_frozen(flag: str, net) -> str | None:
    if flag == "none":
        return None
    if flag == "trunk":
        return trunk_end(net)
    if not net.has_layer(flag):
        raise UsageError(f"--frozen-until: no layer named {flag!r}")
    return flag


def _provider_matrix(ids, reg, cache, pairs, siamese_model=None):
    """(pairs, providers) scores; 'siamese' comes from a plain Siamese checkpoint."""
    cols = []
    for pid in ids:
        if pid == "siamese":
            if siamese_model is None:
                raise UsageError("provider 15 (siamese) needs --siamese CHECKPOINT")
            cols.append(pair_distances(siamese_model, pairs))
        else:
            cols.append(provider_scores(cache, pairs, [pid], reg)[:, 0])
    return np.column_stack(cols) if cols else np.zeros((len(pairs), 0))


def _orientation(pid, reg):
    return DISTANCE if pid == "siamese" else reg.orientation(pid)


def _check_known(ids, reg):
    for pid in ids:
        if pid != "siamese" and pid not in reg:
            raise UsageError(f"unknown provider {pid!r}; known: {reg.known()} (ext ids need --scores files)")


# -- commands --------------------------------------------------------------


def cmd_synth_gen(args, argv) -> int:
    if not 0.0 <= args.gamma <= 1.0:
        raise UsageError(f"--gamma must lie in [0, 1], got {args.gamma}")
    if args.n < 1 or args.k < 1:
        raise UsageError("--n and --k must be >= 1")
    out = _out_dir(args.out)
    samples = synth_generate(args.n, args.k, args.gamma, make_rng(args.seed))
    write_dataset(out, samples)
    _write_run(out, args, argv)
    print(f"wrote {len(samples)} records to {out / 'manifest.jsonl'}")
    return 0


def cmd_preprocess(args, argv) -> int:
    manifest = load_manifest(args.manifest)
    side = args.side or PRESET_SIDES[args.preset]
    out = _out_dir(args.out)
    target = canonical_eyes(side)
    records, failures = [], []
    images = load_images(manifest)
    for rec, img in zip(manifest, images):
        try:
            face = align(img, rec.eyes, side)
        except AgfvError as exc:
            failures.append({"image": rec.image_key, "error": str(exc)})
            continue
        rel = Path(rec.id) / (Path(rec.path).stem + ".pgm")
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_pgm(out / rel, face.pixels)
        records.append(ManifestRecord(rec.id, rel.as_posix(), target, rec.age))
    save_manifest(out / "manifest.jsonl", records)
    if failures:
        (out / "errors.json").write_text(json.dumps(failures, indent=2) + "\n")
    _write_run(out, args, argv, [Path(args.manifest)], {"failures": len(failures)})
    for f in failures:
        print(f"alignment failed: {f['image']}: {f['error']}", file=sys.stderr)
    print(f"aligned {len(records)} of {len(manifest)} images into {out}")
    return DataError.exit_code if failures else 0


def cmd_pretrain(args, argv) -> int:
    manifest = load_manifest(args.manifest)
    ids = manifest.identities()
    if len(ids) < 2:
        raise UsageError(f"pretraining needs at least 2 identities, manifest has {len(ids)}")
    side = PRESET_SIDES[args.preset]
    faces = _faces(manifest, side)
    x = np.stack([f.pixels for name in ids for f in faces[name]])[:, None]
    labels = np.array([i for i, name in enumerate(ids) for _ in faces[name]])
    net = preset(args.preset, num_classes=len(ids))
    hp = PretrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size)
    params, history = pretrain(x, labels, net, hp, make_rng(args.seed), precision=args.precision)
    out = _out_dir(args.out)
    meta = {"kind": "classifier", "identities": ids, "history": history}
    save_checkpoint(Checkpoint(net, params, args.seed, meta=meta), out / "pretrain.agfv")
    _write_run(out, args, argv, [Path(args.manifest)])
    last = history[-1]
    print(f"epoch {last['epoch']}: loss {last['loss']:.6f} top-1 {last['train_accuracy']:.4f}")
    return 0


def cmd_finetune(args, argv) -> int:
    if args.fold not in (0, 1):
        raise UsageError("--fold must be 0 or 1")
    ids = [] if args.inject == "off" else parse_feature_string(args.providers)
    base = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    faces = _faces(manifest, base.network.input_side)
    pair_rng, aug_rng, train_rng, init_rng = _protocol_rngs(args.seed)
    _, pairsets = protocol_pairs(faces, pair_rng)
    train = pairsets[args.fold]
    train_aug = augment(train, True, None, aug_rng) if args.flips else train
    reg = _registry(args.scores, [p.pair_id for p in train])
    _check_known(ids, reg)
    sia = _siamese_from_checkpoint(load_checkpoint(args.siamese)) if args.siamese else None

    emb = embedding_config(base.network, len(ids))
    cfg = SiameseConfig(
        network=emb,
        margin=args.margin,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        frozen_until=_resolve_frozen(args.frozen_until, emb),
    )
    scores = None
    if ids:
        cache = FeatureCache(base.network, base.params)
        scores = _provider_matrix(ids, reg, cache, train_aug, sia)
    init = transfer_params(base.params, emb, args.inject_init if ids else 0.0, init_rng)
    model, history = finetune(train_aug, scores, cfg, init, train_rng, ids)

    out = _out_dir(args.out)
    meta = {
        "kind": "siamese",
        "providers": ids,
        "feature_string": args.providers if ids else "",
        "train_fold": args.fold,
        "margin": args.margin,
        "history": [asdict(h) for h in history],
    }
    save_checkpoint(
        Checkpoint(emb, model.params, args.seed, model.stats.mean if ids else None,
                   model.stats.std if ids else None, model.tau, meta),
        out / "siamese.agfv",
    )
    inputs = [Path(args.manifest), Path(args.checkpoint)] + [Path(p) for p in args.scores or ()]
    _write_run(out, args, argv, inputs, {"providers": ids})
    for h in history:
        print(f"epoch {h.epoch}: loss {h.mean_loss:.6f}")
    print(f"tau {model.tau:.6f}")
    return 0


def _method_scores(args, method, test_fold, pairsets, reg, cache, models, sia):
    """Test scores, threshold and orientation for one test fold."""
    train, test = pairsets[1 - test_fold], pairsets[test_fold]
    if method == "siamese":
        model = models.get(1 - test_fold)
        if model is None:
            return None
        ids = list(model.provider_ids)
        z = _provider_matrix(ids, reg, cache, test, sia) if ids else None
        return pair_distances(model, test, z), model.tau, DISTANCE
    if method == "stacking":
        ids = parse_feature_string(args.providers)
        if not ids:
            raise UsageError("stacking needs --providers")
        _check_known(ids, reg)
        tr = _provider_matrix(ids, reg, cache, train, sia)
        te = _provider_matrix(ids, reg, cache, test, sia)
        fused, _ = stack(
            ids,
            {p: tr[:, j] for j, p in enumerate(ids)},
            train.labels,
            {p: te[:, j] for j, p in enumerate(ids)},
            {p: _orientation(p, reg) for p in ids},
        )
        return fused, 0.0, SIMILARITY
    _check_known([method], reg)
    orient = _orientation(method, reg)
    tr = _provider_matrix([method], reg, cache, train, sia)[:, 0]
    te = _provider_matrix([method], reg, cache, test, sia)[:, 0]
    tau, _ = best_threshold(tr, train.labels, orient)
    return te, tau, orient


def cmd_eval(args, argv) -> int:
    method = args.method
    if method not in ("siamese", "stacking"):
        method = (parse_feature_string(method) or [""])[0]
    manifest = load_manifest(args.manifest)
    cks = [load_checkpoint(p) for p in args.checkpoint]
    bases = [c for c in cks if c.meta.get("kind") != "siamese"]
    models = {}
    for c in cks:
        if c.meta.get("kind") == "siamese":
            models[int(c.meta.get("train_fold", 0))] = _siamese_from_checkpoint(c)
    if method == "siamese" and not models:
        raise UsageError("method siamese needs a Siamese --checkpoint")
    base = bases[0] if bases else None
    side = cks[0].network.input_side if cks else PRESET_SIDES[args.preset]
    faces = _faces(manifest, side)
    pair_rng, *_ = _protocol_rngs(args.seed)
    _, pairsets = protocol_pairs(faces, pair_rng)
    pairsets = [p.as_role("test") for p in pairsets]
    reg = _registry(args.scores, [p.pair_id for ps in pairsets for p in ps])
    if method == "siamese":
        used = [p for m in models.values() for p in m.provider_ids]
    elif method == "stacking":
        used = parse_feature_string(args.providers)
    else:
        used = [method]
    if any(p in BUILTINS for p in used) and base is None:
        raise UsageError("embedding-based scores need the pretrained --checkpoint")
    cache = FeatureCache(base.network, base.params) if base is not None else None
    sia = _siamese_from_checkpoint(load_checkpoint(args.siamese)) if args.siamese else None

    folds = [args.fold] if args.fold is not None else [0, 1]
    out = _out_dir(args.out)
    results = []
    for f in folds:
        got = _method_scores(args, method, f, pairsets, reg, cache, models, sia)
        if got is None:
            continue
        scores, tau, orient = got
        labels = pairsets[f].labels
        res = fold_result(scores, labels, tau, orient, f)
        results.append(res)
        write_roc_csv(out / f"roc_fold{f}.csv", res.roc)
        with open(out / f"scores_fold{f}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair_id", "label", "score"])
            for p, s in zip(pairsets[f], scores):
                w.writerow([p.pair_id, p.label, repr(float(s))])
    if not results:
        raise UsageError("no checkpoint matches the requested fold(s)")
    records = metric_records(results, method, args.seed)
    (out / "metrics.json").write_text(dumps_metrics(records))
    inputs = [Path(args.manifest)] + [Path(p) for p in args.checkpoint] + [Path(p) for p in args.scores or ()]
    _write_run(out, args, argv, inputs)
    for r in records:
        print(f"fold {r['fold']}: accuracy {r['accuracy']:.4f} auc {r['auc']:.4f}")
    return 0


def cmd_roc_export(args, argv) -> int:
    path = Path(args.scores)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows or set(rows[0]) != {"pair_id", "label", "score"}:
        raise DataError(f"{path}: expected header pair_id,label,score")
    try:
        labels = np.array([int(r["label"]) for r in rows])
        scores = np.array([float(r["score"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    curve = roc(scores, labels, args.orientation)
    out = _out_dir(args.out)
    write_roc_csv(out / "roc.csv", curve)
    _write_run(out, args, argv, [path], {"auc": curve.auc})
    print(f"auc {curve.auc:.6f} ({len(curve.fpr)} points)")
    return 0


def cmd_benchmark(args, argv) -> int:
    seeds = tuple(int(s) for s in args.seeds.split(","))
    cfg = BenchmarkConfig(gamma=args.gamma, seeds=seeds, pretrain_seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.lr is not None:
        cfg = replace(cfg, lr=args.lr)
    if args.margin is not None:
        cfg = replace(cfg, margin=args.margin)
    if args.inject == "off":
        cfg = replace(cfg, inject=False)
    result = run_benchmark(cfg)
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(dumps_metrics(result["records"]))
    summary = {"mean": result["mean"], "per_seed": {str(k): v for k, v in result["per_seed"].items()}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_run(out, args, argv, extra={"benchmark": cfg.to_dict()})
    for method, acc in result["mean"].items():
        print(f"{method:45s} {acc:.4f}")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="agfv", description="Age-gap face verification with Siamese feature injection.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth-gen", help="generate a synthetic age-gap dataset")
    s.add_argument("--n", type=int, default=20, help="identities")
    s.add_argument("--k", type=int, default=8, help="images per identity")
    s.add_argument("--gamma", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("preprocess", help="align faces to the canonical eye geometry")
    s.add_argument("--manifest", required=True)
    s.add_argument("--preset", choices=sorted(PRESET_SIDES), default="desk32")
    s.add_argument("--side", type=int, default=None, help="override the preset's input side")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("pretrain", help="identity classification pretraining")
    s.add_argument("--manifest", required=True)
    s.add_argument("--preset", choices=sorted(PRESET_SIDES), default="desk32")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=0.02)
    s.add_argument("--epochs", type=int, default=25)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--precision", choices=("float64", "float32"), default="float32")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="Siamese fine-tuning, optionally with feature injection")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True, help="pretrained classifier checkpoint")
    s.add_argument("--providers", default="1+2+3+6", help="feature set, e.g. 1+2+3+6")
    s.add_argument("--inject", choices=("on", "off"), default="on")
    s.add_argument("--scores", action="append", help="external score file (pair_id,score); repeatable")
    s.add_argument("--siamese", help="plain Siamese checkpoint used as provider 15")
    s.add_argument("--fold", type=int, default=0, help="training fold")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--weight-decay", type=float, default=5e-4)
    s.add_argument("--epochs", type=int, default=6)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--frozen-until", default="trunk", help="'trunk', 'none' or a layer name")
    s.add_argument("--inject-init", type=float, default=2.0, help="uniform init bound of injected fc7 rows")
    s.add_argument("--no-flips", dest="flips", action="store_false")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="two-fold metrics for a method")
    s.add_argument("--manifest", required=True)
    s.add_argument("--method", required=True, help="provider id (e.g. 1, euclid), 'siamese' or 'stacking'")
    s.add_argument("--checkpoint", action="append", default=[],
                   help="pretrained and/or Siamese checkpoints (one Siamese per training fold)")
    s.add_argument("--preset", choices=sorted(PRESET_SIDES), default="desk32",
                   help="input side when no checkpoint is given")
    s.add_argument("--providers", default="1+2+3+6", help="feature set for stacking")
    s.add_argument("--scores", action="append")
    s.add_argument("--siamese", help="plain Siamese checkpoint used as provider 15")
    s.add_argument("--fold", type=int, choices=(0, 1), default=None, help="single test fold")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("roc-export", help="ROC CSV from a pair_id,label,score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--orientation", choices=(DISTANCE, SIMILARITY), default=DISTANCE)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_roc_export)

    s = sub.add_parser("benchmark", help="seeded synthetic method comparison")
    s.add_argument("--seeds", default="1,2,3")
    s.add_argument("--seed", type=int, default=0, help="pretraining seed")
    s.add_argument("--gamma", type=float, default=0.7)
    s.add_argument("--preset", choices=("desk32",), default="desk32")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--margin", type=float, default=None)
    s.add_argument("--inject", choices=("on", "off"), default="on",
                   help="off skips the injected Siamese model")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)
    return p


def _thread_limit():
    value = os.environ.get("AGFV_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"AGFV_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"AGFV_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s"
        )
        with _thread_limit():
            return args.func(args, argv)
    except AgfvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
