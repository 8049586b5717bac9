"""Command-line front end: prepare / train-gan / generate / pretrain /
finetune / eval / sweep.

Each command reads an optional JSON config file (keys mirror the flag names;
unknown keys are rejected), applies flag overrides, and echoes the effective
configuration into the run directory. Artifacts land under
runs/<name>/{config.echo, checkpoints/, reports/, logs/}. Outputs carry no
timestamps, so identical seed and config reproduce identical bytes.

The CISL_THREADS environment variable caps math-library worker threads and
is recorded in run metadata.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_threads = os.environ.get("CISL_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import numpy as np  # noqa: E402  (thread caps must precede the import)

from . import data as D  # noqa: E402
from . import evaluate as E  # noqa: E402
from . import train as T  # noqa: E402
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa: E402
from .util import spawn_rng  # noqa: E402


class CliError(SystemExit):
    def __init__(self, message):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(2)


def _require(path, role):
    if not Path(path).is_file():
        raise CliError(f"missing {role}: expected file at {path}")
    return str(path)


def _run_dir(name):
    root = Path("runs") / name
    for sub in ("checkpoints", "reports", "logs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def _echo_config(root: Path, args: argparse.Namespace):
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    payload["cisl_threads"] = T.thread_count()
    (root / "config.echo").write_text(json.dumps(payload, sort_keys=True, indent=2,
                                                 default=str) + "\n", encoding="utf-8")


def records_to_checkpoint(records) -> Checkpoint:
    """Patch cache: the checkpoint container reused for record tensors."""
    if records:
        pixels = np.concatenate([r.pixels for r in records], axis=0).astype(np.float32)
    else:
        pixels = np.zeros((0, 1, 64, 64), dtype=np.float32)
    labels = np.array([r.label for r in records], dtype=np.float32)
    folds = np.array([-1 if r.fold is None else r.fold for r in records], dtype=np.float32)
    stats = np.array([r.source_stats for r in records], dtype=np.float32)
    meta = {
        "kind": "patch-cache",
        "record_ids": [r.record_id for r in records],
        "provenance": [r.provenance for r in records],
        "patient_ids": [r.patient_id for r in records],
    }
    return Checkpoint.from_named(
        {"cache": {"pixels": pixels, "labels": labels, "folds": folds, "stats": stats}},
        meta)


def records_from_checkpoint(ckpt: Checkpoint):
    if ckpt.metadata.get("kind") != "patch-cache":
        raise CliError("checkpoint is not a patch cache")
    g = ckpt.group("cache")
    pixels, labels = g["pixels"], g["labels"].astype(np.int64)
    folds, stats = g["folds"].astype(np.int64), g["stats"]
    ids = ckpt.metadata["record_ids"]
    provs = ckpt.metadata["provenance"]
    patients = ckpt.metadata["patient_ids"]
    out = []
    for i in range(len(labels)):
        out.append(D.PatchRecord(
            pixels=pixels[i:i + 1].copy(),
            label=int(labels[i]),
            provenance=provs[i],
            fold=None if folds[i] < 0 else int(folds[i]),
            source_stats=(float(stats[i, 0]), float(stats[i, 1])),
            record_id=ids[i],
            patient_id=patients[i],
        ))
    return out


def _load_cache(path):
    return records_from_checkpoint(load_checkpoint(_require(path, "patch cache")))


def _train_folds(records, holdout):
    train = [r for r in records if r.fold is not None and r.fold != holdout]
    if not train:
        raise CliError(f"no training records outside fold {holdout}")
    return train


def _parse_synthetic(spec):
    try:
        c, n = spec.lower().split("x")
        return int(c), int(n)
    except ValueError as exc:
        raise CliError(f"--synthetic expects CxN (e.g. 9x30), got {spec!r}") from exc


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(args):
    root = _run_dir(args.run)
    _echo_config(root, args)
    if args.synthetic:
        classes, per_class = _parse_synthetic(args.synthetic)
        records = D.make_synthetic_dataset(classes, per_class, spawn_rng(args.seed),
                                           k_folds=args.folds)
        excluded = 0
    else:
        manifest = _require(args.manifest, "manifest")
        try:
            entries = D.read_manifest(manifest)
            slices = {}
            for e in entries:
                if e.image_path not in slices:
                    slices[e.image_path] = D.load_slice(
                        _require(Path(manifest).parent / e.image_path, "slice raster"))
            records, _, excluded = D.extract_patches(entries, slices, k_folds=args.folds,
                                                     rng=spawn_rng(args.seed))
        except (D.ManifestError, D.BboxError, ValueError) as exc:
            raise CliError(f"{manifest}: {exc}") from exc
    out = root / "checkpoints" / "cache.ckpt"
    save_checkpoint(records_to_checkpoint(records), out)
    per_class = {}
    for r in records:
        per_class[r.label] = per_class.get(r.label, 0) + 1
    print(f"cached {len(records)} patches -> {out}")
    for label in sorted(per_class):
        print(f"  class {label}: {per_class[label]}")
    print(f"  excluded annotations: {excluded}")
    return 0


def cmd_train_gan(args):
    root = _run_dir(args.run)
    _echo_config(root, args)
    records = _train_folds(_load_cache(args.cache), args.holdout)
    cfg = T.TrainConfig.for_gan(seed=args.seed, epochs=args.epochs,
                                batch_size=args.batch_size, lr=args.lr,
                                latent_rule=args.latent_rule.replace("-", "_"),
                                checkpoint_every=args.checkpoint_every)

    def periodic(epoch, ckpt):
        save_checkpoint(ckpt, root / "checkpoints" / f"gan.epoch{epoch:04d}.ckpt")

    try:
        ckpt, history = T.train_cvae_gan(records, cfg, log=print,
                                         on_checkpoint=periodic)
    except T.TrainingDiverged as exc:
        if exc.last_checkpoint is not None:
            path = root / "checkpoints" / "gan.aborted.ckpt"
            save_checkpoint(exc.last_checkpoint, path)
            print(f"aborted: {exc}; last good checkpoint -> {path}", file=sys.stderr)
        raise CliError(str(exc)) from exc
    out = root / "checkpoints" / "gan.ckpt"
    save_checkpoint(ckpt, out)
    T.history_csv(history, root / "logs" / "gan_history.csv")
    print(f"gan checkpoint -> {out}")
    return 0


def cmd_generate(args):
    root = _run_dir(args.run)
    _echo_config(root, args)
    ckpt = load_checkpoint(_require(args.gan, "gan checkpoint"))
    records = T.generate_samples(ckpt, args.class_id, args.count,
                                 spawn_rng(args.seed, args.class_id))
    out = root / "checkpoints" / f"generated_c{args.class_id}.ckpt"
    save_checkpoint(records_to_checkpoint(records), out)
    print(f"generated {len(records)} class-{args.class_id} samples -> {out}")
    return 0


def _protocol(args, records):
    if args.task == "binary":
        neg = args.negative_label
        if neg is None:
            neg = int(max(r.label for r in records))
        return E.BinaryProtocol(args.class_id, neg)
    return E.MulticlassProtocol(int(max(r.label for r in records)) + 1)


def cmd_pretrain(args):
    root = _run_dir(args.run)
    _echo_config(root, args)
    records = _load_cache(args.cache)
    gan = load_checkpoint(_require(args.gan, "gan checkpoint"))
    cfg = T.TrainConfig.for_pretrain(seed=args.seed, epochs=args.epochs,
                                     batch_size=args.batch_size, lr=args.lr)
    if args.task == "binary":
        proto = _protocol(args, records)
        gen_pos = T.generate_samples(gan, proto.class_id, args.counts,
                                     spawn_rng(args.seed, 61))
        gen_neg = T.generate_samples(gan, proto.negative_label, args.counts,
                                     spawn_rng(args.seed, 62))
        net = E.build_cnn_classifier(2, spawn_rng(args.seed, 63))
        ckpt, history = T.pretrain_classifier(gen_pos, gen_neg, net, cfg,
                                              label_map=proto.label_map())
    else:
        proto = _protocol(args, records)
        k = proto.num_classes
        generated = []
        for c in range(k - 1):
            generated.extend(T.generate_samples(gan, c, args.counts,
                                                spawn_rng(args.seed, 61, c)))
        train = _train_folds(records, args.holdout)
        normals = [r for r in train if r.label == proto.normal_label]
        pool = E._augment_pool(normals, args.counts, spawn_rng(args.seed, 64))
        net = E.build_cnn_classifier(10, spawn_rng(args.seed, 63))
        ckpt, history = T.pretrain_classifier(generated, pool, net, cfg)
    out = root / "checkpoints" / "pretrained.ckpt"
    save_checkpoint(ckpt, out)
    T.history_csv(history, root / "logs" / "pretrain_history.csv")
    print(f"pretrained classifier -> {out}")
    return 0


def cmd_finetune(args):
    root = _run_dir(args.run)
    _echo_config(root, args)
    records = _load_cache(args.cache)
    pre = load_checkpoint(_require(args.pretrained, "pretrained checkpoint"))
    cfg = T.TrainConfig.for_finetune(seed=args.seed, epochs=args.epochs,
                                     batch_size=args.batch_size, lr=args.lr)
    train = _train_folds(records, args.holdout)
    if args.task == "binary":
        proto = _protocol(args, records)
        fit = E._balanced_subset(train, (proto.negative_label, proto.class_id),
                                 spawn_rng(args.seed, 71))
        ckpt, history = T.finetune_classifier(pre, fit, cfg, label_map=proto.label_map())
    else:
        ckpt, history = T.finetune_classifier(pre, train, cfg)
    out = root / "checkpoints" / "finetuned.ckpt"
    save_checkpoint(ckpt, out)
    T.history_csv(history, root / "logs" / "finetune_history.csv")
    print(f"finetuned classifier -> {out}")
    return 0


def cmd_eval(args):
    root = _run_dir(args.run)
    _echo_config(root, args)
    records = _load_cache(args.cache)
    proto = _protocol(args, records)
    arm_ckpts = {}
    for arm, path in (("pretrain", args.pretrained), ("finetune", args.finetuned),
                      ("scratch", args.scratch), ("traditional", args.traditional)):
        if path:
            arm_ckpts[arm] = load_checkpoint(_require(path, f"{arm} checkpoint"))
    if not arm_ckpts:
        raise CliError("eval needs at least one checkpoint "
                       "(--finetuned/--pretrained/--scratch/--traditional)")
    test = [r for r in records if r.fold == args.holdout]
    if args.task == "binary":
        lm = proto.label_map()
        test = E._balanced_subset(test, (proto.negative_label, proto.class_id),
                                  spawn_rng(args.seed, 81))
        truths = np.array([lm[r.label] for r in test])
        k = 2
        row_name = D.CLASS_NAMES[proto.class_id] if proto.class_id < len(D.CLASS_NAMES) \
            else f"class{proto.class_id}"
    else:
        truths = np.array([r.label for r in test])
        k = proto.num_classes
        row_name = "multiclass"
    report = E.EvalReport(kind=args.task, arms=tuple(arm_ckpts))
    if args.task == "binary":
        cms = {arm: {} for arm in arm_ckpts}
        for arm, ckpt in arm_ckpts.items():
            cms[arm][args.holdout] = E._evaluate_arm(T.load_cnn(ckpt), test, truths, k)
        report.rows.append(E._row_from_cms(row_name, cms, report.folds, tuple(arm_ckpts)))
        E._finish_report(report)
    else:
        metrics = {}
        for arm, ckpt in arm_ckpts.items():
            cm = E._evaluate_arm(T.load_cnn(ckpt), test, truths, k)
            mm = E.metrics_multiclass(cm)
            metrics[arm] = (cm, mm)
            report.folds.append({"row": row_name, "arm": arm, "fold": args.holdout,
                                 "cm": cm.tolist(), "ac": mm.accuracy,
                                 "se": mm.mean_sensitivity(), "sp": mm.mean_specificity()})
            report.global_ac[arm] = mm.accuracy
        names = list(D.CLASS_NAMES[:k - 1]) + [D.NORMAL_NAME]
        for c in range(k):
            row = {"name": names[c]}
            for arm, (cm, mm) in metrics.items():
                row[arm] = {"ac": None, "se": mm.sensitivity[c], "sp": mm.specificity[c],
                            "counts": [int(v) for v in cm[c]]}
            report.rows.append(row)
        E._finish_report(report)
        for arm in arm_ckpts:
            report.mean[arm]["ac"] = report.global_ac[arm]
    E.emit_report(report, "csv", root / "reports" / "eval.csv")
    E.emit_report(report, "markdown", root / "reports" / "eval.md")
    print(f"reports -> {root / 'reports'}")
    return 0


def cmd_sweep(args):
    root = _run_dir(args.run)
    _echo_config(root, args)
    records = _load_cache(args.cache)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s != ""]
    except ValueError as exc:
        raise CliError(f"--sizes expects a comma list of integers, got {args.sizes!r}") from exc
    proto = _protocol(args, records)
    cfg = E.CvConfig(
        seed=args.seed, counts=max(sizes) if sizes else 0,
        gan=T.TrainConfig.for_gan(seed=args.seed, epochs=args.gan_epochs,
                                  batch_size=args.batch_size),
        pretrain=T.TrainConfig.for_pretrain(seed=args.seed, epochs=args.epochs,
                                            batch_size=args.batch_size),
        finetune=T.TrainConfig.for_finetune(seed=args.seed),
    )
    gan_ckpt = load_checkpoint(_require(args.gan, "gan checkpoint")) if args.gan else None
    rows = E.sweep_pretrain_size(records, sizes, proto, cfg, held_out=args.holdout,
                                 gan_ckpt=gan_ckpt, log=print)
    out = root / "reports" / "sweep.csv"
    E.sweep_csv(rows, out)
    print(f"sweep -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

CONFIG_HELP = "JSON config file; keys mirror flag names, unknown keys rejected"


def _apply_config(parser, argv):
    """Pre-parse --config and fold its values in as defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    path = _require(known.config, "config file")
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path}: invalid JSON ({exc.msg})")
    valid = {a.dest for a in parser._actions}
    unknown = set(payload) - valid
    if unknown:
        raise CliError(f"config {path}: unknown keys {sorted(unknown)}")
    parser.set_defaults(**payload)
    return argv


def _common(sub, run_default):
    sub.add_argument("--config", default=None, help=CONFIG_HELP)
    sub.add_argument("--run", default=run_default, help="run directory name under runs/")
    sub.add_argument("--seed", type=int, default=0, help="master seed")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cislkit",
        description="Lung CT imaging-sign patch synthesis and two-stage classification.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    F = argparse.ArgumentDefaultsHelpFormatter

    p = subs.add_parser("prepare", formatter_class=F,
                        help="build the 64x64 patch cache from a manifest or synthetic spec")
    _common(p, "prepare")
    p.add_argument("--manifest", default=None, help="newline-delimited JSON manifest")
    p.add_argument("--synthetic", default=None, metavar="CxN",
                   help="generate a synthetic dataset, e.g. 9x30")
    p.add_argument("--folds", type=int, default=3, help="cross-validation fold count")
    p.set_defaults(func=cmd_prepare)

    p = subs.add_parser("train-gan", formatter_class=F,
                        help="train the CVAE-GAN on the training folds")
    _common(p, "gan")
    p.add_argument("--cache", required=True, help="patch cache from prepare")
    p.add_argument("--holdout", type=int, default=2, help="fold excluded from training")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--latent-rule", choices=("standard", "paper-literal"),
                   default="standard", help="latent sampling rule")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also write a checkpoint every N epochs (0 = end only)")
    p.set_defaults(func=cmd_train_gan)

    p = subs.add_parser("generate", formatter_class=F,
                        help="decode prior samples from a trained checkpoint")
    _common(p, "generate")
    p.add_argument("--gan", required=True, help="gan checkpoint")
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("pretrain", formatter_class=F,
                        help="pre-train the CNN classifier on generated samples")
    _common(p, "pretrain")
    p.add_argument("--cache", required=True)
    p.add_argument("--gan", required=True, help="gan checkpoint to sample from")
    p.add_argument("--task", choices=("binary", "multiclass"), default="binary")
    p.add_argument("--class-id", type=int, default=0, help="sign class (binary task)")
    p.add_argument("--negative-label", type=int, default=None,
                   help="non-sign class (binary; defaults to the highest label)")
    p.add_argument("--counts", type=int, default=200, help="generated samples per class")
    p.add_argument("--holdout", type=int, default=2)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("finetune", formatter_class=F,
                        help="fine-tune a pre-trained classifier on real folds")
    _common(p, "finetune")
    p.add_argument("--cache", required=True)
    p.add_argument("--pretrained", required=True, help="pretrained checkpoint")
    p.add_argument("--task", choices=("binary", "multiclass"), default="binary")
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--negative-label", type=int, default=None)
    p.add_argument("--holdout", type=int, default=2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_finetune)

    p = subs.add_parser("eval", formatter_class=F,
                        help="evaluate checkpoints on a held-out fold and emit reports")
    _common(p, "eval")
    p.add_argument("--cache", required=True)
    p.add_argument("--task", choices=("binary", "multiclass"), default="binary")
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--negative-label", type=int, default=None)
    p.add_argument("--holdout", type=int, default=2)
    p.add_argument("--finetuned", default=None, help="finetuned checkpoint")
    p.add_argument("--pretrained", default=None, help="pretrained checkpoint")
    p.add_argument("--scratch", default=None, help="scratch-trained checkpoint")
    p.add_argument("--traditional", default=None, help="augmentation-trained checkpoint")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("sweep", formatter_class=F,
                        help="pre-training-size sweep; emits size,ac,se,sp rows")
    _common(p, "sweep")
    p.add_argument("--cache", required=True)
    p.add_argument("--sizes", required=True, help="comma list, e.g. 0,1000,4000,16000")
    p.add_argument("--task", choices=("binary",), default="binary")
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--negative-label", type=int, default=None)
    p.add_argument("--holdout", type=int, default=0)
    p.add_argument("--gan", default=None, help="reuse an existing gan checkpoint")
    p.add_argument("--gan-epochs", type=int, default=60)
    p.add_argument("--epochs", type=int, default=1, help="pre-training epochs per size")
    p.add_argument("--batch-size", type=int, default=16,
                   help="gan/pre-training batch; fine-tuning keeps its default")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    subs = next(a for a in parser._actions
                if isinstance(a, argparse._SubParsersAction))
    if argv and argv[0] in subs.choices:
        _apply_config(subs.choices[argv[0]], argv[1:])
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
