"""Evaluation: confusion matrices, AC/SE/SP metrics, the k-fold
cross-validation protocol (GAN -> generate -> pre-train -> fine-tune ->
held-out test), the pre-training-size sweep, and report emission.

Rates with an undefined denominator (0/0) are reported as None
("not applicable") and excluded from mean rows, never coerced to 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import (AUGMENTED, CLASS_NAMES, NORMAL_NAME, PatchRecord, augment,
                   denormalize, minmax_normalize, split_folds)
from .nets import build_cnn_classifier
from .train import (TrainConfig, finetune_classifier, generate_samples, predict,
                    pretrain_classifier, train_cvae_gan, load_cnn)
from .util import spawn_rng

ARM_SCRATCH = "scratch"
ARM_PRETRAIN = "pretrain"
ARM_FINETUNE = "finetune"
ARM_TRADITIONAL = "traditional"
ALL_ARMS = (ARM_SCRATCH, ARM_PRETRAIN, ARM_FINETUNE, ARM_TRADITIONAL)


def confusion(predictions, truths, k: int) -> np.ndarray:
    """k x k count matrix, rows = true class, cols = predicted class."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape:
        raise ValueError(
            f"length mismatch: {predictions.shape} predictions vs {truths.shape} truths"
        )
    if len(predictions) and (predictions.min() < 0 or predictions.max() >= k
                             or truths.min() < 0 or truths.max() >= k):
        raise ValueError(f"class index out of range for k={k}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truths, predictions), 1)
    return cm


def _rate(num, den):
    return None if den == 0 else float(num / den)


def metrics_binary(cm: np.ndarray):
    """(AC, SE, SP) from a 2x2 confusion matrix; class 1 is the sign class."""
    if cm.shape != (2, 2):
        raise ValueError(f"binary metrics need a 2x2 matrix, got {cm.shape}")
    tn, fp = int(cm[0, 0]), int(cm[0, 1])
    fn, tp = int(cm[1, 0]), int(cm[1, 1])
    return (
        _rate(tp + tn, tp + tn + fp + fn),
        _rate(tp, tp + fn),
        _rate(tn, tn + fp),
    )


@dataclass
class MulticlassMetrics:
    accuracy: float | None
    sensitivity: list[float | None]
    specificity: list[float | None]

    def mean_sensitivity(self):
        vals = [v for v in self.sensitivity if v is not None]
        return float(np.mean(vals)) if vals else None

    def mean_specificity(self):
        vals = [v for v in self.specificity if v is not None]
        return float(np.mean(vals)) if vals else None


def metrics_multiclass(cm: np.ndarray) -> MulticlassMetrics:
    """One-vs-rest SE/SP per class plus a single global accuracy."""
    k = cm.shape[0]
    if cm.shape != (k, k):
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    total = int(cm.sum())
    se, sp = [], []
    for c in range(k):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        se.append(_rate(tp, tp + fn))
        sp.append(_rate(tn, tn + fp))
    return MulticlassMetrics(_rate(int(np.trace(cm)), total), se, sp)


# ---------------------------------------------------------------------------
# protocols

@dataclass
class BinaryProtocol:
    """Sign class vs non-sign. Internally the sign class maps to label 1."""

    class_id: int
    negative_label: int

    def label_map(self):
        return {self.class_id: 1, self.negative_label: 0}


@dataclass
class MulticlassProtocol:
    """All sign classes plus normal tissue; the normal class is the last."""

    num_classes: int = 10

    @property
    def normal_label(self):
        return self.num_classes - 1


@dataclass
class CvConfig:
    """Budget and seeds for one cross-validation study."""

    seed: int = 0
    k_folds: int = 3
    counts: int = 200  # generated samples per class in the pre-training pool
    gan: TrainConfig = None
    pretrain: TrainConfig = None
    finetune: TrainConfig = None
    arms: tuple = ALL_ARMS

    def __post_init__(self):
        if self.gan is None:
            self.gan = TrainConfig.for_gan(seed=self.seed)
        if self.pretrain is None:
            self.pretrain = TrainConfig.for_pretrain(seed=self.seed)
        if self.finetune is None:
            self.finetune = TrainConfig.for_finetune(seed=self.seed)


@dataclass
class EvalReport:
    kind: str
    arms: tuple
    rows: list = field(default_factory=list)     # {"name", arm: {"ac","se","sp"}}
    mean: dict = field(default_factory=dict)     # arm -> {"ac","se","sp"}
    na_counts: dict = field(default_factory=dict)
    folds: list = field(default_factory=list)    # {"row","arm","fold","cm","ac","se","sp"}
    global_ac: dict = field(default_factory=dict)  # multiclass: arm -> value
    metadata: dict = field(default_factory=dict)


def _balanced_subset(records, labels_keep, rng):
    """Filter to the wanted labels and trim every class to the smallest count."""
    pools = {lab: [r for r in records if r.label == lab] for lab in labels_keep}
    if any(not pool for pool in pools.values()):
        missing = [lab for lab, pool in pools.items() if not pool]
        raise ValueError(f"no records for class(es) {missing}")
    nmin = min(len(p) for p in pools.values())
    out = []
    for lab in labels_keep:
        pool = pools[lab]
        order = rng.permutation(len(pool))[:nmin]
        out.extend(pool[i] for i in sorted(order))
    return out


def _augment_pool(records, target: int, rng):
    """Traditional augmentation: expand a real pool to `target` records by
    random visual transformations (originals included). Classes are expanded
    round-robin so a balanced pool stays balanced."""
    if not records:
        raise ValueError("cannot augment an empty pool")
    by_label: dict[int, list[PatchRecord]] = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    cycle = sorted(by_label)
    taken = {lab: 0 for lab in cycle}
    out = list(records)
    i = 0
    while len(out) < target:
        lab = cycle[i % len(cycle)]
        pool = by_label[lab]
        src = pool[taken[lab] % len(pool)]
        taken[lab] += 1
        raw = denormalize(src.pixels, src.source_stats)
        pixels, stats = minmax_normalize(augment(raw, rng))
        out.append(PatchRecord(
            pixels=pixels, label=src.label, provenance=AUGMENTED,
            fold=src.fold, source_stats=stats,
            record_id=f"{src.record_id}+aug{i}", patient_id=src.patient_id,
        ))
        i += 1
    return out[:target]


def _evaluate_arm(net, records, labels, k):
    preds = predict(net, records)
    return confusion(preds, labels, k)


def _assert_no_leak(train_recs, test_recs):
    train_ids = {r.record_id for r in train_recs}
    leak = [r.record_id for r in test_recs if r.record_id in train_ids]
    if leak:
        raise RuntimeError(f"evaluation fold leaked into training: {leak[:3]}")


def run_binary_rotation(dataset, protocol: BinaryProtocol, cfg: CvConfig,
                        held_out: int, gan_ckpt: Checkpoint | None = None,
                        log=None):
    """One fold rotation of the binary protocol. Returns {arm: 2x2 cm}."""
    train_recs, test_recs = split_folds(dataset, held_out)
    _assert_no_leak(train_recs, test_recs)
    lm = protocol.label_map()
    rng = spawn_rng(cfg.seed, 21, held_out)

    if gan_ckpt is None:
        gan_ckpt, _ = train_cvae_gan(train_recs, cfg.gan, log=log)

    gen_pos = generate_samples(gan_ckpt, protocol.class_id, cfg.counts,
                               spawn_rng(cfg.seed, 22, held_out))
    gen_neg = generate_samples(gan_ckpt, protocol.negative_label, cfg.counts,
                               spawn_rng(cfg.seed, 23, held_out))

    fit_set = _balanced_subset(train_recs, (protocol.negative_label, protocol.class_id),
                               spawn_rng(cfg.seed, 24, held_out))
    test_set = _balanced_subset(test_recs, (protocol.negative_label, protocol.class_id),
                                spawn_rng(cfg.seed, 25, held_out))
    test_labels = np.array([lm[r.label] for r in test_set])

    out = {}
    pre_ckpt = None
    if ARM_PRETRAIN in cfg.arms or ARM_FINETUNE in cfg.arms:
        net = build_cnn_classifier(2, spawn_rng(cfg.seed, 26, held_out))
        pre_ckpt, _ = pretrain_classifier(gen_pos, gen_neg, net, cfg.pretrain, label_map=lm)
        if ARM_PRETRAIN in cfg.arms:
            out[ARM_PRETRAIN] = _evaluate_arm(load_cnn(pre_ckpt), test_set, test_labels, 2)
    if ARM_FINETUNE in cfg.arms:
        fin_ckpt, _ = finetune_classifier(pre_ckpt, fit_set, cfg.finetune, label_map=lm)
        out[ARM_FINETUNE] = _evaluate_arm(load_cnn(fin_ckpt), test_set, test_labels, 2)
    if ARM_SCRATCH in cfg.arms:
        net = build_cnn_classifier(2, spawn_rng(cfg.seed, 27, held_out))
        zero = Checkpoint.from_named({"cnn_classifier": net.state_dict()},
                                     {"num_outputs": 2, "stage": "init"})
        scr_ckpt, _ = finetune_classifier(zero, fit_set, cfg.finetune, label_map=lm)
        out[ARM_SCRATCH] = _evaluate_arm(load_cnn(scr_ckpt), test_set, test_labels, 2)
    if ARM_TRADITIONAL in cfg.arms:
        pool = _augment_pool(fit_set, 2 * cfg.counts, rng)
        net = build_cnn_classifier(2, spawn_rng(cfg.seed, 28, held_out))
        trad_ckpt, _ = pretrain_classifier(pool, [], net, cfg.pretrain, label_map=lm)
        out[ARM_TRADITIONAL] = _evaluate_arm(load_cnn(trad_ckpt), test_set, test_labels, 2)
    return out


def run_multiclass_rotation(dataset, protocol: MulticlassProtocol, cfg: CvConfig,
                            held_out: int, log=None):
    """One fold rotation of the 10-way protocol. Returns {arm: KxK cm}."""
    k = protocol.num_classes
    train_recs, test_recs = split_folds(dataset, held_out)
    _assert_no_leak(train_recs, test_recs)
    rng = spawn_rng(cfg.seed, 31, held_out)
    sign_train = [r for r in train_recs if r.label != protocol.normal_label]
    normal_train = [r for r in train_recs if r.label == protocol.normal_label]

    test_labels = np.array([r.label for r in test_recs])
    out = {}
    pre_ckpt = None
    if ARM_PRETRAIN in cfg.arms or ARM_FINETUNE in cfg.arms:
        gan_ckpt, _ = train_cvae_gan(sign_train, cfg.gan, log=log)
        generated = []
        for c in range(k - 1):
            generated.extend(generate_samples(gan_ckpt, c, cfg.counts,
                                              spawn_rng(cfg.seed, 32, held_out, c)))
        normal_pool = _augment_pool(normal_train, cfg.counts, rng)
        net = build_cnn_classifier(10, spawn_rng(cfg.seed, 33, held_out))
        pre_ckpt, _ = pretrain_classifier(generated, normal_pool, net, cfg.pretrain)
        if ARM_PRETRAIN in cfg.arms:
            out[ARM_PRETRAIN] = _evaluate_arm(load_cnn(pre_ckpt), test_recs, test_labels, k)
    if ARM_FINETUNE in cfg.arms:
        fin_ckpt, _ = finetune_classifier(pre_ckpt, train_recs, cfg.finetune)
        out[ARM_FINETUNE] = _evaluate_arm(load_cnn(fin_ckpt), test_recs, test_labels, k)
    if ARM_SCRATCH in cfg.arms:
        net = build_cnn_classifier(10, spawn_rng(cfg.seed, 34, held_out))
        zero = Checkpoint.from_named({"cnn_classifier": net.state_dict()},
                                     {"num_outputs": 10, "stage": "init"})
        scr_ckpt, _ = finetune_classifier(zero, train_recs, cfg.finetune)
        out[ARM_SCRATCH] = _evaluate_arm(load_cnn(scr_ckpt), test_recs, test_labels, k)
    if ARM_TRADITIONAL in cfg.arms:
        pool = _augment_pool(train_recs, k * cfg.counts, rng)
        net = build_cnn_classifier(10, spawn_rng(cfg.seed, 35, held_out))
        trad_ckpt, _ = pretrain_classifier(pool, [], net, cfg.pretrain)
        out[ARM_TRADITIONAL] = _evaluate_arm(load_cnn(trad_ckpt), test_recs, test_labels, k)
    return out


def _row_from_cms(name, cms_by_arm, folds_acc, arms):
    row = {"name": name}
    for arm in arms:
        pooled = sum(cms_by_arm[arm].values())
        ac, se, sp = metrics_binary(pooled)
        row[arm] = {"ac": ac, "se": se, "sp": sp,
                    "counts": [int(v) for v in pooled.reshape(-1)]}
        for fold, cm in sorted(cms_by_arm[arm].items()):
            fac, fse, fsp = metrics_binary(cm)
            folds_acc.append({"row": name, "arm": arm, "fold": fold,
                              "cm": cm.tolist(), "ac": fac, "se": fse, "sp": fsp})
    return row


def _finish_report(report: EvalReport):
    for arm in report.arms:
        sums = {"ac": [], "se": [], "sp": []}
        na = 0
        for row in report.rows:
            for key in sums:
                v = row[arm][key]
                if v is None:
                    na += 1
                else:
                    sums[key].append(v)
        report.mean[arm] = {k: (float(np.mean(v)) if v else None) for k, v in sums.items()}
        report.na_counts[arm] = na
    return report


def run_cross_validation(dataset, protocol, cfg: CvConfig, log=None) -> EvalReport:
    """Full k-fold study: each rotation trains on k-1 folds and evaluates on
    the held-out fold; per-fold confusion matrices are pooled per row."""
    k_folds = cfg.k_folds
    if isinstance(protocol, BinaryProtocol):
        name = CLASS_NAMES[protocol.class_id] if protocol.class_id < len(CLASS_NAMES) \
            else f"class{protocol.class_id}"
        cms = {arm: {} for arm in cfg.arms}
        for held_out in range(k_folds):
            if log:
                log(f"[{name}] rotation {held_out + 1}/{k_folds}")
            arm_cms = run_binary_rotation(dataset, protocol, cfg, held_out, log=log)
            for arm, cm in arm_cms.items():
                cms[arm][held_out] = cm
        report = EvalReport(kind="binary", arms=tuple(cfg.arms))
        report.rows.append(_row_from_cms(name, cms, report.folds, cfg.arms))
        report.metadata = {"seed": cfg.seed, "k_folds": k_folds, "counts": cfg.counts}
        return _finish_report(report)

    if isinstance(protocol, MulticlassProtocol):
        k = protocol.num_classes
        cms = {arm: {} for arm in cfg.arms}
        for held_out in range(k_folds):
            if log:
                log(f"[multiclass] rotation {held_out + 1}/{k_folds}")
            arm_cms = run_multiclass_rotation(dataset, protocol, cfg, held_out, log=log)
            for arm, cm in arm_cms.items():
                cms[arm][held_out] = cm
        report = EvalReport(kind="multiclass", arms=tuple(cfg.arms))
        names = list(CLASS_NAMES[:k - 1]) + [NORMAL_NAME]
        pooled = {arm: sum(cms[arm].values()) for arm in cfg.arms}
        mm = {arm: metrics_multiclass(pooled[arm]) for arm in cfg.arms}
        for c in range(k):
            row = {"name": names[c]}
            for arm in cfg.arms:
                row[arm] = {"ac": None, "se": mm[arm].sensitivity[c],
                            "sp": mm[arm].specificity[c],
                            "counts": [int(v) for v in pooled[arm][c]]}
            report.rows.append(row)
        for arm in cfg.arms:
            report.global_ac[arm] = mm[arm].accuracy
            for fold, cm in sorted(cms[arm].items()):
                fm = metrics_multiclass(cm)
                report.folds.append({"row": "all", "arm": arm, "fold": fold,
                                     "cm": cm.tolist(), "ac": fm.accuracy,
                                     "se": fm.mean_sensitivity(),
                                     "sp": fm.mean_specificity()})
        report.metadata = {"seed": cfg.seed, "k_folds": k_folds, "counts": cfg.counts}
        _finish_report(report)
        for arm in cfg.arms:  # multiclass AC is global, not a per-class mean
            report.mean[arm]["ac"] = report.global_ac[arm]
        return report

    raise TypeError(f"unknown protocol {protocol!r}")


def binary_suite(dataset, class_ids, negative_label, cfg: CvConfig, log=None) -> EvalReport:
    """Binary protocol repeated for each sign class; one report row per class."""
    report = EvalReport(kind="binary", arms=tuple(cfg.arms))
    for class_id in class_ids:
        sub = run_cross_validation(
            dataset, BinaryProtocol(class_id, negative_label), cfg, log=log)
        report.rows.extend(sub.rows)
        report.folds.extend(sub.folds)
    report.metadata = {"seed": cfg.seed, "k_folds": cfg.k_folds, "counts": cfg.counts}
    return _finish_report(report)


def sweep_pretrain_size(dataset, sizes, protocol: BinaryProtocol, cfg: CvConfig,
                        held_out: int = 0, gan_ckpt: Checkpoint | None = None,
                        log=None):
    """Pre-training-size sweep at fixed folds and seed: per size, generate,
    pre-train, fine-tune, evaluate. Size 0 degenerates to training from
    scratch on the real folds. Returns rows of (size, ac, se, sp)."""
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    train_recs, test_recs = split_folds(dataset, held_out)
    _assert_no_leak(train_recs, test_recs)
    lm = protocol.label_map()
    if gan_ckpt is None and any(s > 0 for s in sizes):
        gan_ckpt, _ = train_cvae_gan(train_recs, cfg.gan, log=log)
    fit_set = _balanced_subset(train_recs, (protocol.negative_label, protocol.class_id),
                               spawn_rng(cfg.seed, 41, held_out))
    test_set = _balanced_subset(test_recs, (protocol.negative_label, protocol.class_id),
                                spawn_rng(cfg.seed, 42, held_out))
    test_labels = np.array([lm[r.label] for r in test_set])
    rows = []
    for size in sizes:
        if log:
            log(f"[sweep] size={size}")
        net = build_cnn_classifier(2, spawn_rng(cfg.seed, 43, size))
        if size > 0:
            gen_pos = generate_samples(gan_ckpt, protocol.class_id, size,
                                       spawn_rng(cfg.seed, 44, size))
            gen_neg = generate_samples(gan_ckpt, protocol.negative_label, size,
                                       spawn_rng(cfg.seed, 45, size))
            ckpt, _ = pretrain_classifier(gen_pos, gen_neg, net, cfg.pretrain, label_map=lm)
        else:
            ckpt = Checkpoint.from_named({"cnn_classifier": net.state_dict()},
                                         {"num_outputs": 2, "stage": "init"})
        fin, _ = finetune_classifier(ckpt, fit_set, cfg.finetune, label_map=lm)
        cm = _evaluate_arm(load_cnn(fin), test_set, test_labels, 2)
        ac, se, sp = metrics_binary(cm)
        rows.append({"size": int(size), "ac": ac, "se": se, "sp": sp})
    return rows


def sweep_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("size,ac,se,sp\n")
        for row in rows:
            fh.write(f"{row['size']},{_fmt(row['ac'])},{_fmt(row['se'])},{_fmt(row['sp'])}\n")


def _fmt(v):
    return "NA" if v is None else f"{v:.3f}"


def emit_report(report: EvalReport, fmt: str, path):
    """Write the report as csv or markdown. Both carry the same 3-decimal
    rates; the csv additionally carries raw confusion counts per cell so every
    rate can be recomputed exactly."""
    if fmt == "csv":
        _emit_csv(report, path)
    elif fmt == "markdown":
        _emit_markdown(report, path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def _emit_csv(report, path):
    arms = report.arms
    with open(path, "w", encoding="utf-8") as fh:
        header = ["class"]
        for arm in arms:
            header += [f"{arm}_ac", f"{arm}_se", f"{arm}_sp", f"{arm}_counts"]
        fh.write(",".join(header) + "\n")
        for row in report.rows:
            cells = [row["name"]]
            for arm in arms:
                m = row[arm]
                counts = ";".join(str(c) for c in m.get("counts", []))
                cells += [_fmt(m["ac"]), _fmt(m["se"]), _fmt(m["sp"]), counts]
            fh.write(",".join(cells) + "\n")
        cells = ["mean"]
        for arm in arms:
            m = report.mean[arm]
            cells += [_fmt(m["ac"]), _fmt(m["se"]), _fmt(m["sp"]), ""]
        fh.write(",".join(cells) + "\n")


def _emit_markdown(report, path):
    arms = report.arms
    with open(path, "w", encoding="utf-8") as fh:
        head = "| CISLs | " + " | ".join(
            f"{arm} AC | {arm} SE | {arm} SP" for arm in arms) + " |\n"
        fh.write(head)
        fh.write("|" + "---|" * (1 + 3 * len(arms)) + "\n")
        for row in report.rows:
            cells = [row["name"]]
            for arm in arms:
                m = row[arm]
                cells += [_fmt(m["ac"]), _fmt(m["se"]), _fmt(m["sp"])]
            fh.write("| " + " | ".join(cells) + " |\n")
        cells = ["mean"]
        for arm in arms:
            m = report.mean[arm]
            cells += [_fmt(m["ac"]), _fmt(m["se"]), _fmt(m["sp"])]
        fh.write("| " + " | ".join(cells) + " |\n")
        nas = {arm: n for arm, n in report.na_counts.items() if n}
        if nas:
            fh.write(f"\nNot-applicable cells excluded from means: {nas}\n")
