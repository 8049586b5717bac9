"""Training procedures: CVAE-GAN training, sample generation, classifier
pre-training on generated data, and fine-tuning on real data.

Every procedure is a pure function of (records, config): all randomness flows
from generators derived off the config seed, so a (seed, config, thread
count) triple reproduces checkpoints byte for byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import losses as L
from .checkpoint import Checkpoint, CheckpointError, config_digest, load_checkpoint, save_checkpoint
from .data import GENERATED, REAL, PatchRecord
from .layers import INFER, TRAIN
from .nets import (LATENT_DIM, build_cnn_classifier, build_decoder, build_discriminator,
                   build_encoder, build_gan_classifier, split_latent)
from .optim import Adam, GradientError

STAGE_GAN = "gan"
STAGE_PRETRAIN = "pretrain"
STAGE_FINETUNE = "finetune"

LATENT_STANDARD = "standard"
LATENT_PAPER_LITERAL = "paper_literal"

# rng stream ids
_R_INIT, _R_BATCH, _R_NOISE, _R_DROPOUT, _R_GEN = 11, 12, 13, 14, 15


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; carries the last good checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    seed: int = 0
    stage: str = STAGE_GAN
    epochs: int = 200
    batch_size: int = 16
    lr: float = 2e-4
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    latent_rule: str = LATENT_STANDARD
    k_folds: int = 3
    counts: int = 0                  # generated samples per class
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10               # finetune early stop on loss plateau
    checkpoint_every: int = 0        # extra checkpoint cadence in epochs

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")
        if self.stage not in (STAGE_GAN, STAGE_PRETRAIN, STAGE_FINETUNE):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.latent_rule not in (LATENT_STANDARD, LATENT_PAPER_LITERAL):
            raise ValueError(f"unknown latent rule {self.latent_rule!r}")
        self.loss_weights.validate()
        return self

    @classmethod
    def for_gan(cls, seed=0, **kw):
        return cls(seed=seed, stage=STAGE_GAN, **kw).validate()

    @classmethod
    def for_pretrain(cls, seed=0, **kw):
        kw.setdefault("epochs", 5)
        kw.setdefault("lr", 2e-3)
        return cls(seed=seed, stage=STAGE_PRETRAIN, **kw).validate()

    @classmethod
    def for_finetune(cls, seed=0, **kw):
        kw.setdefault("epochs", 50)
        kw.setdefault("lr", 1e-3)
        return cls(seed=seed, stage=STAGE_FINETUNE, **kw).validate()

    def echo(self) -> dict:
        d = asdict(self)
        d["thread_count"] = thread_count()
        return d


def thread_count() -> int:
    return int(os.environ.get("CISL_THREADS", "1"))


def _rng(cfg, *keys):
    from .util import spawn_rng
    return spawn_rng(cfg.seed, *keys)


def _stack(records):
    x = np.concatenate([r.pixels for r in records], axis=0).astype(np.float32)
    y = np.array([r.label for r in records], dtype=np.int64)
    return x, y


def _batches(n, batch_size, rng, drop_last=True):
    order = rng.permutation(n)
    stop = n - (n % batch_size) if drop_last else n
    if stop == 0 and n >= 2:
        yield order  # fewer records than one batch: train on what exists
        return
    for lo in range(0, stop, batch_size):
        yield order[lo:lo + batch_size]


def _merge_grad_sums(a, b):
    return {k: a[k] + b[k] for k in a}


def _prefixed(prefix, grads):
    return {f"{prefix}/{k}": v for k, v in grads.items()}


def _check_finite(terms: dict):
    for name, value in terms.items():
        if not np.isfinite(value):
            raise ValueError(name)


def _sample_latent(latent, noise, rule):
    """Latent draw. The standard rule is z = mu + noise * exp(log_sigma); the
    literal alternative treats the head's second half h as epsilon = softplus(h)
    and uses z = mu + noise * log(epsilon). Returns (z, dz/dhead factor)."""
    if rule == LATENT_STANDARD:
        scale = np.exp(latent.log_sigma)
        z = latent.mu + noise * scale
        dscale = scale                      # d z / d h = noise * exp(h)
    else:
        eps = np.logaddexp(0.0, latent.log_sigma)   # softplus(h)
        z = latent.mu + noise * np.log(eps)
        sig = 1.0 / (1.0 + np.exp(-latent.log_sigma))
        dscale = sig / eps                  # d log(softplus(h)) / d h
    return z.astype(np.float32), dscale.astype(np.float32)


def class_minmax_stats(records) -> dict[int, tuple[float, float]]:
    """Dataset-global (min, max) per class, used to denormalize generated
    samples that have no source patch."""
    stats: dict[int, tuple[float, float]] = {}
    for r in records:
        lo, hi = r.source_stats
        cur = stats.get(r.label)
        stats[r.label] = (lo, hi) if cur is None else (min(cur[0], lo), max(cur[1], hi))
    return stats


@dataclass
class GanNets:
    encoder: object
    decoder: object
    discriminator: object
    classifier: object
    num_classes: int

    def state_groups(self):
        return {
            "encoder": self.encoder.state_dict(),
            "decoder": self.decoder.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "gan_classifier": self.classifier.state_dict(),
        }

    def release_buffers(self):
        for net in (self.encoder, self.decoder, self.discriminator, self.classifier):
            for layer in net.layers:
                layer.release_buffers()


def build_gan_nets(num_classes, seed) -> GanNets:
    from .util import spawn_rng
    return GanNets(
        encoder=build_encoder(spawn_rng(seed, _R_INIT, 0)),
        decoder=build_decoder(num_classes, spawn_rng(seed, _R_INIT, 1)),
        discriminator=build_discriminator(spawn_rng(seed, _R_INIT, 2)),
        classifier=build_gan_classifier(spawn_rng(seed, _R_INIT, 3)),
        num_classes=num_classes,
    )


def _gan_checkpoint(nets: GanNets, cfg: TrainConfig, epoch, class_stats):
    meta = {
        "stage": STAGE_GAN,
        "seed": cfg.seed,
        "epoch": epoch,
        "thread_count": thread_count(),
        "num_classes": nets.num_classes,
        "latent_rule": cfg.latent_rule,
        "config": cfg.echo(),
        "config_sha256": config_digest(cfg.echo()),
        "class_stats": {str(k): list(v) for k, v in class_stats.items()},
    }
    return Checkpoint.from_named(nets.state_groups(), meta)


def train_cvae_gan(records: list[PatchRecord], cfg: TrainConfig, log=None,
                   on_checkpoint=None):
    """Adversarial training of the encoder/decoder/discriminator/classifier
    quartet. Per step: encode a real batch, reconstruct it and decode a prior
    sample, update the discriminator on real-vs-prior, update the classifier
    on real cross-entropy, then update encoder+decoder jointly on the weighted
    sum of adversarial, KL, reconstruction and feature-matching terms.

    Returns (final Checkpoint, loss history rows); ``on_checkpoint(epoch,
    ckpt)`` fires every ``cfg.checkpoint_every`` epochs when set. Raises
    TrainingDiverged with the last epoch's checkpoint attached if any loss
    goes non-finite.
    """
    cfg.validate()
    if not records:
        raise ValueError("no training records")
    if any(r.provenance == GENERATED for r in records):
        raise ValueError("generated records must not enter adversarial training")
    if len(records) < cfg.batch_size:
        raise ValueError(
            f"need at least one full batch: {len(records)} records < batch {cfg.batch_size}"
        )
    num_classes = int(max(r.label for r in records)) + 1
    nets = build_gan_nets(num_classes, cfg.seed)
    w = cfg.loss_weights
    opt_d = Adam(nets.discriminator.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_c = Adam(nets.classifier.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    eg_params = {**_prefixed("encoder", nets.encoder.params()),
                 **_prefixed("decoder", nets.decoder.params())}
    opt_eg = Adam(eg_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    batch_rng = _rng(cfg, _R_BATCH)
    noise_rng = _rng(cfg, _R_NOISE)
    x_all, y_all = _stack(records)
    eye = np.eye(num_classes, dtype=np.float32)
    class_stats = class_minmax_stats(records)
    history = []
    last_good = _gan_checkpoint(nets, cfg, 0, class_stats)

    def step_or_diverge(opt, grads, epoch):
        try:
            opt.step(grads)
        except GradientError as exc:
            raise TrainingDiverged(
                f"non-finite gradient at epoch {epoch}: {exc}", last_good) from exc

    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        nsteps = 0
        for idx in _batches(len(records), cfg.batch_size, batch_rng):
            x, labels = x_all[idx], y_all[idx]
            n = len(idx)
            onehot = eye[labels]

            # encode and decode: reconstruction and a prior draw
            e_pass = nets.encoder.forward(x, TRAIN)
            latent = split_latent(e_pass.output)
            noise = noise_rng.standard_normal((n, LATENT_DIM)).astype(np.float32)
            z, dscale = _sample_latent(latent, noise, cfg.latent_rule)
            rec_pass = nets.decoder.forward(np.concatenate([z, onehot], axis=1), TRAIN)
            z_prior = noise_rng.standard_normal((n, LATENT_DIM)).astype(np.float32)
            prior_pass = nets.decoder.forward(np.concatenate([z_prior, onehot], axis=1), TRAIN)
            x_prime, x_gen = rec_pass.output, prior_pass.output

            # discriminator step: separate real and fake passes (per-batch
            # statistics stay pure), gradients summed before the update; each
            # backward runs before the next forward reuses the layer caches
            d_rp = nets.discriminator.forward(x, TRAIN)
            f_real_d = d_rp.features.copy()
            d_real_out = d_rp.output.copy()
            g_real, _ = L.adv_loss_d_grads(d_real_out, d_real_out)
            _, d_grads_r = nets.discriminator.backward(d_rp, grad_output=g_real)
            d_fp = nets.discriminator.forward(x_gen, TRAIN, update_running=False)
            loss_d, _ = L.adv_loss(d_real_out, d_fp.output, w.saturating_g)
            _, g_fake = L.adv_loss_d_grads(d_real_out, d_fp.output)
            _, d_grads_f = nets.discriminator.backward(d_fp, grad_output=g_fake)
            step_or_diverge(opt_d, _merge_grad_sums(d_grads_r, d_grads_f), epoch)

            # classifier step on real samples
            c_pass = nets.classifier.forward(x, TRAIN)
            f_real_c = c_pass.features.copy()
            loss_c = w.lambda_cls * L.cross_entropy(c_pass.output, labels)
            _, c_grads = nets.classifier.backward(
                c_pass, grad_output=w.lambda_cls * L.cross_entropy_grad(c_pass.output, labels))
            step_or_diverge(opt_c, c_grads, epoch)

            # encoder+decoder step: both fakes through the updated D and C
            dg_rec = nets.discriminator.forward(x_prime, TRAIN, keep_cols=False,
                                                update_running=False)
            dg_pri = nets.discriminator.forward(x_gen, TRAIN, keep_cols=False,
                                                update_running=False)
            cg_rec = nets.classifier.forward(x_prime, TRAIN, keep_cols=False,
                                             update_running=False)
            cg_pri = nets.classifier.forward(x_gen, TRAIN, keep_cols=False,
                                             update_running=False)
            _, loss_g = L.adv_loss(d_rp.output, dg_pri.output, w.saturating_g)
            parts = L.GeneratorLossParts(
                adv=loss_g,
                kl=L.kl_loss(latent.mu, latent.log_sigma),
                rec=L.recon_loss(x, x_prime),
                mean_fm_d=L.mean_feature_matching(f_real_d, dg_pri.features),
                mean_fm_c=L.mean_feature_matching(f_real_c, cg_pri.features),
                pair_fm_d=L.pairwise_feature_matching(f_real_d, dg_rec.features),
                pair_fm_c=L.pairwise_feature_matching(f_real_c, cg_rec.features),
            )
            loss_total = L.total_generator_loss(parts, w)

            kd = w.lambda_mean_fm if w.use_disc_features else 0.0
            kdp = w.lambda_pair_fm if w.use_disc_features else 0.0
            kc = w.lambda_mean_fm if w.use_cls_features else 0.0
            kcp = w.lambda_pair_fm if w.use_cls_features else 0.0
            gx_rec_d, _ = nets.discriminator.backward(
                dg_rec,
                grad_features=kdp * L.pairwise_feature_matching_grad(f_real_d, dg_rec.features),
                need_param_grads=False)
            gx_pri_d, _ = nets.discriminator.backward(
                dg_pri,
                grad_output=w.lambda_adv * L.adv_loss_g_grad(dg_pri.output, w.saturating_g),
                grad_features=kd * L.mean_feature_matching_grad(f_real_d, dg_pri.features),
                need_param_grads=False)
            gx_rec_c, _ = nets.classifier.backward(
                cg_rec,
                grad_features=kcp * L.pairwise_feature_matching_grad(f_real_c, cg_rec.features),
                need_param_grads=False)
            gx_pri_c, _ = nets.classifier.backward(
                cg_pri,
                grad_features=kc * L.mean_feature_matching_grad(f_real_c, cg_pri.features),
                need_param_grads=False)

            grad_xp = gx_rec_d + gx_rec_c + w.lambda_rec * L.recon_loss_grad(x, x_prime)
            grad_xg = gx_pri_d + gx_pri_c
            _, dec_grads_prior = nets.decoder.backward(prior_pass, grad_output=grad_xg)
            gin_rec, dec_grads_rec = nets.decoder.backward(rec_pass, grad_output=grad_xp)
            dec_grads = _merge_grad_sums(dec_grads_rec, dec_grads_prior)
            gz = gin_rec[:, :LATENT_DIM]
            kl_mu, kl_ls = L.kl_loss_grads(latent.mu, latent.log_sigma)
            gmu = gz + w.lambda_kl * kl_mu
            gls = gz * noise * dscale + w.lambda_kl * kl_ls
            _, enc_grads = nets.encoder.backward(
                e_pass, grad_output=np.concatenate([gmu, gls], axis=1).astype(np.float32))
            step_or_diverge(opt_eg, {**_prefixed("encoder", enc_grads),
                                    **_prefixed("decoder", dec_grads)}, epoch)

            terms = {"loss_d": loss_d, "loss_c": loss_c, "loss_g_total": loss_total,
                     "adv_g": parts.adv, "kl": parts.kl, "rec": parts.rec,
                     "mean_fm_d": parts.mean_fm_d, "mean_fm_c": parts.mean_fm_c,
                     "pair_fm_d": parts.pair_fm_d, "pair_fm_c": parts.pair_fm_c}
            try:
                _check_finite(terms)
            except ValueError as exc:
                raise TrainingDiverged(
                    f"non-finite loss term {exc} at epoch {epoch}", last_good) from exc
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            nsteps += 1

        for k in sums:
            history.append({"epoch": epoch, "term": k, "value": sums[k] / max(nsteps, 1)})
        last_good = _gan_checkpoint(nets, cfg, epoch, class_stats)
        if on_checkpoint and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            on_checkpoint(epoch, last_good)
        if log and (epoch % max(1, cfg.epochs // 20) == 0 or epoch == 1):
            rec_mean = sums.get("rec", 0.0) / max(nsteps, 1)
            log(f"epoch {epoch}/{cfg.epochs} loss_d={sums.get('loss_d', 0)/max(nsteps,1):.4f} "
                f"rec={rec_mean:.2f}")
    nets.release_buffers()
    return last_good, history


def generate_samples(ckpt: Checkpoint, class_id: int, count: int, rng,
                     batch: int = 128) -> list[PatchRecord]:
    """Decode `count` prior draws conditioned on one class."""
    num_classes = int(ckpt.metadata.get("num_classes", 9))
    if not 0 <= class_id < num_classes:
        raise ValueError(f"unknown class id {class_id} for {num_classes}-way decoder")
    decoder = build_decoder(num_classes)
    decoder.load_state(ckpt.group("decoder"))
    stats = ckpt.metadata.get("class_stats", {}).get(str(class_id), (-1.0, 1.0))
    onehot = np.eye(num_classes, dtype=np.float32)[class_id]
    out = []
    done = 0
    while done < count:
        n = min(batch, count - done)
        z = rng.standard_normal((n, LATENT_DIM)).astype(np.float32)
        cond = np.broadcast_to(onehot, (n, num_classes))
        npass = decoder.forward(np.concatenate([z, cond], axis=1), INFER)
        for i in range(n):
            out.append(PatchRecord(
                pixels=npass.output[i:i + 1].copy(),
                label=class_id,
                provenance=GENERATED,
                fold=None,
                source_stats=(float(stats[0]), float(stats[1])),
                record_id=f"gen-{class_id}-{done + i}",
            ))
        done += n
    for layer in decoder.layers:
        layer.release_buffers()
    return out


def diversity_score(records, limit: int = 100) -> float:
    """Mean pairwise L2 distance between flattened patches; a generator
    collapsed to a constant output scores (near) zero."""
    pix = np.stack([r.pixels.reshape(-1) for r in records[:limit]])
    m = len(pix)
    if m < 2:
        return 0.0
    total = 0.0
    for i in range(m - 1):
        total += float(np.sqrt(((pix[i + 1:] - pix[i]) ** 2).sum(axis=1)).sum())
    return total / (m * (m - 1) / 2)


def _mapped_labels(records, label_map):
    if label_map is None:
        return np.array([r.label for r in records], dtype=np.int64)
    try:
        return np.array([label_map[r.label] for r in records], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"record label {exc} missing from label map") from exc


def _train_classifier(net, records, labels, cfg: TrainConfig, eval_hook=None,
                      early_stop=False):
    opt = Adam(net.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    batch_rng = _rng(cfg, _R_BATCH)
    drop_rng = _rng(cfg, _R_DROPOUT)
    x_all = np.concatenate([r.pixels for r in records], axis=0).astype(np.float32)
    history = []
    best = np.inf
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        total, nstep = 0.0, 0
        for idx in _batches(len(records), cfg.batch_size, batch_rng):
            x, y = x_all[idx], labels[idx]
            fwd = net.forward(x, TRAIN, rng=drop_rng)
            loss = L.cross_entropy(fwd.output, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite classifier loss at epoch {epoch}")
            _, grads = net.backward(fwd, grad_output=L.cross_entropy_grad(fwd.output, y))
            try:
                opt.step(grads)
            except GradientError as exc:
                raise TrainingDiverged(
                    f"non-finite gradient at epoch {epoch}: {exc}") from exc
            total += loss
            nstep += 1
        mean_loss = total / max(nstep, 1)
        history.append({"epoch": epoch, "term": "cross_entropy", "value": mean_loss})
        if eval_hook:
            eval_hook(epoch, net)
        if early_stop:
            if mean_loss < best - 1e-4:
                best, stale = mean_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return history


def _classifier_checkpoint(net, cfg, meta_extra):
    meta = {"seed": cfg.seed, "thread_count": thread_count(),
            "config": cfg.echo(), "config_sha256": config_digest(cfg.echo())}
    meta.update(meta_extra)
    return Checkpoint.from_named({"cnn_classifier": net.state_dict()}, meta)


def pretrain_classifier(generated: list[PatchRecord], negatives: list[PatchRecord],
                        net, cfg: TrainConfig, label_map=None):
    """Stage one: cross-entropy training on the generated pool (plus the
    balancing negative/other-class records). Binary runs must be balanced
    within 1%."""
    cfg.validate()
    records = list(generated) + list(negatives)
    if not records:
        raise ValueError("empty pre-training pool")
    num_outputs = net.out_shape[1]
    labels = _mapped_labels(records, label_map)
    if labels.max() >= num_outputs:
        raise ValueError(f"label {labels.max()} out of range for {num_outputs}-way head")
    if num_outputs == 2:
        pos = int((labels == 1).sum())
        if abs(pos - (len(labels) - pos)) > 0.01 * len(labels):
            raise ValueError(
                f"binary pre-training must be balanced: {pos} positive vs "
                f"{len(labels) - pos} negative"
            )
    history = _train_classifier(net, records, labels, cfg)
    ckpt = _classifier_checkpoint(net, cfg, {
        "stage": STAGE_PRETRAIN, "num_outputs": num_outputs,
        "pool_size": len(records), "epochs_run": len(history),
    })
    return ckpt, history


def finetune_classifier(ckpt: Checkpoint, real: list[PatchRecord], cfg: TrainConfig,
                        label_map=None, eval_hook=None):
    """Stage two: continue training on real records only, all layers
    trainable, default learning rate 0.001."""
    cfg.validate()
    if not real:
        raise ValueError("fine-tuning requires real records")
    bad = [r.record_id for r in real if r.provenance != REAL]
    if bad:
        raise ValueError(f"fine-tuning consumes real records only; got {bad[:3]}")
    num_outputs = int(ckpt.metadata.get("num_outputs", 0))
    if num_outputs not in (2, 10):
        raise CheckpointError(f"checkpoint lacks a valid num_outputs, got {num_outputs}")
    net = build_cnn_classifier(num_outputs)
    net.load_state(ckpt.group("cnn_classifier"))
    labels = _mapped_labels(real, label_map)
    history = []
    if cfg.epochs > 0:
        history = _train_classifier(net, real, labels, cfg, eval_hook=eval_hook,
                                    early_stop=True)
    out = _classifier_checkpoint(net, cfg, {
        "stage": STAGE_FINETUNE, "num_outputs": num_outputs,
        "epochs_run": len(history),
    })
    for layer in net.layers:
        layer.release_buffers()
    return out, history


def load_cnn(ckpt: Checkpoint):
    num_outputs = int(ckpt.metadata.get("num_outputs", 0))
    net = build_cnn_classifier(num_outputs)
    net.load_state(ckpt.group("cnn_classifier"))
    return net


def predict(net, records, batch: int = 64) -> np.ndarray:
    """Most-likely class index per record (inference mode)."""
    out = np.empty(len(records), dtype=np.int64)
    for lo in range(0, len(records), batch):
        chunk = records[lo:lo + batch]
        x = np.concatenate([r.pixels for r in chunk], axis=0).astype(np.float32)
        probs = net.forward(x, INFER).output
        out[lo:lo + len(chunk)] = probs.argmax(axis=1)
    return out


def history_csv(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,term,value\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['term']},{row['value']:.8g}\n")


__all__ = [
    "TrainConfig", "TrainingDiverged", "train_cvae_gan", "generate_samples",
    "diversity_score", "pretrain_classifier", "finetune_classifier", "predict",
    "load_cnn", "history_csv", "class_minmax_stats", "build_gan_nets",
    "save_checkpoint", "load_checkpoint",
]
