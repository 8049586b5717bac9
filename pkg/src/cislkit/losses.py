"""Training objectives: adversarial loss, KL divergence, L2 reconstruction,
mean and pairwise feature matching, and classification cross-entropy.

Each loss has a companion gradient function returning analytic derivatives
with respect to its tensor inputs. Probabilities entering a log are clamped
to [1e-7, 1 - 1e-7]; the gradient is zero in the clamped region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import PROB_EPS, ShapeError


@dataclass
class LossWeights:
    """Weights of the combined generator objective.

    Defaults put all terms at the same order of magnitude on the synthetic
    dataset at init: reconstruction and pairwise matching sum over many
    coordinates, so they are scaled down.
    """

    lambda_adv: float = 1.0
    lambda_kl: float = 1.0
    lambda_rec: float = 1e-2
    lambda_mean_fm: float = 1.0
    lambda_pair_fm: float = 1e-2
    lambda_cls: float = 1.0
    saturating_g: bool = False
    use_disc_features: bool = True
    use_cls_features: bool = True

    def validate(self):
        for name in ("lambda_adv", "lambda_kl", "lambda_rec", "lambda_mean_fm",
                     "lambda_pair_fm", "lambda_cls"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite nonnegative real, got {v}")
        return self


@dataclass
class GeneratorLossParts:
    """Individual generator-side loss terms before weighting."""

    adv: float = 0.0
    kl: float = 0.0
    rec: float = 0.0
    mean_fm_d: float = 0.0
    mean_fm_c: float = 0.0
    pair_fm_d: float = 0.0
    pair_fm_c: float = 0.0


def _clamp(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def adv_loss(d_real, d_fake, saturating_g=False):
    """Discriminator and generator objectives over sigmoid outputs.

    loss_d = -mean log d_real - mean log(1 - d_fake); loss_g is the
    non-saturating -mean log d_fake unless saturating_g asks for the
    mean log(1 - d_fake) form.
    """
    pr, pf = _clamp(d_real), _clamp(d_fake)
    loss_d = float(-np.mean(np.log(pr)) - np.mean(np.log(1.0 - pf)))
    if saturating_g:
        loss_g = float(np.mean(np.log(1.0 - pf)))
    else:
        loss_g = float(-np.mean(np.log(pf)))
    return loss_d, loss_g


def adv_loss_d_grads(d_real, d_fake):
    """Gradients of loss_d w.r.t. the raw probabilities (zero where clamped)."""
    in_r = (d_real > PROB_EPS) & (d_real < 1.0 - PROB_EPS)
    in_f = (d_fake > PROB_EPS) & (d_fake < 1.0 - PROB_EPS)
    g_real = np.where(in_r, -1.0 / (_clamp(d_real) * d_real.size), 0.0)
    g_fake = np.where(in_f, 1.0 / ((1.0 - _clamp(d_fake)) * d_fake.size), 0.0)
    return g_real.astype(d_real.dtype), g_fake.astype(d_fake.dtype)


def adv_loss_g_grad(d_fake, saturating_g=False):
    in_f = (d_fake > PROB_EPS) & (d_fake < 1.0 - PROB_EPS)
    if saturating_g:
        g = np.where(in_f, -1.0 / ((1.0 - _clamp(d_fake)) * d_fake.size), 0.0)
    else:
        g = np.where(in_f, -1.0 / (_clamp(d_fake) * d_fake.size), 0.0)
    return g.astype(d_fake.dtype)


def kl_loss(mu, log_sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)), mean over the batch."""
    per_sample = 0.5 * np.sum(mu * mu + np.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma, axis=1)
    return float(per_sample.mean())


def kl_loss_grads(mu, log_sigma):
    n = mu.shape[0]
    g_mu = mu / n
    g_ls = (np.exp(2.0 * log_sigma) - 1.0) / n
    return g_mu.astype(mu.dtype), g_ls.astype(log_sigma.dtype)


def recon_loss(x, x_prime):
    """Mean over the batch of half the squared L2 distance per sample."""
    if x.shape != x_prime.shape:
        raise ShapeError(f"recon: shapes differ, {x.shape} vs {x_prime.shape}")
    d = (x - x_prime).reshape(x.shape[0], -1)
    return float(0.5 * np.mean(np.sum(d * d, axis=1)))


def recon_loss_grad(x, x_prime):
    """Gradient w.r.t. the reconstruction x_prime."""
    return ((x_prime - x) / x.shape[0]).astype(x_prime.dtype)


def mean_feature_matching(f_real, f_fake):
    """Squared L2 distance between batch-mean feature vectors."""
    if f_real.shape[1] != f_fake.shape[1]:
        raise ShapeError(
            f"mean fm: feature widths differ, {f_real.shape[1]} vs {f_fake.shape[1]}"
        )
    d = f_real.mean(axis=0) - f_fake.mean(axis=0)
    return float(np.dot(d, d))


def mean_feature_matching_grad(f_real, f_fake):
    """Gradient w.r.t. the fake features (real batch treated as constant)."""
    d = f_real.mean(axis=0) - f_fake.mean(axis=0)
    g = (-2.0 / f_fake.shape[0]) * d
    return np.broadcast_to(g, f_fake.shape).astype(f_fake.dtype)


def pairwise_feature_matching(f_x, f_x_prime):
    """Half squared L2 between each sample's features and its reconstruction's,
    averaged over the batch."""
    if f_x.shape != f_x_prime.shape:
        raise ShapeError(f"pair fm: shapes differ, {f_x.shape} vs {f_x_prime.shape}")
    d = f_x - f_x_prime
    return float(0.5 * np.mean(np.sum(d * d, axis=1)))


def pairwise_feature_matching_grad(f_x, f_x_prime):
    """Gradient w.r.t. the reconstruction features."""
    return ((f_x_prime - f_x) / f_x.shape[0]).astype(f_x_prime.dtype)


def cross_entropy(probs, labels):
    """-mean log probs[i, label_i] over row-stochastic probabilities."""
    labels = np.asarray(labels)
    if probs.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross entropy: {probs.shape[0]} rows vs {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(f"label out of range for {probs.shape[1]} classes")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(_clamp(picked))))


def cross_entropy_grad(probs, labels):
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    inside = (picked > PROB_EPS) & (picked < 1.0 - PROB_EPS)
    g = np.zeros_like(probs)
    g[np.arange(len(labels)), labels] = np.where(
        inside, -1.0 / (_clamp(picked) * len(labels)), 0.0
    )
    return g


def total_generator_loss(parts: GeneratorLossParts, w: LossWeights) -> float:
    """Weighted sum of the generator-side terms."""
    mean_fm = (parts.mean_fm_d if w.use_disc_features else 0.0) + (
        parts.mean_fm_c if w.use_cls_features else 0.0
    )
    pair_fm = (parts.pair_fm_d if w.use_disc_features else 0.0) + (
        parts.pair_fm_c if w.use_cls_features else 0.0
    )
    return float(
        w.lambda_adv * parts.adv
        + w.lambda_kl * parts.kl
        + w.lambda_rec * parts.rec
        + w.lambda_mean_fm * mean_fm
        + w.lambda_pair_fm * pair_fm
    )
