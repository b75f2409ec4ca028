"""Training objectives.

Batch expectations are realized as batch means. The two adversarial terms
are returned in their value form (``E log D(real) + E log(1 - D(fake))``,
at most zero); the optimized parties use the non-saturating surrogates
:func:`discriminator_loss` and :func:`generator_loss`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError


@dataclass
class HyperParams:
    margin: float = 2.0
    lambda_tri: float = 1.0
    lambda_I: float = 0.1

    def validate(self) -> None:
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0 (got {self.margin})")
        if self.lambda_tri < 0 or self.lambda_I < 0:
            raise ConfigError("lambda_tri and lambda_I must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossValues:
    l_id: float | None = None
    l_tri: float | None = None
    l_adv_DF: float | None = None
    l_rec: float | None = None
    l_adv_DI: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _ce(logits, labels):
    k = logits.shape[1]
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


def identity_loss(logits_rgb, logits_gray, labels):
    """Cross-entropy of the RGB stream plus that of the gray stream.

    ``logits_gray`` may be ``None`` for a single-stream (RGB only) model.
    """
    loss = _ce(logits_rgb, labels)
    if logits_gray is not None:
        loss = loss + _ce(logits_gray, labels)
    return loss


def triplet_distances(f_anchor, f_pos, f_neg):
    if f_anchor.shape != f_pos.shape or f_anchor.shape != f_neg.shape:
        raise ShapeMismatchError(f"triplet features differ in shape: {tuple(f_anchor.shape)}, "
                                 f"{tuple(f_pos.shape)}, {tuple(f_neg.shape)}")
    d_pos = torch.linalg.vector_norm(f_anchor - f_pos, dim=-1)
    d_neg = torch.linalg.vector_norm(f_anchor - f_neg, dim=-1)
    return d_pos, d_neg


def _hinge(f, pos_idx, neg_idx, margin):
    n = f.shape[0]
    for name, idx in (("pos_idx", pos_idx), ("neg_idx", neg_idx)):
        if idx.shape != (n,) or (n and (int(idx.min()) < 0 or int(idx.max()) >= n)):
            raise IndexError(f"{name} must be a length-{n} vector of in-batch indices")
    d_pos, d_neg = triplet_distances(f, f[pos_idx], f[neg_idx])
    return torch.clamp(margin + d_pos - d_neg, min=0.0).mean()


def triplet_loss(f_rgb, f_gray, pos_idx, neg_idx, margin: float = 2.0):
    """Hinge ``max(0, m + d_pos - d_neg)`` averaged over anchors and streams.

    ``f_gray`` may be ``None`` (RGB stream only).
    """
    losses = [_hinge(f_rgb, pos_idx, neg_idx, margin)]
    if f_gray is not None:
        losses.append(_hinge(f_gray, pos_idx, neg_idx, margin))
    return sum(losses) / len(losses)


def _check_probs(p, name):
    if p.numel() and not bool(((p > 0) & (p < 1)).all()):
        raise ValueError(f"{name} must lie strictly inside (0, 1)")


def adversarial_value(probs_real, probs_fake):
    """``E[log D(real)] + E[log(1 - D(fake))]``; the discriminator maximizes it."""
    _check_probs(probs_real, "probs_real")
    _check_probs(probs_fake, "probs_fake")
    return torch.log(probs_real).mean() + torch.log1p(-probs_fake).mean()


def feature_adv_loss(probs_rgb, probs_gray):
    """Feature-level adversarial value with RGB features as the 'real' side."""
    return adversarial_value(probs_rgb, probs_gray)


def image_adv_loss(probs_real, probs_fake):
    """Image-level adversarial value; real = x_rgb, fake = reconstruction."""
    return adversarial_value(probs_real, probs_fake)


def discriminator_loss(probs_real, probs_fake):
    """BCE with real -> 1 and fake -> 0; equals ``-adversarial_value``."""
    return -adversarial_value(probs_real, probs_fake)


def generator_loss(probs_fake):
    """Label-flipped (non-saturating) surrogate: BCE of fake -> 1."""
    _check_probs(probs_fake, "probs_fake")
    return -torch.log(probs_fake).mean()


def reconstruction_loss(x_hat, x_rgb):
    """Per-element mean absolute error."""
    if x_hat.shape != x_rgb.shape:
        raise ShapeMismatchError(f"reconstruction {tuple(x_hat.shape)} vs target {tuple(x_rgb.shape)}")
    return (x_hat - x_rgb).abs().mean()
