"""Independent brute-force oracles shared by the unit and acceptance tests."""
import math

import numpy as np
import torch

from caseforge.losses import (feature_adv_loss, identity_loss, image_adv_loss, reconstruction_loss,
                              triplet_loss)
from caseforge.models import (classify, color_encode, discriminate_features, discriminate_image,
                              generate_image, shape_encode)


def ce_oracle(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=float), np.asarray(labels)):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[y]
    return total / len(labels)


def hinge_oracle(f, pos, neg, margin):
    f = np.asarray(f, dtype=float)
    total = 0.0
    for i in range(len(f)):
        dp = math.sqrt(sum((a - b) ** 2 for a, b in zip(f[i], f[pos[i]])))
        dn = math.sqrt(sum((a - b) ** 2 for a, b in zip(f[i], f[neg[i]])))
        total += max(0.0, margin + dp - dn)
    return total / len(f)


def adversarial_oracle(p_real, p_fake):
    """Negated binary cross-entropy with real -> 1, fake -> 0."""
    bce_real = -sum(math.log(p) for p in p_real) / len(p_real)
    bce_fake = -sum(math.log(1 - p) for p in p_fake) / len(p_fake)
    return -(bce_real + bce_fake)


def l1_oracle(a, b):
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    return sum(abs(x - y) for x, y in zip(a, b)) / len(a)


def cmc_oracle(rank_lists, relevance, max_rank):
    """Rank-k accuracy by checking every prefix of every list."""
    valid = [(r, rel) for r, rel in zip(rank_lists, relevance) if any(rel[i] for i in r)]
    out = []
    for k in range(1, max_rank + 1):
        hits = sum(1 for r, rel in valid if any(rel[i] for i in list(r)[:k]))
        out.append(hits / len(valid))
    return np.array(out)


def ap_oracle(ranked, rel):
    """Average of precision@i over positions i holding a relevant item."""
    precisions = []
    for i in range(len(ranked)):
        if rel[ranked[i]]:
            top = ranked[:i + 1]
            precisions.append(sum(1 for j in top if rel[j]) / (i + 1))
    return sum(precisions) / len(precisions)


def map_oracle(rank_lists, relevance):
    aps = [ap_oracle(list(r), rel) for r, rel in zip(rank_lists, relevance) if any(rel[i] for i in r)]
    return sum(aps) / len(aps)


def random_retrieval_instance(rng, max_queries=30, max_gallery=100):
    n_q = int(rng.integers(1, max_queries + 1))
    n_g = int(rng.integers(2, max_gallery + 1))
    rank_lists, relevance = [], []
    for _ in range(n_q):
        keep = rng.random(n_g) > rng.random() * 0.3   # some gallery rows excluded
        order = rng.permutation(n_g)
        rank_lists.append(order[keep[order]])
        rel = rng.random(n_g) < rng.uniform(0.02, 0.3)
        relevance.append(rel)
    return rank_lists, relevance


# analytic-vs-numeric gradients over the networks each loss trains

def loss_closures(bundle, batch, margin=2.0):
    """Loss name -> (closure returning a scalar, parameter groups it trains)."""
    def f_rgb():
        return shape_encode(bundle, batch.x_rgb)

    def f_gray():
        return shape_encode(bundle, batch.x_gray)

    def l_id():
        return identity_loss(classify(bundle, f_rgb().vector), classify(bundle, f_gray().vector), batch.labels)

    def l_tri():
        return triplet_loss(f_rgb().vector, f_gray().vector, batch.pos_idx, batch.neg_idx, margin)

    def l_adv_df():
        return feature_adv_loss(discriminate_features(bundle, f_rgb()), discriminate_features(bundle, f_gray()))

    def x_hat():
        return generate_image(bundle, f_gray().map, color_encode(bundle, batch.x_rgb_prime))

    def l_rec():
        return reconstruction_loss(x_hat(), batch.x_rgb)

    def l_adv_di():
        return image_adv_loss(discriminate_image(bundle, batch.x_rgb), discriminate_image(bundle, x_hat()))

    return {
        "l_id": (l_id, ["shape_encoder"]),
        "l_tri": (l_tri, ["shape_encoder"]),
        "l_adv_DF": (l_adv_df, ["shape_encoder", "feature_discriminator"]),
        "l_rec": (l_rec, ["shape_encoder", "color_encoder", "generator"]),
        "l_adv_DI": (l_adv_di, ["shape_encoder", "color_encoder", "generator", "image_discriminator"]),
    }


def gradient_check(bundle, closure, groups, rng, per_group=4, h=1e-6, rtol=1e-4, atol=1e-8, max_draws=50):
    """Worst violation of |analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol.

    ``numeric`` is the central difference with step ``h``. Coordinates whose
    one-sided differences disagree by more than the same tolerance sit on a
    ReLU/abs kink, where central differences are not a valid oracle; they
    are redrawn and counted.

    Returns ``(max_excess, n_checked, n_kinks)``; ``max_excess <= 0`` means
    every checked coordinate passed.
    """
    bundle.eval()   # fixed forward function (no stochastic layers are used)
    worst, n, kinks = -math.inf, 0, 0
    for g in groups:
        params = [p for p in bundle.group(g).parameters() if p.requires_grad]
        done = 0
        for _ in range(max_draws):
            if done == per_group:
                break
            p = params[int(rng.integers(len(params)))]
            j = int(rng.integers(p.numel()))
            bundle.zero_grad(set_to_none=True)
            loss = closure()
            loss.backward()
            base = float(loss.detach())
            analytic = float(p.grad.reshape(-1)[j]) if p.grad is not None else 0.0
            with torch.no_grad():
                flat = p.view(-1)
                orig = float(flat[j])
                flat[j] = orig + h
                up = float(closure())
                flat[j] = orig - h
                down = float(closure())
                flat[j] = orig
            fwd, bwd = (up - base) / h, (base - down) / h
            if abs(fwd - bwd) > rtol * max(abs(fwd), abs(bwd)) + atol:
                kinks += 1
                continue
            numeric = (up - down) / (2 * h)
            excess = abs(analytic - numeric) - (rtol * max(abs(analytic), abs(numeric)) + atol)
            worst = max(worst, excess)
            n += 1
            done += 1
    bundle.zero_grad(set_to_none=True)
    return worst, n, kinks
