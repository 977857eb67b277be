"""Adversarial, cycle, identity and gradient losses and their weighted total.

All L1 terms are voxel means, so the weights do not depend on volume size.
Generators are passed as plain callables (Tensor -> Tensor).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import functional as fn
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 8.0  # cycle
    lambda2: float = 0.1  # identity
    lambda3: float = 0.1  # gradient

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def adv_loss_discriminator(d_real_logits, d_fake_logits):
    """BCE pushing real patches to 1 and fake patches to 0.

    ``d_fake_logits`` must come from a detached fake so no gradient reaches
    the generator; :func:`discriminator_loss` takes care of that.
    """
    return fn.bce_with_logits(d_real_logits, 1.0) + fn.bce_with_logits(d_fake_logits, 0.0)


def adv_loss_generator(d_fake_logits, saturating=False):
    """Non-saturating -log D(G(x)) by default; ``saturating`` gives log(1 - D(G(x)))."""
    if saturating:
        return -fn.bce_with_logits(d_fake_logits, 0.0)
    return fn.bce_with_logits(d_fake_logits, 1.0)


def discriminator_loss(D, real, fake):
    return adv_loss_discriminator(D(real), D(fake.detach()))


def cycle_loss(x, y, G, F, fake_y=None, fake_x=None):
    fake_y = G(x) if fake_y is None else fake_y
    fake_x = F(y) if fake_x is None else fake_x
    return fn.l1_distance(F(fake_y), x) + fn.l1_distance(G(fake_x), y)


def to_three_channels(x):
    return fn.repeat_channels(x, 3)


def to_gray(y):
    return fn.channel_mean(y)


def identity_loss(x, y, G, F):
    """F on a 3-channel copy of x should return x; G on gray(y) should return y."""
    return fn.l1_distance(F(to_three_channels(x)), x) + fn.l1_distance(G(to_gray(y)), y)


def gradient_loss(x, y, G, F, fake_y=None, fake_x=None):
    """L1 between spatial gradients of each translation and the other domain's real sample."""
    fake_y = G(x) if fake_y is None else fake_y
    fake_x = F(y) if fake_x is None else fake_x
    return (fn.l1_distance(fn.spatial_gradient(fake_y), fn.spatial_gradient(y))
            + fn.l1_distance(fn.spatial_gradient(fake_x), fn.spatial_gradient(x)))


def total_objective(parts, weights):
    """adv_G + adv_F + lambda1*cyc + lambda2*id + lambda3*gl.

    ``parts`` maps "adv_G", "adv_F", "cyc", "id", "gl" to scalars (Tensor or
    float).  A term whose weight is zero may be omitted.
    """
    total = parts["adv_G"] + parts["adv_F"]
    for key, lam in (("cyc", weights.lambda1), ("id", weights.lambda2), ("gl", weights.lambda3)):
        if key in parts and parts[key] is not None:
            total = total + parts[key] * lam
        elif lam != 0:
            raise KeyError(f"loss part {key!r} missing with nonzero weight {lam}")
    return total


def generator_objective(x, y, G, F, D_X, D_Y, weights, use_gradient_loss=True, saturating=False):
    """Forward both generators once and assemble every generator-side term.

    Returns ``(total, parts, fake_y, fake_x)``; the fakes are reused for the
    discriminator updates.
    """
    fake_y = G(x)
    fake_x = F(y)
    parts = {
        "adv_G": adv_loss_generator(D_Y(fake_y), saturating),
        "adv_F": adv_loss_generator(D_X(fake_x), saturating),
        "cyc": cycle_loss(x, y, G, F, fake_y, fake_x),
    }
    if weights.lambda2 > 0:
        parts["id"] = identity_loss(x, y, G, F)
    if use_gradient_loss:
        parts["gl"] = gradient_loss(x, y, G, F, fake_y, fake_x)
    w = weights if use_gradient_loss else LossWeights(weights.lambda1, weights.lambda2, 0.0)
    return total_objective(parts, w), parts, fake_y, fake_x


def as_float(v):
    return v.item() if isinstance(v, Tensor) else float(v)
