"""Loss stack for the co-training framework.

Supervised CE+Dice against ground truth, cross-pseudo-supervision against the
partner network's hardened predictions, perturbed-consistency between
downsampled channel-normalized probability maps, the ramp-up schedule for the
unlabeled terms, and total-loss assembly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DataError, ShapeError

DICE_SMOOTH = 1e-5

LOSS_CSV_HEADER = "round,epoch,iter,sup1,sup2,semi1,semi2,con,lambda,total"


@dataclass
class LossBreakdown:
    """Scalar components of one assembled training loss."""

    sup1: float
    sup2: float
    semi1: float
    semi2: float
    con: float
    lambda_t: float
    total: float

    def identity_gap(self) -> float:
        """|total - ((sup1+sup2) + lambda*(semi1+semi2) + con)|."""
        expected = (self.sup1 + self.sup2) + self.lambda_t * (self.semi1 + self.semi2) + self.con
        return abs(self.total - expected)

    def csv_row(self, round_index: int, epoch: int, iteration: int) -> str:
        vals = [self.sup1, self.sup2, self.semi1, self.semi2, self.con,
                self.lambda_t, self.total]
        return ",".join([str(round_index), str(epoch), str(iteration)]
                        + [repr(v) for v in vals])


@dataclass
class ConsistencyParams:
    """Noise level, downsample size and normalization floor for the
    consistency term."""

    noise_sigma: float = 0.2
    ds_out: int = 8
    eps: float = 1e-8
    stop_teacher_grad: bool = False  # ablation switch; default co-trains both

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.ds_out < 1:
            raise ConfigError(f"ds_out must be >= 1, got {self.ds_out}")


def _check_target(target: Tensor) -> None:
    sums = target.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise DataError("target rows must sum to 1 per pixel (one-hot or soft)")


def cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean pixel CE of softmax(logits) against a normalized target map."""
    if logits.shape != target.shape:
        raise ShapeError(f"cross_entropy: shapes {logits.shape} vs {target.shape}")
    _check_target(target)
    return ag.softmax_cross_entropy(logits, target, axis=1)


def dice_loss(probs: Tensor, target: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean per-class-and-item Dice coefficient, with additive smoothing."""
    if probs.shape != target.shape:
        raise ShapeError(f"dice_loss: shapes {probs.shape} vs {target.shape}")
    inter = ag.sum(ag.mul(probs, target), axes=(2, 3))
    psum = ag.sum(probs, axes=(2, 3))
    tsum = ag.sum(target, axes=(2, 3))
    dice = (2.0 * inter + smooth) / (psum + tsum + smooth)
    return 1.0 - ag.mean(dice)


def supervised_loss(logits: Tensor, target: Tensor) -> Tensor:
    """CE plus Dice of one prediction against its reference map."""
    return ag.add(cross_entropy(logits, target),
                  dice_loss(ag.softmax(logits, axis=1), target))


def make_pseudo_label(logits: Tensor) -> Tensor:
    """Per-pixel argmax one-hot of the logits; ties pick class 0; detached."""
    idx = logits.data.argmax(axis=1)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, idx[:, None, :, :], 1.0, axis=1)
    return Tensor(onehot)


def semi_supervised_loss(logits: Tensor, pseudo: Tensor) -> Tensor:
    """CE plus Dice against the partner network's detached one-hot labels."""
    if pseudo.requires_grad or pseudo._node is not None:
        raise ContractError("semi_supervised_loss: pseudo label must be detached")
    return supervised_loss(logits, pseudo)


def perturb(x: Tensor, sigma: float, seed: Union[int, np.random.Generator]) -> Tensor:
    """x plus iid Gaussian noise of scale sigma; seeded; output not clamped."""
    if sigma < 0:
        raise ConfigError(f"perturb: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Tensor(x.data.copy())
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Tensor(x.data + rng.normal(0.0, sigma, size=x.shape))


def consistency_loss(logits_a: Tensor, logits_b: Tensor,
                     params: ConsistencyParams) -> Tensor:
    """MSE between channel-normalized, downsampled probability maps.

    Both inputs are (B, C, H, W) logits; the perturbation belongs upstream
    (logits_b is typically the partner network on the noised batch). Gradient
    flows into both sides unless ``stop_teacher_grad`` is set.
    """
    if logits_a.shape != logits_b.shape:
        raise ShapeError(f"consistency_loss: shapes {logits_a.shape} vs {logits_b.shape}")
    h = logits_a.shape[2]
    if params.ds_out > h:
        raise ConfigError(f"consistency_loss: ds_out {params.ds_out} exceeds input size {h}")
    if params.stop_teacher_grad:
        logits_b = logits_b.detach()

    def branch(logits):
        probs = ag.softmax(logits, axis=1)
        pooled = ag.adaptive_avg_pool2d(probs, params.ds_out)
        return ag.l2_normalize(pooled, axis=1, eps=params.eps)

    return ag.mse(branch(logits_a), branch(logits_b))


def ramp_up_weight(iteration: int, max_iter: int) -> float:
    """Gaussian ramp e^(-5*(1 - t/T)^2); 1 at t = T, clamped to 1 past it."""
    if max_iter <= 0:
        raise ConfigError(f"ramp_up_weight: max_iter must be > 0, got {max_iter}")
    if iteration < 0:
        raise ContractError(f"ramp_up_weight: iteration must be >= 0, got {iteration}")
    if iteration >= max_iter:
        return 1.0
    frac = 1.0 - iteration / max_iter
    return math.exp(-5.0 * frac * frac)


def total_loss(sup1: Tensor, sup2: Tensor, semi1: Tensor, semi2: Tensor,
               con: Tensor, lambda_t: float) -> tuple[Tensor, LossBreakdown]:
    """Assemble (sup1+sup2) + lambda*(semi1+semi2) + con; returns the scalar
    graph node plus the logged breakdown."""
    total = ag.add(
        ag.add(ag.add(sup1, sup2), ag.scalar_mul(ag.add(semi1, semi2), lambda_t)),
        con)
    breakdown = LossBreakdown(
        sup1=sup1.item(), sup2=sup2.item(), semi1=semi1.item(), semi2=semi2.item(),
        con=con.item(), lambda_t=float(lambda_t), total=total.item())
    return total, breakdown
