"""Scalar training objectives: invariance penalty, worst-group loss, dual-regularized local loss.

The invariance penalty follows the practical scalar-dummy-classifier form: per
environment, the squared derivative of the risk with respect to a scalar
multiplier on the logits, evaluated at 1. That derivative has the closed form
mean_i <softmax(z_i) - onehot(y_i), z_i>, which keeps the whole objective
first-order differentiable; the nested-derivative definition survives only as
a finite-difference oracle in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import Environment
from .models import ModelArch, forward, risk


@dataclass(frozen=True)
class GroupWeights:
    """Probability simplex weights over training environments."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        q.flags.writeable = False
        object.__setattr__(self, "q", q)
        if q.ndim != 1 or q.size < 1:
            raise ValueError("q must be a non-empty vector")
        if (q < 0).any() or abs(q.sum() - 1.0) > 1e-12:
            raise ValueError("q must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, g: int) -> "GroupWeights":
        return cls(np.full(g, 1.0 / g))

    def __len__(self) -> int:
        return self.q.size


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 1.0
    lambda_warmup_rounds: int = 0
    dro_step: float = 0.01

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lambda_warmup_rounds < 0:
            raise ValueError("lambda_warmup_rounds must be non-negative")
        if self.dro_step <= 0:
            raise ValueError("dro_step must be positive")


def dummy_grad(params, arch: ModelArch, env: Environment):
    """Derivative of the risk w.r.t. a scalar logit multiplier, at multiplier 1.

    Closed form mean_i <softmax(z_i) - onehot(y_i), z_i>; an ordinary
    differentiable expression of the parameters.
    """
    if env.n < 1:
        raise ValueError("environment must be non-empty")
    z = forward(params, arch, env.inputs)
    p = nm.softmax_rows(z)
    inner = nm.sub(nm.sum_all(nm.mul(p, z)), nm.sum_all(nm.gather_rows(z, env.labels)))
    return nm.mul(inner, 1.0 / env.n)


def irm_loss(params, arch: ModelArch, envs: Sequence[Environment], lam: float):
    """Sum over environments of risk + lam * dummy_grad^2.

    Environments are a set: terms accumulate in context-id order (stable), so
    the value is independent of the order the caller passes them in.
    """
    if not envs:
        raise ValueError("need at least one environment")
    total = None
    for env in sorted(envs, key=lambda e: e.context_id):
        term = risk(params, arch, env)
        if lam != 0.0:
            term = nm.add(term, nm.mul(lam, nm.square(dummy_grad(params, arch, env))))
        total = term if total is None else nm.add(total, term)
    return total


def groupdro_loss(params, arch: ModelArch, envs: Sequence[Environment], weights: GroupWeights):
    """Simplex-weighted sum of per-environment risks."""
    if len(weights) != len(envs):
        raise ValueError(f"{len(weights)} weights for {len(envs)} environments")
    total = None
    for q_e, env in zip(weights.q, envs):
        term = nm.mul(float(q_e), risk(params, arch, env))
        total = term if total is None else nm.add(total, term)
    return total


def groupdro_update_q(
    weights: GroupWeights, per_env_risks: Sequence[float], dro_step: float
) -> GroupWeights:
    """Exponentiated-gradient ascent on the simplex; larger risks gain weight.

    Stabilized by subtracting the max exponent, which cancels in the
    normalization.
    """
    risks = np.asarray(per_env_risks, dtype=np.float64)
    if risks.shape != (len(weights),):
        raise ValueError("one risk per weight required")
    if not np.isfinite(risks).all():
        raise ValueError("risks must be finite")
    logits = dro_step * risks
    scaled = weights.q * np.exp(logits - logits.max())
    return GroupWeights(scaled / scaled.sum())


def proximity(theta, anchor):
    """Squared L2 distance of a (possibly traced) vector to a fixed anchor."""
    diff = nm.sub(theta.flat, anchor.data)
    return nm.sum_all(nm.square(diff))


def local_objective(
    theta,
    anchor,
    arch: ModelArch,
    envs: Sequence[Environment],
    lam: float,
    beta: float,
    group_weights: GroupWeights | None = None,
):
    """Dual-regularized local loss: invariance term + beta * |theta - anchor|^2.

    The invariance term is the IRM form by default; passing group_weights
    selects the worst-group form instead.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if theta.layout != anchor.layout:
        raise nm.LayoutError("theta and anchor must share a layout")
    if group_weights is not None:
        inv = groupdro_loss(theta, arch, envs, group_weights)
    else:
        inv = irm_loss(theta, arch, envs, lam)
    if beta == 0.0:
        return inv
    return nm.add(inv, nm.mul(beta, proximity(theta, anchor)))
