"""Federated training loops: the dual-regularized personalized method and baselines.

One server round broadcasts the global model, runs R local global-model steps
per client (each preceded by S personalized steps anchored at the *current*
local global iterate), then pulls the global model toward the client average:

    nu <- nu - alpha * (nu - mean_i nu_{i,R})

Personalized models warm-start across rounds. Available methods:

* ``perinvfl``      - personalized track (invariance + proximal) + global invariance track
* ``fedavg``        - plain-risk global track, alpha = 1, no personalization
* ``irm_dist``      - invariance global track only (each client's dataset is one environment)
* ``groupdro_dist`` - worst-group global track; simplex weights updated on the server
* ``irm_l2``        - like perinvfl but the personalized loss drops the invariance penalty
* ``irm_ft``        - irm_dist followed by plain-risk local fine-tuning

Training is deterministic: full-batch gradients by default, client-keyed RNG
streams for optional minibatching, and aggregation reduced in ascending
client-id order, so any client processing order yields bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import ClientData, Environment, merge_environments
from .metrics import SERVER, MetricsLog
from .models import ModelArch, accuracy, init_params, risk, subsample
from .numerics import NumericOverflowError, ParamVector, grad
from .objectives import GroupWeights, dummy_grad, groupdro_update_q, irm_loss

METHODS = ("perinvfl", "fedavg", "irm_dist", "groupdro_dist", "irm_l2", "irm_ft")

# methods that maintain per-client personalized models during training
_PERSONAL = {"perinvfl", "irm_l2"}

LOSS_DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, message: str, round: int | None = None, client: int | None = None):
        super().__init__(message)
        self.round = round
        self.client = client


@dataclass(frozen=True)
class Hyperparams:
    """Every tunable of the training loop; `lam` is the invariance penalty weight."""

    T: int = 100
    R: int = 2
    S: int = 2
    beta: float | tuple[float, ...] = 0.1
    eta: float = 0.02
    gamma: float = 0.05
    alpha: float = 1.0
    lam: float = 30.0
    method: str = "perinvfl"
    lambda_warmup_rounds: int = 5
    dro_step: float = 0.01
    batch_size: int | None = None
    eval_every: int = 10

    def __post_init__(self):
        if self.T < 1 or self.R < 1:
            raise ValueError("T and R must be >= 1")
        if self.S < 0:
            raise ValueError("S must be >= 0")
        if self.eta < 0 or self.gamma < 0:
            raise ValueError("step sizes must be non-negative")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        betas = self.beta if isinstance(self.beta, (tuple, list)) else (self.beta,)
        if any(b < 0 for b in betas):
            raise ValueError("beta must be non-negative")
        if isinstance(self.beta, list):
            object.__setattr__(self, "beta", tuple(self.beta))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lambda_warmup_rounds < 0:
            raise ValueError("lambda_warmup_rounds must be >= 0")
        if self.dro_step <= 0:
            raise ValueError("dro_step must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 when set")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def beta_for(self, client_id: int) -> float:
        if isinstance(self.beta, tuple):
            return float(self.beta[client_id % len(self.beta)])
        return float(self.beta)


@dataclass
class ClientState:
    id: int
    theta: ParamVector | None
    nu_local: ParamVector
    train_envs: tuple[Environment, ...]
    test_env: Environment
    beta_i: float
    merged: Environment = None  # whole local dataset, one environment of the global objective

    def __post_init__(self):
        if self.merged is None:
            self.merged = merge_environments(self.train_envs, f"client{self.id}/all")


@dataclass
class ServerState:
    nu: ParamVector
    round: int = 0
    metrics: MetricsLog = field(default_factory=MetricsLog)
    group_weights: GroupWeights | None = None


@dataclass
class TrainResult:
    personalized: dict[int, ParamVector] | None
    global_model: ParamVector
    log: MetricsLog
    group_weights: GroupWeights | None = None
    global_history: list[ParamVector] | None = None

    def model_for(self, client_id: int) -> ParamVector:
        if self.personalized is not None:
            return self.personalized[client_id]
        return self.global_model


# ---------------------------------------------------------------------------
# Single update steps (Algorithm lines as standalone functions)
# ---------------------------------------------------------------------------


def personalized_step(
    theta: ParamVector,
    anchor: ParamVector,
    arch: ModelArch,
    envs: Sequence[Environment],
    eta: float,
    beta: float,
    lam: float,
) -> ParamVector:
    """theta - eta * (grad invariance loss + 2 beta (theta - anchor))."""
    g = grad(lambda p: irm_loss(p, arch, envs, lam), theta)
    step = g.data if beta == 0.0 else g.data + (2.0 * beta) * (theta.data - anchor.data)
    return theta.replace_data(theta.data - eta * step)


def local_global_step(
    nu_local: ParamVector,
    arch: ModelArch,
    local_dataset_env: Environment,
    gamma: float,
    lam: float,
) -> ParamVector:
    """One descent step on the client's single-environment invariance objective."""
    g = grad(lambda p: irm_loss(p, arch, [local_dataset_env], lam), nu_local)
    return nu_local.replace_data(nu_local.data - gamma * g.data)


def aggregate(nu: ParamVector, client_locals: Sequence[ParamVector], alpha: float) -> ParamVector:
    """nu - alpha * (nu - mean of client locals), reduced in the given order."""
    if not client_locals:
        raise ValueError("need at least one client model")
    for local in client_locals:
        if not nu.same_layout(local):
            raise nm.LayoutError("client model layout does not match the global model")
    stacked = np.stack([local.data for local in client_locals])
    mean = np.add.reduce(stacked, axis=0) / len(client_locals)
    return nu.replace_data(nu.data - alpha * (nu.data - mean))


# ---------------------------------------------------------------------------
# Full training loop
# ---------------------------------------------------------------------------


def _seed_for(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed)] + [int(k) for k in key])


def _global_objective(arch, env, lam, weight=None):
    """Per-client term of the decomposed global objective."""
    if weight is not None:
        return lambda p: nm.mul(float(weight), risk(p, arch, env))
    return lambda p: irm_loss(p, arch, [env], lam)


def train(
    clients: Sequence[ClientData],
    arch: ModelArch,
    hyper: Hyperparams,
    seed: int = 0,
    *,
    log: MetricsLog | None = None,
    record_global_history: bool = False,
) -> TrainResult:
    """Run the selected method for T rounds over the given clients.

    Deterministic in (clients, arch, hyper, seed); the client list order does
    not affect the result. Raises DivergenceError when the global loss leaves
    [0, 1e6] or a gradient goes non-finite, tagged with round and client.
    """
    method = hyper.method
    log = log if log is not None else MetricsLog()
    personal = method in _PERSONAL

    nu = init_params(arch, _seed_for(seed, 1))
    states: dict[int, ClientState] = {}
    for c in clients:
        theta = init_params(arch, _seed_for(seed, 2, c.id)) if personal else None
        states[c.id] = ClientState(
            c.id, theta, nu, c.train_envs, c.test_env, hyper.beta_for(c.id)
        )
    ids = sorted(states)
    batch_rngs = {
        cid: np.random.default_rng(_seed_for(seed, 3, cid)) for cid in ids
    } if hyper.batch_size else None

    q = GroupWeights.uniform(len(ids)) if method == "groupdro_dist" else None
    history: list[ParamVector] | None = [nu] if record_global_history else None

    def batch_of(env: Environment, cid: int) -> Environment:
        if batch_rngs is None:
            return env
        return subsample(env, hyper.batch_size, batch_rngs[cid])

    def _divergence(exc, t, cid):
        return DivergenceError(f"round {t}, client {cid}: {exc}", round=t, client=cid)

    for t in range(hyper.T):
        lam_t = 0.0 if t < hyper.lambda_warmup_rounds else hyper.lam
        glam = 0.0 if method == "fedavg" else lam_t

        # global objective value/gradient at the broadcast model
        grad_sum = np.zeros(nu.size)
        loss_sum = 0.0
        risks_at_nu = {}
        for cid in ids:
            st = states[cid]
            weight = q.q[ids.index(cid)] if q is not None else None
            obj = _global_objective(arch, st.merged, glam, weight)
            try:
                val, g = nm.value_and_grad(obj, nu)
            except NumericOverflowError as exc:
                raise _divergence(exc, t, cid) from exc
            grad_sum += g.data
            loss_sum += val
            if q is not None:
                risks_at_nu[cid] = nm.value(lambda p: risk(p, arch, st.merged), nu)
        grad_sq = float(grad_sum @ grad_sum) / len(ids) ** 2
        mean_loss = loss_sum / len(ids)
        if not np.isfinite(mean_loss) or abs(mean_loss) > LOSS_DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"round {t}: global loss {mean_loss:.3g} out of bounds", round=t
            )
        log.append(method, seed, t, SERVER, "global", "global_grad_sq", grad_sq)
        log.append(method, seed, t, SERVER, "global", "global_loss", mean_loss)

        locals_by_id: dict[int, ParamVector] = {}
        for c in clients:
            st = states[c.id]
            nu_i = nu
            try:
                for _ in range(hyper.R):
                    if personal:
                        envs = [batch_of(e, c.id) for e in st.train_envs]
                        plam = 0.0 if method == "irm_l2" else lam_t
                        for _ in range(hyper.S):
                            st.theta = personalized_step(
                                st.theta, nu_i, arch, envs, hyper.eta, st.beta_i, plam
                            )
                    denv = batch_of(st.merged, c.id)
                    if q is not None:
                        w = float(q.q[ids.index(c.id)])
                        g = grad(lambda p: nm.mul(w, risk(p, arch, denv)), nu_i)
                        nu_i = nu_i.replace_data(nu_i.data - hyper.gamma * g.data)
                    else:
                        nu_i = local_global_step(nu_i, arch, denv, hyper.gamma, glam)
            except NumericOverflowError as exc:
                raise _divergence(exc, t, c.id) from exc
            locals_by_id[c.id] = nu_i

        nu = aggregate(nu, [locals_by_id[cid] for cid in ids], hyper.alpha)
        if history is not None:
            history.append(nu)
        if q is not None:
            q = groupdro_update_q(q, [risks_at_nu[cid] for cid in ids], hyper.dro_step)

        if (t + 1) % hyper.eval_every == 0 or t == hyper.T - 1:
            _log_eval(log, method, seed, t, states, nu, arch, personal)

    personalized = {cid: states[cid].theta for cid in ids} if personal else None
    if method == "irm_ft":
        personalized = _fine_tune(states, nu, arch, hyper, log, seed)
    return TrainResult(personalized, nu, log, group_weights=q, global_history=history)


def _fine_tune(states, nu, arch, hyper, log, seed) -> dict[int, ParamVector]:
    """Plain-risk local fine-tuning of the global model, S steps per client."""
    tuned = {}
    for cid in sorted(states):
        st = states[cid]
        theta = nu
        for _ in range(hyper.S):
            g = grad(lambda p: risk(p, arch, st.merged), theta)
            theta = theta.replace_data(theta.data - hyper.eta * g.data)
        tuned[cid] = theta
    return tuned


def _log_eval(log, method, seed, t, states, nu, arch, personal) -> None:
    for cid in sorted(states):
        st = states[cid]
        model = st.theta if personal else nu
        log.append(method, seed, t, cid, "train", "accuracy", accuracy(model, arch, st.merged))
        log.append(method, seed, t, cid, "train", "risk", nm.value(lambda p: risk(p, arch, st.merged), model))
        log.append(method, seed, t, cid, "test", "accuracy", accuracy(model, arch, st.test_env))
        log.append(method, seed, t, cid, "test", "risk", nm.value(lambda p: risk(p, arch, st.test_env), model))
        if personal:
            prox = float(np.sum((st.theta.data - nu.data) ** 2))
            log.append(method, seed, t, cid, "state", "prox_sq", prox)


def run_baseline(
    method: str,
    clients: Sequence[ClientData],
    arch: ModelArch,
    hyper: Hyperparams,
    seed: int = 0,
    **kwargs,
) -> TrainResult:
    """`train` with the method overridden; same result shape."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    hyper = Hyperparams(**{**_as_dict(hyper), "method": method})
    return train(clients, arch, hyper, seed, **kwargs)


def _as_dict(hyper: Hyperparams) -> dict:
    return {f: getattr(hyper, f) for f in hyper.__dataclass_fields__}


def evaluate(
    result: TrainResult, arch: ModelArch, clients: Sequence[ClientData], split: str = "test"
) -> dict:
    """Per-client and average accuracy of the method's evaluation models."""
    per_client = {}
    for c in sorted(clients, key=lambda c: c.id):
        env = c.test_env if split == "test" else merge_environments(c.train_envs, "train")
        per_client[c.id] = accuracy(result.model_for(c.id), arch, env)
    avg = sum(per_client.values()) / len(per_client)
    return {"per_client": per_client, "average": avg}


def final_test_accuracy(result: TrainResult, arch: ModelArch, clients: Sequence[ClientData]) -> float:
    return evaluate(result, arch, clients)["average"]


def irm_penalty_value(params: ParamVector, arch: ModelArch, env: Environment) -> float:
    """Convenience: the squared dummy-classifier derivative on one environment."""
    return float(nm.value(lambda p: nm.square(dummy_grad(p, arch, env)), params))
