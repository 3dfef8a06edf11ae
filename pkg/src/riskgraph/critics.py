"""Post-hoc explanation critics fitted to a fixed policy from logged episodes.

Two state-action value estimators are fitted per policy without touching its
internals: a risk critic predicting the discounted future safety cost
(sigmoid head, so estimates stay in (0,1) under the binary cost model) and a
task critic predicting the discounted future reward (linear head). Both are
trained by offline temporal-difference regression on the logged transitions,
bootstrapping through a periodically synchronized target copy. The next
action in every TD target comes from the policy's deterministic mode;
terminal transitions bootstrap with zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .agents import Policy, act
from .approx import BoxScaler, Mlp, forward, grad, mlp_from_dict, mlp_to_dict, sgd_step, AdamState
from .core import Episode, NumericError, ValidationError, make_rng


@dataclass(frozen=True)
class QFunction:
    """A fitted state-action value estimator plus its input normalization."""

    net: Mlp
    scaler: BoxScaler
    action_scale: float

    def inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        return np.concatenate([self.scaler.transform(states), actions / self.action_scale], axis=1)


@dataclass(frozen=True)
class CriticPair:
    q_task: QFunction
    q_risk: QFunction
    gamma_task: float
    gamma_risk: float
    fitted_for: str

    def __post_init__(self):
        for name, g in (("gamma_task", self.gamma_task), ("gamma_risk", self.gamma_risk)):
            if not (0.0 < g < 1.0):
                raise ValidationError(f"{name} must lie in (0,1), got {g}")


def eval_q(qf: QFunction, state, action) -> float:
    """Pure scalar evaluation of a fitted critic at one (state, action)."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.ndim != 1 or action.ndim != 1 or state.size + action.size != qf.net.in_dim:
        raise ValidationError(
            f"state/action dims ({state.shape}, {action.shape}) incompatible with critic input {qf.net.in_dim}"
        )
    return float(forward(qf.net, qf.inputs(state[None, :], action[None, :]))[0, 0])


def eval_q_batch(qf: QFunction, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return forward(qf.net, qf.inputs(states, actions))[:, 0]


# ---------------------------------------------------------------------------
# Offline TD fitting
# ---------------------------------------------------------------------------


def _episode_arrays(episodes: Sequence[Episode]):
    s, a, r, c, s2, boot = [], [], [], [], [], []
    for ep in episodes:
        for tr in ep.transitions:
            s.append(tr.state)
            a.append(tr.action)
            r.append(tr.reward)
            c.append(tr.cost)
            s2.append(tr.next_state)
            boot.append(0.0 if tr.terminal != "none" else 1.0)
    return (
        np.asarray(s), np.asarray(a), np.asarray(r), np.asarray(c), np.asarray(s2), np.asarray(boot),
    )


def _policy_fn(policy) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(policy, Policy):
        return lambda state: act(policy, state, "deterministic")
    if callable(policy):
        return policy
    raise ValidationError("policy must be a Policy or a state->action callable")


def _data_scaler(states: np.ndarray) -> BoxScaler:
    lo = states.min(axis=0)
    hi = states.max(axis=0)
    pad = np.maximum(0.05 * (hi - lo), 1e-6)
    return BoxScaler(lo=lo - pad, hi=hi + pad)


def _fit_td(episodes, policy, gamma: float, head: str, signal: str, cfg, rng) -> tuple[QFunction, float]:
    episodes = list(episodes)
    if not episodes:
        raise ValidationError("cannot fit a critic on an empty episode list")
    s, a, r, c, s2, boot = _episode_arrays(episodes)
    target_signal = c if signal == "cost" else r

    scaler = _data_scaler(np.concatenate([s, s2], axis=0))
    action_scale = max(float(np.max(np.linalg.norm(a, axis=1))), 1e-9)
    qf_shape = (s.shape[1] + a.shape[1], *cfg.hidden, 1)
    net = Mlp.init(qf_shape, rng, head=head)
    target_net = net.copy()
    opt = AdamState.init(net, lr=cfg.lr)

    pf = _policy_fn(policy)
    a2 = np.stack([pf(row) for row in s2])

    def q_inputs(states, actions):
        return np.concatenate([scaler.transform(states), actions / action_scale], axis=1)

    x2 = q_inputs(s2, a2)
    x = q_inputs(s, a)
    n = x.shape[0]
    last_loss = float("nan")
    for update in range(cfg.updates):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        q_next = forward(target_net, x2[idx])[:, 0]
        y = target_signal[idx] + gamma * boot[idx] * q_next
        loss, grads = grad(net, x[idx], y[:, None])
        if not np.isfinite(loss):
            raise NumericError(f"critic TD loss diverged at update {update}")
        sgd_step(net, opt, grads)
        last_loss = loss
        if (update + 1) % cfg.sync_every == 0:
            target_net = net.copy()
    return QFunction(net=net, scaler=scaler, action_scale=action_scale), last_loss


def fit_risk_critic(episodes, policy, config, rng: np.random.Generator) -> QFunction:
    """Fit the discounted-cost critic for ``policy`` from its own episodes."""
    qf, _ = _fit_td(episodes, policy, config.gamma_risk, "sigmoid", "cost", config.critic_fit, rng)
    return qf


def fit_task_critic(episodes, policy, config, rng: np.random.Generator) -> QFunction:
    """Fit the discounted-reward critic for ``policy`` from its own episodes."""
    qf, _ = _fit_td(episodes, policy, config.gamma_task, "linear", "reward", config.critic_fit, rng)
    return qf


def fit_critic_pair(episodes, policy, config, rng_seed: int, fitted_for: str) -> CriticPair:
    q_risk = fit_risk_critic(episodes, policy, config, make_rng(rng_seed, 1))
    q_task = fit_task_critic(episodes, policy, config, make_rng(rng_seed, 2))
    return CriticPair(
        q_task=q_task,
        q_risk=q_risk,
        gamma_task=config.gamma_task,
        gamma_risk=config.gamma_risk,
        fitted_for=fitted_for,
    )


# ---------------------------------------------------------------------------
# Reporting and persistence
# ---------------------------------------------------------------------------


def nrmse(predicted: np.ndarray, target: np.ndarray) -> float:
    """Root mean squared error normalized by the target range."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    rng_t = float(target.max() - target.min())
    rmse = float(np.sqrt(np.mean((predicted - target) ** 2)))
    return rmse / max(rng_t, 1e-9)


def critic_report(pair: CriticPair, episodes, oracle=None) -> str:
    """Text summary of a fitted pair: data size and NRMSE vs an oracle if given.

    ``oracle`` maps (state, action, signal) -> exact value, signal in
    {"risk", "task"}; when provided the report carries the dataset NRMSE of
    both critics against it.
    """
    s, a, *_ = _episode_arrays(episodes)
    lines = [
        f"fitted_for: {pair.fitted_for}",
        f"transitions: {s.shape[0]}",
        f"gamma_task: {pair.gamma_task}",
        f"gamma_risk: {pair.gamma_risk}",
    ]
    if oracle is not None:
        for name, qf in (("risk", pair.q_risk), ("task", pair.q_task)):
            pred = eval_q_batch(qf, s, a)
            exact = np.array([oracle(si, ai, name) for si, ai in zip(s, a)])
            lines.append(f"nrmse_{name}: {nrmse(pred, exact):.6f}")
    return "\n".join(lines) + "\n"


def qfunction_to_dict(qf: QFunction) -> dict:
    return {
        "schema": "qfunction-v1",
        "net": mlp_to_dict(qf.net),
        "scaler": qf.scaler.to_dict(),
        "action_scale": qf.action_scale,
    }


def qfunction_from_dict(data: dict) -> QFunction:
    if data.get("schema") != "qfunction-v1":
        raise ValidationError(f"unknown qfunction schema {data.get('schema')!r}")
    return QFunction(
        net=mlp_from_dict(data["net"]),
        scaler=BoxScaler.from_dict(data["scaler"]),
        action_scale=float(data["action_scale"]),
    )


def critic_pair_to_dict(pair: CriticPair) -> dict:
    return {
        "schema": "critic-pair-v1",
        "q_task": qfunction_to_dict(pair.q_task),
        "q_risk": qfunction_to_dict(pair.q_risk),
        "gamma_task": pair.gamma_task,
        "gamma_risk": pair.gamma_risk,
        "fitted_for": pair.fitted_for,
    }


def critic_pair_from_dict(data: dict) -> CriticPair:
    if data.get("schema") != "critic-pair-v1":
        raise ValidationError(f"unknown critic-pair schema {data.get('schema')!r}")
    return CriticPair(
        q_task=qfunction_from_dict(data["q_task"]),
        q_risk=qfunction_from_dict(data["q_risk"]),
        gamma_task=float(data["gamma_task"]),
        gamma_risk=float(data["gamma_risk"]),
        fitted_for=data["fitted_for"],
    )
