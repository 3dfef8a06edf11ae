"""Single rollout engine shared by clean, attacked, and shielded runs.

Every episode derives three independent random streams from its own seed:
environment noise, action/exploration noise, and attack coin flips. Because
the streams are separate, a rollout with an attack plan at rate 0 consumes
exactly the same environment draws as a clean rollout and reproduces it
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from . import envs
from .core import STREAM_ACT, STREAM_ATTACK, STREAM_ENV, Episode, Transition, episode_seed, make_rng

# act_fn(state, rng) -> (action, decision_label_or_None)
ActFn = Callable[[np.ndarray, np.random.Generator], tuple[np.ndarray, str | None]]


class ActionOverride(Protocol):
    """Attack-plan surface the engine needs: where, how often, with what."""

    rate: float

    def is_critical(self, state: np.ndarray) -> bool: ...

    def action(self, state: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Substitution:
    """One action replacement: where the adversary overrode the agent."""

    episode: int
    step: int
    a_orig: np.ndarray
    a_sub: np.ndarray


def run_episode(
    world: envs.NavWorld,
    act_fn: ActFn,
    t_max: int,
    ep_seed: int,
    episode_index: int,
    role: str,
    override: ActionOverride | None = None,
) -> tuple[Episode, list[Substitution]]:
    rng_env = make_rng(ep_seed, STREAM_ENV)
    rng_act = make_rng(ep_seed, STREAM_ACT)
    rng_attack = make_rng(ep_seed, STREAM_ATTACK)

    subs: list[Substitution] = []
    transitions: list[Transition] = []
    state = envs.reset(world, rng_env)
    for t in range(t_max):
        action, label = act_fn(state, rng_act)
        executed = action
        if override is not None and override.is_critical(state):
            if rng_attack.random() < override.rate:
                executed = override.action(state)
                subs.append(Substitution(episode=episode_index, step=t, a_orig=action, a_sub=executed))
        out = envs.step(world, state, executed, rng_env, t, t_max)
        transitions.append(
            Transition(
                state=state,
                action=executed,
                reward=out.reward,
                cost=out.cost,
                next_state=out.next_state,
                terminal=out.terminal,
                label=label,
            )
        )
        if out.terminal != "none":
            break
        state = out.next_state
    return Episode(transitions=tuple(transitions), seed=ep_seed, policy_role=role), subs


def run_rollouts(
    world: envs.NavWorld,
    act_fn: ActFn,
    n_episodes: int,
    t_max: int,
    base_seed: int,
    role: str,
    override: ActionOverride | None = None,
) -> tuple[list[Episode], list[Substitution]]:
    """Roll ``n_episodes`` episodes with per-episode seeds derived from base_seed."""
    episodes, subs = [], []
    for i in range(n_episodes):
        ep, s = run_episode(world, act_fn, t_max, episode_seed(base_seed, i), i, role, override)
        episodes.append(ep)
        subs.extend(s)
    return episodes, subs


def policy_act_fn(policy, mode: str = "deterministic") -> ActFn:
    """Wrap a policy as an engine act_fn (no decision label)."""
    from .agents import act  # local import to keep module load order simple

    def fn(state, rng):
        return act(policy, state, mode, rng), None

    return fn
