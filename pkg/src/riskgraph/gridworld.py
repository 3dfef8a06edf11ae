"""Deterministic 8x8 gridworld fixture with an exact policy-evaluation oracle.

This tiny discrete world exists so the continuous machinery can be checked
against ground truth: a fixed tabular policy walks east to the last column
and then north to the goal at (7,7); two hazard cells sit on that route, so
episodes starting on the hazard rows end in a violation while everything
else reaches the goal. Because dynamics and policy are deterministic, exact
Q values under the policy follow from iterative Bellman policy evaluation
and fitted critics can be scored against them.
"""

from __future__ import annotations

import numpy as np

from .core import Episode, Transition

GRID_N = 8
GOAL = (7, 7)
HAZARDS = ((4, 2), (4, 3))
STEP_REWARD = -0.05
GOAL_REWARD = 1.0
T_MAX = 30

ACTIONS = {
    "E": np.array([1.0, 0.0]),
    "N": np.array([0.0, 1.0]),
    "W": np.array([-1.0, 0.0]),
    "S": np.array([0.0, -1.0]),
}


def policy_action(state) -> np.ndarray:
    """The fixed tabular policy: east until the last column, then north."""
    x = int(round(float(state[0])))
    if x < GRID_N - 1:
        return ACTIONS["E"].copy()
    return ACTIONS["N"].copy()


def _next_cell(cell: tuple[int, int], action: np.ndarray) -> tuple[int, int]:
    nx = cell[0] + int(round(float(action[0])))
    ny = cell[1] + int(round(float(action[1])))
    if not (0 <= nx < GRID_N and 0 <= ny < GRID_N):
        return cell  # bumping the edge leaves the agent in place
    return (nx, ny)


def _step(cell: tuple[int, int], action: np.ndarray):
    nxt = _next_cell(cell, action)
    if nxt in HAZARDS:
        return nxt, STEP_REWARD, 1.0, "violation"
    if nxt == GOAL:
        return nxt, STEP_REWARD + GOAL_REWARD, 0.0, "goal"
    return nxt, STEP_REWARD, 0.0, "none"


def start_cells() -> list[tuple[int, int]]:
    return [
        (x, y)
        for x in range(GRID_N)
        for y in range(GRID_N)
        if (x, y) != GOAL and (x, y) not in HAZARDS
    ]


def generate_episodes() -> list[Episode]:
    """One deterministic episode per non-terminal start cell."""
    episodes = []
    for idx, start in enumerate(start_cells()):
        cell = start
        transitions = []
        for t in range(T_MAX):
            action = policy_action(np.array(cell, dtype=np.float64))
            nxt, reward, cost, terminal = _step(cell, action)
            if terminal == "none" and t + 1 == T_MAX:
                terminal = "timeout"
            transitions.append(
                Transition(
                    state=np.array(cell, dtype=np.float64),
                    action=action,
                    reward=reward,
                    cost=cost,
                    next_state=np.array(nxt, dtype=np.float64),
                    terminal=terminal,
                )
            )
            if terminal != "none":
                break
            cell = nxt
        episodes.append(Episode(transitions=tuple(transitions), seed=idx, policy_role="task"))
    return episodes


def exact_policy_q(gamma: float, signal: str) -> dict:
    """Exact Q values under the fixed policy by iterative policy evaluation.

    Returns {((x, y), action_name): value} over every cell and action, where
    value is the discounted future cost ("risk") or reward ("task") of taking
    that action and then following the policy. Terminal successors (goal and
    hazard cells) contribute no bootstrap.
    """
    if signal not in ("risk", "task"):
        raise ValueError(f"unknown signal {signal!r}")
    cells = [(x, y) for x in range(GRID_N) for y in range(GRID_N)]
    q = {(cell, name): 0.0 for cell in cells for name in ACTIONS}

    def policy_name(cell) -> str:
        return "E" if cell[0] < GRID_N - 1 else "N"

    for _ in range(200):
        delta = 0.0
        for cell in cells:
            if cell == GOAL or cell in HAZARDS:
                continue
            for name, vec in ACTIONS.items():
                nxt, reward, cost, terminal = _step(cell, vec)
                immediate = cost if signal == "risk" else reward
                if terminal != "none":
                    new = immediate
                else:
                    new = immediate + gamma * q[(nxt, policy_name(nxt))]
                delta = max(delta, abs(new - q[(cell, name)]))
                q[(cell, name)] = new
        if delta < 1e-14:
            break
    return q


def oracle_fn(gamma_risk: float, gamma_task: float):
    """Adapt exact_policy_q to the (state, action, signal) oracle interface."""
    tables = {"risk": exact_policy_q(gamma_risk, "risk"), "task": exact_policy_q(gamma_task, "task")}

    def oracle(state, action, signal: str) -> float:
        cell = (int(round(float(state[0]))), int(round(float(state[1]))))
        name = min(ACTIONS, key=lambda k: float(np.linalg.norm(ACTIONS[k] - np.asarray(action))))
        return tables[signal][(cell, name)]

    return oracle
