"""Shared domain types, seeded randomness, and trajectory-log persistence.

Everything downstream consumes the types defined here: a `Transition` is one
environment timestep, an `Episode` is an ordered sequence of them, and a
`RunConfig` pins every knob (geometry, discounts, budgets, seeds) so that a
whole run is reproducible from the config alone.

Randomness policy: every random stream in the repository is a
``numpy.random.Generator`` backed by the PCG64 bit generator, derived from an
integer seed through ``numpy.random.SeedSequence``. PCG64 streams are
specified by numpy to be identical across platforms and processes for a given
seed, which is why platform default generators (``random.random`` state,
OS entropy) are never used outside of these helpers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

TERMINAL_KINDS = ("none", "goal", "violation", "timeout")
DECISION_LABELS = ("task", "safety")
POLICY_ROLES = ("task", "safety", "adversarial", "task_under_attack", "patched")

# Stream domain tags for derived generators (see make_rng). Keeping them as
# small named integers makes the derivation auditable in logs.
STREAM_ENV = 1
STREAM_ACT = 2
STREAM_ATTACK = 3


class ValidationError(ValueError):
    """An input violated a documented invariant."""


class LogParseError(ValueError):
    """An episode log line could not be parsed; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TrainingFailure(RuntimeError):
    """Training budget exhausted below the configured quality floor."""

    def __init__(self, message: str, curve: list | None = None):
        super().__init__(message)
        self.curve = curve or []


class NumericError(RuntimeError):
    """A numeric routine produced a non-finite value."""


class CoverageError(RuntimeError):
    """Evaluation data does not overlap the structure it is scored against."""


def make_rng(seed: int, *subkeys: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``, optionally sub-keyed.

    Identical ``(seed, *subkeys)`` tuples yield bit-identical streams on every
    platform and in every process. Subkeys carve independent named streams out
    of one seed (e.g. environment noise vs. attack coin flips) so that code
    paths which skip one stream do not perturb the others.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), *map(int, subkeys)))))


def episode_seed(base_seed: int, index: int) -> int:
    """Stable per-episode seed derived from a batch seed and episode index."""
    return int(np.random.SeedSequence((int(base_seed), int(index))).generate_state(1)[0])


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries: {arr}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Transition:
    """One timestep: (state, action, reward, cost, next_state, terminal kind).

    ``label`` records which policy decided the step ("task" or "safety") and
    is present only in shielded rollouts.
    """

    state: np.ndarray
    action: np.ndarray
    reward: float
    cost: float
    next_state: np.ndarray
    terminal: str = "none"
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "state", _as_vector(self.state, "state"))
        object.__setattr__(self, "action", _as_vector(self.action, "action"))
        object.__setattr__(self, "next_state", _as_vector(self.next_state, "next_state"))
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "cost", float(self.cost))
        if self.terminal not in TERMINAL_KINDS:
            raise ValidationError(f"unknown terminal kind {self.terminal!r}")
        if self.label is not None and self.label not in DECISION_LABELS:
            raise ValidationError(f"unknown decision label {self.label!r}")
        if self.cost not in (0.0, 1.0):
            raise ValidationError(f"cost must be 0 or 1 under the binary cost model, got {self.cost}")
        if (self.terminal == "violation") != (self.cost == 1.0):
            raise ValidationError(
                f"terminal={self.terminal!r} inconsistent with cost={self.cost} "
                "(violation and unit cost must coincide)"
            )

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (
            np.array_equal(self.state, other.state)
            and np.array_equal(self.action, other.action)
            and self.reward == other.reward
            and self.cost == other.cost
            and np.array_equal(self.next_state, other.next_state)
            and self.terminal == other.terminal
            and self.label == other.label
        )


@dataclass(frozen=True)
class Episode:
    """An ordered run of transitions plus the seed and role that produced it."""

    transitions: tuple[Transition, ...]
    seed: int
    policy_role: str

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "seed", int(self.seed))
        if self.policy_role not in POLICY_ROLES:
            raise ValidationError(f"unknown policy role {self.policy_role!r}")
        self.validate()

    def validate(self, t_max: int | None = None) -> None:
        ts = self.transitions
        if not ts:
            raise ValidationError("episode has no transitions")
        if t_max is not None and len(ts) > t_max:
            raise ValidationError(f"episode length {len(ts)} exceeds T_max={t_max}")
        for i, tr in enumerate(ts[:-1]):
            if tr.terminal != "none":
                raise ValidationError(f"non-final transition {i} is terminal ({tr.terminal})")
            if not np.array_equal(tr.next_state, ts[i + 1].state):
                raise ValidationError(f"next_state of transition {i} disagrees with state of {i + 1}")

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def terminal(self) -> str:
        return self.transitions[-1].terminal

    def states(self) -> np.ndarray:
        """All visited states (one row per transition), excluding the final next_state."""
        return np.stack([t.state for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.stack([t.action for t in self.transitions])


# ---------------------------------------------------------------------------
# Episode log persistence
#
# One episode per line, JSON objects with fields `seed`, `policy_role`,
# `transitions` (objects with keys `s`, `a`, `r`, `c`, `terminal`, and
# optional `label`). `s_final` carries the last transition's next_state so the
# round trip is value-exact; every other next_state equals the following
# record's `s`. JSON float serialization uses repr, which round-trips IEEE754
# doubles exactly.
# ---------------------------------------------------------------------------


def _episode_to_record(ep: Episode) -> dict:
    transitions = []
    for tr in ep.transitions:
        rec = {
            "s": tr.state.tolist(),
            "a": tr.action.tolist(),
            "r": tr.reward,
            "c": tr.cost,
            "terminal": tr.terminal,
        }
        if tr.label is not None:
            rec["label"] = tr.label
        transitions.append(rec)
    return {
        "seed": ep.seed,
        "policy_role": ep.policy_role,
        "transitions": transitions,
        "s_final": ep.transitions[-1].next_state.tolist(),
    }


def _episode_from_record(rec: dict) -> Episode:
    raw = rec["transitions"]
    if not isinstance(raw, list) or not raw:
        raise ValidationError("record has no transitions")
    s_final = rec["s_final"]
    transitions = []
    for i, tr in enumerate(raw):
        nxt = raw[i + 1]["s"] if i + 1 < len(raw) else s_final
        transitions.append(
            Transition(
                state=tr["s"],
                action=tr["a"],
                reward=tr["r"],
                cost=tr["c"],
                next_state=nxt,
                terminal=tr["terminal"],
                label=tr.get("label"),
            )
        )
    return Episode(transitions=tuple(transitions), seed=rec["seed"], policy_role=rec["policy_role"])


def write_episode_log(episodes: Sequence[Episode], path) -> None:
    """Write episodes as line-delimited JSON records.

    Raises ValidationError for an empty list or an invariant-violating
    episode (named by index); I/O failures propagate as OSError with the path.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValidationError("refusing to write an empty episode log")
    lines = []
    for i, ep in enumerate(episodes):
        if not isinstance(ep, Episode):
            raise ValidationError(f"episode {i} is not an Episode")
        try:
            ep.validate()
        except ValidationError as exc:
            raise ValidationError(f"episode {i}: {exc}") from exc
        lines.append(json.dumps(_episode_to_record(ep), sort_keys=True, separators=(",", ":")))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_episode_log(path) -> list[Episode]:
    """Read a line-delimited episode log; inverse of write_episode_log.

    Malformed lines raise LogParseError with the 1-based line number;
    records that violate Episode/Transition invariants raise ValidationError.
    """
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogParseError(line_no, f"invalid JSON ({exc.msg})") from exc
            try:
                episodes.append(_episode_from_record(rec))
            except (KeyError, TypeError) as exc:
                raise LogParseError(line_no, f"missing or malformed field: {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"line {line_no}: {exc}") from exc
    return episodes


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Budget and hyperparameters for one actor-critic training run."""

    steps: int = 30000
    warmup_steps: int = 1000
    batch_size: int = 128
    buffer_capacity: int = 50000
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    gamma: float = 0.95
    tau: float = 0.01
    update_every: int = 2
    exploration_std: float = 0.25
    hidden: tuple[int, int] = (64, 64)
    eval_every: int = 2000
    eval_episodes: int = 20
    stop_threshold: float | None = None
    floor: float | None = None
    action_penalty: float = 0.0  # quadratic control cost added to the role reward


@dataclass(frozen=True)
class CriticFitConfig:
    """Budget for post-hoc offline TD fitting of one critic."""

    updates: int = 6000
    batch_size: int = 128
    lr: float = 1e-3
    sync_every: int = 200
    hidden: tuple[int, int] = (64, 64)


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a full pipeline run; hashing it identifies the run."""

    world: str = "nav2"
    t_max: int = 100
    gamma_task: float = 0.99
    gamma_risk: float = 0.9
    epsilon_safety: float = 0.4
    t_safety: float | None = None  # None: pick the sensitivity-sweep knee
    top_k: int = 3
    attack_rates: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train_seed: int = 7
    collect_seed: int = 101
    collect_episodes: int = 500
    eval_episodes: int = 100
    fidelity_timesteps: int = 2000
    cluster_sample: int = 500
    k_range: tuple[int, ...] = (4, 6, 8, 10, 12, 16, 20, 24)
    label_threshold: float = 0.9
    predicates: tuple[str, ...] = ("near_obstacle", "near_goal", "in_goal_half", "near_boundary")
    sweep_thresholds: tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
    sweep_episodes: int = 50
    success_margin: float = 10.0
    task_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(steps=30000, stop_threshold=90.0, floor=70.0)
    )
    adv_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(steps=15000, gamma=0.9, stop_threshold=90.0)
    )
    safety_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            steps=20000, gamma=0.9, stop_threshold=1.0, floor=5.0, action_penalty=0.05
        )
    )
    critic_fit: CriticFitConfig = field(default_factory=CriticFitConfig)

    def __post_init__(self):
        if self.t_max < 1:
            raise ValidationError(f"T_max must be >= 1, got {self.t_max}")
        for name in ("gamma_task", "gamma_risk"):
            g = getattr(self, name)
            if not (0.0 < g < 1.0):
                raise ValidationError(f"{name} must lie strictly inside (0,1), got {g}")
        if self.t_safety is not None and not (0.0 <= self.t_safety <= 1.0):
            raise ValidationError(f"t_safety must lie in [0,1], got {self.t_safety}")
        if not self.seeds:
            raise ValidationError("at least one evaluation seed is required")
        for r in self.attack_rates:
            if not (0.0 <= r <= 1.0):
                raise ValidationError(f"attack rate {r} outside [0,1]")

    def to_dict(self) -> dict:
        def conv(obj):
            if isinstance(obj, (TrainConfig, CriticFitConfig)):
                return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, tuple):
                return [conv(x) for x in obj]
            return obj

        return {f.name: conv(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        def build(dc_cls, payload):
            kwargs = {}
            known = {f.name: f for f in fields(dc_cls)}
            for key, value in payload.items():
                if key not in known:
                    raise ValidationError(f"unknown config field {key!r} for {dc_cls.__name__}")
                if key in ("task_train", "adv_train", "safety_train"):
                    value = build(TrainConfig, value)
                elif key == "critic_fit":
                    value = build(CriticFitConfig, value)
                elif isinstance(value, list):
                    value = tuple(value)
                kwargs[key] = value
            return dc_cls(**kwargs)

        return build(cls, data)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-path overrides like {"task_train.steps": 500}."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            node = data
            for p in parts[:-1]:
                if p not in node:
                    raise ValidationError(f"unknown config path {dotted!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValidationError(f"unknown config path {dotted!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")


def parse_override_value(raw: str):
    """Parse a --set value: JSON if it parses, bare string otherwise."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
