"""Training and running the three policies the pipeline needs.

All three (task, safety, adversarial) share one desk-scale learner: a
deterministic actor trained against a companion state-action critic with
Gaussian exploration noise, replay, and slowly tracking target networks.
They differ only in the scalar each one maximizes:

* task        -> the environment reward (reach the goal),
* adversarial -> the safety-violation cost (cause collisions),
* safety      -> the negated cost (avoid collisions, goal-blind).

The explanation machinery downstream never looks inside a policy; it only
calls ``act``, so the exact learner is deliberately replaceable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envs
from .approx import AdamState, BoxScaler, Mlp, backprop, forward, grad, mlp_from_dict, mlp_to_dict, sgd_step
from .core import TrainingFailure, ValidationError, make_rng

ROLES = ("task", "safety", "adversarial")


@dataclass
class Policy:
    """Deterministic actor with optional exploration noise and a role tag."""

    actor: Mlp
    critic: Mlp | None
    role: str
    exploration_std: float
    scaler: BoxScaler
    max_speed: float

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown policy role {self.role!r}")

    def features(self, state: np.ndarray) -> np.ndarray:
        return self.scaler.transform(state)


def _squash(pre: np.ndarray, max_speed: float) -> np.ndarray:
    return envs.clip_action(max_speed * np.tanh(pre), max_speed)


def act(policy: Policy, state, mode: str = "deterministic", rng: np.random.Generator | None = None) -> np.ndarray:
    """Action for ``state``: the actor mean, or mean + Gaussian noise, clipped.

    Deterministic mode never consumes randomness; stochastic mode draws one
    2-vector of exploration noise from ``rng`` and re-clips to max speed.
    """
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (policy.actor.in_dim,):
        raise ValidationError(f"state shape {state.shape} incompatible with actor input {policy.actor.in_dim}")
    pre = forward(policy.actor, policy.features(state))
    action = _squash(pre, policy.max_speed)
    if mode == "deterministic":
        return action
    if mode != "stochastic":
        raise ValidationError(f"unknown act mode {mode!r}")
    if policy.exploration_std > 0.0:
        action = action + rng.normal(0.0, policy.exploration_std, size=action.shape)
    return envs.clip_action(action, policy.max_speed)


def uniform_disk_action(max_speed: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform random action over the disk of radius max_speed."""
    theta = rng.uniform(0.0, 2.0 * np.pi)
    r = max_speed * np.sqrt(rng.uniform())
    return np.array([r * np.cos(theta), r * np.sin(theta)])


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring buffer over transitions, uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self.size = 0
        self.cursor = 0
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.bootstrap = np.zeros(capacity)  # 0 at terminal transitions

    def add(self, s, a, r, s2, bootstrap: float) -> None:
        i = self.cursor
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.bootstrap[i] = bootstrap
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.bootstrap[idx]


# ---------------------------------------------------------------------------
# Deterministic actor-critic learner
# ---------------------------------------------------------------------------


def _norm_clip_jacobian_chain(pre_clip: np.ndarray, upstream: np.ndarray, max_speed: float) -> np.ndarray:
    """Pull a gradient back through the Euclidean-norm clip, row by row."""
    out = upstream.copy()
    norms = np.linalg.norm(pre_clip, axis=1)
    over = norms > max_speed
    for i in np.flatnonzero(over):
        v = pre_clip[i]
        n = norms[i]
        # d(clip)/dv = (m/n) (I - vv^T / n^2)
        out[i] = (max_speed / n) * (upstream[i] - v * (v @ upstream[i]) / (n * n))
    return out


def _soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    for tw, sw in zip(target.weights, source.weights):
        tw *= 1.0 - tau
        tw += tau * sw
    for tb, sb in zip(target.biases, source.biases):
        tb *= 1.0 - tau
        tb += tau * sb


class _Learner:
    """One actor-critic pair with target copies and Adam states."""

    def __init__(self, world: envs.NavWorld, hidden, lr_actor, lr_critic, rng):
        sd, ad = world.state_dim, world.action_dim
        self.scaler = BoxScaler(
            lo=np.array([world.bounds.x0, world.bounds.y0]),
            hi=np.array([world.bounds.x1, world.bounds.y1]),
        )
        self.max_speed = world.max_speed
        self.actor = Mlp.init((sd, *hidden, ad), rng)
        self.critic = Mlp.init((sd + ad, *hidden, 1), rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.opt_actor = AdamState.init(self.actor, lr=lr_actor)
        self.opt_critic = AdamState.init(self.critic, lr=lr_critic)

    def critic_input(self, s_feat: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.concatenate([s_feat, actions / self.max_speed], axis=1)

    def det_actions(self, actor: Mlp, s_feat: np.ndarray) -> np.ndarray:
        pre = forward(actor, s_feat)
        raw = self.max_speed * np.tanh(pre)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        scale = np.minimum(1.0, self.max_speed / np.maximum(norms, 1e-12))
        return raw * scale

    def update(self, batch, gamma: float, tau: float) -> float:
        s, a, r, s2, bootstrap = batch
        sf = self.scaler.transform(s)
        s2f = self.scaler.transform(s2)

        # Critic: one-step TD target from the target networks.
        a2 = self.det_actions(self.actor_target, s2f)
        q2 = forward(self.critic_target, self.critic_input(s2f, a2))[:, 0]
        y = r + gamma * bootstrap * q2
        loss, grads = grad(self.critic, self.critic_input(sf, a), y[:, None])
        sgd_step(self.critic, self.opt_critic, grads)

        # Actor: ascend Q(s, mu(s)) through squash and norm clip.
        n = s.shape[0]
        pre = forward(self.actor, sf)
        raw = self.max_speed * np.tanh(pre)
        clipped = raw.copy()
        norms = np.linalg.norm(raw, axis=1)
        over = norms > self.max_speed
        clipped[over] = raw[over] * (self.max_speed / norms[over])[:, None]
        x = self.critic_input(sf, clipped)
        upstream = np.full((n, 1), -1.0 / n)  # minimize -mean Q
        _, d_input = backprop(self.critic, x, upstream)
        d_clipped = d_input[:, sf.shape[1] :] / self.max_speed
        d_raw = _norm_clip_jacobian_chain(raw, d_clipped, self.max_speed)
        d_pre = d_raw * self.max_speed * (1.0 - np.tanh(pre) ** 2)
        actor_grads, _ = backprop(self.actor, sf, d_pre)
        sgd_step(self.actor, self.opt_actor, actor_grads)

        _soft_update(self.actor_target, self.actor, tau)
        _soft_update(self.critic_target, self.critic, tau)
        return loss

    def policy(self, role: str, exploration_std: float) -> Policy:
        return Policy(
            actor=self.actor.copy(),
            critic=self.critic.copy(),
            role=role,
            exploration_std=exploration_std,
            scaler=self.scaler,
            max_speed=self.max_speed,
        )


def _train_loop(world, tc, t_max, rng, reward_fn, start_fn, role) -> tuple[Policy, list]:
    """Generic training driver; returns the policy and its evaluation curve."""
    learner = _Learner(world, tc.hidden, tc.lr_actor, tc.lr_critic, rng)
    buffer = ReplayBuffer(tc.buffer_capacity, world.state_dim, world.action_dim)
    curve: list[tuple[int, float]] = []

    state = start_fn(rng)
    t = 0
    for step_i in range(tc.steps):
        if step_i < tc.warmup_steps:
            action = uniform_disk_action(world.max_speed, rng)
        else:
            policy_now = Policy(
                actor=learner.actor, critic=None, role=role,
                exploration_std=tc.exploration_std, scaler=learner.scaler,
                max_speed=world.max_speed,
            )
            action = act(policy_now, state, "stochastic", rng)
        out = envs.step(world, state, action, rng, t, t_max)
        r = reward_fn(state, action, out)
        buffer.add(state, action, r, out.next_state, 0.0 if out.terminal != "none" else 1.0)
        if out.terminal != "none":
            state = start_fn(rng)
            t = 0
        else:
            state = out.next_state
            t += 1
        if step_i >= tc.warmup_steps and step_i % tc.update_every == 0:
            loss = learner.update(buffer.sample(tc.batch_size, rng), tc.gamma, tc.tau)
            if not np.isfinite(loss):
                raise TrainingFailure(f"{role} training diverged at step {step_i}", curve)
        if tc.eval_every and (step_i + 1) % tc.eval_every == 0:
            policy = learner.policy(role, tc.exploration_std)
            metric = _role_metric(world, policy, t_max, tc.eval_episodes, start_fn_eval=start_fn)
            curve.append((step_i + 1, metric))
            if tc.stop_threshold is not None and _metric_passes(role, metric, tc.stop_threshold):
                break
    return learner.policy(role, tc.exploration_std), curve


def _metric_passes(role: str, metric: float, threshold: float) -> bool:
    # task metric is success-safety% (higher better); safety/adversarial
    # metrics are violation % (safety lower better, adversarial higher).
    if role == "safety":
        return metric <= threshold
    return metric >= threshold


def _role_metric(world, policy, t_max, n_episodes, start_fn_eval=None) -> float:
    if policy.role == "task":
        return success_safety_rate(world, policy, t_max, n_episodes, seed=9001) * 100.0
    return violation_rate(world, policy, t_max, n_episodes, seed=9001, start_fn=start_fn_eval) * 100.0


def _deterministic_rollout(world, policy, t_max, rng, start_fn=None):
    state = envs.reset(world, rng) if start_fn is None else start_fn(rng)
    for t in range(t_max):
        action = act(policy, state, "deterministic")
        out = envs.step(world, state, action, rng, t, t_max)
        if out.terminal != "none":
            return out.terminal, out.next_state
        state = out.next_state
    return "timeout", state


def success_safety_rate(world, policy, t_max, n_episodes, seed, start_fn=None) -> float:
    """Fraction of deterministic episodes ending within d_min of the goal, violation-free."""
    wins = 0
    for i in range(n_episodes):
        rng = make_rng(seed, i)
        terminal, final = _deterministic_rollout(world, policy, t_max, rng, start_fn)
        if terminal != "violation" and envs.distance_to_goal(world, final) <= world.d_min:
            wins += 1
    return wins / n_episodes


def violation_rate(world, policy, t_max, n_episodes, seed, start_fn=None) -> float:
    violations = 0
    for i in range(n_episodes):
        rng = make_rng(seed, i)
        terminal, _ = _deterministic_rollout(world, policy, t_max, rng, start_fn)
        violations += terminal == "violation"
    return violations / n_episodes


def random_action_violation_rate(world, t_max, n_episodes, seed) -> float:
    """Violation rate when every action is drawn uniformly from the action disk."""
    violations = 0
    for i in range(n_episodes):
        rng = make_rng(seed, i)
        state = envs.reset(world, rng)
        for t in range(t_max):
            out = envs.step(world, state, uniform_disk_action(world.max_speed, rng), rng, t, t_max)
            if out.terminal != "none":
                violations += out.terminal == "violation"
                break
            state = out.next_state
    return violations / n_episodes


def free_space_start_fn(world: envs.NavWorld, margin: float = 0.15):
    """Rejection-sample start states clear of obstacles, walls, and bounds."""

    def start(rng: np.random.Generator) -> np.ndarray:
        b = world.bounds
        while True:
            p = np.array([rng.uniform(b.x0, b.x1), rng.uniform(b.y0, b.y1)])
            if envs.nearest_obstacle_distance(world, p) > margin:
                return p

    return start


def visited_states_start_fn(states: np.ndarray):
    """Sample uniformly from a pool of previously visited states."""
    pool = np.asarray(states, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise ValidationError("start-state pool must be a non-empty (n, d) array")

    def start(rng: np.random.Generator) -> np.ndarray:
        return pool[int(rng.integers(0, pool.shape[0]))].copy()

    return start


def collect_visited_states(world, policy, t_max, n_episodes, seed) -> np.ndarray:
    """States visited by stochastic rollouts of ``policy`` (for adversary starts)."""
    visited = []
    for i in range(n_episodes):
        rng = make_rng(seed, i)
        state = envs.reset(world, rng)
        for t in range(t_max):
            visited.append(state.copy())
            action = act(policy, state, "stochastic", rng)
            out = envs.step(world, state, action, rng, t, t_max)
            if out.terminal != "none":
                break
            state = out.next_state
    return np.asarray(visited)


# ---------------------------------------------------------------------------
# The three public training entry points
# ---------------------------------------------------------------------------


def train_task_policy(world: envs.NavWorld, config, rng: np.random.Generator) -> tuple[Policy, list]:
    """Train the goal-reaching policy; fails if the success floor is not met.

    Returns (policy, curve) where curve is [(env_step, success_safety_pct)].
    Training episodes restart half the time from the world's start region and
    half the time from uniform free space, so the critic sees data (including
    goal entries) across the whole field; evaluation always uses the world's
    own start distribution.
    """
    tc = config.task_train
    if tc.steps <= 0:
        raise TrainingFailure("task training budget is zero", [])
    free_start = free_space_start_fn(world)

    def mixed_start(r: np.random.Generator) -> np.ndarray:
        return envs.reset(world, r) if r.random() < 0.5 else free_start(r)

    policy, curve = _train_loop(
        world, tc, config.t_max, rng,
        reward_fn=lambda s, a, out: out.reward,
        start_fn=mixed_start,
        role="task",
    )
    if tc.floor is not None:
        score = success_safety_rate(world, policy, config.t_max, 100, seed=9101) * 100.0
        curve = curve + [(tc.steps, score)]
        if score < tc.floor:
            raise TrainingFailure(
                f"task policy reached Success-Safety {score:.1f}% < floor {tc.floor:.1f}%", curve
            )
    return policy, curve


def train_adversarial_policy(world, task_policy: Policy, config, rng) -> tuple[Policy, list]:
    """Train the cost-maximizing adversary from states the task policy visits."""
    tc = config.adv_train
    if tc.steps <= 0:
        raise TrainingFailure("adversarial training budget is zero", [])
    pool = collect_visited_states(world, task_policy, config.t_max, 60, seed=9201)
    start_fn = visited_states_start_fn(pool)
    policy, curve = _train_loop(
        world, tc, config.t_max, rng,
        reward_fn=lambda s, a, out: out.cost,
        start_fn=start_fn,
        role="adversarial",
    )
    if tc.floor is not None:
        adv_rate = violation_rate(world, policy, config.t_max, 100, seed=9301)
        rand_rate = random_action_violation_rate(world, config.t_max, 100, seed=9301)
        curve = curve + [(tc.steps, adv_rate * 100.0)]
        if adv_rate <= rand_rate:
            raise TrainingFailure(
                f"adversary violation rate {adv_rate:.2f} does not beat random baseline {rand_rate:.2f}",
                curve,
            )
    return policy, curve


def train_safety_policy(world, config, rng) -> tuple[Policy, list]:
    """Train the collision-avoiding policy from uniform free-space starts.

    The objective is the negated violation cost. To keep the optimization
    landscape informative away from hazards, training adds potential-based
    shaping on clearance (gamma*phi(s') - phi(s) with phi = capped distance
    to the nearest hazard), which leaves the optimal policy unchanged, plus a
    small quadratic control cost so idling in open space is the interior
    optimum rather than an arbitrary drift.
    """
    tc = config.safety_train
    if tc.steps <= 0:
        raise TrainingFailure("safety training budget is zero", [])
    start_fn = free_space_start_fn(world)
    beta, cap = 0.3, 2.0

    def phi(p: np.ndarray) -> float:
        return beta * min(envs.nearest_obstacle_distance(world, p), cap)

    def shaped(state, action, out) -> float:
        r = -out.cost + tc.gamma * phi(out.next_state) - phi(state)
        return r - tc.action_penalty * float(action @ action)

    policy, curve = _train_loop(
        world, tc, config.t_max, rng,
        reward_fn=shaped,
        start_fn=start_fn,
        role="safety",
    )
    if tc.floor is not None:
        rate_pct = violation_rate(world, policy, config.t_max, 100, seed=9401, start_fn=start_fn) * 100.0
        curve = curve + [(tc.steps, rate_pct)]
        if rate_pct > tc.floor:
            raise TrainingFailure(
                f"safety policy violation rate {rate_pct:.1f}% exceeds floor {tc.floor:.1f}%", curve
            )
    return policy, curve


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def policy_to_dict(policy: Policy) -> dict:
    return {
        "schema": "policy-v1",
        "role": policy.role,
        "exploration_std": policy.exploration_std,
        "max_speed": policy.max_speed,
        "scaler": policy.scaler.to_dict(),
        "actor": mlp_to_dict(policy.actor),
        "critic": mlp_to_dict(policy.critic) if policy.critic is not None else None,
    }


def policy_from_dict(data: dict) -> Policy:
    if data.get("schema") != "policy-v1":
        raise ValidationError(f"unknown policy schema {data.get('schema')!r}")
    return Policy(
        actor=mlp_from_dict(data["actor"]),
        critic=mlp_from_dict(data["critic"]) if data.get("critic") else None,
        role=data["role"],
        exploration_std=float(data["exploration_std"]),
        scaler=BoxScaler.from_dict(data["scaler"]),
        max_speed=float(data["max_speed"]),
    )
