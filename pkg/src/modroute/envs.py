"""Desk-scale 2-D control tasks with graded difficulty.

All tasks share one observation layout (agent pose, object-or-zeros, latch
flag, goal) so a single policy can serve every task. Dynamics are simple
kinematics on the unit box:

  * reach: drive the agent onto the goal point.
  * toggle: drive the agent onto the object (a switch) to engage its latch.
  * push: the object follows the agent's displacement while the agent is
    within the contact radius; bring the object to the goal.
  * two-stage-fetch: like push, but the object stays frozen until the agent
    first latches onto it (within the tighter latch radius for one step).

Rewards are dense negative distances to the task's subgoals plus a success
bonus; every task runs for at most ``horizon`` steps. Dynamics are
deterministic given the action sequence; the only randomness is goal
sampling at reset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DT = 0.05
CONTACT_RADIUS = 0.1
LATCH_RADIUS = 0.05
SUCCESS_RADIUS = 0.05
SUCCESS_BONUS = 1.0

KINDS = ("reach", "push", "two-stage-fetch", "toggle")

OBS_DIM = 9  # agent pos (2) + agent vel (2) + object (2) + latch (1) + goal (2)
ACT_DIM = 2


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str
    goal_rule: str = "fixed"  # "fixed" | "random"
    difficulty: int = 0
    horizon: int = 200

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.goal_rule not in ("fixed", "random"):
            raise ValueError(f"unknown goal rule {self.goal_rule!r}")


@dataclass
class EnvState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    object_pos: np.ndarray
    latched: bool
    goal: np.ndarray
    step: int


_START = np.array([-0.5, -0.5])
_OBJECT_START = np.array([0.0, 0.0])
_FIXED_GOALS = {
    "reach": np.array([0.4, 0.4]),
    "toggle": np.array([0.4, 0.4]),  # goal doubles as the switch position
    "push": np.array([0.6, 0.6]),
    "two-stage-fetch": np.array([0.7, 0.7]),
}


def _has_object(kind: str) -> bool:
    return kind in ("push", "two-stage-fetch", "toggle")


class ToyEnv:
    """One task instance. Trajectories are bit-deterministic given actions."""

    def __init__(self, spec: TaskSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.state: EnvState | None = None

    def reset(self) -> np.ndarray:
        spec = self.spec
        if spec.goal_rule == "random":
            goal = self.rng.uniform(-0.8, 0.8, size=2)
        else:
            goal = _FIXED_GOALS[spec.kind].copy()
        if spec.kind == "toggle":
            obj = goal.copy()
        elif _has_object(spec.kind):
            obj = _OBJECT_START.copy()
        else:
            obj = np.zeros(2)
        self.state = EnvState(
            agent_pos=_START.copy(),
            agent_vel=np.zeros(2),
            object_pos=obj,
            latched=False,
            goal=goal,
            step=0,
        )
        return self._observe()

    def _observe(self) -> np.ndarray:
        s = self.state
        obj = s.object_pos if _has_object(self.spec.kind) else np.zeros(2)
        return np.concatenate(
            [s.agent_pos, s.agent_vel, obj, [1.0 if s.latched else 0.0], s.goal]
        )

    def _shaped_reward(self) -> float:
        s = self.state
        kind = self.spec.kind
        if kind == "reach":
            return -float(np.linalg.norm(s.agent_pos - s.goal))
        if kind == "toggle":
            return -float(np.linalg.norm(s.agent_pos - s.object_pos))
        d_agent = float(np.linalg.norm(s.agent_pos - s.object_pos))
        d_goal = float(np.linalg.norm(s.object_pos - s.goal))
        return -0.5 * (d_agent + d_goal)

    def _success(self) -> bool:
        s = self.state
        kind = self.spec.kind
        if kind == "reach":
            return bool(np.linalg.norm(s.agent_pos - s.goal) < SUCCESS_RADIUS)
        if kind == "toggle":
            return s.latched
        return bool(np.linalg.norm(s.object_pos - s.goal) < SUCCESS_RADIUS)

    def step(self, action):
        if self.state is None:
            raise RuntimeError("step before reset")
        action = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        s = self.state
        a = np.clip(action, -1.0, 1.0)
        kind = self.spec.kind

        in_contact = np.linalg.norm(s.agent_pos - s.object_pos) <= CONTACT_RADIUS
        before = s.agent_pos.copy()
        s.agent_pos = np.clip(s.agent_pos + a * DT, -1.0, 1.0)
        s.agent_vel = a
        delta = s.agent_pos - before

        can_carry = (kind == "push" and in_contact) or (
            kind == "two-stage-fetch" and s.latched and in_contact
        )
        if can_carry:
            s.object_pos = np.clip(s.object_pos + delta, -1.0, 1.0)

        if kind in ("two-stage-fetch", "toggle") and not s.latched:
            if np.linalg.norm(s.agent_pos - s.object_pos) < LATCH_RADIUS:
                s.latched = True

        s.step += 1
        success = self._success()
        reward = self._shaped_reward() + (SUCCESS_BONUS if success else 0.0)
        done = success or s.step >= self.spec.horizon
        return self._observe(), reward, done, success


def scripted_expert(spec: TaskSpec):
    """Hand-coded controller solving every task kind; the validation oracle.

    Returns policy(obs) -> action. Stateless: everything needed is read back
    out of the observation.
    """

    def policy(obs: np.ndarray) -> np.ndarray:
        agent = obs[0:2]
        obj = obs[4:6]
        latched = obs[6] > 0.5
        goal = obs[7:9]
        kind = spec.kind
        if kind == "reach":
            target = goal
        elif kind == "toggle":
            target = obj
        elif kind == "push":
            if np.linalg.norm(agent - obj) > CONTACT_RADIUS:
                target = obj
            else:
                target = goal + (agent - obj)  # keep the carry offset
        else:  # two-stage-fetch
            if not latched:
                target = obj
            else:
                target = goal + (agent - obj)
        return np.clip((target - agent) / DT, -1.0, 1.0)

    return policy


def default_suite() -> list[TaskSpec]:
    """The 4-task training suite, ordered easy to hard."""
    return [
        TaskSpec(0, "reach", "fixed", difficulty=0),
        TaskSpec(1, "reach", "random", difficulty=1),
        TaskSpec(2, "push", "fixed", difficulty=2),
        TaskSpec(3, "two-stage-fetch", "fixed", difficulty=3),
    ]


def make_suite(entries: list[dict]) -> list[TaskSpec]:
    """TaskSpecs from config dictionaries; task ids follow list order."""
    specs = []
    for i, e in enumerate(entries):
        specs.append(
            TaskSpec(
                task_id=i,
                kind=e["kind"],
                goal_rule=e.get("goal_rule", "fixed"),
                difficulty=int(e.get("difficulty", i)),
                horizon=int(e.get("horizon", 200)),
            )
        )
    return specs


def run_episode(env: ToyEnv, policy, max_steps: int | None = None):
    """Roll one episode; returns (success, steps, total_reward)."""
    obs = env.reset()
    limit = max_steps or env.spec.horizon
    total = 0.0
    for t in range(limit):
        obs, reward, done, success = env.step(policy(obs))
        total += reward
        if done:
            return success, t + 1, total
    return False, limit, total
