"""Tabular MDPs: the Four Rooms gridworld with suboptimal goals, small test
MDPs for the exact oracle, and an episodic environment wrapper.

Grid actions are 0=up, 1=down, 2=left, 3=right. Moving into a wall leaves the
agent in place. With probability ``action_noise`` the executed action is drawn
uniformly from all four actions (so the intended one may still occur).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
ACTION_NAMES = ("up", "down", "left", "right")

# Classic 13x13 four-rooms layout. Goal digits index FourRoomsConfig.goal_rewards.
FOUR_ROOMS_LAYOUT = """\
#############
#S....#.....#
#.....#.....#
#......0....#
#.....#.....#
#.....#.....#
##.####.....#
#.....###.###
#.....#....2#
#.....#.....#
#...........#
#....1#.....#
#############"""

DEFAULT_GOAL_REWARDS = {0: 1.0, 1: 1.0, 2: 2.0}


class LayoutError(ValueError):
    """Invalid grid layout (start in a wall, unreachable goal, ...)."""


@dataclass(frozen=True)
class GridInfo:
    shape: tuple[int, int]
    cells: tuple[tuple[int, int], ...]  # state index -> (row, col)
    walls: frozenset

    @cached_property
    def index(self) -> dict:
        return {cell: i for i, cell in enumerate(self.cells)}


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A), expected reward
    gamma: float
    terminal: np.ndarray  # (S,) bool
    initial_state_dist: np.ndarray  # (S,)
    arrival_reward: Optional[np.ndarray] = None  # (S,), sampled reward on entering s'
    max_episode_len: Optional[int] = None
    grid: Optional[GridInfo] = None

    def __post_init__(self):
        p = self.transition
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must be (S, A, S), got {p.shape}")
        if np.any(p < 0) or not np.allclose(p.sum(-1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("transition rows must be probability vectors")
        if self.reward.shape != p.shape[:2] or not np.all(np.isfinite(self.reward)):
            raise ValueError("reward must be a finite (S, A) table")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        d0 = self.initial_state_dist
        if d0.shape != (p.shape[0],) or abs(d0.sum() - 1.0) > 1e-9 or np.any(d0 < 0):
            raise ValueError("initial_state_dist must be a distribution over states")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def terminal_states(self) -> frozenset:
        return frozenset(np.flatnonzero(self.terminal).tolist())

    @cached_property
    def _cum_transition(self) -> np.ndarray:
        c = np.cumsum(self.transition, axis=-1)
        c[..., -1] = 1.0
        return c

    @cached_property
    def _cum_initial(self) -> np.ndarray:
        c = np.cumsum(self.initial_state_dist)
        c[-1] = 1.0
        return c

    def sample_next(self, rng: np.random.Generator, state: int, action: int) -> int:
        return int(np.searchsorted(self._cum_transition[state, action], rng.random(), side="right"))

    def sample_initial(self, rng: np.random.Generator) -> int:
        return int(np.searchsorted(self._cum_initial, rng.random(), side="right"))


@dataclass(frozen=True)
class EpisodeStep:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool
    truncated: bool


def step(mdp: TabularMDP, rng: np.random.Generator, state: int, action: int,
         elapsed: int = 0) -> EpisodeStep:
    """Sample one transition. ``elapsed`` counts steps already taken this episode."""
    if mdp.terminal[state]:
        raise RuntimeError(f"step called on terminal state {state}")
    if not 0 <= action < mdp.n_actions:
        raise ValueError(f"action {action} out of range [0, {mdp.n_actions})")
    nxt = mdp.sample_next(rng, state, action)
    if mdp.arrival_reward is not None:
        r = float(mdp.arrival_reward[nxt])
    else:
        r = float(mdp.reward[state, action])
    done = bool(mdp.terminal[nxt])
    truncated = (not done and mdp.max_episode_len is not None
                 and elapsed + 1 >= mdp.max_episode_len)
    return EpisodeStep(state, action, r, nxt, done, bool(truncated))


# ---------------------------------------------------------------- Four Rooms

@dataclass
class FourRoomsConfig:
    layout: str = FOUR_ROOMS_LAYOUT
    goal_rewards: dict = field(default_factory=lambda: dict(DEFAULT_GOAL_REWARDS))
    action_noise: float = 0.1
    step_penalty: float = -0.002
    max_episode_len: int = 100
    gamma: float = 0.99
    # ((env_step_threshold, {goal_id: reward}), ...) applied in order
    goal_relocation: tuple = ()

    def parse(self) -> tuple[list[str], tuple[int, int], dict]:
        rows = [line for line in self.layout.strip("\n").splitlines()]
        width = max(len(r) for r in rows)
        rows = [r.ljust(width, "#") for r in rows]
        start = None
        goal_cells = {}
        for i, row in enumerate(rows):
            for j, ch in enumerate(row):
                if ch == "S":
                    if start is not None:
                        raise LayoutError(f"second start cell at {(i, j)}")
                    start = (i, j)
                elif ch.isdigit():
                    goal_cells[int(ch)] = (i, j)
                elif ch not in "#. ":
                    raise LayoutError(f"unknown layout symbol {ch!r} at {(i, j)}")
        if start is None:
            raise LayoutError("layout has no start cell 'S'")
        return rows, start, goal_cells

    def goals(self, goal_rewards: Optional[dict] = None) -> list[tuple[tuple[int, int], float]]:
        _, _, cells = self.parse()
        rewards = self.goal_rewards if goal_rewards is None else goal_rewards
        missing = set(rewards) - set(cells)
        if missing:
            raise LayoutError(f"goal ids {sorted(missing)} not present in layout")
        return [(cells[g], float(r)) for g, r in sorted(rewards.items())]


def _free_cells(rows: Sequence[str]) -> list[tuple[int, int]]:
    return [(i, j) for i, row in enumerate(rows) for j, ch in enumerate(row) if ch != "#"]


def _reachable(free: set, source, blocked: set) -> set:
    seen = {source}
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES:
            nb = (r + dr, c + dc)
            if nb in free and nb not in seen:
                seen.add(nb)
                if nb not in blocked:
                    queue.append(nb)
    return seen


def build_four_rooms(config: FourRoomsConfig, goal_rewards: Optional[dict] = None) -> TabularMDP:
    """Build the gridworld MDP. Every free cell (goals included) is a state."""
    if not 0.0 <= config.action_noise <= 1.0:
        raise ValueError(f"action_noise must lie in [0, 1], got {config.action_noise}")
    rows, start, _ = config.parse()
    goals = config.goals(goal_rewards)
    free = _free_cells(rows)
    free_set = set(free)
    if start not in free_set:
        raise LayoutError(f"start cell {start} is inside a wall")
    goal_cells = [g for g, _ in goals]
    for cell in goal_cells:
        if cell not in free_set:
            raise LayoutError(f"goal cell {cell} is inside a wall")
    # every non-goal cell must reach every goal without crossing another goal
    non_goal = free_set - set(goal_cells)
    for cell in goal_cells:
        seen = _reachable(free_set, cell, blocked=set(goal_cells) - {cell})
        unreached = non_goal - seen
        if unreached:
            raise LayoutError(f"goal cell {cell} is unreachable from cell {min(unreached)}")

    grid = GridInfo(shape=(len(rows), len(rows[0])), cells=tuple(free),
                    walls=frozenset((i, j) for i, row in enumerate(rows)
                                    for j, ch in enumerate(row) if ch == "#"))
    index = grid.index
    n, n_act = len(free), len(MOVES)
    dest = np.empty((n, n_act), dtype=np.int64)
    for s, (r, c) in enumerate(free):
        for a, (dr, dc) in enumerate(MOVES):
            dest[s, a] = index.get((r + dr, c + dc), s)

    noise = config.action_noise
    executed = (1.0 - noise) * np.eye(n_act) + noise / n_act  # intended -> executed
    transition = np.zeros((n, n_act, n))
    for s in range(n):
        for a in range(n_act):
            np.add.at(transition[s, a], dest[s], executed[a])

    terminal = np.zeros(n, dtype=bool)
    arrival = np.full(n, config.step_penalty)
    for cell, r in goals:
        terminal[index[cell]] = True
        arrival[index[cell]] = r
    for s in np.flatnonzero(terminal):
        transition[s] = 0.0
        transition[s, :, s] = 1.0
    reward = transition @ arrival
    reward[terminal] = 0.0
    d0 = np.zeros(n)
    d0[index[start]] = 1.0
    return TabularMDP(transition, reward, config.gamma, terminal, d0,
                      arrival_reward=arrival, max_episode_len=config.max_episode_len, grid=grid)


def rotating_goal_schedule(config: FourRoomsConfig, period: int, n_shifts: int = 3) -> tuple:
    """Schedule moving the largest reward to the next goal every ``period`` env steps."""
    ids = sorted(config.goal_rewards)
    values = [config.goal_rewards[g] for g in ids]
    schedule = []
    for k in range(1, n_shifts + 1):
        shift = k % len(ids)
        rotated = values[-shift:] + values[:-shift] if shift else list(values)
        schedule.append((k * period, dict(zip(ids, rotated))))
    return tuple(schedule)


# --------------------------------------------------------------- test MDPs

def build_test_mdp(kind: str, size: int, rng: Optional[np.random.Generator] = None,
                   n_actions: int = 2, gamma: float = 0.9) -> TabularMDP:
    """Small non-episodic MDPs for oracle checks.

    ``chain``: a line of ``size`` states, action 0 moves left, 1 moves right
    (blocked at the ends). ``random``: dense kernel with Dirichlet rows.
    """
    if size < 2:
        raise ValueError(f"size must be >= 2, got {size}")
    if kind == "chain":
        p = np.zeros((size, 2, size))
        for s in range(size):
            p[s, 0, max(s - 1, 0)] = 1.0
            p[s, 1, min(s + 1, size - 1)] = 1.0
        reward = np.zeros((size, 2))
    elif kind == "random":
        if rng is None:
            raise ValueError("random MDPs need an rng")
        p = rng.dirichlet(np.ones(size), size=(size, n_actions))
        p /= p.sum(-1, keepdims=True)
        reward = rng.standard_normal((size, n_actions))
    else:
        raise ValueError(f"unknown test MDP kind {kind!r}")
    n = p.shape[0]
    return TabularMDP(p, reward, gamma, np.zeros(n, dtype=bool), np.full(n, 1.0 / n))


# ------------------------------------------------------------- environment

class GridEnv:
    """Episodic environment over a TabularMDP with optional goal relocation.

    ``env_steps`` counts every step across episodes; relocation thresholds in
    ``schedule`` are compared against it.
    """

    def __init__(self, mdp: TabularMDP, rng: np.random.Generator,
                 schedule: Sequence[tuple[int, TabularMDP]] = ()):
        self.mdp = mdp
        self.rng = rng
        self.schedule = sorted(schedule, key=lambda x: x[0])
        self.env_steps = 0
        self.elapsed = 0
        self.state = mdp.sample_initial(rng)

    def reset(self) -> int:
        self.elapsed = 0
        self.state = self.mdp.sample_initial(self.rng)
        return self.state

    def step(self, action: int) -> EpisodeStep:
        out = step(self.mdp, self.rng, self.state, action, self.elapsed)
        self.env_steps += 1
        self.elapsed += 1
        while self.schedule and self.env_steps >= self.schedule[0][0]:
            self.mdp = self.schedule.pop(0)[1]
        if out.done or out.truncated:
            self.reset()
        else:
            self.state = out.next_state
        return out


def make_envs(config: FourRoomsConfig, seed_seq: np.random.SeedSequence, n: int) -> list[GridEnv]:
    mdp = build_four_rooms(config)
    schedule = [(t, build_four_rooms(config, g)) for t, g in config.goal_relocation]
    return [GridEnv(mdp, np.random.default_rng(s), schedule) for s in seed_seq.spawn(n)]
