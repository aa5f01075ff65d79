import logging
from math import atanh, sqrt
from collections import namedtuple, deque

import numpy as np

from beartype import beartype
from beartype.typing import Optional, Tuple

import torch

from rhpo_pytorch.utils import exists

logger = logging.getLogger(__name__)

# constants

ATANH_SQRT_095 = atanh(sqrt(0.95))     # stol falls to 0.05 at |v| = r

ARENA_X = (-0.2, 0.2)
ARENA_Z = (0., 0.3)

CUBE_SIZE = 0.05
CUBE_HALF = CUBE_SIZE / 2

GRASP_RADIUS = 0.02
GRASP_THRESHOLD = 0.5

# reward primitives, scalars or numpy arrays

def to_output(out):
    return float(out) if np.ndim(out) == 0 else out

def stol(v, eps, r):
    """ shaped tolerance - 1 inside the tolerance, 1 - tanh^2(atanh(sqrt(0.95)) / r * |v|) outside """
    assert eps >= 0 and r > 0
    v = np.abs(np.asarray(v, dtype = np.float64))
    out = np.where(v < eps, 1., 1. - np.tanh(ATANH_SQRT_095 / r * v) ** 2)
    return to_output(out)

def slin(v, eps_min, eps_max):
    """ saturating linear - 0 below eps_min, 1 above eps_max """
    assert eps_min < eps_max
    v = np.asarray(v, dtype = np.float64)
    out = np.clip((v - eps_min) / (eps_max - eps_min), 0., 1.)
    return to_output(out)

def btol(v, eps):
    assert eps >= 0
    v = np.abs(np.asarray(v, dtype = np.float64))
    return to_output((v < eps).astype(np.float64))

# 2D boxes, center (x, z) and half extents (hx, hz)

Box = namedtuple('Box', ['center', 'half_extent'])

def cube(center, size = CUBE_SIZE):
    return Box(np.asarray(center, dtype = np.float64), np.full((2,), size / 2))

def above(a: Box, b: Box) -> float:
    """ 1 when the lowest point of a is at or over the highest point of b """
    return float(a.center[1] - a.half_extent[1] >= b.center[1] + b.half_extent[1])

def inside(a: Box, bounds) -> float:
    """ 1 when a lies completely within bounds (x_min, x_max, z_min, z_max) """
    x_min, x_max, z_min, z_max = bounds
    lo = a.center - a.half_extent
    hi = a.center + a.half_extent
    return float(lo[0] >= x_min and hi[0] <= x_max and lo[1] >= z_min and hi[1] <= z_max)

# world state

class WorldState(namedtuple('WorldState', [
    'agent',        # (2,) position (x, z) in m
    'velocity',     # (2,) m/s
    'aperture',     # gripper opening in [0, 1], 1 fully open
    'objects',      # (K, 2) cube centers
    'attached'      # index of the held object or None
])):

    @property
    def is_attached(self):
        return exists(self.attached)

def clip_to_arena(pos, margin = 0.):
    x = np.clip(pos[..., 0], ARENA_X[0] + margin, ARENA_X[1] - margin)
    z = np.clip(pos[..., 1], ARENA_Z[0] + margin, ARENA_Z[1] - margin)
    return np.stack((x, z), axis = -1)

def settle(objects, attached = None, size = CUBE_SIZE):
    """ free objects drop onto the table or onto the highest block below them, lowest first """

    objects = objects.copy()
    free = [i for i in range(len(objects)) if i != attached]

    for i in sorted(free, key = lambda i: objects[i, 1]):
        rest = size / 2

        for j in range(len(objects)):
            if j == i or objects[j, 1] >= objects[i, 1]:
                continue

            if abs(objects[j, 0] - objects[i, 0]) < size:
                rest = max(rest, objects[j, 1] + size)

        objects[i, 1] = rest

    return objects

def transition(
    state: WorldState,
    action,
    dt = 0.05,
    max_speed = 0.5
) -> WorldState:
    """ kinematic point mass under velocity control, pure in (state, action) """

    action = np.clip(np.asarray(action, dtype = np.float64), -1., 1.)
    velocity, grasp = action[:2] * max_speed, action[2]

    attached = state.attached
    holding = grasp > GRASP_THRESHOLD

    agent = clip_to_arena(state.agent + velocity * dt)

    if exists(attached):
        agent = np.array([agent[0], max(agent[1], CUBE_HALF)])

    velocity = (agent - state.agent) / dt
    objects = state.objects.copy()

    if exists(attached) and not holding:
        attached = None

    elif not exists(attached) and holding:
        dists = np.linalg.norm(objects - agent, axis = -1)
        nearest = int(dists.argmin())

        if dists[nearest] < GRASP_RADIUS:
            attached = nearest

    if exists(attached):
        objects[attached] = agent

    objects = settle(objects, attached)

    aperture = float(np.clip((1. - grasp) / 2, 0., 1.))
    return WorldState(agent, velocity, aperture, objects, attached)

# desk stacking environment, green cube (0) onto yellow cube (1)

TASKS = (
    'reach',
    'grasp',
    'lift',
    'place_wide',
    'place_narrow',
    'stack',
    'stack_and_leave'
)

GREEN, YELLOW = 0, 1

def task_rewards(state: WorldState) -> np.ndarray:
    """ hindsight reward vector over every task of the ladder """

    agent = state.agent
    green, yellow = state.objects[GREEN], state.objects[YELLOW]
    target = yellow + np.array([0., CUBE_SIZE])

    reach = stol(np.linalg.norm(agent - green), 0.02, 0.15)
    grasp = float(state.attached == GREEN)
    lift = slin(green[1] - CUBE_HALF, 0.03, 0.10)
    place_wide = stol(np.linalg.norm(green - target), 0.01, 0.20)
    place_narrow = stol(np.linalg.norm(green - target), 0., 0.01)

    stack = btol(abs(green[0] - yellow[0]), 0.03) * btol((yellow[1] - green[1]) + CUBE_SIZE, 0.01) * (1. - grasp)
    stack_and_leave = stol((green[1] - agent[1]) + 0.10, 0.03, 0.10) * stack

    return np.array([reach, grasp, lift, place_wide, place_narrow, stack, stack_and_leave])

def observe(state: WorldState) -> np.ndarray:
    """
    layout, 14 dims, meters and m/s
    agent (x, z) | agent velocity (x, z) | grasp flag | aperture | green (x, z) | yellow (x, z) | green - agent | yellow - agent
    """

    green, yellow = state.objects[GREEN], state.objects[YELLOW]

    return np.concatenate((
        state.agent,
        state.velocity,
        [float(state.is_attached), state.aperture],
        green,
        yellow,
        green - state.agent,
        yellow - state.agent
    ))

def uniform(low, high, generator = None, shape = ()):
    u = torch.rand(shape, generator = generator, dtype = torch.float64).numpy()
    return low + (high - low) * u

class DeskEnv:
    tasks = TASKS
    num_tasks = len(TASKS)
    dim_state = 14
    dim_action = 3

    @beartype
    def __init__(
        self,
        *,
        episode_length: int = 600,
        dt: float = 0.05,
        max_speed: float = 0.5,
        min_separation: float = 0.08,
        max_reset_tries: int = 1000
    ):
        assert episode_length >= 1
        assert min_separation < (ARENA_X[1] - ARENA_X[0]) - CUBE_SIZE, 'objects cannot be separated that far inside the arena'

        self.episode_length = episode_length
        self.dt = dt
        self.max_speed = max_speed
        self.min_separation = min_separation
        self.max_reset_tries = max_reset_tries

        self.state = None
        self.t = 0

    def sample_objects(self, generator = None):
        low, high = ARENA_X[0] + CUBE_HALF, ARENA_X[1] - CUBE_HALF

        for _ in range(self.max_reset_tries):
            xs = uniform(low, high, generator, shape = (2,))

            if abs(xs[0] - xs[1]) >= self.min_separation:
                return np.stack((xs, np.full((2,), CUBE_HALF)), axis = -1)

        raise RuntimeError(f'could not place objects {self.min_separation} m apart after {self.max_reset_tries} tries')

    def reset(self, generator: Optional[torch.Generator] = None) -> np.ndarray:
        agent = np.array([
            uniform(*ARENA_X, generator),
            uniform(*ARENA_Z, generator)
        ])

        objects = self.sample_objects(generator)

        self.state = WorldState(agent, np.zeros(2), 1., objects, None)
        self.t = 0
        return observe(self.state)

    def step(self, action) -> Tuple[np.ndarray, np.ndarray, bool]:
        assert exists(self.state), 'reset the environment before stepping'

        self.state = transition(self.state, action, dt = self.dt, max_speed = self.max_speed)
        self.t += 1
        return observe(self.state), task_rewards(self.state), False

    @property
    def done(self):
        return self.t >= self.episode_length

# single task point reach, for the initialization ablation

class PointReachEnv:
    tasks = ('reach',)
    num_tasks = 1
    dim_state = 8
    dim_action = 2

    @beartype
    def __init__(
        self,
        *,
        episode_length: int = 200,
        dt: float = 0.05,
        max_speed: float = 0.5
    ):
        self.episode_length = episode_length
        self.dt = dt
        self.max_speed = max_speed

        self.agent = self.velocity = self.goal = None
        self.t = 0

    def observe(self):
        return np.concatenate((self.agent, self.velocity, self.goal, self.goal - self.agent))

    def reset(self, generator: Optional[torch.Generator] = None) -> np.ndarray:
        sample_point = lambda: np.array([uniform(*ARENA_X, generator), uniform(*ARENA_Z, generator)])

        self.agent = sample_point()
        self.goal = sample_point()
        self.velocity = np.zeros(2)
        self.t = 0
        return self.observe()

    def step(self, action):
        assert exists(self.agent), 'reset the environment before stepping'

        action = np.clip(np.asarray(action, dtype = np.float64), -1., 1.)
        agent = clip_to_arena(self.agent + action * self.max_speed * self.dt)

        self.velocity = (agent - self.agent) / self.dt
        self.agent = agent
        self.t += 1

        reward = stol(np.linalg.norm(self.goal - self.agent), 0.02, 0.15)
        return self.observe(), np.array([reward]), False

    @property
    def done(self):
        return self.t >= self.episode_length

# observation history - concatenates the last k observations, oldest first

class ObservationHistory:
    def __init__(self, env, length = 1):
        assert length >= 1
        self.env = env
        self.length = length
        self.history = deque(maxlen = length)

    def __getattr__(self, name):
        return getattr(self.env, name)

    @property
    def dim_state(self):
        return self.env.dim_state * self.length

    def stacked(self):
        return np.concatenate(tuple(self.history))

    def reset(self, generator = None):
        obs = self.env.reset(generator)
        self.history.clear()
        self.history.extend([obs] * self.length)
        return self.stacked()

    def step(self, action):
        obs, rewards, terminal = self.env.step(action)
        self.history.append(obs)
        return self.stacked(), rewards, terminal

# scripted controller for the stacking ladder, proportional control towards waypoints

def toward(agent, target, dt = 0.05, max_speed = 0.5):
    return np.clip((target - agent) / (max_speed * dt), -1., 1.)

def scripted_stack_action(state: WorldState, dt = 0.05, max_speed = 0.5, hover = 0.04, tol = 1e-3) -> np.ndarray:
    agent = state.agent
    green, yellow = state.objects[GREEN], state.objects[YELLOW]
    place = yellow + np.array([0., CUBE_SIZE])
    move = lambda target: toward(agent, target, dt, max_speed)

    stacked = abs(green[0] - yellow[0]) < 0.03 and abs(green[1] - place[1]) < 0.01

    if state.attached == GREEN:
        if np.abs(green - place).max() < tol:
            return np.array([0., 0., -1.])

        waypoint = place if abs(green[0] - place[0]) < tol else place + np.array([0., hover])
        return np.array([*move(waypoint), 1.])

    if stacked:
        return np.array([*move(green + np.array([0., 0.10])), -1.])

    if np.linalg.norm(green - agent) < tol:
        return np.array([0., 0., 1.])

    return np.array([*move(green), -1.])

def scripted_stacker(env: DeskEnv):
    """ policy callable on the live env state, for oracle returns """
    return lambda: scripted_stack_action(env.state, dt = env.dt, max_speed = env.max_speed)

def rollout_scripted(env: DeskEnv, generator = None):
    """ per-task returns of the scripted stacker over one episode, and the reward trace (T, |I|) """

    env.reset(generator)
    controller = scripted_stacker(env)
    rewards = []

    while not env.done:
        _, reward, _ = env.step(controller())
        rewards.append(reward)

    rewards = np.stack(rewards)
    return rewards.sum(axis = 0), rewards

# construction from config

ENVS = dict(
    desk = DeskEnv,
    point_reach = PointReachEnv
)

def make_env(config):
    """ config - EnvConfig """
    assert config.name in ENVS, f'unknown environment {config.name}, must be one of {tuple(ENVS.keys())}'

    kwargs = dict(episode_length = config.episode_length, dt = config.dt, max_speed = config.max_speed)

    if config.name == 'desk':
        kwargs.update(min_separation = config.min_separation)

    env = ENVS[config.name](**kwargs)

    if config.obs_history > 1:
        env = ObservationHistory(env, config.obs_history)

    return env
