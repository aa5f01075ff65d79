import json
import time
import logging
import threading
from pathlib import Path
from copy import deepcopy
from collections import namedtuple, deque

import numpy as np
from tqdm import tqdm

from beartype import beartype
from beartype.typing import Optional, Iterator, List

import torch
from torch import nn

from rhpo_pytorch.config import ExperimentConfig
from rhpo_pytorch.envs import make_env

from rhpo_pytorch.policy import (
    HierarchicalPolicy,
    FlatPolicy,
    freeze_components,
    extend_with_new_component,
    num_trainable_parameters,
    save_policy,
    load_policy
)

from rhpo_pytorch.critic import QEnsemble, critic_loss
from rhpo_pytorch.improver import MPOImprover, SVGImprover
from rhpo_pytorch.replay import ReplayBuffer, Scheduler, TrajectoryStep
from rhpo_pytorch.distributions import sample, mixture_log_prob

from rhpo_pytorch.diffmath import (
    ParamStore,
    backward,
    adam_step,
    save_checkpoint,
    load_checkpoint
)

from rhpo_pytorch.utils import (
    exists,
    default,
    divisible_by,
    all_finite,
    format_kv,
    make_generator,
    spawn_generator,
    torch_default_dtype,
    append_text_locked,
    NonFiniteError,
    DivergenceError
)

logger = logging.getLogger(__name__)

# metrics stream, json lines, append-only

class MetricsWriter:
    def __init__(self, path = None):
        self.path = Path(path) if exists(path) else None
        self.index = 0
        self.records = []
        self.lock = threading.Lock()

    def write(self, kind, **fields):
        with self.lock:
            record = dict(index = self.index, kind = kind, wall_time = time.time(), **fields)
            self.index += 1
            self.records.append(record)

            if exists(self.path):
                append_text_locked(self.path, json.dumps(record) + '\n')

        return record

def read_metrics(path) -> List[dict]:
    path = Path(path)

    if not path.exists():
        return []

    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]

# divergence detection - non-finite values are caught by the optimizer steps, this watches for return collapse

class DivergenceMonitor:
    def __init__(self, window = 50, collapse = 0.1, min_return = 1.):
        self.window = window
        self.collapse = collapse
        self.min_return = min_return
        self.returns = deque(maxlen = window)
        self.best = float('-inf')

    def observe(self, value):
        if not np.isfinite(value):
            raise DivergenceError('non-finite episode return', dict(episode_return = value))

        self.returns.append(value)

        if len(self.returns) < self.window:
            return

        rolling = float(np.mean(self.returns))
        self.best = max(self.best, rolling)

        if self.best >= self.min_return and rolling < self.collapse * self.best:
            raise DivergenceError('final task return collapsed', dict(rolling_return = rolling, best_rolling_return = self.best))

# construction

def frozen_copy(module: nn.Module):
    module = deepcopy(module)

    for param in module.parameters():
        param.requires_grad_(False)

    return module

def build_policy(config: ExperimentConfig, env) -> nn.Module:
    kwargs = dict(
        dim_state = env.dim_state,
        dim_action = env.dim_action,
        num_tasks = env.num_tasks,
        torso_dims = config.policy_torso,
        layer_norm_tanh = config.layer_norm_tanh,
        min_scale = config.min_scale
    )

    if config.algorithm in ('rhpo', 'rhpo_svg'):
        return HierarchicalPolicy(
            num_components = config.resolved_num_components(env.num_tasks),
            controller_dim = config.controller_dim,
            component_dim = config.component_dim,
            init_scheme = config.init_scheme,
            **kwargs
        )

    if config.algorithm == 'sacu_independent':
        return FlatPolicy(kind = 'independent', head_dim = config.independent_head_dim, **kwargs)

    return FlatPolicy(kind = 'monolithic', head_dim = config.monolithic_head_dim, **kwargs)

def build_critic(config: ExperimentConfig, env) -> QEnsemble:
    return QEnsemble(
        dim_state = env.dim_state,
        dim_action = env.dim_action,
        num_tasks = env.num_tasks,
        torso_dims = config.critic_torso,
        head_dim = config.critic_head_dim,
        layer_norm_tanh = config.layer_norm_tanh
    )

def build_improver(config: ExperimentConfig, policy, tasks):
    improver_config = config.improver_config()

    if config.algorithm == 'sacu_svg':
        return SVGImprover(policy, improver_config, tasks = tasks, hierarchical = False)

    if config.algorithm == 'rhpo_svg':
        return SVGImprover(policy, improver_config, tasks = tasks, hierarchical = True)

    return MPOImprover(policy, improver_config, tasks = tasks)

def critic_path_for(policy_path):
    policy_path = Path(policy_path)
    return policy_path.with_name(policy_path.name.replace('policy', 'critic', 1))

def transfer_policy(config: ExperimentConfig, env):
    """ pretrained components frozen, a fresh controller (and for sequential, one fresh component) for the new task """

    assert exists(config.transfer_checkpoint), 'transfer needs a pretrained policy checkpoint'

    pretrained, _ = load_policy(config.transfer_checkpoint)
    assert isinstance(pretrained, HierarchicalPolicy), 'transfer reuses the components of a hierarchical policy'

    new_task = default(config.transfer_task, env.num_tasks - 1)

    if config.transfer == 'sequential':
        policy = extend_with_new_component(pretrained, new_task, train_torso = config.transfer_train_torso)
    else:
        policy = freeze_components(pretrained, new_task, train_torso = config.transfer_train_torso)

    logger.info(
        'transfer %s to task %d, %d of %d parameters trainable',
        config.transfer, new_task, num_trainable_parameters(policy), sum(p.numel() for p in policy.parameters())
    )

    return policy, new_task

# learner

class Learner:
    @beartype
    def __init__(
        self,
        config: ExperimentConfig,
        env,
        generator: Optional[torch.Generator] = None
    ):
        self.config = config
        self.generator = default(generator, make_generator(config.seed))

        with torch.random.fork_rng(), torch_default_dtype(config.torch_dtype):
            torch.manual_seed(config.seed)

            self.tasks = config.tasks(env.num_tasks)

            if config.transfer != 'none':
                self.policy, new_task = transfer_policy(config, env)
                self.tasks = default(config.active_tasks, (new_task,))
            else:
                self.policy = build_policy(config, env)

            self.critic = build_critic(config, env)

            if config.transfer != 'none' and config.transfer_reuse_critic:
                tensors, _ = load_checkpoint(critic_path_for(config.transfer_checkpoint))
                self.critic.online.load_state_dict(tensors)
                self.critic.update_target()
                self.critic.num_target_updates = 0

            self.improver = build_improver(config, self.policy, self.tasks)
            self.critic_store = ParamStore(self.critic.online, lr = config.critic_lr)

        self.target_policy = frozen_copy(self.policy)
        self.retrace_config = config.retrace_config()
        self.step = 0

    @property
    def final_task(self):
        return self.tasks[-1]

    def update_targets(self):
        self.critic.update_target()
        self.target_policy = frozen_copy(self.policy)

    def critic_step(self, batch):
        loss = critic_loss(self.critic, batch, self.target_policy, generator = self.generator, config = self.retrace_config)

        if not all_finite(loss):
            raise NonFiniteError('non-finite critic loss, step aborted', dict(critic_loss = loss.item(), learner_step = self.step))

        grads = backward(loss, self.critic.online)
        adam_step(self.critic_store, grads)
        return loss.item()

    def learner_step(self, replay: ReplayBuffer):
        """ one batch - critic regression to retrace targets, then policy improvement against the target policy """

        batch = replay.sample_batch(self.config.batch_size, generator = self.generator)

        if not exists(batch):
            return None

        critic_loss_value = self.critic_step(batch)
        diagnostics = self.improver.improvement_step(batch, self.target_policy, self.critic, generator = self.generator)

        self.step += 1

        if divisible_by(self.step, self.config.target_update_period):
            self.update_targets()

        return dict(critic_loss = critic_loss_value, **diagnostics)

    def save(self, output_dir, extra_metadata = None):
        output_dir = Path(output_dir)
        metadata = dict(config = self.config.to_dict(), learner_step = self.step, tasks = list(self.tasks), **default(extra_metadata, dict()))

        policy_path = output_dir / f'policy_{self.step:08d}.ckpt'
        save_policy(policy_path, self.policy, metadata)
        save_checkpoint(critic_path_for(policy_path), self.critic.online.state_dict(), metadata)
        return policy_path

# snapshot publication - actors read whichever complete snapshot was published last

Snapshot = namedtuple('Snapshot', ['version', 'policy'])

class SnapshotSource:
    def __init__(self):
        self.lock = threading.Lock()
        self.snapshot = None

    def publish(self, policy, version):
        snapshot = Snapshot(version, frozen_copy(policy))

        with self.lock:
            self.snapshot = snapshot

    def fetch(self, backoff = 0.01, timeout = None, stop_event = None) -> Optional[Snapshot]:
        waited = 0.

        while True:
            with self.lock:
                snapshot = self.snapshot

            if exists(snapshot):
                return snapshot

            if (exists(stop_event) and stop_event.is_set()) or (exists(timeout) and waited >= timeout):
                return None

            time.sleep(backoff)
            waited += backoff
            backoff = min(backoff * 2, 1.)

# actors

EpisodeRecord = namedtuple('EpisodeRecord', [
    'actor_id',
    'snapshot_version',
    'returns',          # (|I|,) returns of every task, whatever task was executed
    'executed_tasks',   # (T,)
    'length'
])

class Actor:
    def __init__(
        self,
        actor_id,
        config: ExperimentConfig,
        env,
        tasks,
        generator: torch.Generator
    ):
        self.actor_id = actor_id
        self.config = config
        self.env = env
        self.dtype = config.torch_dtype
        self.generator = generator
        self.scheduler = Scheduler(tasks, config.schedule_period, generator = spawn_generator(generator))

    @torch.no_grad()
    def run_episode(self, policy: nn.Module, replay: Optional[ReplayBuffer] = None, snapshot_version = 0) -> EpisodeRecord:
        env = self.env

        obs = env.reset(self.generator)

        steps = []

        for t in range(env.episode_length):
            task = self.scheduler.next_task(t)
            state = torch.from_numpy(obs).to(self.dtype)

            mixture = policy(state, task)
            action, _ = sample(mixture, generator = self.generator)
            action = action.clamp(-policy.action_bound, policy.action_bound)

            log_prob = mixture_log_prob(mixture, action)

            next_obs, rewards, terminal = env.step(action.numpy())

            steps.append(TrajectoryStep(state, action, rewards, log_prob.item(), task))
            obs = next_obs

            if terminal:
                break

        final_state = torch.from_numpy(obs).to(self.dtype)

        if exists(replay):
            replay.append_episode(steps, final_state, terminal = terminal)

        returns = np.stack([step.reward_vector for step in steps]).sum(axis = 0)
        executed = np.array([step.executed_task for step in steps])

        return EpisodeRecord(self.actor_id, snapshot_version, returns, executed, len(steps))

def build_actors(config: ExperimentConfig, tasks, generator):
    return [Actor(actor_id, config, make_env(config.env), tasks, spawn_generator(generator)) for actor_id in range(config.num_actors)]

def run_actor(
    actor: Actor,
    source: SnapshotSource,
    replay: ReplayBuffer,
    stop_event: Optional[threading.Event] = None,
    num_episodes: Optional[int] = None
) -> Iterator[EpisodeRecord]:
    """ per episode - fetch the latest snapshot, act with the scheduled tasks, ship the episode to replay """

    episode = 0

    while not exists(num_episodes) or episode < num_episodes:
        if exists(stop_event) and stop_event.is_set():
            return

        snapshot = source.fetch(backoff = actor.config.actor_backoff, stop_event = stop_event)

        if not exists(snapshot):
            return

        yield actor.run_episode(snapshot.policy, replay, snapshot_version = snapshot.version)
        episode += 1

# training loop

TrainResult = namedtuple('TrainResult', [
    'learner',
    'replay',
    'metrics',
    'checkpoints',
    'actor_episodes'
])

class Trainer:
    """ bookkeeping shared by the deterministic and the threaded loops """

    def __init__(self, config: ExperimentConfig, output_dir = None, progress = True):
        self.config = config
        self.output_dir = Path(output_dir) if exists(output_dir) else None

        root = make_generator(config.seed)

        self.env = make_env(config.env)
        self.learner = Learner(config, self.env, generator = spawn_generator(root))
        self.actors = build_actors(config, self.learner.tasks, root)

        self.replay = ReplayBuffer(
            capacity = config.replay_snippets(self.env.num_tasks),
            snippet_length = config.retrace_length,
            num_tasks = self.env.num_tasks,
            dtype = config.torch_dtype
        )

        assert self.replay.capacity >= config.min_replay(), f'replay holds {self.replay.capacity} snippets, fewer than the {config.min_replay()} needed before the first learner step'

        self.source = SnapshotSource()
        self.metrics = MetricsWriter(self.output_dir / 'metrics.jsonl' if exists(self.output_dir) else None)
        self.monitor = DivergenceMonitor(config.divergence_window, config.divergence_collapse, config.divergence_min_return)

        self.lock = threading.Lock()
        self.actor_episodes = 0
        self.checkpoints = []
        self.progress = progress

        self.task_names = getattr(self.env, 'tasks', tuple(str(i) for i in range(self.env.num_tasks)))

    @property
    def episodes_exhausted(self):
        budget = self.config.max_actor_episodes
        return exists(budget) and self.actor_episodes >= budget

    @property
    def steps_done(self):
        return self.learner.step >= self.config.num_steps

    def on_episode(self, record: EpisodeRecord):
        with self.lock:
            self.actor_episodes += 1

            returns = {f'return_{name}': float(value) for name, value in zip(self.task_names, record.returns)}

            self.metrics.write(
                'episode',
                learner_step = self.learner.step,
                actor_episodes = self.actor_episodes,
                actor_id = record.actor_id,
                snapshot_version = record.snapshot_version,
                episode_steps = record.length,
                **returns
            )

            self.monitor.observe(float(record.returns[self.learner.final_task]))

    def on_learner_step(self, diagnostics):
        step = self.learner.step

        if divisible_by(step, self.config.log_every):
            self.metrics.write('learner', learner_step = step, actor_episodes = self.actor_episodes, **diagnostics)
            logger.info('step %d episodes %d %s', step, self.actor_episodes, format_kv(diagnostics))

        if divisible_by(step, self.config.checkpoint_every):
            self.checkpoint()

    def checkpoint(self):
        if not exists(self.output_dir):
            return

        path = self.learner.save(self.output_dir)

        if path not in self.checkpoints:
            self.checkpoints.append(path)

    def halt(self, error):
        logger.error('halting at learner step %d: %s %s', self.learner.step, error, format_kv(getattr(error, 'diagnostics', dict())))
        self.metrics.write('halt', learner_step = self.learner.step, actor_episodes = self.actor_episodes, reason = str(error), **getattr(error, 'diagnostics', dict()))

    def result(self):
        return TrainResult(self.learner, self.replay, self.metrics, self.checkpoints, self.actor_episodes)

    def run_deterministic(self, pbar):
        """ serial interleaving - every actor plays one episode, then the learner takes its share of steps """

        config, learner = self.config, self.learner
        version = 0

        self.source.publish(learner.policy, version)

        while not self.steps_done and not self.episodes_exhausted:
            for actor in self.actors:
                if self.episodes_exhausted:
                    break

                snapshot = self.source.fetch()
                self.on_episode(actor.run_episode(snapshot.policy, self.replay, snapshot_version = snapshot.version))

            num_steps = min(config.learner_steps_per_episode * len(self.actors), config.num_steps - learner.step)

            if len(self.replay) < config.min_replay():
                continue

            for _ in range(num_steps):
                diagnostics = learner.learner_step(self.replay)
                self.on_learner_step(diagnostics)
                pbar.update(1)

            version += 1
            self.source.publish(learner.policy, version)

    def run_threaded(self, pbar):
        """ one thread per actor over the shared replay, the learner publishes a snapshot after every step """

        config, learner = self.config, self.learner

        stop_event = threading.Event()
        errors = []

        self.source.publish(learner.policy, 0)

        def actor_loop(actor):
            try:
                for record in run_actor(actor, self.source, self.replay, stop_event = stop_event):
                    self.on_episode(record)

                    if self.episodes_exhausted:
                        stop_event.set()
            except Exception as error:
                errors.append(error)
                stop_event.set()

        threads = [threading.Thread(target = actor_loop, args = (actor,), daemon = True) for actor in self.actors]

        for thread in threads:
            thread.start()

        try:
            while not self.steps_done and not stop_event.is_set():
                if len(self.replay) < config.min_replay():
                    time.sleep(config.actor_backoff)
                    continue

                diagnostics = learner.learner_step(self.replay)
                self.on_learner_step(diagnostics)
                pbar.update(1)

                self.source.publish(learner.policy, learner.step)
        finally:
            stop_event.set()

            for thread in threads:
                thread.join()

        if len(errors) > 0:
            raise errors[0]

    def run(self):
        if exists(self.output_dir):
            self.config.save(self.output_dir / 'config.json')

        self.checkpoint()

        with tqdm(total = self.config.num_steps, disable = not self.progress, desc = 'learner steps') as pbar:
            try:
                if self.config.deterministic:
                    self.run_deterministic(pbar)
                else:
                    self.run_threaded(pbar)

            except (NonFiniteError, DivergenceError) as error:
                self.halt(error)
                raise

        self.checkpoint()
        return self.result()

@beartype
def run_learner(
    config: ExperimentConfig,
    output_dir = None,
    progress: bool = True
) -> TrainResult:
    """
    learner loop with target copies every target_update_period steps and periodic checkpoints
    with deterministic set, actors and learner interleave serially and the run is reproducible from the seed
    """

    return Trainer(config, output_dir = output_dir, progress = progress).run()
