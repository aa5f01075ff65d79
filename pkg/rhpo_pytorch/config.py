import json
from pathlib import Path
from math import ceil
from dataclasses import dataclass, field, fields, asdict, replace

from beartype.typing import Optional, Tuple, Literal

from rhpo_pytorch.critic import RetraceConfig
from rhpo_pytorch.improver import ImproverConfig
from rhpo_pytorch.utils import exists, default, str_to_dtype

Algorithm = Literal['rhpo', 'sacu_monolithic', 'sacu_independent', 'sacu_svg', 'rhpo_svg']

TransferMode = Literal['none', 'sequential_only_hl', 'sequential']

ALGORITHMS = ('rhpo', 'sacu_monolithic', 'sacu_independent', 'sacu_svg', 'rhpo_svg')

TRANSFER_MODES = ('none', 'sequential_only_hl', 'sequential')

# environment

@dataclass(frozen = True)
class EnvConfig:
    name: Literal['desk', 'point_reach'] = 'desk'
    episode_length: int = 600
    dt: float = 0.05
    max_speed: float = 0.5
    min_separation: float = 0.08
    obs_history: int = 1

    def __post_init__(self):
        assert self.name in ('desk', 'point_reach'), f'unknown environment {self.name}'
        assert self.episode_length >= 1
        assert self.dt > 0 and self.max_speed > 0
        assert self.obs_history >= 1

# experiment, defaults from the multitask hyperparameter table

@dataclass(frozen = True)
class ExperimentConfig:
    algorithm: Algorithm = 'rhpo'
    env: EnvConfig = field(default_factory = EnvConfig)
    seed: int = 0
    dtype: str = 'float64'

    # acting

    num_actors: int = 5
    schedule_period: int = 150
    active_tasks: Optional[Tuple[int, ...]] = None

    # learning

    num_steps: int = 10_000
    max_actor_episodes: Optional[int] = None
    learner_steps_per_episode: int = 50
    target_update_period: int = 500
    batch_size: int = 256
    min_replay_snippets: Optional[int] = None
    replay_capacity: Optional[int] = None
    retrace_length: int = 10
    gamma: float = 0.99
    lr: float = 2e-4
    critic_lr: float = 2e-4
    num_action_samples: int = 20

    # trust regions and duals

    epsilon: float = 0.1
    epsilon_mean: float = 5e-4
    epsilon_cov: float = 1e-5
    epsilon_cat: float = 1e-4
    dual_lr: float = 1e-2
    multiplier_lr: float = 0.1
    init_eta: float = 1.
    init_multiplier: float = 1.
    estep_normalization: Literal['state', 'batch'] = 'state'
    decoupled_likelihood: bool = True

    # networks

    policy_torso: Tuple[int, ...] = (400, 200)
    controller_dim: int = 100
    component_dim: int = 100
    monolithic_head_dim: int = 200
    independent_head_dim: int = 100
    critic_torso: Tuple[int, ...] = (400, 400)
    critic_head_dim: int = 300
    num_components: Optional[int] = None
    init_scheme: Literal['homogeneous', 'distinct_means'] = 'homogeneous'
    min_scale: float = 1e-4
    layer_norm_tanh: bool = True

    # svg baselines

    svg_regularizer: Literal['kl', 'entropy'] = 'kl'
    svg_kl_weight: float = 0.05
    svg_entropy_weight: float = 0.05
    gumbel_temperature: float = 0.5
    straight_through: bool = False

    # transfer

    transfer: TransferMode = 'none'
    transfer_checkpoint: Optional[str] = None
    transfer_task: Optional[int] = None
    transfer_train_torso: bool = False
    transfer_reuse_critic: bool = False

    # runtime

    deterministic: bool = True
    checkpoint_every: int = 1000
    log_every: int = 10
    actor_backoff: float = 0.01
    divergence_window: int = 50
    divergence_collapse: float = 0.1
    divergence_min_return: float = 1.

    def __post_init__(self):
        assert self.algorithm in ALGORITHMS, f'algorithm must be one of {ALGORITHMS}, got {self.algorithm}'
        assert self.transfer in TRANSFER_MODES, f'transfer must be one of {TRANSFER_MODES}, got {self.transfer}'
        assert self.transfer == 'none' or self.algorithm == 'rhpo', 'sequential transfer reuses hierarchical components'
        assert self.num_actors >= 1
        assert self.schedule_period >= 1
        assert self.num_steps >= 0
        assert self.learner_steps_per_episode >= 1
        assert self.target_update_period >= 1
        assert self.batch_size >= 1
        assert self.retrace_length >= 1
        assert self.num_action_samples >= 1
        assert 0. < self.gamma < 1.
        assert all(eps > 0 for eps in (self.epsilon, self.epsilon_mean, self.epsilon_cov, self.epsilon_cat)), 'trust region bounds must be positive'
        assert not exists(self.num_components) or self.num_components >= 1
        assert self.gumbel_temperature > 0
        assert not exists(self.min_replay_snippets) or self.min_replay_snippets >= 1

        if exists(self.replay_capacity):
            assert self.replay_snippets(1) >= self.min_replay(), f'replay holds {self.replay_snippets(1)} snippets, fewer than the {self.min_replay()} needed before the first learner step'

        str_to_dtype(self.dtype)

    # presets

    @classmethod
    def single_task(cls, **kwargs):
        """ single task hyperparameter table, on the point reach environment """

        defaults = dict(
            env = EnvConfig(name = 'point_reach', episode_length = 200),
            policy_torso = (200, 200),
            controller_dim = 200,
            component_dim = 200,
            monolithic_head_dim = 200,
            critic_torso = (500, 500),
            critic_head_dim = 500,
            num_components = 3,
            num_action_samples = 10,
            target_update_period = 250,
            replay_capacity = 2_000_000
        )

        return cls(**{**defaults, **kwargs})

    def replace(self, **kwargs):
        return replace(self, **kwargs)

    # derived

    @property
    def torch_dtype(self):
        return str_to_dtype(self.dtype)

    def tasks(self, num_tasks):
        tasks = default(self.active_tasks, tuple(range(num_tasks)))
        assert all(0 <= t < num_tasks for t in tasks), f'active tasks {tasks} out of range for {num_tasks} tasks'
        return tuple(tasks)

    def resolved_num_components(self, num_tasks):
        return default(self.num_components, num_tasks)

    def replay_snippets(self, num_tasks):
        """ buffer capacity in snippets, from a capacity in transitions of 1e6 per task unless set """
        transitions = default(self.replay_capacity, 1_000_000 * num_tasks)
        return ceil(transitions / self.retrace_length)

    def min_replay(self):
        return default(self.min_replay_snippets, self.batch_size)

    def retrace_config(self):
        return RetraceConfig(length = self.retrace_length, gamma = self.gamma, num_samples = self.num_action_samples)

    def improver_config(self):
        return ImproverConfig(
            epsilon = self.epsilon,
            epsilon_mean = self.epsilon_mean,
            epsilon_cov = self.epsilon_cov,
            epsilon_cat = self.epsilon_cat,
            num_samples = self.num_action_samples,
            lr = self.lr,
            dual_lr = self.dual_lr,
            multiplier_lr = self.multiplier_lr,
            init_eta = self.init_eta,
            init_multiplier = self.init_multiplier,
            estep_normalization = self.estep_normalization,
            decoupled_likelihood = self.decoupled_likelihood,
            svg_regularizer = self.svg_regularizer,
            svg_kl_weight = self.svg_kl_weight,
            svg_entropy_weight = self.svg_entropy_weight,
            gumbel_temperature = self.gumbel_temperature,
            straight_through = self.straight_through
        )

    # serialization

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent = 2, sort_keys = True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d.keys()) - known
        assert len(unknown) == 0, f'unknown config fields {sorted(unknown)}'

        if 'env' in d:
            d['env'] = EnvConfig(**d['env'])

        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents = True, exist_ok = True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())
