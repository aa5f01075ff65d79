import logging
from pathlib import Path
from collections import namedtuple

import pandas as pd

from beartype import beartype
from beartype.typing import Sequence, Literal

from rhpo_pytorch.config import ExperimentConfig
from rhpo_pytorch.envs import make_env
from rhpo_pytorch.runtime import run_learner
from rhpo_pytorch.analysis import emit_curves, episode_frame

logger = logging.getLogger(__name__)

AblationKind = Literal['kl_sweep', 'actor_count', 'component_count', 'init_scheme', 'transfer']

# one factor varied per grid, everything else held at the base config

ABLATION_GRIDS = dict(
    kl_sweep = ('epsilon_cat', (1e-6, 1e-4, 1e-2, 1.)),
    component_count = ('num_components', (2, 4, 8, 16)),
    actor_count = ('num_actors', (1, 5, 20)),
    init_scheme = ('init_scheme', ('homogeneous', 'distinct_means'))
)

TRANSFER_VARIANTS = ('scratch', 'sequential_only_hl', 'sequential')

AblationResult = namedtuple('AblationResult', [
    'kind',
    'runs',         # variant label -> {seed: TrainResult}
    'metrics'       # merged episode records, with variant and seed columns
])

def ablation_configs(kind: AblationKind, base: ExperimentConfig):
    """ (label, config) for every point of the grid """

    assert kind in ABLATION_GRIDS, f'{kind} has no single-factor grid'

    field, values = ABLATION_GRIDS[kind]
    return [(f'{field}={value}', base.replace(**{field: value})) for value in values]

def transfer_configs(base: ExperimentConfig, pretrained_checkpoint):
    """ the final task learned from scratch, or on top of components pretrained on every other task """

    num_tasks = make_env(base.env).num_tasks
    final_task = num_tasks - 1

    scratch = base.replace(active_tasks = (final_task,), transfer = 'none')

    transfer = lambda mode: base.replace(
        active_tasks = (final_task,),
        transfer = mode,
        transfer_task = final_task,
        transfer_checkpoint = str(pretrained_checkpoint)
    )

    return [
        ('scratch', scratch),
        ('sequential_only_hl', transfer('sequential_only_hl')),
        ('sequential', transfer('sequential'))
    ]

def pretrain(base: ExperimentConfig, output_dir, progress = True):
    num_tasks = make_env(base.env).num_tasks
    config = base.replace(active_tasks = tuple(range(num_tasks - 1)), transfer = 'none')

    result = run_learner(config, output_dir = output_dir, progress = progress)
    assert len(result.checkpoints) > 0, 'pretraining wrote no checkpoint'
    return result.checkpoints[-1]

@beartype
def run_ablation(
    kind: AblationKind,
    base: ExperimentConfig,
    output_dir,
    seeds: Sequence[int] = (0,),
    progress: bool = True
) -> AblationResult:
    """ runs every grid point under the same seeds, merges the episode metrics and emits one set of curves per variant """

    output_dir = Path(output_dir)

    if kind == 'transfer':
        checkpoint = pretrain(base, output_dir / 'pretrain', progress = progress)
        variants = transfer_configs(base, checkpoint)
    else:
        variants = ablation_configs(kind, base)

    task_names = getattr(make_env(base.env), 'tasks', None)

    runs = dict()
    frames = []

    for label, config in variants:
        runs[label] = dict()

        for seed in seeds:
            run_dir = output_dir / label / f'seed_{seed}'
            logger.info('ablation %s, %s, seed %d', kind, label, seed)

            result = run_learner(config.replace(seed = seed), output_dir = run_dir, progress = progress)
            runs[label][seed] = result

        records = {seed: result.metrics.records for seed, result in runs[label].items()}
        emit_curves(records, output_dir / label, task_names = task_names)

        frame = episode_frame(records, task_names)
        frame.insert(0, 'variant', label)
        frames.append(frame)

    metrics = pd.concat(frames, ignore_index = True)
    metrics.to_csv(output_dir / f'ablation_{kind}.csv', index = False)

    return AblationResult(kind, runs, metrics)
