import logging
from pathlib import Path
from collections import namedtuple

import numpy as np
import pandas as pd

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from beartype import beartype
from beartype.typing import Optional, Sequence, Dict, List, Union

import torch
from torch import nn

from rhpo_pytorch.policy import act
from rhpo_pytorch.distributions import PROB_FLOOR, DiagGaussian, bhattacharyya, gaussian_bhattacharyya
from rhpo_pytorch.utils import exists, default, make_generator

logger = logging.getLogger(__name__)

# component usage

@beartype
def collect_component_usage(
    policy: nn.Module,
    env,
    tasks: Optional[Sequence[int]] = None,
    num_episodes: int = 1,
    generator: Optional[torch.Generator] = None,
    stochastic = False
) -> np.ndarray:
    """
    counts (|I|, M) of the component chosen at every step of evaluation rollouts, each episode run under one fixed task
    the dominant component by default, a sampled one with stochastic set
    """

    tasks = tuple(default(tasks, range(policy.num_tasks)))
    generator = default(generator, make_generator(0))
    dtype = next(policy.parameters()).dtype

    counts = np.zeros((policy.num_tasks, policy.num_components))

    for task in tasks:
        for _ in range(num_episodes):
            obs = env.reset(generator)

            for _ in range(env.episode_length):
                state = torch.from_numpy(obs).to(dtype)
                action, component = act(policy, state, task, generator = generator, stochastic = stochastic, return_component = True)
                counts[task, int(component)] += 1

                obs, _, terminal = env.step(action.numpy())

                if terminal:
                    break

    return counts

# similarity

Similarity = namedtuple('Similarity', [
    'task_distances',           # (|I|, |I|)
    'component_distances',      # (M, M)
    'task_usage',               # (|I|, M) - for each task, which components it uses
    'component_activation'      # (M, |I|) - for each component, which tasks activate it
])

def normalize_rows(counts):
    """ rows with no mass become uniform """
    counts = np.asarray(counts, dtype = np.float64)
    totals = counts.sum(axis = -1, keepdims = True)
    uniform = np.full_like(counts, 1. / counts.shape[-1])
    return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.), uniform)

def pairwise_bhattacharyya(dists, floor = PROB_FLOOR):
    dists = torch.from_numpy(dists)
    matrix = bhattacharyya(dists[:, None, :], dists[None, :, :], floor = floor).numpy()
    matrix = (matrix + matrix.T) / 2
    np.fill_diagonal(matrix, 0.)
    return matrix

def similarity_from_counts(counts, floor = PROB_FLOOR) -> Similarity:
    counts = np.asarray(counts, dtype = np.float64)

    task_usage = normalize_rows(counts)
    component_activation = normalize_rows(counts.T)

    return Similarity(
        pairwise_bhattacharyya(task_usage, floor),
        pairwise_bhattacharyya(component_activation, floor),
        task_usage,
        component_activation
    )

@torch.no_grad()
def component_distance_matrix(policy: nn.Module, states, task = 0) -> np.ndarray:
    """ bhattacharyya distance between the gaussian components in action space, averaged over states, (M, M) """

    mixture = policy(states, task)
    mean, chol = mixture.components

    p = DiagGaussian(mean[:, :, None], chol[:, :, None])
    q = DiagGaussian(mean[:, None], chol[:, None])

    matrix = gaussian_bhattacharyya(p, q).mean(dim = 0).numpy()
    matrix = (matrix + matrix.T) / 2
    np.fill_diagonal(matrix, 0.)
    return matrix

def mean_off_diagonal(matrix):
    n = matrix.shape[0]

    if n < 2:
        return 0.

    return float(matrix[~np.eye(n, dtype = bool)].mean())

# outputs

def save_heatmap(matrix, path, title, labels = None):
    fig, ax = plt.subplots(figsize = (5, 4))
    image = ax.imshow(matrix, cmap = 'viridis')
    fig.colorbar(image, ax = ax)
    ax.set_title(title)

    if exists(labels):
        ax.set_xticks(range(len(labels)), labels = labels, rotation = 45, ha = 'right')
        ax.set_yticks(range(len(labels)), labels = labels)

    fig.tight_layout()
    fig.savefig(path, format = 'svg')
    plt.close(fig)

def write_similarity(similarity: Similarity, output_dir, task_names = None):
    output_dir = Path(output_dir)
    output_dir.mkdir(parents = True, exist_ok = True)

    num_tasks, num_components = similarity.task_usage.shape
    task_names = list(default(task_names, [str(i) for i in range(num_tasks)]))
    component_names = [f'component_{i}' for i in range(num_components)]

    frames = dict(
        task_distances = pd.DataFrame(similarity.task_distances, index = task_names, columns = task_names),
        component_distances = pd.DataFrame(similarity.component_distances, index = component_names, columns = component_names),
        task_usage = pd.DataFrame(similarity.task_usage, index = task_names, columns = component_names),
        component_activation = pd.DataFrame(similarity.component_activation, index = component_names, columns = task_names)
    )

    paths = []

    for name, frame in frames.items():
        path = output_dir / f'{name}.csv'
        frame.to_csv(path)
        paths.append(path)

    for name, labels in (('task_distances', task_names), ('component_distances', component_names)):
        path = output_dir / f'{name}.svg'
        save_heatmap(getattr(similarity, name), path, name.replace('_', ' '), labels)
        paths.append(path)

    return paths

@beartype
def analyze_similarity(
    policy: nn.Module,
    env,
    num_episodes: int = 1,
    tasks: Optional[Sequence[int]] = None,
    generator: Optional[torch.Generator] = None,
    output_dir = None,
    floor: float = PROB_FLOOR,
    stochastic = False
) -> Similarity:
    """ task / task and component / component bhattacharyya distances from the components used in evaluation rollouts """

    counts = collect_component_usage(policy, env, tasks = tasks, num_episodes = num_episodes, generator = generator, stochastic = stochastic)
    similarity = similarity_from_counts(counts, floor = floor)

    if exists(output_dir):
        write_similarity(similarity, output_dir, task_names = getattr(env, 'tasks', None))

    logger.info('mean task distance %.4f, mean component distance %.4f', mean_off_diagonal(similarity.task_distances), mean_off_diagonal(similarity.component_distances))
    return similarity

# learning curves

CURVE_COLUMNS = ['seed', 'actor_episodes', 'learner_step']

SUMMARY_COLUMNS = ['task', 'actor_episodes', 'mean', 'std', 'num_seeds']

def episode_frame(runs: Dict[int, List[dict]], task_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """ one row per episode record, columns seed, actor_episodes, learner_step, return_<task> """

    rows = [dict(seed = seed, **record) for seed, records in runs.items() for record in records if record.get('kind') == 'episode']

    return_columns = [f'return_{name}' for name in default(task_names, [])]

    if len(rows) > 0 and not exists(task_names):
        return_columns = [key for key in rows[0].keys() if key.startswith('return_')]

    columns = CURVE_COLUMNS + return_columns
    return pd.DataFrame(rows, columns = columns)

def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """ mean and standard deviation over seeds of every task's return, per actor episode """

    return_columns = [column for column in frame.columns if column.startswith('return_')]

    if len(frame) == 0 or len(return_columns) == 0:
        return pd.DataFrame(columns = SUMMARY_COLUMNS)

    long = frame.melt(id_vars = ['seed', 'actor_episodes'], value_vars = return_columns, var_name = 'task', value_name = 'return')
    long['task'] = long['task'].str.removeprefix('return_')

    summary = long.groupby(['task', 'actor_episodes'])['return'].agg(['mean', 'std', 'count']).reset_index()
    summary = summary.rename(columns = dict(count = 'num_seeds'))
    summary['std'] = summary['std'].fillna(0.)
    return summary[SUMMARY_COLUMNS]

@beartype
def emit_curves(
    runs: Union[Dict[int, List[dict]], List[dict]],
    output_dir,
    task_names: Optional[Sequence[str]] = None,
    prefix: str = 'curves'
):
    """ per-task return against actor episodes, mean with a band of one standard deviation over seeds """

    if isinstance(runs, list):
        runs = {0: runs}

    output_dir = Path(output_dir)
    output_dir.mkdir(parents = True, exist_ok = True)

    frame = episode_frame(runs, task_names)
    summary = summarize(frame)

    curves_path = output_dir / f'{prefix}.csv'
    summary_path = output_dir / f'{prefix}_summary.csv'

    frame.to_csv(curves_path, index = False)
    summary.to_csv(summary_path, index = False)

    plot_paths = []

    for task, task_summary in summary.groupby('task'):
        fig, ax = plt.subplots(figsize = (6, 4))

        x = task_summary['actor_episodes'].to_numpy()
        mean = task_summary['mean'].to_numpy()
        std = task_summary['std'].to_numpy()

        ax.plot(x, mean)
        ax.fill_between(x, mean - std, mean + std, alpha = 0.3)
        ax.set_xlabel('actor episodes')
        ax.set_ylabel('episode return')
        ax.set_title(task)

        fig.tight_layout()

        path = output_dir / f'{prefix}_{task}.svg'
        fig.savefig(path, format = 'svg')
        plt.close(fig)
        plot_paths.append(path)

    return curves_path, summary_path, plot_paths
