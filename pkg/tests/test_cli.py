import pytest

import pandas as pd

from rhpo_pytorch.cli import build_parser, main
from rhpo_pytorch.config import ExperimentConfig, EnvConfig
from rhpo_pytorch.ablation import ABLATION_GRIDS, ablation_configs, transfer_configs, run_ablation
from rhpo_pytorch.runtime import read_metrics

def tiny_config(**kwargs):
    defaults = dict(
        env = EnvConfig(episode_length = 10),
        num_actors = 1,
        num_steps = 2,
        learner_steps_per_episode = 2,
        batch_size = 2,
        min_replay_snippets = 2,
        replay_capacity = 500,
        retrace_length = 5,
        num_action_samples = 2,
        policy_torso = (8,),
        controller_dim = 4,
        component_dim = 4,
        critic_torso = (8,),
        critic_head_dim = 4,
        num_components = 2,
        log_every = 1
    )

    return ExperimentConfig(**{**defaults, **kwargs})

# ablation grids

def test_ablation_grids():
    base = tiny_config()

    labels = [label for label, _ in ablation_configs('kl_sweep', base)]
    assert labels == ['epsilon_cat=1e-06', 'epsilon_cat=0.0001', 'epsilon_cat=0.01', 'epsilon_cat=1.0']

    counts = [config.num_components for _, config in ablation_configs('component_count', base)]
    assert counts == [2, 4, 8, 16]

    actors = [config.num_actors for _, config in ablation_configs('actor_count', base)]
    assert actors == [1, 5, 20]

    schemes = [config.init_scheme for _, config in ablation_configs('init_scheme', base)]
    assert schemes == ['homogeneous', 'distinct_means']

    for _, config in ablation_configs('kl_sweep', base):
        assert config.replace(epsilon_cat = base.epsilon_cat) == base

def test_transfer_has_no_grid():
    with pytest.raises(AssertionError):
        ablation_configs('transfer', tiny_config())

def test_transfer_configs():
    variants = dict(transfer_configs(tiny_config(), 'pretrain/policy_00000002.ckpt'))

    assert list(variants.keys()) == ['scratch', 'sequential_only_hl', 'sequential']
    assert variants['scratch'].transfer == 'none'
    assert variants['scratch'].active_tasks == (6,)
    assert variants['sequential'].transfer_task == 6
    assert variants['sequential_only_hl'].transfer_checkpoint == 'pretrain/policy_00000002.ckpt'

def test_run_ablation(tmp_path):
    result = run_ablation('init_scheme', tiny_config(), tmp_path, seeds = (0, 1), progress = False)

    assert set(result.runs.keys()) == {'init_scheme=homogeneous', 'init_scheme=distinct_means'}
    assert all(len(seeds) == 2 for seeds in result.runs.values())

    merged = pd.read_csv(tmp_path / 'ablation_init_scheme.csv')
    assert set(merged['variant']) == set(result.runs.keys())
    assert set(merged['seed']) == {0, 1}

    assert (tmp_path / 'init_scheme=homogeneous' / 'curves_summary.csv').exists()

def test_run_transfer_ablation(tmp_path):
    result = run_ablation('transfer', tiny_config(), tmp_path, progress = False)

    assert list(result.runs.keys()) == ['scratch', 'sequential_only_hl', 'sequential']
    assert (tmp_path / 'pretrain' / 'config.json').exists()

    for seeds in result.runs.values():
        assert seeds[0].learner.tasks == (6,)

# command line

def test_parser():
    parser = build_parser()

    args = parser.parse_args(['train', '--steps', '3', '--threaded'])
    assert args.steps == 3 and args.threaded and not args.deterministic

    args = parser.parse_args(['ablate', '--kind', 'kl_sweep', '--seeds', '0', '1', '2'])
    assert args.seeds == [0, 1, 2]

    for argv in (['train', '--deterministic', '--threaded'], ['ablate', '--kind', 'unknown'], ['analyze'], []):
        with pytest.raises(SystemExit):
            parser.parse_args(argv)

def test_parser_knows_every_grid():
    parser = build_parser()

    for kind in (*ABLATION_GRIDS.keys(), 'transfer'):
        assert parser.parse_args(['ablate', '--kind', kind]).kind == kind

def test_train_analyze_plot(tmp_path):
    config_path = tmp_path / 'config.json'
    tiny_config().save(config_path)

    run_dir = tmp_path / 'run'
    main(['--quiet', 'train', '--config', str(config_path), '--output', str(run_dir), '--seed', '3'])

    assert ExperimentConfig.load(run_dir / 'config.json').seed == 3
    assert len(read_metrics(run_dir / 'metrics.jsonl')) > 0

    checkpoint = sorted(run_dir.glob('policy_*.ckpt'))[-1]

    main(['--quiet', 'analyze', '--checkpoint', str(checkpoint), '--output', str(tmp_path / 'similarity')])
    assert (tmp_path / 'similarity' / 'task_distances.csv').exists()

    main(['--quiet', 'plot', '--metrics', str(tmp_path), '--output', str(tmp_path / 'plots')])
    assert (tmp_path / 'plots' / 'curves_summary.csv').exists()
