import argparse
import logging
from pathlib import Path

from rhpo_pytorch.config import ExperimentConfig
from rhpo_pytorch.envs import make_env
from rhpo_pytorch.policy import load_policy
from rhpo_pytorch.runtime import run_learner, read_metrics
from rhpo_pytorch.ablation import run_ablation, ABLATION_GRIDS
from rhpo_pytorch.analysis import analyze_similarity, emit_curves
from rhpo_pytorch.utils import exists, make_generator, setup_logging

logger = logging.getLogger(__name__)

def load_config(path):
    return ExperimentConfig.load(path) if exists(path) else ExperimentConfig()

# subcommands

def train(args):
    config = load_config(args.config)

    overrides = dict()

    if exists(args.seed):
        overrides.update(seed = args.seed)

    if exists(args.steps):
        overrides.update(num_steps = args.steps)

    if args.deterministic:
        overrides.update(deterministic = True)

    if args.threaded:
        overrides.update(deterministic = False)

    config = config.replace(**overrides)

    result = run_learner(config, output_dir = args.output, progress = not args.quiet)
    logger.info('finished at learner step %d after %d actor episodes', result.learner.step, result.actor_episodes)

def ablate(args):
    config = load_config(args.config)
    result = run_ablation(args.kind, config, args.output, seeds = tuple(args.seeds), progress = not args.quiet)
    logger.info('ablation %s finished, %d variants', args.kind, len(result.runs))

def analyze(args):
    policy, metadata = load_policy(args.checkpoint)

    config = ExperimentConfig.from_dict(metadata['config']) if 'config' in metadata else ExperimentConfig()
    env = make_env(config.env)

    output = default_output(args.output, Path(args.checkpoint).parent / 'similarity')
    analyze_similarity(policy, env, num_episodes = args.episodes, generator = make_generator(args.seed), output_dir = output, stochastic = args.stochastic)

def plot(args):
    metrics_dir = Path(args.metrics)
    paths = sorted(metrics_dir.rglob('metrics.jsonl'))
    assert len(paths) > 0, f'no metrics.jsonl found under {metrics_dir}'

    runs = dict()

    for path in paths:
        config_path = path.parent / 'config.json'
        seed = ExperimentConfig.load(config_path).seed if config_path.exists() else len(runs)
        seed = seed if seed not in runs else len(runs)
        runs[seed] = read_metrics(path)

    output = default_output(args.output, metrics_dir / 'plots')
    emit_curves(runs, output)

def default_output(path, fallback):
    return Path(path) if exists(path) else fallback

# parser

def build_parser():
    parser = argparse.ArgumentParser(prog = 'rhpo', description = 'regularized hierarchical policy optimization')
    parser.add_argument('--log-level', default = 'INFO')
    parser.add_argument('--quiet', action = 'store_true', help = 'no progress bars')

    subparsers = parser.add_subparsers(dest = 'command', required = True)

    train_parser = subparsers.add_parser('train', help = 'train one run')
    train_parser.add_argument('--config', type = str, default = None, help = 'experiment config json, defaults otherwise')
    train_parser.add_argument('--output', type = str, default = 'runs/train')
    train_parser.add_argument('--seed', type = int, default = None)
    train_parser.add_argument('--steps', type = int, default = None, help = 'learner steps, overrides the config')
    mode = train_parser.add_mutually_exclusive_group()
    mode.add_argument('--deterministic', action = 'store_true', help = 'serial actor / learner interleaving')
    mode.add_argument('--threaded', action = 'store_true', help = 'concurrent actor threads')
    train_parser.set_defaults(fn = train)

    ablate_parser = subparsers.add_parser('ablate', help = 'run an ablation grid')
    ablate_parser.add_argument('--kind', required = True, choices = (*ABLATION_GRIDS.keys(), 'transfer'))
    ablate_parser.add_argument('--config', type = str, default = None)
    ablate_parser.add_argument('--output', type = str, default = 'runs/ablation')
    ablate_parser.add_argument('--seeds', type = int, nargs = '+', default = [0])
    ablate_parser.set_defaults(fn = ablate)

    analyze_parser = subparsers.add_parser('analyze', help = 'task and component similarity of a trained policy')
    analyze_parser.add_argument('--checkpoint', type = str, required = True)
    analyze_parser.add_argument('--episodes', type = int, default = 1, help = 'evaluation episodes per task')
    analyze_parser.add_argument('--seed', type = int, default = 0)
    analyze_parser.add_argument('--stochastic', action = 'store_true', help = 'count sampled components instead of the dominant one')
    analyze_parser.add_argument('--output', type = str, default = None)
    analyze_parser.set_defaults(fn = analyze)

    plot_parser = subparsers.add_parser('plot', help = 'learning curves from metrics streams')
    plot_parser.add_argument('--metrics', type = str, required = True, help = 'directory searched for metrics.jsonl')
    plot_parser.add_argument('--output', type = str, default = None)
    plot_parser.set_defaults(fn = plot)

    return parser

def main(argv = None):
    args = build_parser().parse_args(argv)
    setup_logging(getattr(logging, args.log_level.upper()))
    args.fn(args)

if __name__ == '__main__':
    main()
