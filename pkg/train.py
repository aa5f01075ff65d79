import torch

from rhpo_pytorch import ExperimentConfig, EnvConfig
from rhpo_pytorch.envs import DeskEnv, rollout_scripted
from rhpo_pytorch.runtime import Trainer
from rhpo_pytorch.utils import make_generator, setup_logging

SEED = 0
NUM_ACTORS = 1
NUM_LEARNER_STEPS = 20_000
MAX_ACTOR_EPISODES = 6_000
OUTPUT_DIR = './runs/desk-rhpo'

setup_logging()

# return of the hand scripted stacker, the reference for the learned policy

oracle_returns, _ = rollout_scripted(DeskEnv(), make_generator(SEED))
oracle_return = oracle_returns[-1]

config = ExperimentConfig(
    env = EnvConfig(name = 'desk'),
    algorithm = 'rhpo',
    num_components = 7,
    num_actors = NUM_ACTORS,
    num_steps = NUM_LEARNER_STEPS,
    max_actor_episodes = MAX_ACTOR_EPISODES,
    deterministic = True,
    seed = SEED
)

trainer = Trainer(config, output_dir = OUTPUT_DIR)
result = trainer.run()

# final task return over the last 100 episodes, relative to the scripted stacker

episodes = [record for record in result.metrics.records if record['kind'] == 'episode']
final_returns = torch.tensor([record['return_stack_and_leave'] for record in episodes[-100:]])

print(f'learner steps: {result.learner.step}')
print(f'actor episodes: {result.actor_episodes}')
print(f'stack and leave return: {final_returns.mean().item():.2f} (scripted: {oracle_return:.2f})')
