from rhpo_pytorch.policy import HierarchicalPolicy, FlatPolicy
from rhpo_pytorch.critic import QEnsemble
from rhpo_pytorch.improver import MPOImprover, SVGImprover
from rhpo_pytorch.config import ExperimentConfig, EnvConfig
from rhpo_pytorch.runtime import run_learner
