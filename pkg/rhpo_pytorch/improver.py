import logging
from math import log
from dataclasses import dataclass

from beartype import beartype
from beartype.typing import Optional, Literal, Sequence, Dict

import torch
from torch import nn, Tensor

from einops import rearrange, repeat

from rhpo_pytorch.diffmath import (
    ParamStore,
    backward,
    adam_step,
    logsumexp
)

from rhpo_pytorch.distributions import (
    DiagGaussian,
    MixtureGaussian,
    DistanceT,
    mixture_log_prob,
    distance_T,
    mixture_distance,
    kl_gaussian,
    gumbel_softmax,
    gumbel_noise,
    sample,
    component
)

from rhpo_pytorch.critic import QEnsemble
from rhpo_pytorch.replay import SnippetBatch

from rhpo_pytorch.utils import (
    default,
    all_finite,
    format_kv,
    NonFiniteError
)

logger = logging.getLogger(__name__)

# config

@dataclass(frozen = True)
class ImproverConfig:
    epsilon: float = 0.1
    epsilon_mean: float = 5e-4
    epsilon_cov: float = 1e-5
    epsilon_cat: float = 1e-4
    num_samples: int = 20
    lr: float = 2e-4
    dual_lr: float = 1e-2
    multiplier_lr: float = 0.1
    init_eta: float = 1.
    init_multiplier: float = 1.
    eta_floor: float = 1e-6
    multiplier_floor: float = 1e-6
    estep_normalization: Literal['state', 'batch'] = 'state'
    decoupled_likelihood: bool = True
    svg_regularizer: Literal['kl', 'entropy'] = 'kl'
    svg_kl_weight: float = 0.05
    svg_entropy_weight: float = 0.05
    gumbel_temperature: float = 0.5
    straight_through: bool = False

    @property
    def epsilons(self):
        return (self.epsilon_mean, self.epsilon_cov, self.epsilon_cat)

# dual variables, optimized in log space

class Temperature(nn.Module):
    def __init__(self, init = 1.):
        super().__init__()
        self.log_eta = nn.Parameter(torch.tensor(log(init)))

    @property
    def eta(self):
        return self.log_eta.exp()

class Multipliers(nn.Module):
    """ lagrange multipliers for the mean, covariance and categorical trust regions, in that order """

    def __init__(self, init = 1.):
        super().__init__()
        self.log_multipliers = nn.Parameter(torch.full((3,), log(init)))

    @property
    def values(self):
        return self.log_multipliers.exp()

class DualState(nn.Module):
    @beartype
    def __init__(
        self,
        *,
        init_eta: float = 1.,
        init_multiplier: float = 1.,
        eta_floor: float = 1e-6,
        multiplier_floor: float = 1e-6,
        lr: float = 1e-2,
        multiplier_lr: Optional[float] = None
    ):
        super().__init__()
        assert init_eta > 0 and init_multiplier > 0

        self.eta_floor = eta_floor
        self.multiplier_floor = multiplier_floor

        self.temperature = Temperature(init_eta)
        self.multipliers = Multipliers(init_multiplier)

        self.temperature_store = ParamStore(self.temperature, lr = lr)
        self.multiplier_store = ParamStore(self.multipliers, lr = default(multiplier_lr, lr))

    @property
    def eta(self):
        return self.temperature.eta

    @property
    def lambdas(self):
        return self.multipliers.values

    @torch.no_grad()
    def clamp_(self):
        self.temperature.log_eta.clamp_(min = log(self.eta_floor))
        self.multipliers.log_multipliers.clamp_(min = log(self.multiplier_floor))
        return self

    def diagnostics(self):
        lambda_mean, lambda_cov, lambda_cat = self.lambdas.tolist()
        return dict(eta = self.eta.item(), lambda_mean = lambda_mean, lambda_cov = lambda_cov, lambda_cat = lambda_cat)

# E-step

def estep_weights(
    qvals: Tensor,
    eta: Tensor,
    normalization: Literal['state', 'batch'] = 'state'
) -> Tensor:
    """
    qvals (b, n) for n actions sampled from the current policy at each state
    weights proportional to exp(Q / eta), max shifted, normalized over the n samples of each state
    the batch variant normalizes over all b * n entries and rescales by b, so weights still sum to 1 per state on average
    """

    logits = qvals.detach() / eta.detach()

    if normalization == 'state':
        return logits.softmax(dim = -1)

    b = logits.shape[0]
    weights = rearrange(logits, 'b n -> (b n)').softmax(dim = -1) * b
    return rearrange(weights, '(b n) -> b n', b = b)

def weight_entropy(weights):
    log_weights = torch.where(weights > 0, weights.log(), torch.zeros_like(weights))
    return -(weights * log_weights).sum(dim = -1).mean()

def dual_loss(
    eta: Tensor,
    qvals: Tensor,
    epsilon: float,
    floor: float = 1e-6
) -> Tensor:
    """ g(eta) = eta * epsilon + eta * mean_s log( 1/n sum_j exp(Q_sj / eta) ) """

    if eta.item() < floor:
        logger.warning('temperature %.3g below floor %.3g, clamping', eta.item(), floor)
        eta = eta.clamp(min = floor)

    qvals = qvals.detach()
    num_samples = qvals.shape[-1]

    log_mean_exp = logsumexp(qvals / eta, dim = -1) - log(num_samples)
    return eta * epsilon + eta * log_mean_exp.mean()

# M-step

def intermediate_policies(old: MixtureGaussian, new: MixtureGaussian):
    """ decoupled mixtures - only the means, only the covariances, or only the categorical taken from the new policy """

    old_mean, old_chol = old.components
    new_mean, new_chol = new.components

    pi_mean = MixtureGaussian(old.weights, DiagGaussian(new_mean, old_chol))
    pi_cov = MixtureGaussian(old.weights, DiagGaussian(old_mean, new_chol))
    pi_cat = MixtureGaussian(new.weights, old.components)
    return pi_mean, pi_cov, pi_cat

def mstep_loss(
    new: MixtureGaussian,
    old: MixtureGaussian,
    actions: Tensor,
    weights: Tensor,
    multipliers: Tensor,
    epsilons: Sequence[float],
    decoupled = True
):
    """
    new - live policy at the batch states, (b, ...)
    old - fixed snapshot at the same states
    actions (b, n, d), weights (b, n)
    returns the loss for the policy parameters and the measured batch averaged distances
    """

    old = old.detach()
    weights = weights.detach()
    multipliers = multipliers.detach()

    # weighted marginal log likelihood - independent of which component generated each action

    mixtures = intermediate_policies(old, new) if decoupled else (new,)

    log_likelihood = sum(mixture_log_prob(mixture.unsqueeze_samples(), actions) for mixture in mixtures)
    weighted_log_likelihood = (weights * log_likelihood).sum(dim = -1).mean()

    # decoupled trust regions

    t_H, t_L_mean, t_L_cov = distance_T(old, new)
    measured = DistanceT(t_H.mean(), t_L_mean.mean(), t_L_cov.mean())

    lambda_mean, lambda_cov, lambda_cat = multipliers.unbind(dim = -1)
    epsilon_mean, epsilon_cov, epsilon_cat = epsilons

    penalty = (
        lambda_mean * (measured.t_L_mean - epsilon_mean) +
        lambda_cov * (measured.t_L_cov - epsilon_cov) +
        lambda_cat * (measured.t_H - epsilon_cat)
    )

    loss = -weighted_log_likelihood + penalty
    return loss, measured

def multiplier_loss(multipliers: Multipliers, measured: DistanceT, epsilons: Sequence[float]) -> Tensor:
    """ lambda * (epsilon - T), so gradient descent grows lambda while its constraint is violated """

    t = torch.stack((measured.t_L_mean, measured.t_L_cov, measured.t_H)).detach()
    epsilons = torch.tensor(epsilons, dtype = t.dtype)
    return (multipliers.values * (epsilons - t)).sum()

@beartype
def multiplier_step(
    duals: DualState,
    measured: DistanceT,
    epsilons: Sequence[float]
) -> DualState:

    loss = multiplier_loss(duals.multipliers, measured, epsilons)
    grads = backward(loss, duals.multipliers)
    adam_step(duals.multiplier_store, grads)
    return duals.clamp_()

# batch preparation

def flatten_states(batch: SnippetBatch):
    """ every valid state of every snippet, (S, ds) """
    length = batch.mask.shape[-1]
    return batch.states[:, :length][batch.mask]

def sample_tasks(num_states, tasks, generator = None):
    """ uniform over the task set, independent of the task each state was observed under """
    tasks = torch.tensor(tuple(tasks), dtype = torch.long)
    indices = torch.randint(0, len(tasks), (num_states,), generator = generator)
    return tasks[indices]

# RHPO policy improvement (also drives the MPO-optimized flat baselines, for which M = 1)

class MPOImprover:
    @beartype
    def __init__(
        self,
        policy: nn.Module,
        config: ImproverConfig = ImproverConfig(),
        tasks: Optional[Sequence[int]] = None
    ):
        self.policy = policy
        self.config = config
        self.tasks = tuple(default(tasks, range(policy.num_tasks)))

        self.policy_store = ParamStore(policy, lr = config.lr)

        self.duals = DualState(
            init_eta = config.init_eta,
            init_multiplier = config.init_multiplier,
            eta_floor = config.eta_floor,
            multiplier_floor = config.multiplier_floor,
            lr = config.dual_lr,
            multiplier_lr = config.multiplier_lr
        )

    def sample_improvement_batch(self, batch: SnippetBatch, snapshot: nn.Module, critic: QEnsemble, generator = None):
        config = self.config

        states = flatten_states(batch)
        tasks = sample_tasks(states.shape[0], self.tasks, generator = generator)

        with torch.no_grad():
            old = snapshot(states, tasks)
            actions, _ = sample(old.expand_samples(config.num_samples), generator = generator)

            q = critic.q_value(
                repeat(states, 'b d -> b n d', n = config.num_samples),
                actions,
                repeat(tasks, 'b -> b n', n = config.num_samples)
            )

        return states, tasks, old, actions, q

    def improvement_step(
        self,
        batch: SnippetBatch,
        snapshot: nn.Module,
        critic: QEnsemble,
        generator: Optional[torch.Generator] = None
    ) -> Dict[str, float]:
        """
        sample states and tasks, N_s actions from the snapshot, score with the critic,
        E-step weights, then one adam step each for the temperature, the multipliers and the policy
        """

        config, duals = self.config, self.duals

        states, tasks, old, actions, q = self.sample_improvement_batch(batch, snapshot, critic, generator = generator)

        eta = duals.eta
        weights = estep_weights(q, eta, normalization = config.estep_normalization)

        g = dual_loss(eta, q, config.epsilon, floor = config.eta_floor)
        eta_grads = backward(g, duals.temperature)

        new = self.policy(states, tasks)
        loss, measured = mstep_loss(new, old, actions, weights, duals.lambdas, config.epsilons, decoupled = config.decoupled_likelihood)

        diagnostics = dict(
            g_eta = g.item(),
            policy_loss = loss.item(),
            t_H = measured.t_H.item(),
            t_mean = measured.t_L_mean.item(),
            t_cov = measured.t_L_cov.item(),
            weight_entropy = weight_entropy(weights).item(),
            categorical_entropy = new.weights.entropy().mean().item(),
            **duals.diagnostics()
        )

        if not all_finite(g, loss, q):
            logger.error('non-finite improvement step, %s', format_kv(diagnostics))
            raise NonFiniteError('non-finite value in policy improvement, step aborted', diagnostics)

        policy_grads = backward(loss, self.policy)

        adam_step(duals.temperature_store, eta_grads)
        multiplier_step(duals, measured, config.epsilons)
        adam_step(self.policy_store, policy_grads)

        duals.clamp_()
        return diagnostics

# SVG baselines

def flat_gaussian(policy, states, tasks) -> DiagGaussian:
    if hasattr(policy, 'forward_flat'):
        return policy.forward_flat(states, tasks)

    assert policy.num_components == 1, 'flat svg needs a single gaussian policy'
    return component(policy(states, tasks), 0)

def svg_loss_flat(
    policy: nn.Module,
    critic: QEnsemble,
    states: Tensor,
    tasks: Tensor,
    snapshot: nn.Module,
    noise: Tensor,
    config: ImproverConfig = ImproverConfig()
) -> Tensor:
    """ reparameterized actions g = mu + sigma * zeta, ascend Q(s, g, i) with a KL to the snapshot, or an entropy bonus """

    gaussian = flat_gaussian(policy, states, tasks)
    actions = gaussian.mean + gaussian.cholesky_diag * noise

    objective = critic.q_value(states, actions, tasks).mean()

    if config.svg_regularizer == 'entropy':
        entropy = gaussian.to_torch().entropy().sum(dim = -1).mean()
        return -objective - config.svg_entropy_weight * entropy

    with torch.no_grad():
        old = flat_gaussian(snapshot, states, tasks)

    kl = kl_gaussian(old, gaussian).mean()
    return -objective + config.svg_kl_weight * kl

def svg_loss_hierarchical(
    policy: nn.Module,
    critic: QEnsemble,
    states: Tensor,
    tasks: Tensor,
    snapshot: nn.Module,
    noise: Tensor,
    gumbel: Tensor,
    config: ImproverConfig = ImproverConfig()
) -> Tensor:
    """
    component choice relaxed with gumbel softmax, the action is the convex combination of reparameterized component actions
    regularized towards the snapshot with the per-component distance function
    """

    mixture = policy(states, tasks)

    selection = gumbel_softmax(mixture.weights.logits, config.gumbel_temperature, noise = gumbel, hard = config.straight_through)

    mean, chol = mixture.components
    component_actions = mean + chol * noise

    actions = (rearrange(selection, '... m -> ... m 1') * component_actions).sum(dim = -2)

    objective = critic.q_value(states, actions, tasks).mean()

    with torch.no_grad():
        old = snapshot(states, tasks)

    regularizer = mixture_distance(old, mixture).mean()
    return -objective + config.svg_kl_weight * regularizer

class SVGImprover:
    @beartype
    def __init__(
        self,
        policy: nn.Module,
        config: ImproverConfig = ImproverConfig(),
        tasks: Optional[Sequence[int]] = None,
        hierarchical = False
    ):
        assert not hierarchical or config.gumbel_temperature > 0, 'gumbel softmax temperature must be positive'

        self.policy = policy
        self.config = config
        self.tasks = tuple(default(tasks, range(policy.num_tasks)))
        self.hierarchical = hierarchical

        self.policy_store = ParamStore(policy, lr = config.lr)

    def svg_step(
        self,
        batch: SnippetBatch,
        snapshot: nn.Module,
        critic: QEnsemble,
        generator: Optional[torch.Generator] = None
    ) -> Dict[str, float]:

        states = flatten_states(batch)
        tasks = sample_tasks(states.shape[0], self.tasks, generator = generator)

        dim_action = self.policy.dim_action
        dtype = states.dtype

        if self.hierarchical:
            num_components = self.policy.num_components
            noise = torch.randn((states.shape[0], num_components, dim_action), generator = generator, dtype = dtype)
            gumbel = gumbel_noise((states.shape[0], num_components), generator = generator, dtype = dtype)
            loss = svg_loss_hierarchical(self.policy, critic, states, tasks, snapshot, noise, gumbel, self.config)
        else:
            noise = torch.randn((states.shape[0], dim_action), generator = generator, dtype = dtype)
            loss = svg_loss_flat(self.policy, critic, states, tasks, snapshot, noise, self.config)

        diagnostics = dict(policy_loss = loss.item())

        if not all_finite(loss):
            raise NonFiniteError('non-finite svg loss, step aborted', diagnostics)

        # gradients only reach the policy parameters, the critic is read-only here

        grads = backward(loss, self.policy)
        adam_step(self.policy_store, grads)
        return diagnostics

    improvement_step = svg_step

def svg_step_flat(improver: SVGImprover, batch, snapshot, critic, generator = None):
    assert not improver.hierarchical
    return improver.svg_step(batch, snapshot, critic, generator = generator)

def svg_step_hierarchical(improver: SVGImprover, batch, snapshot, critic, generator = None):
    assert improver.hierarchical
    return improver.svg_step(batch, snapshot, critic, generator = generator)
