import pytest
from copy import deepcopy
from math import log, exp, sqrt

import numpy as np
import torch
from torch.autograd import gradcheck

from scipy.stats import norm
from scipy.integrate import quad

from hypothesis import given, settings, strategies as st

from rhpo_pytorch.improver import (
    ImproverConfig,
    DualState,
    MPOImprover,
    SVGImprover,
    estep_weights,
    dual_loss,
    mstep_loss,
    multiplier_step,
    svg_loss_flat,
    svg_loss_hierarchical,
    svg_step_flat
)

from rhpo_pytorch.distributions import (
    DiagGaussian,
    Categorical,
    MixtureGaussian,
    DistanceT,
    gaussian_log_prob,
    sample
)

from rhpo_pytorch.policy import HierarchicalPolicy, FlatPolicy
from rhpo_pytorch.critic import QEnsemble
from rhpo_pytorch.replay import TrajectoryStep, slice_episode, collate
from rhpo_pytorch.diffmath import backward
from rhpo_pytorch.utils import torch_default_dtype, make_generator, NonFiniteError

# fixtures

def random_batch(num_episodes = 2, num_steps = 6, snippet_length = 4, seed = 0):
    gen = make_generator(seed)
    snippets = []

    for _ in range(num_episodes):
        steps = [
            TrajectoryStep(
                torch.randn(4, generator = gen, dtype = torch.float64),
                torch.rand(2, generator = gen, dtype = torch.float64) * 2 - 1,
                torch.rand(3, generator = gen, dtype = torch.float64),
                -1.,
                0
            )
            for _ in range(num_steps)
        ]

        snippets.extend(slice_episode(steps, torch.randn(4, generator = gen, dtype = torch.float64), snippet_length, 3))

    return collate(snippets, snippet_length)

def small_setup(num_components = 2, seed = 0):
    with torch_default_dtype(torch.float64):
        torch.manual_seed(seed)
        policy = HierarchicalPolicy(dim_state = 4, dim_action = 2, num_tasks = 3, num_components = num_components, torso_dims = (8,), controller_dim = 8, component_dim = 8, init_scheme = 'distinct_means')
        critic = QEnsemble(dim_state = 4, dim_action = 2, num_tasks = 3, torso_dims = (8,), head_dim = 8)
        snapshot = deepcopy(policy)

    return policy, critic, snapshot

def random_mixture(batch = 4, num_components = 3, dim = 2, seed = 0):
    gen = make_generator(seed)
    logits = torch.randn(batch, num_components, generator = gen, dtype = torch.float64)
    mean = torch.randn(batch, num_components, dim, generator = gen, dtype = torch.float64)
    chol = torch.rand(batch, num_components, dim, generator = gen, dtype = torch.float64) + 0.2
    return MixtureGaussian(Categorical(logits), DiagGaussian(mean, chol))

EPSILONS = ImproverConfig().epsilons

class LinearCritic:
    def __init__(self, weight):
        self.weight = weight

    def q_value(self, state, action, task, use_target = False):
        return (action * self.weight).sum(dim = -1)

class ConstantCritic:
    def q_value(self, state, action, task, use_target = False):
        return torch.zeros(action.shape[:-1], dtype = action.dtype)

# E-step

def test_estep_uniform_for_equal_values():
    weights = estep_weights(torch.full((2, 5), 3., dtype = torch.float64), torch.tensor(0.7, dtype = torch.float64))
    assert torch.allclose(weights, torch.full((2, 5), 0.2, dtype = torch.float64))

def test_estep_two_actions():
    weights = estep_weights(torch.tensor([[1., 0.]], dtype = torch.float64), torch.tensor(1., dtype = torch.float64))
    assert torch.allclose(weights, torch.tensor([[0.7311, 0.2689]], dtype = torch.float64), atol = 1e-4)

@settings(deadline = None)
@given(
    st.lists(st.lists(st.floats(min_value = -1e3, max_value = 1e3), min_size = 4, max_size = 4), min_size = 1, max_size = 5),
    st.floats(min_value = 1e-3, max_value = 1e2)
)
def test_estep_weights_normalized(qvals, eta):
    weights = estep_weights(torch.tensor(qvals, dtype = torch.float64), torch.tensor(eta, dtype = torch.float64))

    assert (weights >= 0).all()
    assert torch.allclose(weights.sum(dim = -1), torch.ones(len(qvals), dtype = torch.float64))

def test_estep_batch_normalization():
    qvals = torch.randn(3, 5, dtype = torch.float64)
    weights = estep_weights(qvals, torch.tensor(1., dtype = torch.float64), normalization = 'batch')

    assert weights.shape == (3, 5)
    assert weights.sum().item() == pytest.approx(3.)

# dual

def test_dual_constant_values():
    eta = torch.tensor(2., dtype = torch.float64)
    g = dual_loss(eta, torch.full((4, 6), 1.5, dtype = torch.float64), epsilon = 0.1)
    assert g.item() == pytest.approx(2. * 0.1 + 1.5)

def closed_form_gaussian_dual(eta, epsilon):
    # Q = -a^2 / 2 with a standard normal, E[exp(Q / eta)] = sqrt(eta / (1 + eta))
    return eta * epsilon + eta * log(sqrt(eta / (1 + eta)))

@pytest.mark.parametrize('eta', [0.5, 1., 3.])
def test_dual_gaussian_oracle(eta):
    expectation, _ = quad(lambda a: norm.pdf(a) * exp(-a * a / (2 * eta)), -np.inf, np.inf)
    assert expectation == pytest.approx(sqrt(eta / (1 + eta)), rel = 1e-8)

    num = 100_000
    quantiles = norm.ppf((np.arange(num) + 0.5) / num)
    qvals = torch.from_numpy(-quantiles ** 2 / 2)[None]

    g = dual_loss(torch.tensor(eta, dtype = torch.float64), qvals, epsilon = 0.1)
    assert g.item() == pytest.approx(closed_form_gaussian_dual(eta, 0.1), rel = 1e-3, abs = 1e-4)

def test_dual_convex_in_eta():
    qvals = torch.randn(8, 10, dtype = torch.float64, generator = make_generator(0))
    g = lambda eta: dual_loss(torch.tensor(eta, dtype = torch.float64), qvals, epsilon = 0.1).item()

    etas = np.linspace(0.05, 5., 30)

    for lo, hi in zip(etas[:-2], etas[2:]):
        assert g((lo + hi) / 2) <= (g(lo) + g(hi)) / 2 + 1e-12

def test_dual_gradcheck():
    qvals = torch.randn(3, 5, dtype = torch.float64, generator = make_generator(1))
    eta = torch.tensor(0.8, dtype = torch.float64, requires_grad = True)
    assert gradcheck(lambda e: dual_loss(e, qvals, epsilon = 0.1), (eta,), eps = 1e-6, atol = 1e-6, rtol = 1e-4)

def test_dual_clamps_below_floor():
    g = dual_loss(torch.tensor(1e-9, dtype = torch.float64), torch.zeros(2, 3, dtype = torch.float64), epsilon = 0.1, floor = 1e-6)
    assert torch.isfinite(g)

# M-step

def test_mstep_zero_distance_at_snapshot():
    policy, _, snapshot = small_setup()
    states = torch.randn(6, 4, dtype = torch.float64)
    tasks = torch.tensor([0, 1, 2, 0, 1, 2])

    old = snapshot(states, tasks)
    actions, _ = sample(old.expand_samples(5), generator = make_generator(0))
    weights = torch.full((6, 5), 0.2, dtype = torch.float64)

    _, measured = mstep_loss(policy(states, tasks), old, actions, weights, torch.ones(3, dtype = torch.float64), EPSILONS)

    for value in measured:
        assert abs(value.item()) < 1e-12

def permute_components(mixture, perm):
    mean, chol = mixture.components
    return MixtureGaussian(Categorical(mixture.weights.logits[..., perm]), DiagGaussian(mean[..., perm, :], chol[..., perm, :]))

@pytest.mark.parametrize('decoupled', [True, False])
def test_mstep_component_permutation_invariant(decoupled):
    old = random_mixture(seed = 0)
    new = random_mixture(seed = 1)

    actions = torch.randn(4, 5, 2, dtype = torch.float64)
    weights = torch.rand(4, 5, dtype = torch.float64).softmax(dim = -1)
    multipliers = torch.tensor([0.5, 2., 1.5], dtype = torch.float64)

    perm = torch.tensor([2, 0, 1])

    loss, _ = mstep_loss(new, old, actions, weights, multipliers, EPSILONS, decoupled = decoupled)
    permuted_loss, _ = mstep_loss(permute_components(new, perm), permute_components(old, perm), actions, weights, multipliers, EPSILONS, decoupled = decoupled)

    assert torch.allclose(loss, permuted_loss)

def test_mstep_reaches_every_component():
    policy, _, snapshot = small_setup(num_components = 3)
    states = torch.randn(16, 4, dtype = torch.float64)
    tasks = torch.zeros(16, dtype = torch.long)

    old = snapshot(states, tasks)
    actions, _ = sample(old.expand_samples(10), generator = make_generator(0))
    weights = torch.full((16, 10), 0.1, dtype = torch.float64)

    loss, _ = mstep_loss(policy(states, tasks), old, actions, weights, torch.ones(3, dtype = torch.float64), EPSILONS)
    grads = backward(loss, policy)

    for k in range(3):
        assert grads[f'components.{k}.to_out.weight'].abs().sum() > 0

def test_mstep_single_component_is_maximum_likelihood():
    gen = make_generator(0)
    mean = torch.randn(4, 1, 2, dtype = torch.float64, generator = gen, requires_grad = True)
    chol = (torch.rand(4, 1, 2, dtype = torch.float64, generator = gen) + 0.3).requires_grad_()

    new = MixtureGaussian(Categorical(torch.zeros(4, 1, dtype = torch.float64)), DiagGaussian(mean, chol))
    old = new.detach()

    actions = torch.randn(4, 6, 2, dtype = torch.float64, generator = gen)
    weights = torch.full((4, 6), 1 / 6, dtype = torch.float64)

    loss, _ = mstep_loss(new, old, actions, weights, torch.ones(3, dtype = torch.float64), EPSILONS)
    grads = torch.autograd.grad(loss, (mean, chol))

    mle_loss = -gaussian_log_prob(DiagGaussian(mean, chol), actions).mean()
    mle_grads = torch.autograd.grad(mle_loss, (mean, chol))

    for ours, expected in zip(grads, mle_grads):
        assert torch.allclose(ours, expected, atol = 1e-10)

# multipliers

def distances(values):
    t_mean, t_cov, t_H = (torch.tensor(v, dtype = torch.float64) for v in values)
    return DistanceT(t_H, t_mean, t_cov)

def test_multipliers_unchanged_at_constraint():
    duals = DualState(lr = 1e-2)
    before = duals.lambdas.detach().clone()

    multiplier_step(duals, distances(EPSILONS), EPSILONS)
    assert torch.allclose(duals.lambdas.detach(), before)

def test_multipliers_grow_when_violated_and_shrink_when_slack():
    violated = DualState(lr = 1e-2)
    multiplier_step(violated, distances([10 * e for e in EPSILONS]), EPSILONS)
    assert (violated.lambdas > 1.).all()

    slack = DualState(lr = 1e-2)
    multiplier_step(slack, distances([0., 0., 0.]), EPSILONS)
    assert (slack.lambdas < 1.).all()

def test_multipliers_have_their_own_learning_rate():
    improver = MPOImprover(small_setup()[0], ImproverConfig(dual_lr = 1e-2, multiplier_lr = 0.1))

    assert improver.duals.temperature_store.lr == 1e-2
    assert improver.duals.multiplier_store.lr == 0.1
    assert DualState(lr = 1e-2).multiplier_store.lr == 1e-2

def test_multipliers_respect_floor():
    duals = DualState(init_multiplier = 1e-6, multiplier_floor = 1e-6, lr = 1.)
    multiplier_step(duals, distances([0., 0., 0.]), EPSILONS)
    assert (duals.lambdas >= 1e-6 * (1 - 1e-5)).all()

# improvement step

def test_improvement_step_diagnostics():
    policy, critic, snapshot = small_setup()
    improver = MPOImprover(policy, ImproverConfig(num_samples = 5))

    before = {name: p.detach().clone() for name, p in policy.named_parameters()}
    diagnostics = improver.improvement_step(random_batch(), snapshot, critic, generator = make_generator(0))

    for key in ('g_eta', 'policy_loss', 't_H', 't_mean', 't_cov', 'weight_entropy', 'categorical_entropy', 'eta', 'lambda_mean', 'lambda_cov', 'lambda_cat'):
        assert np.isfinite(diagnostics[key]), key

    assert improver.policy_store.step_count == 1
    assert improver.duals.temperature_store.step_count == 1
    assert improver.duals.multiplier_store.step_count == 1

    assert any(not torch.equal(before[name], p) for name, p in policy.named_parameters())

def test_improvement_step_deterministic():
    def run():
        policy, critic, snapshot = small_setup()
        improver = MPOImprover(policy, ImproverConfig(num_samples = 5))
        diagnostics = improver.improvement_step(random_batch(), snapshot, critic, generator = make_generator(3))
        return diagnostics, policy

    diagnostics_a, policy_a = run()
    diagnostics_b, policy_b = run()

    assert diagnostics_a == diagnostics_b

    for p, q in zip(policy_a.parameters(), policy_b.parameters()):
        assert torch.equal(p, q)

def test_improvement_step_flat_policy():
    with torch_default_dtype(torch.float64):
        policy = FlatPolicy(dim_state = 4, dim_action = 2, num_tasks = 3, kind = 'independent', torso_dims = (8,), head_dim = 8)
        critic = QEnsemble(dim_state = 4, dim_action = 2, num_tasks = 3, torso_dims = (8,), head_dim = 8)

    improver = MPOImprover(policy, ImproverConfig(num_samples = 5))
    diagnostics = improver.improvement_step(random_batch(), deepcopy(policy), critic, generator = make_generator(0))

    assert diagnostics['t_H'] == pytest.approx(0., abs = 1e-12)

def test_improvement_step_non_finite_critic():
    policy, critic, snapshot = small_setup()

    with torch.no_grad():
        for p in critic.online.parameters():
            p.fill_(float('nan'))

    improver = MPOImprover(policy, ImproverConfig(num_samples = 5))

    policy_before = {name: p.detach().clone() for name, p in policy.named_parameters()}
    eta_before = improver.duals.eta.item()
    lambdas_before = improver.duals.lambdas.detach().clone()

    with pytest.raises(NonFiniteError):
        improver.improvement_step(random_batch(), snapshot, critic, generator = make_generator(0))

    assert improver.policy_store.step_count == 0

    for name, p in policy.named_parameters():
        assert torch.equal(policy_before[name], p)

    assert improver.duals.eta.item() == eta_before
    assert torch.equal(improver.duals.lambdas.detach(), lambdas_before)

# trust regions over many improvement steps

def run_improver(policy, config, critic, num_steps, refresh_every = None, seed = 0):
    improver = MPOImprover(policy, config)
    snapshot = deepcopy(policy)

    batch = random_batch(num_episodes = 4, seed = seed)
    gen = make_generator(seed)

    history = []

    for step in range(num_steps):
        if refresh_every is not None and step > 0 and (step % refresh_every) == 0:
            snapshot = deepcopy(policy)

        history.append(improver.improvement_step(batch, snapshot, critic, generator = gen))

    return snapshot, history

def uniform_categorical_policy():
    policy, _, _ = small_setup(num_components = 3)

    with torch.no_grad():
        for controller in policy.controllers:
            controller.to_out.weight.zero_()
            controller.to_out.bias.zero_()

    return policy

PULL_TO_CORNER = LinearCritic(torch.tensor([10., 10.], dtype = torch.float64))

def test_trust_regions_hold_after_warmup():
    policy, _, _ = small_setup(num_components = 3)
    _, history = run_improver(policy, ImproverConfig(), PULL_TO_CORNER, num_steps = 600, refresh_every = 50)

    after_warmup = history[200:]

    for key, epsilon in zip(('t_mean', 't_cov', 't_H'), EPSILONS):
        within = np.mean([d[key] <= 10 * epsilon for d in after_warmup])
        assert within >= 0.95, key

def test_constant_values_stay_near_snapshot():
    policy, _, _ = small_setup(num_components = 3)
    _, history = run_improver(policy, ImproverConfig(), ConstantCritic(), num_steps = 200)

    for key, epsilon in zip(('t_mean', 't_cov', 't_H'), EPSILONS):
        assert max(d[key] for d in history) <= 10 * epsilon, key

    assert all(d['weight_entropy'] == pytest.approx(log(20)) for d in history)

def test_tight_mean_bound_slows_mean_movement():
    states = torch.randn(16, 4, dtype = torch.float64, generator = make_generator(7))

    def mean_movement(epsilon_mean):
        policy, _, _ = small_setup(num_components = 3)
        snapshot, history = run_improver(policy, ImproverConfig(epsilon_mean = epsilon_mean), PULL_TO_CORNER, num_steps = 150)

        with torch.no_grad():
            moved = policy(states, 0).components.mean - snapshot(states, 0).components.mean

        return moved.norm(dim = -1).mean().item(), history[-1]['lambda_mean']

    tight, tight_lambda = mean_movement(1e-8)
    loose, loose_lambda = mean_movement(1.)

    assert tight < loose
    assert tight_lambda > 1. > loose_lambda

def test_loose_categorical_bound_lets_weights_collapse():
    states = torch.randn(16, 4, dtype = torch.float64, generator = make_generator(7))

    def final_entropy(epsilon_cat):
        policy = uniform_categorical_policy()
        run_improver(policy, ImproverConfig(epsilon_cat = epsilon_cat), PULL_TO_CORNER, num_steps = 300)

        with torch.no_grad():
            return torch.stack([policy(states, task).weights.entropy().mean() for task in range(3)]).mean().item()

    loose = final_entropy(1.)
    tight = final_entropy(1e-4)

    assert loose < tight
    assert tight > log(3) - 0.05

# svg

def test_svg_hierarchical_single_component_matches_flat():
    policy, _, _ = small_setup(num_components = 1)
    snapshot = deepcopy(policy)

    with torch.no_grad():
        for p in policy.parameters():
            p.add_(0.01)

    critic = LinearCritic(torch.tensor([1., -2.], dtype = torch.float64))

    states = torch.randn(5, 4, dtype = torch.float64)
    tasks = torch.tensor([0, 1, 2, 0, 1])
    noise = torch.randn(5, 2, dtype = torch.float64)

    flat = svg_loss_flat(policy, critic, states, tasks, snapshot, noise)
    hierarchical = svg_loss_hierarchical(policy, critic, states, tasks, snapshot, noise[:, None], torch.zeros(5, 1, dtype = torch.float64))

    assert torch.allclose(flat, hierarchical)

@pytest.mark.parametrize('regularizer', ['kl', 'entropy'])
def test_svg_flat_gradient_finite_difference(regularizer):
    with torch_default_dtype(torch.float64):
        torch.manual_seed(0)
        policy = FlatPolicy(dim_state = 4, dim_action = 2, num_tasks = 3, kind = 'monolithic', torso_dims = (8,), head_dim = 8)

    snapshot = deepcopy(policy)
    critic = LinearCritic(torch.tensor([0.5, -1.], dtype = torch.float64))
    config = ImproverConfig(svg_regularizer = regularizer)

    states = torch.randn(6, 4, dtype = torch.float64)
    tasks = torch.tensor([0, 1, 2, 0, 1, 2])
    noise = torch.randn(6, 2, dtype = torch.float64)

    loss_fn = lambda: svg_loss_flat(policy, critic, states, tasks, snapshot, noise, config)

    bias = policy.heads[0].to_out.bias
    grad, = torch.autograd.grad(loss_fn(), bias)

    h = 1e-6

    for i in range(bias.numel()):
        with torch.no_grad():
            bias[i] += h
            plus = loss_fn().item()
            bias[i] -= 2 * h
            minus = loss_fn().item()
            bias[i] += h

        assert (plus - minus) / (2 * h) == pytest.approx(grad[i].item(), abs = 1e-6, rel = 1e-4)

@pytest.mark.parametrize('hierarchical', [True, False])
def test_svg_step_updates_policy(hierarchical):
    policy, critic, snapshot = small_setup(num_components = 2 if hierarchical else 1)
    improver = SVGImprover(policy, ImproverConfig(), hierarchical = hierarchical)

    before = {name: p.detach().clone() for name, p in policy.named_parameters()}
    critic_before = {name: p.detach().clone() for name, p in critic.online.named_parameters()}

    diagnostics = improver.improvement_step(random_batch(), snapshot, critic, generator = make_generator(0))

    assert np.isfinite(diagnostics['policy_loss'])
    assert any(not torch.equal(before[name], p) for name, p in policy.named_parameters())
    assert all(torch.equal(critic_before[name], p) for name, p in critic.online.named_parameters())

def test_svg_step_flat_rejects_hierarchical():
    policy, critic, snapshot = small_setup()
    improver = SVGImprover(policy, hierarchical = True)

    with pytest.raises(AssertionError):
        svg_step_flat(improver, random_batch(), snapshot, critic)
