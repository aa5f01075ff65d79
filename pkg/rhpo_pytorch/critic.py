from copy import deepcopy
from dataclasses import dataclass

from beartype import beartype
from beartype.typing import Optional, Tuple, Union

import torch
from torch import nn, Tensor

from einops import rearrange, repeat, reduce

from rhpo_pytorch.diffmath import Torso, Head, tanh
from rhpo_pytorch.distributions import mixture_log_prob, sample
from rhpo_pytorch.replay import SnippetBatch
from rhpo_pytorch.utils import exists, cast_tuple

# config

@dataclass(frozen = True)
class RetraceConfig:
    length: int = 10
    gamma: float = 0.99
    num_samples: int = 20

    def __post_init__(self):
        assert self.length >= 1, 'retrace sequence length must be at least 1'
        assert 0. < self.gamma < 1., 'discount must lie in (0, 1)'
        assert self.num_samples >= 1

# networks

class QNetwork(nn.Module):
    """ shared torso over (state, tanh(action)), one head per task """

    @beartype
    def __init__(
        self,
        *,
        dim_state: int,
        dim_action: int,
        num_tasks: int,
        torso_dims: Union[int, Tuple[int, ...]] = (400, 400),
        head_dim: int = 300,
        layer_norm_tanh = True,
        tanh_actions = True
    ):
        super().__init__()
        self.dim_state = dim_state
        self.dim_action = dim_action
        self.num_tasks = num_tasks
        self.tanh_actions = tanh_actions

        self.torso = Torso(dim_state + dim_action, cast_tuple(torso_dims), layer_norm_tanh = layer_norm_tanh)
        self.heads = nn.ModuleList([Head(self.torso.dim_out, head_dim, 1) for _ in range(num_tasks)])

    def forward(self, state, action):
        """ values of every task, (..., |I|) """

        assert state.shape[-1] == self.dim_state and action.shape[-1] == self.dim_action

        if self.tanh_actions:
            action = tanh(action)

        hidden = self.torso(torch.cat((state, action), dim = -1))
        return torch.cat([head(hidden) for head in self.heads], dim = -1)

class QEnsemble(nn.Module):
    """ live parameters phi and a frozen target copy phi', only mutated by update_target """

    def __init__(self, **kwargs):
        super().__init__()
        self.online = QNetwork(**kwargs)
        self.target = self.frozen_copy()
        self.num_target_updates = 0

    @property
    def num_tasks(self):
        return self.online.num_tasks

    def frozen_copy(self):
        target = deepcopy(self.online)

        for param in target.parameters():
            param.requires_grad_(False)

        return target

    @torch.no_grad()
    def update_target(self):
        # build the copy first, then swap the reference, so concurrent readers see either the old or the new target
        self.target = self.frozen_copy()
        self.num_target_updates += 1
        return self

    def q_value(
        self,
        state: Tensor,
        action: Tensor,
        task: Union[int, Tensor],
        use_target = False
    ) -> Tensor:

        net = self.target if use_target else self.online
        values = net(state, action)

        if not torch.is_tensor(task):
            task = torch.full(values.shape[:-1], task, dtype = torch.long)

        assert bool(((task >= 0) & (task < self.num_tasks)).all()), f'task id out of range [0, {self.num_tasks})'

        task = task.expand(values.shape[:-1])
        return values.gather(-1, rearrange(task, '... -> ... 1')).squeeze(-1)

# retrace

def retrace_core(
    rewards: Tensor,
    q_taken: Tensor,
    v_next: Tensor,
    log_ratio: Tensor,
    discounts: Tensor,
    mask: Tensor
) -> Tensor:
    """
    all inputs (b, L)
    q_taken[t]   - target network value of (s_t, a_t)
    v_next[t]    - expected target network value at s_{t+1} under the policy
    log_ratio[t] - log pi(a_t | s_t) - log b(a_t | s_t)
    discounts[t] - gamma, or 0 when s_{t+1} is terminal

    Q_ret(t) = r_t + discount_t * (V(s_{t+1}) + c_{t+1} * (Q_ret(t+1) - Q(s_{t+1}, a_{t+1})))
    with c = min(1, pi / b), the first step of every sum weighted by 1
    """

    c = log_ratio.clamp(max = 0.).exp()
    length = rewards.shape[-1]

    targets = []
    q_ret_next = torch.zeros_like(rewards[..., 0])

    for t in reversed(range(length)):
        carry = torch.zeros_like(q_ret_next)

        if t + 1 < length:
            correction = c[..., t + 1] * (q_ret_next - q_taken[..., t + 1])
            carry = torch.where(mask[..., t + 1], correction, carry)

        q_ret = rewards[..., t] + discounts[..., t] * (v_next[..., t] + carry)
        q_ret = torch.where(mask[..., t], q_ret, torch.zeros_like(q_ret))

        targets.append(q_ret)
        q_ret_next = q_ret

    return torch.stack(targets[::-1], dim = -1)

def expected_value(critic, policy, states, tasks, num_samples, generator = None, use_target = True):
    """ monte carlo estimate of E_pi[Q(s, ., i)] with num_samples fresh actions per state, states (b, ds) """

    mixture = policy(states, tasks).expand_samples(num_samples)
    actions, _ = sample(mixture, generator = generator)
    actions = actions.clamp(-policy.action_bound, policy.action_bound)

    states = repeat(states, 'b d -> b n d', n = num_samples)
    tasks = repeat(tasks, 'b -> b n', n = num_samples)

    q = critic.q_value(states, actions, tasks, use_target = use_target)
    return reduce(q, 'b n -> b', 'mean')

def terminal_discounts(batch: SnippetBatch, gamma):
    length = batch.mask.shape[-1]
    last_step = rearrange(batch.lengths - 1, 'b -> b 1') == torch.arange(length)
    ends_terminal = last_step & rearrange(batch.terminal, 'b -> b 1')
    return gamma * (~ends_terminal).type(batch.rewards.dtype)

@torch.no_grad()
def retrace_targets(
    critic: QEnsemble,
    batch: SnippetBatch,
    tasks: Tensor,
    policy: nn.Module,
    generator: Optional[torch.Generator] = None,
    config: RetraceConfig = RetraceConfig()
) -> Tensor:
    """ per-step truncated retrace returns (b, L) for task tasks[b], bootstrapped from the target network """

    assert exists(batch.behavior_log_probs), 'snippets must carry behavior log probabilities'

    b, length = batch.mask.shape
    states, next_states = batch.states[:, :length], batch.states[:, 1:]
    step_tasks = repeat(tasks, 'b -> b l', l = length)

    rewards = batch.rewards.gather(-1, rearrange(step_tasks, 'b l -> b l 1')).squeeze(-1)

    q_taken = critic.q_value(states, batch.actions, step_tasks, use_target = True)

    flat = lambda t: rearrange(t, 'b l ... -> (b l) ...')

    v_next = expected_value(critic, policy, flat(next_states), flat(step_tasks), config.num_samples, generator = generator)
    v_next = rearrange(v_next, '(b l) -> b l', b = b)

    log_pi = mixture_log_prob(policy(flat(states), flat(step_tasks)), flat(batch.actions))
    log_ratio = rearrange(log_pi, '(b l) -> b l', b = b) - batch.behavior_log_probs

    discounts = terminal_discounts(batch, config.gamma)

    return retrace_core(rewards, q_taken, v_next, log_ratio, discounts, batch.mask)

def repeat_over_tasks(batch: SnippetBatch, num_tasks):
    """ every snippet trains every task head - (b, ...) -> (|I| b, ...) with task ids (|I| b,) """

    batch = SnippetBatch(*[repeat(t, 'b ... -> (i b) ...', i = num_tasks) for t in batch])
    tasks = repeat(torch.arange(num_tasks), 'i -> (i b)', b = batch.mask.shape[0] // num_tasks)
    return batch, tasks

def critic_loss(
    critic: QEnsemble,
    batch: SnippetBatch,
    policy: nn.Module,
    generator: Optional[torch.Generator] = None,
    config: RetraceConfig = RetraceConfig(),
    return_targets = False
):
    """ squared error to the stop-gradient retrace targets, mean over steps, summed over all tasks """

    num_tasks = critic.num_tasks
    batch, tasks = repeat_over_tasks(batch, num_tasks)

    targets = retrace_targets(critic, batch, tasks, policy, generator = generator, config = config)

    length = batch.mask.shape[-1]
    step_tasks = repeat(tasks, 'b -> b l', l = length)
    pred = critic.q_value(batch.states[:, :length], batch.actions, step_tasks)

    mask = batch.mask.type(pred.dtype)
    sq_err = (pred - targets) ** 2 * mask

    sq_err, mask = map(lambda t: rearrange(t, '(i b) l -> i (b l)', i = num_tasks), (sq_err, mask))
    loss = (sq_err.sum(dim = -1) / mask.sum(dim = -1).clamp(min = 1.)).sum()

    if not return_targets:
        return loss

    return loss, targets
