from copy import deepcopy

from beartype import beartype
from beartype.typing import Optional, Tuple, Union, Literal

import torch
from torch import nn, Tensor
import torch.nn.functional as F

from einx import get_at
from einops import rearrange, repeat

from rhpo_pytorch.diffmath import (
    Torso,
    Head,
    softplus,
    save_checkpoint,
    load_checkpoint
)

from rhpo_pytorch.distributions import (
    DiagGaussian,
    Categorical,
    MixtureGaussian,
    mixture_from_gaussian,
    sample
)

from rhpo_pytorch.utils import (
    default,
    cast_tuple
)

# constants

PAD_LOGIT = -1e4    # logit for components a controller was never built with, exp underflows to an exact zero weight

InitScheme = Literal['homogeneous', 'distinct_means']

FlatKind = Literal['monolithic', 'independent']

# helpers

def to_task_tensor(task, batch):
    if not torch.is_tensor(task):
        task = torch.tensor(task, dtype = torch.long)

    if task.ndim == 0:
        task = repeat(task, ' -> b', b = batch)

    return task.long()

def batchify(state, task):
    is_single = state.ndim == 1

    if is_single:
        state = rearrange(state, 'd -> 1 d')

    return state, to_task_tensor(task, state.shape[0]), is_single

def unbatch_mixture(mixture):
    return MixtureGaussian(
        Categorical(mixture.weights.logits[0]),
        DiagGaussian(*[t[0] for t in mixture.components])
    )

def split_mean_scale(out, min_scale):
    mean, raw_scale = out.chunk(2, dim = -1)
    return mean, softplus(raw_scale) + min_scale

def check_task(task, num_tasks):
    assert bool(((task >= 0) & (task < num_tasks)).all()), f'task id out of range [0, {num_tasks})'

def num_trainable_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)

# hierarchical policy
# the high-level controllers see the task, the low-level gaussian components only see the state

class HierarchicalPolicy(nn.Module):
    @beartype
    def __init__(
        self,
        *,
        dim_state: int,
        dim_action: int,
        num_tasks: int,
        num_components: int,
        torso_dims: Union[int, Tuple[int, ...]] = (400, 200),
        controller_dim: int = 100,
        component_dim: int = 100,
        layer_norm_tanh = True,
        init_scheme: InitScheme = 'homogeneous',
        action_bound: float = 1.,
        min_scale: float = 1e-4,
        max_components: int = 32,
        controller_outputs: Optional[Tuple[int, ...]] = None
    ):
        super().__init__()
        assert num_tasks >= 1
        assert 1 <= num_components <= max_components, f'number of components must be between 1 and {max_components}'

        self.dim_state = dim_state
        self.dim_action = dim_action
        self.num_components = num_components
        self.torso_dims = cast_tuple(torso_dims)
        self.controller_dim = controller_dim
        self.component_dim = component_dim
        self.layer_norm_tanh = layer_norm_tanh
        self.init_scheme = init_scheme
        self.action_bound = action_bound
        self.min_scale = min_scale
        self.max_components = max_components

        self.torso = Torso(dim_state, self.torso_dims, layer_norm_tanh = layer_norm_tanh)

        controller_outputs = default(controller_outputs, (num_components,) * num_tasks)
        assert len(controller_outputs) == num_tasks
        assert all(1 <= n <= num_components for n in controller_outputs)

        self.controllers = nn.ModuleList([Head(self.torso.dim_out, controller_dim, n) for n in controller_outputs])
        self.components = nn.ModuleList([self.new_component_head() for _ in range(num_components)])

        self.init_components_(init_scheme)

    @property
    def num_tasks(self):
        return len(self.controllers)

    @property
    def controller_outputs(self):
        return tuple(controller.to_out.dim_out for controller in self.controllers)

    def hparams(self):
        return dict(
            dim_state = self.dim_state,
            dim_action = self.dim_action,
            num_tasks = self.num_tasks,
            num_components = self.num_components,
            torso_dims = list(self.torso_dims),
            controller_dim = self.controller_dim,
            component_dim = self.component_dim,
            layer_norm_tanh = self.layer_norm_tanh,
            init_scheme = self.init_scheme,
            action_bound = self.action_bound,
            min_scale = self.min_scale,
            max_components = self.max_components,
            controller_outputs = list(self.controller_outputs)
        )

    def new_component_head(self):
        return Head(self.torso.dim_out, self.component_dim, self.dim_action * 2)

    @torch.no_grad()
    def init_components_(self, init_scheme: InitScheme):
        """
        every component starts as a copy of the first
        distinct_means then spreads the mean output biases evenly over the action range, per action dimension
        """

        source = self.components[0]

        for head in self.components[1:]:
            head.load_state_dict(source.state_dict())

        if init_scheme != 'distinct_means':
            return

        num = self.num_components
        biases = torch.linspace(-self.action_bound, self.action_bound, num) if num > 1 else torch.zeros(1)

        for head, bias in zip(self.components, biases.tolist()):
            head.to_out.bias[:self.dim_action] = bias

    @torch.no_grad()
    def init_component_outputs_zero_(self):
        for head in self.components:
            head.to_out.weight.zero_()

    def component_params(self, hidden):
        """ means and cholesky diagonals of every component, (b, M, d) each - a function of the torso output alone """

        outs = torch.stack([head(hidden) for head in self.components], dim = -2)
        return split_mean_scale(outs, self.min_scale)

    def controller_logits(self, hidden, task):
        all_logits = []

        for controller in self.controllers:
            logits = controller(hidden)
            pad = self.num_components - logits.shape[-1]
            logits = F.pad(logits, (0, pad), value = PAD_LOGIT)
            all_logits.append(logits)

        all_logits = torch.stack(all_logits, dim = -2)
        return get_at('b [t] m, b -> b m', all_logits, task)

    def forward(
        self,
        state: Tensor,
        task: Union[int, Tensor]
    ) -> MixtureGaussian:

        state, task, is_single = batchify(state, task)
        assert state.shape[-1] == self.dim_state, f'state dimension must be {self.dim_state}, got {state.shape[-1]}'
        check_task(task, self.num_tasks)

        hidden = self.torso(state)

        mean, chol = self.component_params(hidden)
        logits = self.controller_logits(hidden, task)

        mixture = MixtureGaussian(Categorical(logits), DiagGaussian(mean, chol))

        if is_single:
            mixture = unbatch_mixture(mixture)

        return mixture

# flat baselines - monolithic (task one-hot appended to the input) or independent heads per task

class FlatPolicy(nn.Module):
    @beartype
    def __init__(
        self,
        *,
        dim_state: int,
        dim_action: int,
        num_tasks: int,
        kind: FlatKind = 'monolithic',
        torso_dims: Union[int, Tuple[int, ...]] = (400, 200),
        head_dim: Optional[int] = None,
        layer_norm_tanh = True,
        action_bound: float = 1.,
        min_scale: float = 1e-4
    ):
        super().__init__()
        self.dim_state = dim_state
        self.dim_action = dim_action
        self.num_tasks = num_tasks
        self.kind = kind
        self.torso_dims = cast_tuple(torso_dims)
        self.head_dim = default(head_dim, 200 if kind == 'monolithic' else 100)
        self.layer_norm_tanh = layer_norm_tanh
        self.action_bound = action_bound
        self.min_scale = min_scale

        self.is_monolithic = kind == 'monolithic'

        dim_in = dim_state + (num_tasks if self.is_monolithic else 0)
        self.torso = Torso(dim_in, self.torso_dims, layer_norm_tanh = layer_norm_tanh)

        num_heads = 1 if self.is_monolithic else num_tasks
        self.heads = nn.ModuleList([Head(self.torso.dim_out, self.head_dim, dim_action * 2) for _ in range(num_heads)])

    @property
    def num_components(self):
        return 1

    def hparams(self):
        return dict(
            dim_state = self.dim_state,
            dim_action = self.dim_action,
            num_tasks = self.num_tasks,
            kind = self.kind,
            torso_dims = list(self.torso_dims),
            head_dim = self.head_dim,
            layer_norm_tanh = self.layer_norm_tanh,
            action_bound = self.action_bound,
            min_scale = self.min_scale
        )

    def forward_flat(
        self,
        state: Tensor,
        task: Union[int, Tensor]
    ) -> DiagGaussian:

        state, task, is_single = batchify(state, task)
        assert state.shape[-1] == self.dim_state, f'state dimension must be {self.dim_state}, got {state.shape[-1]}'
        check_task(task, self.num_tasks)

        if self.is_monolithic:
            one_hot = F.one_hot(task, self.num_tasks).type(state.dtype)
            hidden = self.torso(torch.cat((state, one_hot), dim = -1))
            out = self.heads[0](hidden)
        else:
            hidden = self.torso(state)
            outs = torch.stack([head(hidden) for head in self.heads], dim = -2)
            out = get_at('b [t] d, b -> b d', outs, task)

        mean, chol = split_mean_scale(out, self.min_scale)

        if is_single:
            mean, chol = mean[0], chol[0]

        return DiagGaussian(mean, chol)

    def forward(
        self,
        state: Tensor,
        task: Union[int, Tensor]
    ) -> MixtureGaussian:
        return mixture_from_gaussian(self.forward_flat(state, task))

# acting

@beartype
def act(
    policy: nn.Module,
    state: Tensor,
    task: Union[int, Tensor],
    generator: Optional[torch.Generator] = None,
    stochastic = True,
    return_component = False
):
    """
    stochastic - ancestral sample clipped to the action bounds
    deterministic - mean of the highest weighted component, independent of the generator
    """

    with torch.no_grad():
        mixture = policy(state, task)

        if stochastic:
            action, component = sample(mixture, generator = generator)
        else:
            component = mixture.weights.logits.argmax(dim = -1)
            index = repeat(component, '... -> ... 1 d', d = mixture.dim)
            action = mixture.components.mean.gather(-2, index).squeeze(-2)

        bound = policy.action_bound
        action = action.clamp(-bound, bound)

    if not return_component:
        return action

    return action, component

# sequential transfer

def reset_task_controller_(policy: HierarchicalPolicy, task: int, num_outputs: int):
    controller = Head(policy.torso.dim_out, policy.controller_dim, num_outputs)

    if task == policy.num_tasks:
        policy.controllers.append(controller)
    else:
        assert 0 <= task < policy.num_tasks, f'new task id must be at most {policy.num_tasks}'
        policy.controllers[task] = controller

@beartype
def freeze_components(
    policy: HierarchicalPolicy,
    new_task: Optional[int] = None,
    train_torso = False
) -> HierarchicalPolicy:
    """
    only a new high-level controller is trained
    components, torso (unless train_torso) and the other controllers are frozen
    new_task either replaces an existing controller or, when equal to the number of tasks, appends one
    """

    policy = deepcopy(policy)
    new_task = default(new_task, policy.num_tasks)

    for param in policy.parameters():
        param.requires_grad_(False)

    if train_torso:
        for param in policy.torso.parameters():
            param.requires_grad_(True)

    reset_task_controller_(policy, new_task, policy.num_components)
    return policy

@beartype
def extend_with_new_component(
    policy: HierarchicalPolicy,
    new_task: Optional[int] = None,
    train_torso = False
) -> HierarchicalPolicy:
    """ as freeze_components, plus one fresh trainable component that only the new controller can weight """

    assert policy.num_components + 1 <= policy.max_components, f'cannot extend beyond {policy.max_components} components'

    new_task = default(new_task, policy.num_tasks)
    policy = freeze_components(policy, new_task, train_torso = train_torso)

    policy.components.append(policy.new_component_head())
    policy.num_components += 1

    reset_task_controller_(policy, new_task, policy.num_components)
    return policy

# checkpointing

POLICY_CLASSES = dict(
    hierarchical = HierarchicalPolicy,
    flat = FlatPolicy
)

def policy_kind(policy):
    return 'hierarchical' if isinstance(policy, HierarchicalPolicy) else 'flat'

def save_policy(path, policy: nn.Module, extra_metadata = None):
    frozen = [name for name, param in policy.named_parameters() if not param.requires_grad]

    metadata = dict(
        kind = policy_kind(policy),
        hparams = policy.hparams(),
        frozen = frozen,
        **default(extra_metadata, dict())
    )

    save_checkpoint(path, policy.state_dict(), metadata)

def load_policy(path):
    tensors, metadata = load_checkpoint(path)

    hparams = dict(metadata['hparams'])

    for key in ('torso_dims', 'controller_outputs'):
        if key in hparams:
            hparams[key] = tuple(hparams[key])

    klass = POLICY_CLASSES[metadata['kind']]
    policy = klass(**hparams)

    dtype = next(iter(tensors.values())).dtype
    policy = policy.to(dtype)
    policy.load_state_dict(tensors)

    frozen = set(metadata.get('frozen', []))

    for name, param in policy.named_parameters():
        param.requires_grad_(name not in frozen)

    return policy, metadata
