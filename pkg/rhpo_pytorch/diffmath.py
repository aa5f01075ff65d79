import json
import struct
import logging
from math import sqrt

import numpy as np

from beartype import beartype
from beartype.typing import Optional, Tuple, Dict, Union

import torch
from torch import nn, Tensor
import torch.nn.functional as F
from torch.optim import Adam

from rhpo_pytorch.utils import (
    exists,
    default,
    cast_tuple,
    all_finite,
    NonFiniteError,
    write_bytes_locked,
    read_bytes_locked
)

logger = logging.getLogger(__name__)

# constants

VARIANCE_FLOOR = 1e-6

CHECKPOINT_MAGIC = b'RHPOCKPT'
CHECKPOINT_VERSION = 1

# elementwise ops

def elu(x):
    return F.elu(x)

def tanh(x):
    return torch.tanh(x)

def softplus(x):
    return F.softplus(x)

def logsumexp(x, dim = -1, keepdim = False):
    """
    max-shifted log-sum-exp
    an all -inf slice reduces to -inf with zero gradient, where torch.logsumexp would backprop nan
    """

    m = x.detach().amax(dim = dim, keepdim = True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))

    summed = (x - m).exp().sum(dim = dim, keepdim = True)
    nonzero = summed > 0

    safe_summed = torch.where(nonzero, summed, torch.ones_like(summed))
    out = torch.where(nonzero, safe_summed.log() + m, torch.full_like(summed, -float('inf')))

    if not keepdim:
        out = out.squeeze(dim)

    return out

# layers

class Linear(nn.Module):
    @beartype
    def __init__(
        self,
        dim_in: int,
        dim_out: int,
        bias = True
    ):
        """ fan-in scaled uniform weights, zero bias """
        super().__init__()
        self.dim_in = dim_in
        self.dim_out = dim_out

        bound = 1. / sqrt(dim_in)
        self.weight = nn.Parameter(torch.empty(dim_out, dim_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(dim_out)) if bias else None

    def init_zero_(self):
        self.weight.data.zero_()

        if exists(self.bias):
            self.bias.data.zero_()

    def forward(self, x):
        assert x.shape[-1] == self.dim_in, f'expected last dimension {self.dim_in}, got input of shape {tuple(x.shape)}'
        return F.linear(x, self.weight, self.bias)

class LayerNorm(nn.Module):
    def __init__(self, dim, eps = VARIANCE_FLOOR):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.gamma, self.beta, eps = self.eps)

class Torso(nn.Module):
    """
    first layer: linear -> layer norm -> (optional) tanh
    every following layer: linear -> elu
    """

    @beartype
    def __init__(
        self,
        dim_in: int,
        dims: Union[int, Tuple[int, ...]],
        layer_norm_tanh = True
    ):
        super().__init__()
        dims = cast_tuple(dims)
        assert len(dims) >= 1

        self.dim_in = dim_in
        self.dim_out = dims[-1]
        self.layer_norm_tanh = layer_norm_tanh

        self.project_in = Linear(dim_in, dims[0])
        self.norm = LayerNorm(dims[0])

        self.layers = nn.ModuleList([Linear(dim, dim_next) for dim, dim_next in zip(dims[:-1], dims[1:])])

    def forward(self, x):
        x = self.norm(self.project_in(x))

        if self.layer_norm_tanh:
            x = tanh(x)

        for layer in self.layers:
            x = elu(layer(x))

        return x

class Head(nn.Module):
    @beartype
    def __init__(
        self,
        dim_in: int,
        dim_hidden: int,
        dim_out: int
    ):
        super().__init__()
        self.hidden = Linear(dim_in, dim_hidden)
        self.to_out = Linear(dim_hidden, dim_out)

    def forward(self, x):
        return self.to_out(elu(self.hidden(x)))

# gradients

def trainable_parameters(module: nn.Module):
    return {name: param for name, param in module.named_parameters() if param.requires_grad}

def backward(
    loss: Tensor,
    params: Union[nn.Module, Dict[str, Tensor]],
    retain_graph = False
) -> Dict[str, Tensor]:
    """
    gradient map for every named parameter
    parameters the loss does not reach, or which are frozen, receive zeros
    """

    assert loss.numel() == 1, f'loss must be a scalar, got shape {tuple(loss.shape)}'

    if isinstance(params, nn.Module):
        params = dict(params.named_parameters())

    names = [name for name, p in params.items() if p.requires_grad]
    tensors = [params[name] for name in names]

    grads = dict()

    if len(tensors) > 0 and loss.requires_grad:
        computed = torch.autograd.grad(loss.reshape(()), tensors, allow_unused = True, retain_graph = retain_graph)
        grads.update(zip(names, computed))

    return {name: default(grads.get(name), torch.zeros_like(p)) for name, p in params.items()}

# parameter store with adam moments

class ParamStore:
    @beartype
    def __init__(
        self,
        module: nn.Module,
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8
    ):
        self.module = module
        self.lr = lr
        self.params = dict(module.named_parameters())
        self.optimizer = Adam([p for p in self.params.values() if p.requires_grad], lr = lr, betas = betas, eps = eps)
        self.step_count = 0

    @property
    def names(self):
        return tuple(self.params.keys())

    def trainable(self):
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def num_trainable(self):
        return sum(p.numel() for p in self.trainable().values())

    def moments(self, name):
        state = self.optimizer.state.get(self.params[name], dict())
        return state.get('exp_avg'), state.get('exp_avg_sq')

    def snapshot(self):
        return {name: p.detach().clone() for name, p in self.params.items()}

def grad_diagnostics(grads):
    return {name: float(g.norm()) if bool(torch.isfinite(g).all()) else float('nan') for name, g in grads.items()}

@beartype
def adam_step(
    store: ParamStore,
    grads: Dict[str, Tensor],
    lr: Optional[float] = None
) -> ParamStore:

    unknown = set(grads.keys()) - set(store.names)
    assert len(unknown) == 0, f'gradients given for unknown parameters {sorted(unknown)}'

    if not all_finite(*grads.values()):
        diagnostics = grad_diagnostics(grads)
        logger.error('rejecting adam step %d, non-finite gradients', store.step_count)
        raise NonFiniteError('non-finite gradient, adam step rejected', diagnostics)

    lr = default(lr, store.lr)

    for group in store.optimizer.param_groups:
        group['lr'] = lr

    for name, param in store.params.items():
        if not param.requires_grad:
            param.grad = None
            continue

        grad = grads.get(name)
        param.grad = grad.detach().clone() if exists(grad) else torch.zeros_like(param)

    store.optimizer.step()
    store.optimizer.zero_grad(set_to_none = True)
    store.step_count += 1
    return store

# checkpoints
# layout: magic | u32 version | u64 header length | json header | raw little-endian tensor data

def serialize_tensors(tensors: Dict[str, Tensor], metadata = None) -> bytes:
    entries = []
    chunks = []
    offset = 0

    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder('<'), copy = False)
        data = arr.tobytes()

        entries.append(dict(
            name = name,
            shape = list(arr.shape),
            dtype = arr.dtype.name,
            offset = offset,
            nbytes = len(data)
        ))

        chunks.append(data)
        offset += len(data)

    header = json.dumps(dict(
        version = CHECKPOINT_VERSION,
        metadata = default(metadata, dict()),
        tensors = entries
    )).encode('utf-8')

    return CHECKPOINT_MAGIC + struct.pack('<IQ', CHECKPOINT_VERSION, len(header)) + header + b''.join(chunks)

def deserialize_tensors(blob: bytes):
    magic_len = len(CHECKPOINT_MAGIC)
    assert blob[:magic_len] == CHECKPOINT_MAGIC, 'not a checkpoint file'

    version, header_len = struct.unpack_from('<IQ', blob, magic_len)
    assert version == CHECKPOINT_VERSION, f'unsupported checkpoint version {version}'

    header_start = magic_len + struct.calcsize('<IQ')
    header = json.loads(blob[header_start:(header_start + header_len)].decode('utf-8'))
    data_start = header_start + header_len

    tensors = dict()

    for entry in header['tensors']:
        dtype = np.dtype(entry['dtype']).newbyteorder('<')
        count = entry['nbytes'] // dtype.itemsize
        arr = np.frombuffer(blob, dtype = dtype, count = count, offset = data_start + entry['offset'])
        arr = arr.astype(arr.dtype.newbyteorder('='), copy = True).reshape(entry['shape'])
        tensors[entry['name']] = torch.from_numpy(arr)

    return tensors, header['metadata']

def save_checkpoint(path, tensors: Dict[str, Tensor], metadata = None):
    write_bytes_locked(path, serialize_tensors(tensors, metadata))

def load_checkpoint(path):
    return deserialize_tensors(read_bytes_locked(path))
