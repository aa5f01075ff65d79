from math import log, pi
from collections import namedtuple

from beartype import beartype
from beartype.typing import Optional, Union

import torch
from torch import Tensor
import torch.nn.functional as F
from torch.distributions import Normal
from torch.distributions.kl import kl_divergence

from einops import rearrange, repeat

from rhpo_pytorch.diffmath import logsumexp
from rhpo_pytorch.utils import exists

# constants

PROB_FLOOR = 1e-8

LOG_SQRT_2PI = 0.5 * log(2 * pi)

# distribution containers
# all fields carry arbitrary leading batch dimensions

class DiagGaussian(namedtuple('DiagGaussian', ['mean', 'cholesky_diag'])):
    """ mean (..., d), cholesky_diag (..., d) > 0, covariance diag(cholesky_diag ** 2) """

    @property
    def dim(self):
        return self.mean.shape[-1]

    def to_torch(self):
        return Normal(self.mean, self.cholesky_diag, validate_args = False)

    def detach(self):
        return DiagGaussian(self.mean.detach(), self.cholesky_diag.detach())

class Categorical(namedtuple('Categorical', ['logits'])):
    @classmethod
    def from_probs(cls, probs):
        return cls(probs.log())

    @property
    def log_probs(self):
        return self.logits.log_softmax(dim = -1)

    @property
    def probs(self):
        return self.logits.softmax(dim = -1)

    @property
    def num_categories(self):
        return self.logits.shape[-1]

    def entropy(self):
        probs, log_probs = self.probs, self.log_probs
        log_probs = torch.where(probs > 0, log_probs, torch.zeros_like(log_probs))
        return -(probs * log_probs).sum(dim = -1)

    def detach(self):
        return Categorical(self.logits.detach())

class MixtureGaussian(namedtuple('MixtureGaussian', ['weights', 'components'])):
    """ weights: Categorical with logits (..., M); components: DiagGaussian with fields (..., M, d) """

    @property
    def num_components(self):
        return self.weights.num_categories

    @property
    def dim(self):
        return self.components.dim

    def detach(self):
        return MixtureGaussian(self.weights.detach(), self.components.detach())

    def unsqueeze_samples(self):
        """ insert a sample dimension after the batch dimension, so (b, ...) broadcasts against actions (b, n, d) """
        return MixtureGaussian(
            Categorical(rearrange(self.weights.logits, 'b m -> b 1 m')),
            DiagGaussian(*[rearrange(t, 'b m d -> b 1 m d') for t in self.components])
        )

    def expand_samples(self, num_samples):
        """ (b, ...) -> (b, n, ...), for drawing n actions per state in one call to sample """
        return MixtureGaussian(
            Categorical(repeat(self.weights.logits, 'b m -> b n m', n = num_samples)),
            DiagGaussian(*[repeat(t, 'b m d -> b n m d', n = num_samples) for t in self.components])
        )

    def mean(self):
        probs = rearrange(self.weights.probs, '... m -> ... m 1')
        return (probs * self.components.mean).sum(dim = -2)

@beartype
def mixture_from_gaussian(gaussian: DiagGaussian) -> MixtureGaussian:
    mean, chol = map(lambda t: rearrange(t, '... d -> ... 1 d'), gaussian)
    logits = mean.new_zeros(mean.shape[:-1])
    return MixtureGaussian(Categorical(logits), DiagGaussian(mean, chol))

def component(mixture: MixtureGaussian, index: int) -> DiagGaussian:
    return DiagGaussian(mixture.components.mean[..., index, :], mixture.components.cholesky_diag[..., index, :])

# log densities

def gaussian_log_prob(d: DiagGaussian, a: Tensor) -> Tensor:
    assert a.shape[-1] == d.dim, f'action dimension {a.shape[-1]} does not match distribution dimension {d.dim}'
    return d.to_torch().log_prob(a).sum(dim = -1)

def component_log_probs(m: MixtureGaussian, a: Tensor) -> Tensor:
    """ per-component log densities, (..., M) """
    assert a.shape[-1] == m.dim, f'action dimension {a.shape[-1]} does not match distribution dimension {m.dim}'
    a = rearrange(a, '... d -> ... 1 d')
    return gaussian_log_prob(m.components, a)

def mixture_log_prob(m: MixtureGaussian, a: Tensor) -> Tensor:
    return logsumexp(m.weights.log_probs + component_log_probs(m, a), dim = -1)

def responsibilities(m: MixtureGaussian, a: Tensor) -> Tensor:
    """ posterior over components given the action """
    joint = m.weights.log_probs + component_log_probs(m, a)
    return (joint - logsumexp(joint, dim = -1, keepdim = True)).exp()

# sampling - ancestral, not differentiable

@beartype
def sample(
    m: MixtureGaussian,
    generator: Optional[torch.Generator] = None
):
    probs = m.weights.probs.detach()
    batch_shape = probs.shape[:-1]

    flat_probs = probs.reshape(-1, probs.shape[-1])
    indices = torch.multinomial(flat_probs, 1, generator = generator).reshape(batch_shape)

    index = rearrange(indices, '... -> ... 1 1').expand(*batch_shape, 1, m.dim)
    mean = m.components.mean.detach().gather(-2, index).squeeze(-2)
    chol = m.components.cholesky_diag.detach().gather(-2, index).squeeze(-2)

    noise = torch.randn(mean.shape, generator = generator, dtype = mean.dtype)
    return mean + chol * noise, indices

# divergences

def kl_gaussian(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    return kl_divergence(p.to_torch(), q.to_torch()).sum(dim = -1)

def kl_categorical(p: Categorical, q: Categorical, floor = PROB_FLOOR) -> Tensor:
    probs = p.probs
    log_p = torch.where(probs > 0, p.log_probs, torch.zeros_like(probs))
    log_q = q.log_probs.clamp(min = log(floor))
    return (probs * (log_p - log_q)).sum(dim = -1)

DistanceT = namedtuple('DistanceT', ['t_H', 't_L_mean', 't_L_cov'])

@beartype
def distance_T(old: MixtureGaussian, new: MixtureGaussian) -> DistanceT:
    """
    decoupled distance between two mixtures, components aligned by index
    t_H      - KL between the categoricals
    t_L_mean - average over components of KL(old || new mean with old covariance)
    t_L_cov  - average over components of KL(old || old mean with new covariance)
    """

    assert old.num_components == new.num_components, f'mixtures must have the same number of components, got {old.num_components} and {new.num_components}'
    assert old.dim == new.dim

    old_mean, old_chol = old.components
    new_mean, new_chol = new.components

    t_H = kl_categorical(old.weights, new.weights)

    t_L_mean = kl_gaussian(DiagGaussian(old_mean, old_chol), DiagGaussian(new_mean, old_chol)).mean(dim = -1)
    t_L_cov = kl_gaussian(DiagGaussian(old_mean, old_chol), DiagGaussian(old_mean, new_chol)).mean(dim = -1)

    return DistanceT(t_H, t_L_mean, t_L_cov)

def mixture_distance(old: MixtureGaussian, new: MixtureGaussian) -> Tensor:
    """ T = T_H + T_L with T_L the average full KL across components """
    t_H = kl_categorical(old.weights, new.weights)
    t_L = kl_gaussian(old.components, new.components).mean(dim = -1)
    return t_H + t_L

# similarity

def bhattacharyya(
    p: Union[Categorical, Tensor],
    q: Union[Categorical, Tensor],
    floor = PROB_FLOOR
) -> Tensor:
    """
    -ln sum_j sqrt(p_j q_j) on probability vectors
    the coefficient is floored at M * floor, capping the distance of disjoint supports at -ln(M * floor)
    """

    p, q = map(lambda t: t.probs if isinstance(t, Categorical) else t, (p, q))
    assert p.shape[-1] == q.shape[-1], 'distributions must share the same support'

    num_categories = p.shape[-1]
    coefficient = (p * q).clamp(min = 0.).sqrt().sum(dim = -1)
    coefficient = coefficient.clamp(min = num_categories * floor, max = 1.)
    return -coefficient.log()

def gaussian_bhattacharyya(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    var_p, var_q = p.cholesky_diag ** 2, q.cholesky_diag ** 2
    var = (var_p + var_q) / 2

    mean_term = ((p.mean - q.mean) ** 2 / var).sum(dim = -1) / 8
    cov_term = 0.5 * (var.log().sum(dim = -1) - 0.5 * (var_p.log().sum(dim = -1) + var_q.log().sum(dim = -1)))
    return mean_term + cov_term

# gumbel softmax, relaxed categorical samples with an explicit generator

def gumbel_noise(shape, generator = None, dtype = None, eps = 1e-20):
    u = torch.rand(shape, generator = generator, dtype = dtype)
    return -torch.log(-torch.log(u + eps) + eps)

def gumbel_softmax(
    logits: Tensor,
    temperature: float,
    noise: Optional[Tensor] = None,
    hard = False,
    generator: Optional[torch.Generator] = None
):
    assert temperature > 0, f'gumbel softmax temperature must be positive, got {temperature}'

    if not exists(noise):
        noise = gumbel_noise(logits.shape, generator = generator, dtype = logits.dtype)

    y = F.softmax((logits + noise) / temperature, dim = -1)

    if not hard:
        return y

    # straight through - one-hot forward, relaxed gradient

    y_hard = F.one_hot(y.argmax(dim = -1), y.shape[-1]).type(y.dtype)
    return (y_hard - y).detach() + y
