"""Per-image feature statistics, KL deviation and the Gaussian-kernel MMD.

Every function accepts torch tensors (differentiable, used in training) or
numpy arrays (computed in float64, returned as numpy).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import SampleSizeError, SamplingError

EPS = 1e-9


def _numpy_io(fn):
    """Run ``fn`` on float64 tensors when called with numpy arrays, return numpy."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if not any(isinstance(a, np.ndarray) for a in args):
            return fn(*args, **kwargs)
        conv = [torch.from_numpy(np.asarray(a, dtype=np.float64)) if isinstance(a, np.ndarray) else a
                for a in args]
        out = fn(*conv, **kwargs)
        if isinstance(out, tuple):
            return tuple(o.numpy() if torch.is_tensor(o) else o for o in out)
        return out.numpy() if torch.is_tensor(out) else out

    return wrapper


def safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    """sqrt with a zero (not NaN) gradient where ``x`` is zero."""
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


@dataclass
class DistributionStats:
    mu: np.ndarray
    sigma: np.ndarray
    phi: Optional[np.ndarray]
    n: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mu": np.asarray(self.mu).tolist(),
            "sigma": np.asarray(self.sigma).tolist(),
            "phi": None if self.phi is None else np.asarray(self.phi).tolist(),
        }


@_numpy_io
def moments(features, dim: int = -2):
    """Mean and N-1 sample std over the patch axis (``dim``)."""
    n = features.shape[dim]
    if n < 2:
        raise SampleSizeError(f"need at least 2 patches for a sample std, got {n}")
    mu = features.mean(dim=dim)
    dev = features - mu.unsqueeze(dim)
    var = (dev * dev).sum(dim=dim) / (n - 1)
    return mu, safe_sqrt(var)


def patch_stats(features) -> DistributionStats:
    """Per-dimension mean and std of an N x D feature group."""
    mu, sigma = moments(np.asarray(features, dtype=np.float64))
    return DistributionStats(mu, sigma, None, int(np.shape(features)[0]))


@_numpy_io
def normalize_distribution(features, mu, sigma, eps: float = EPS):
    """Standardize a patch group by its own statistics: (x - mu) / (sigma + eps)."""
    return (features - mu.unsqueeze(-2)) / (sigma.unsqueeze(-2) + eps)


@_numpy_io
def kl_to_standard_normal(mu, sigma, eps: float = EPS):
    """KL( N(mu, sigma^2) || N(0, 1) ) per dimension.

    Evaluated as (mu^2 + d - log1p(d)) / 2 with d = sigma^2 - 1 near sigma = 1,
    which keeps the result non-negative in floating point.
    """
    s = torch.clamp(sigma, min=eps)
    s2 = s * s
    d = s2 - 1.0
    near = d.abs() < 0.5
    d_near = torch.where(near, d, torch.zeros_like(d))
    s_far = torch.where(near, torch.ones_like(s), s)
    core = torch.where(near, d_near - torch.log1p(d_near), s_far * s_far - 1.0 - 2.0 * torch.log(s_far))
    return torch.clamp(0.5 * (mu * mu + core), min=0.0)


def distribution_stats(features) -> DistributionStats:
    st = patch_stats(features)
    st.phi = kl_to_standard_normal(st.mu, st.sigma)
    return st


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = a.unsqueeze(1) - b.unsqueeze(0)
    return (diff * diff).sum(-1)


def median_bandwidths(X: torch.Tensor, Y: torch.Tensor, scales=(0.5, 1.0, 2.0)) -> list[float]:
    """Median-heuristic bandwidth set over the joint sample (no gradient)."""
    with torch.no_grad():
        Z = torch.cat([X, Y]).double()
        d2 = _sq_dists(Z, Z)
        iu = torch.triu_indices(len(Z), len(Z), offset=1)
        pair = d2[iu[0], iu[1]]
        m = float(torch.sqrt(pair.median())) if pair.numel() else 0.0
    if not m > 0:
        m = 1.0
    return [s * m for s in scales]


def _order_key(t: torch.Tensor):
    a = t.detach().cpu().contiguous().numpy()
    return (a.shape, a.tobytes())


@_numpy_io
def mmd_gaussian(X, Y, bandwidths: Optional[Sequence[float]] = None):
    """Biased (V-statistic) squared MMD with a sum of Gaussian kernels.

    ``bandwidths`` defaults to the median heuristic {m/2, m, 2m}. The result is
    clamped at zero and exactly symmetric in its arguments.
    """
    if X.ndim == 1:
        X = X.unsqueeze(-1)
    if Y.ndim == 1:
        Y = Y.unsqueeze(-1)
    if len(X) == 0 or len(Y) == 0:
        raise SamplingError("MMD needs non-empty sample sets")
    if bandwidths is None:
        bandwidths = median_bandwidths(X, Y)
    if any(w <= 0 for w in bandwidths):
        raise ValueError("bandwidths must be positive")
    if _order_key(Y) < _order_key(X):
        X, Y = Y, X

    def kernel_mean(a, b):
        d2 = _sq_dists(a, b)
        return sum(torch.exp(-d2 / (2.0 * w * w)) for w in bandwidths).mean()

    val = kernel_mean(X, X) + kernel_mean(Y, Y) - 2.0 * kernel_mean(X, Y)
    return torch.clamp(val, min=0.0)


@dataclass
class GaussianReference:
    samples: np.ndarray
    seed: int


def sample_gaussian_reference(shape, seed: int) -> GaussianReference:
    M, D = shape
    if M < 1 or D < 1:
        raise ValueError(f"reference shape must be positive, got {shape}")
    return GaussianReference(np.random.default_rng(seed).standard_normal((M, D)), seed)
