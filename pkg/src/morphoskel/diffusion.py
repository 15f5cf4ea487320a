"""Score-based sampling in sigma-time with EDM preconditioning.

The sampler integrates dz = -2 sigma grad log p(z) dsigma + sqrt(2 sigma) dw
backwards over a Karras sigma grid. Denoisers are callables
``D(z, sigma, cond) -> z0_hat``; the score is (D - z) / sigma^2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .volume import NUM_CLASSES, ConditioningMaps, LatentGrid, SegmentationMap, one_hot

SIGMA_DATA = 1.0
SIGMA_MIN = 0.01
SIGMA_MAX = 80.0
RHO = 3.0
P_MEAN = 1.0
P_STD = 1.2


class NumericalError(FloatingPointError):
    """Non-finite values where finite ones are required (guidance, covariances)."""


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {what}")
    return a


def precondition_coeffs(sigma, sigma_data: float = SIGMA_DATA):
    """(c_skip, c_out, c_in, c_noise) for noise level ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or sigma_data <= 0:
        raise ValueError("sigma and sigma_data must be positive")
    s2 = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_in = 1.0 / np.sqrt(s2)
    c_noise = np.log(sigma) / 4.0
    if sigma.ndim == 0:
        return float(c_skip), float(c_out), float(c_in), float(c_noise)
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float = SIGMA_DATA):
    """lambda(sigma) = 1 / c_out^2, which flattens the effective loss across levels."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    w = (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2
    return float(w) if w.ndim == 0 else w


def sample_train_sigma(rng: np.random.Generator, size=None, p_mean: float = P_MEAN, p_std: float = P_STD):
    """Log-normal training noise levels: ln sigma ~ N(p_mean, p_std^2)."""
    return np.exp(rng.normal(p_mean, p_std, size=size))


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray  # N descending levels followed by a terminal 0
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    rho: float = RHO

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1


def karras_sigmas(n: int, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
                  rho: float = RHO) -> NoiseSchedule:
    if n < 2:
        raise ValueError("a schedule needs at least 2 levels")
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    ramp = np.arange(n) / (n - 1)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    s = (hi + ramp * (lo - hi)) ** rho
    s[0], s[-1] = sigma_max, sigma_min
    return NoiseSchedule(np.append(s, 0.0), float(sigma_min), float(sigma_max), float(rho))


def add_noise(z: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    if sigma == 0:
        return z.copy()
    return z + sigma * rng.standard_normal(z.shape)


class Denoiser(Protocol):
    def __call__(self, z: np.ndarray, sigma: float, cond: ConditioningMaps | None = None) -> np.ndarray: ...


class PreconditionedDenoiser:
    """Wrap a raw network F(x, c_noise, cond) as D = c_skip z + c_out F(c_in z, c_noise, cond)."""

    def __init__(self, net: Callable, sigma_data: float = SIGMA_DATA):
        self.net = net
        self.sigma_data = sigma_data

    def __call__(self, z, sigma, cond=None):
        c_skip, c_out, c_in, c_noise = precondition_coeffs(sigma, self.sigma_data)
        return c_skip * z + c_out * self.net(c_in * z, c_noise, cond)


def _cond_parts(cond: ConditioningMaps | None) -> list[tuple[str, np.ndarray]]:
    if cond is None:
        return []
    parts = []
    if cond.morph is not None:
        parts.append(("morph", cond.morph))
    if cond.has_skel:
        parts.append(("skel", cond.skel))
    return parts


class EmpiricalBayesDenoiser:
    """Posterior mean of a finite dataset under Gaussian noise.

    D(z, sigma, y) = sum_i w_i x_i with
    w = softmax(-|z - x_i|^2 / (2 sigma^2) - msd(y, y_i) / (2 tau^2)),
    where msd is the mean squared difference of each condition map that is
    present in ``y``. This is exact for the smoothed mixture density, so
    (D - z) / sigma^2 is its score. A leading batch axis on ``z`` is allowed.
    """

    def __init__(self, data: Sequence, conds: Sequence[ConditioningMaps] | None = None, tau: float = 0.1):
        if len(data) == 0:
            raise ValueError("empty dataset")
        arrs = [d.values if isinstance(d, LatentGrid) else np.asarray(d, dtype=np.float64) for d in data]
        shape = arrs[0].shape
        if any(a.shape != shape for a in arrs):
            raise ValueError("dataset items differ in shape")
        self.item_shape = shape
        self.x = np.stack([a.ravel() for a in arrs])
        self.sq = (self.x ** 2).sum(axis=1)
        if conds is not None and len(conds) != len(arrs):
            raise ValueError("one condition per dataset item is required")
        self.conds = list(conds) if conds is not None else None
        self.tau = float(tau)

    def __len__(self) -> int:
        return len(self.x)

    def _cond_logits(self, cond) -> np.ndarray:
        parts = _cond_parts(cond)
        out = np.zeros(len(self.x))
        if not parts:
            return out
        if self.conds is None:
            raise ValueError("conditional evaluation needs per-item conditions")
        for i, ci in enumerate(self.conds):
            for name, y in parts:
                yi = getattr(ci, name)
                if yi is None:
                    yi = np.zeros_like(y)
                out[i] -= np.mean((y - yi) ** 2) / (2 * self.tau ** 2)
        return out

    def weights(self, z: np.ndarray, sigma: float, cond=None) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        flat = z.reshape(-1, self.x.shape[1])
        d2 = (flat ** 2).sum(axis=1)[:, None] - 2.0 * flat @ self.x.T + self.sq[None, :]
        logits = -np.maximum(d2, 0.0) / (2.0 * sigma ** 2) + self._cond_logits(cond)[None, :]
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    def __call__(self, z, sigma, cond=None):
        z = np.asarray(z, dtype=np.float64)
        out = self.weights(z, sigma, cond) @ self.x
        return out.reshape(z.shape)

    def score(self, z, sigma, cond=None):
        return (self(z, sigma, cond) - z) / sigma ** 2

    def vjp(self, z, sigma, cond, v) -> np.ndarray:
        """J^T v for J = dD/dz, i.e. sum_i w_i (x_i - mu) <x_i - mu, v> / sigma^2."""
        z = np.asarray(z, dtype=np.float64)
        w = self.weights(z, sigma, cond)
        vf = np.asarray(v, dtype=np.float64).reshape(w.shape[0], -1)
        mu = w @ self.x
        proj = vf @ self.x.T - (vf * mu).sum(axis=1, keepdims=True)  # <x_i - mu, v>
        out = (w * proj) @ self.x - (w * proj).sum(axis=1, keepdims=True) * mu
        return (out / sigma ** 2).reshape(z.shape)


class IdentityCodec:
    """Latent space = sample space: class-score channels in, class scores out."""

    factor = 1

    def encode(self, seg: SegmentationMap) -> np.ndarray:
        return one_hot(seg).probs.copy()

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        if z.shape[0] != NUM_CLASSES:
            raise ValueError(f"identity decoder expects {NUM_CLASSES} latent channels, got {z.shape[0]}")
        return z

    def decode_vjp(self, z: np.ndarray, g: np.ndarray) -> np.ndarray:
        return np.asarray(g)


def sample(denoiser: Denoiser, schedule: NoiseSchedule, shape: Sequence[int], cond=None,
           mode: str = "sde", rng: np.random.Generator | None = None, z_init: np.ndarray | None = None,
           project: Callable[[np.ndarray, float], np.ndarray] | None = None) -> np.ndarray:
    """Euler-Maruyama (``sde``) or probability-flow Euler (``ode``) in sigma-time.

    ``project(z, sigma)`` is applied before every denoiser call (used for
    inpainting-style edits). The last step returns D(z, sigma_min) directly.
    """
    if mode not in ("sde", "ode"):
        raise ValueError("mode must be 'sde' or 'ode'")
    if rng is None:
        if z_init is None or mode == "sde":
            raise ValueError("a seeded generator is required")
    sig = schedule.sigmas
    z = np.array(z_init, dtype=np.float64) if z_init is not None else sig[0] * rng.standard_normal(tuple(shape))
    for i in range(schedule.steps - 1):
        s, s_next = sig[i], sig[i + 1]
        if project is not None:
            z = project(z, s)
        d = _check_finite(np.asarray(denoiser(z, s, cond)), "denoiser output")
        ds = s - s_next
        if mode == "sde":
            z = z + (2.0 * ds / s) * (d - z) + np.sqrt(2.0 * s * ds) * rng.standard_normal(z.shape)
        else:
            z = z + (ds / s) * (d - z)
    s = sig[schedule.steps - 1]
    if project is not None:
        z = project(z, s)
    return _check_finite(np.asarray(denoiser(z, s, cond)), "denoiser output")
