"""Guided denoisers: CFG, adaptive null guidance and loss guidance (DPS / CG).

Each guided denoiser has the same call signature as its base denoiser, so
the sampler does not know which strategy it is running.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .diffusion import (Denoiser, IdentityCodec, NoiseSchedule, NumericalError, add_noise, sample)
from .morphology import DEFAULT_FEATURES, MorphRegressor, SoftMorphRegressor
from .skeleton import SoftSkelRegressor
from .volume import LUMEN, ConditioningMaps, SegmentationMap, argmax_labels

NULL = ConditioningMaps()


def cfg_denoise(base: Denoiser, z, sigma, cond, w: float, null: ConditioningMaps = NULL):
    d_y = base(z, sigma, cond)
    d_n = base(z, sigma, null)
    return w * d_y + (1.0 - w) * d_n


class ClassifierFreeGuidance:
    def __init__(self, base: Denoiser, w: float, null: ConditioningMaps = NULL):
        self.base, self.w, self.null = base, float(w), null

    def __call__(self, z, sigma, cond=None):
        return cfg_denoise(self.base, z, sigma, cond, self.w, self.null)


def adaptive_null(measured: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Null morphological condition: measured + (measured - target)."""
    return 2.0 * np.asarray(measured) - np.asarray(target)


class AdaptiveNullGuidance:
    """CFG whose morphological null signal tracks the current prediction error.

    Per call: two base evaluations, one decode and one regressor call. The
    skeletal part of the null condition is always empty.
    """

    def __init__(self, base: Denoiser, regressor: MorphRegressor, w: float, decoder=None):
        self.base = base
        self.regressor = regressor
        self.decoder = decoder or IdentityCodec()
        self.w = float(w)
        self.last_null: np.ndarray | None = None

    def __call__(self, z, sigma, cond=None):
        if cond is None or cond.morph is None:
            raise ValueError("adaptive null guidance needs a morphological target")
        d_y = self.base(z, sigma, cond)
        measured = self.regressor(self.decoder.decode(d_y))
        if measured.shape != cond.morph.shape:
            raise ValueError(f"regressor output {measured.shape} does not match the target {cond.morph.shape}")
        y_null = adaptive_null(measured, cond.morph)
        self.last_null = y_null
        d_n = self.base(z, sigma, ConditioningMaps(morph=y_null))
        return self.w * d_y + (1.0 - self.w) * d_n


def ang_denoise(base, regressor, z, sigma, cond, w, decoder=None):
    return AdaptiveNullGuidance(base, regressor, w, decoder)(z, sigma, cond)


# --- loss guidance -------------------------------------------------------------

class GuidanceLoss:
    """L = |M(x) - y_m|^2 + |S(x_lumen) - y_s|^2 on decoded samples.

    ``variant='dps'`` decodes the denoised estimate D(z); ``'cg'`` decodes z
    itself. Either term is skipped when its regressor or target is absent.
    """

    def __init__(self, denoiser: Denoiser, morph: SoftMorphRegressor | None = None,
                 skel: SoftSkelRegressor | None = None, decoder=None, variant: str = "dps"):
        if variant not in ("dps", "cg"):
            raise ValueError("variant must be 'dps' or 'cg'")
        self.denoiser = denoiser
        self.morph = morph
        self.skel = skel
        self.decoder = decoder or IdentityCodec()
        self.variant = variant

    @staticmethod
    def targets(cond: ConditioningMaps | None):
        if cond is None:
            return None, None
        y_m = cond.morph[:, 0, 0, :] if cond.morph is not None else None
        y_s = cond.skel[0] if cond.has_skel else None
        return y_m, y_s

    def _x(self, z, sigma, cond):
        return self.denoiser(z, sigma, cond) if self.variant == "dps" else np.asarray(z, dtype=np.float64)

    def value(self, z, sigma, cond) -> float:
        y_m, y_s = self.targets(cond)
        probs = self.decoder.decode(self._x(z, sigma, cond))
        total = 0.0
        if self.morph is not None and y_m is not None:
            total += float(((self.morph(probs) - y_m) ** 2).sum())
        if self.skel is not None and y_s is not None:
            total += float(((self.skel(probs[LUMEN]) - y_s) ** 2).sum())
        return total

    def grad(self, z, sigma, cond) -> np.ndarray:
        y_m, y_s = self.targets(cond)
        x = self._x(z, sigma, cond)
        probs = self.decoder.decode(x)
        g = np.zeros(probs.shape)
        if self.morph is not None and y_m is not None:
            g += self.morph.vjp(probs.shape, 2.0 * (self.morph(probs) - y_m))
        if self.skel is not None and y_s is not None:
            h, h_vjp = self.skel.forward(probs[LUMEN])
            g[LUMEN] += h_vjp(2.0 * (h - y_s))
        g = self.decoder.decode_vjp(x, g)
        if self.variant == "dps":
            g = self.denoiser.vjp(z, sigma, cond, g)
        return g


class AnalyticGradient:
    def __init__(self, loss: GuidanceLoss):
        self.loss = loss

    def __call__(self, z, sigma, cond):
        return self.loss.grad(z, sigma, cond)


class FiniteDifferenceGradient:
    """Central differences of the guidance loss, one coordinate at a time."""

    def __init__(self, loss: GuidanceLoss, step: float = 1e-4):
        self.loss = loss
        self.step = step

    def __call__(self, z, sigma, cond):
        z = np.array(z, dtype=np.float64)
        g = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            old = z[idx]
            z[idx] = old + self.step
            hi = self.loss.value(z, sigma, cond)
            z[idx] = old - self.step
            lo = self.loss.value(z, sigma, cond)
            z[idx] = old
            g[idx] = (hi - lo) / (2 * self.step)
        return g


class LossGuidance:
    """D(z; y) - (w - 1) * grad L, or ``+`` with ``printed_sign=True``."""

    def __init__(self, base: Denoiser, grad: Callable, w: float, printed_sign: bool = False):
        self.base = base
        self.grad = grad
        self.w = float(w)
        self.sign = 1.0 if printed_sign else -1.0

    def __call__(self, z, sigma, cond=None):
        d = self.base(z, sigma, cond)
        if self.w == 1.0:
            return d
        g = np.asarray(self.grad(z, sigma, cond))
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite guidance gradient at sigma={sigma:g}")
        return d + self.sign * (self.w - 1.0) * g


def loss_guided_denoise(base, grad, z, sigma, cond, w, printed_sign=False):
    return LossGuidance(base, grad, w, printed_sign)(z, sigma, cond)


# --- editing -------------------------------------------------------------------

def region_mask(shape: Sequence[int], start: int, stop: int) -> np.ndarray:
    """Editable frames [start, stop) across the whole cross-section."""
    m = np.zeros(tuple(shape), dtype=bool)
    m[:, :, start:stop] = True
    return m


def tissue_mask(reference: SegmentationMap, classes: Sequence[int], dilate: int = 0) -> np.ndarray:
    m = reference.mask(*classes)
    if dilate:
        m = ndimage.binary_dilation(m, iterations=dilate)
    return m


def masked_edit_sampler(denoiser: Denoiser, schedule: NoiseSchedule, reference: SegmentationMap,
                        edit_mask: np.ndarray, cond=None, mode: str = "sde",
                        rng: np.random.Generator | None = None, codec=None) -> SegmentationMap:
    """Resample only inside ``edit_mask``; everything else is pinned to ``reference``.

    Before each denoiser call the voxels outside the mask are overwritten by
    the reference noised to the current level; after the last call they are
    overwritten by the clean reference.
    """
    codec = codec or IdentityCodec()
    x_ref = codec.encode(reference)
    edit_mask = np.asarray(edit_mask, dtype=bool)
    if edit_mask.shape != x_ref.shape[1:]:
        raise ValueError(f"edit mask {edit_mask.shape} != latent dims {x_ref.shape[1:]}")
    keep = ~edit_mask
    noise_rng = rng if rng is not None else np.random.default_rng(0)

    def project(z, sigma):
        z = z.copy()
        z[:, keep] = add_noise(x_ref, sigma, noise_rng)[:, keep]
        return z

    out = sample(denoiser, schedule, x_ref.shape, cond, mode, rng, project=project)
    out[:, keep] = x_ref[:, keep]
    return argmax_labels(codec.decode(out), reference.spacing)


# --- spec strings ---------------------------------------------------------------

@dataclass(frozen=True)
class GuidanceSpec:
    kind: str = "none"
    w: float = 1.0
    features: tuple[str, ...] = DEFAULT_FEATURES


def parse_guidance(text: str) -> GuidanceSpec:
    """``none | cfg:w=5 | ang:w=5,features=a+b | dps:w=5 | cg:w=5``."""
    text = text.strip()
    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    if kind not in ("none", "cfg", "ang", "dps", "cg"):
        raise ValueError(f"unknown guidance {kind!r}")
    w, features = 1.0, DEFAULT_FEATURES
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise ValueError(f"malformed guidance option {item!r}")
        if key == "w":
            w = float(val)
        elif key == "features":
            features = tuple(f for f in val.split("+") if f)
        else:
            raise ValueError(f"unknown guidance option {key!r}")
    if kind == "none" and rest:
        raise ValueError("'none' takes no options")
    return GuidanceSpec(kind, w, features)
