"""Gumbel perturbation machinery.

Standard Gumbel(0,1) noise per latent cell, max-trick sampling of the
structured per-timestep latent, the perturbed argmax used by the direct
gradient estimator, and the temperature-relaxed softmax sample used by the
relaxation baseline.

Noise is drawn i.i.d. per cell and the structured perturbation is the sum of
per-timestep perturbations, so every argmax here decomposes over timesteps
and a whole sweep of candidate cells can be scored in one batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gazelatent.autodiff import Tensor, as_tensor, add, exp, log_softmax, reshape, scalar_mul

# smallest uniform draw fed to -log(-log(u)); keeps u strictly inside (0, 1)
_U_FLOOR = 2.0**-53


def substream(seed: int, *ids) -> np.random.Generator:
    """Independent counter-based generator derived from a master seed.

    Streams are identified by a tuple of non-negative ints, so replicate /
    purpose streams are reproducible regardless of scheduling order.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in ids))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class GumbelNoise:
    """i.i.d. standard Gumbel values, one per latent cell, plus stream identity."""

    values: np.ndarray  # (T, H, W)
    stream: tuple

    @property
    def shape(self):
        return self.values.shape


def gumbel_values(rng: np.random.Generator, shape) -> np.ndarray:
    """Raw standard Gumbel draws: -log(-log(u)), u uniform on (0, 1)."""
    u = np.maximum(rng.random(shape), _U_FLOOR)
    return -np.log(-np.log(u))


def sample_gumbel(dims: tuple[int, int, int], rng: np.random.Generator,
                  stream: tuple = ()) -> GumbelNoise:
    """Draw one (T, H, W) block of standard Gumbel noise from ``rng``."""
    t, h, w = dims
    if t < 1 or h < 1 or w < 1:
        raise ValueError(f"invalid latent dims {dims}")
    return GumbelNoise(values=gumbel_values(rng, (t, h, w)), stream=tuple(stream))


def _scores_to_index(scores: np.ndarray) -> np.ndarray:
    """Per-timestep argmax over the last two axes; first (smallest flat
    index) wins ties. Accepts (..., T, H, W), returns (..., T, 2) ints."""
    *lead, t, h, w = scores.shape
    flat = scores.reshape(*lead, t, h * w).argmax(axis=-1)
    return np.stack([flat // w, flat % w], axis=-1)


def _logit_values(logits) -> np.ndarray:
    """Accept a raw array, a live tensor, or a gaze-distribution wrapper."""
    if isinstance(logits, Tensor):
        return logits.data
    log_probs = getattr(logits, "log_probs", None)
    if log_probs is not None:
        return np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    return np.asarray(logits, dtype=np.float64)


def gumbel_argmax(logits, noise: GumbelNoise) -> np.ndarray:
    """Max-trick sample: per-timestep argmax of logits + noise.

    Returns the selected (h, w) per timestep as an int array (T, 2).
    """
    logits = _logit_values(logits)
    if logits.shape != noise.values.shape:
        raise ValueError(f"logits {logits.shape} vs noise {noise.values.shape}")
    return _scores_to_index(logits + noise.values)


def perturbed_argmax(logits: np.ndarray, noise: GumbelNoise, eps: float,
                     loglik_table: np.ndarray) -> np.ndarray:
    """Argmax of eps * per-cell class log-likelihood + logits + noise.

    ``loglik_table[t, h, w]`` holds the class log-likelihood contribution of
    placing timestep t's latent at (h, w) with all other timesteps fixed.
    With eps == 0 this reduces exactly to :func:`gumbel_argmax`, including
    the tie-break rule.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    logits = _logit_values(logits)
    table = np.asarray(loglik_table, dtype=np.float64)
    if logits.shape != noise.values.shape or table.shape != logits.shape:
        raise ValueError(
            f"shape mismatch: logits {logits.shape}, noise {noise.values.shape}, "
            f"table {table.shape}"
        )
    if eps == 0.0:
        return _scores_to_index(logits + noise.values)
    return _scores_to_index(eps * table + logits + noise.values)


def gumbel_softmax(logits: Tensor | np.ndarray, noise: GumbelNoise | np.ndarray,
                   tau: float) -> Tensor:
    """Temperature-relaxed sample: per-timestep softmax((logits + noise) / tau).

    Differentiable w.r.t. ``logits`` when they live on the active tape. The
    trailing two axes are the spatial grid; leading axes pass through.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if hasattr(logits, "log_probs"):
        logits = logits.log_probs
    lt = as_tensor(logits)
    nv = noise.values if isinstance(noise, GumbelNoise) else np.asarray(noise)
    if nv.shape != lt.shape:
        raise ValueError(f"logits {lt.shape} vs noise {nv.shape}")
    *lead, h, w = lt.shape
    grouped = reshape(lt, (*lead, h * w))
    noisy = add(grouped, Tensor(nv.reshape(*lead, h * w)))
    soft = exp(log_softmax(scalar_mul(noisy, 1.0 / tau), axis=-1))
    return reshape(soft, lt.shape)
