"""Gaze-attention classifier: gaze network, soft attention, recognition head.

The gaze network (parameter group ``gaze``) maps each input cell through a
shared dense trunk to one logit, normalized per timestep into a gaze
distribution. The recognition network (group ``recog``) maps cells to
features, gates them with a soft attention map built from the sampled latent
by a single linear layer + sigmoid, and classifies the pooled result.

All forwards accept a leading batch axis; the public single-example ops wrap
the batched internals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from gazelatent import autodiff as ad
from gazelatent.autodiff import ParamSet, Tape, Tensor, backward
from gazelatent.gumbel import gumbel_values, substream
from gazelatent.latent import LatentSpaceDims, GazeLatent, index_to_flat, trace_to_json

RESIDUAL_FORMS = ("multiplicative-residual", "additive")
SUPERVISION_FORMS = ("kl-qp", "forward-ce")
MODES = ("direct", "gumbel-softmax", "gt-gaze", "none")


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class ModelConfig:
    t: int
    h: int
    w: int
    feat: int
    classes: int
    trunk_width: int = 16
    gaze_hidden: int = 16
    recog_hidden: int = 32
    lambda_kl: float = 1.0
    prior_blur: int = 3
    prior_floor: float = 1e-3
    residual: str = "multiplicative-residual"
    gaze_supervision: str = "kl-qp"
    init_scale: float = 1.0

    def __post_init__(self):
        for name in ("t", "h", "w", "feat", "trunk_width", "gaze_hidden", "recog_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.classes < 2:
            raise ConfigError("classes must be at least 2")
        if self.prior_blur < 1 or self.prior_blur % 2 == 0:
            raise ConfigError("prior_blur must be a positive odd kernel width")
        if not 0.0 < self.prior_floor < 1.0 / (self.h * self.w):
            raise ConfigError("prior_floor must lie in (0, 1/(H*W))")
        if self.residual not in RESIDUAL_FORMS:
            raise ConfigError(f"residual must be one of {RESIDUAL_FORMS}")
        if self.gaze_supervision not in SUPERVISION_FORMS:
            raise ConfigError(f"gaze_supervision must be one of {SUPERVISION_FORMS}")

    @property
    def dims(self) -> LatentSpaceDims:
        return LatentSpaceDims(self.t, self.h, self.w)

    @property
    def cells(self) -> int:
        return self.t * self.h * self.w


@dataclass(frozen=True)
class GazeDistribution:
    """Per-timestep log-probabilities over the grid, normalized over H*W."""

    log_probs: Tensor  # (T, H, W)

    @property
    def values(self) -> np.ndarray:
        return self.log_probs.data


@dataclass(frozen=True)
class GazePrior:
    """Per-timestep prior over the grid; entries are floored away from zero."""

    probs: np.ndarray  # (T, H, W)
    provenance: str  # "ground-truth-smoothed" | "uniform"


@dataclass(frozen=True)
class AttentionMap:
    """Per-cell gating values, strictly inside (0, 1)."""

    tensor: Tensor  # (T, H, W)

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data


# attention FC starts near "gaze cell boosts its own gating": identity gain
# plus a negative bias, so attended cells open (~0.88) and the rest damp (~0.12)
ATTN_INIT_GAIN = 4.0
ATTN_INIT_BIAS = -2.0


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    """He-scaled random weights, zero biases, near-identity attention FC."""
    rng = substream(seed, 0xA11)
    s = cfg.init_scale

    def w(fan_in, shape):
        return rng.normal(0.0, s * np.sqrt(2.0 / fan_in), size=shape)

    sweep = cfg.cells
    return ParamSet({
        "gaze/trunk_w": w(cfg.feat, (cfg.feat, cfg.gaze_hidden)),
        "gaze/trunk_b": np.zeros(cfg.gaze_hidden),
        "gaze/head_w": w(cfg.gaze_hidden, (cfg.gaze_hidden, 1)),
        "gaze/head_b": np.zeros(1),
        "recog/trunk_w": w(cfg.feat, (cfg.feat, cfg.trunk_width)),
        "recog/trunk_b": np.zeros(cfg.trunk_width),
        "recog/attn_w": ATTN_INIT_GAIN * np.eye(sweep) + w(sweep, (sweep, sweep)),
        "recog/attn_b": np.full(sweep, ATTN_INIT_BIAS),
        "recog/head1_w": w(cfg.trunk_width, (cfg.trunk_width, cfg.recog_hidden)),
        "recog/head1_b": np.zeros(cfg.recog_hidden),
        "recog/head2_w": w(cfg.recog_hidden, (cfg.recog_hidden, cfg.classes)),
        "recog/head2_b": np.zeros(cfg.classes),
    })


def constants(params: ParamSet) -> dict[str, Tensor]:
    """Wrap parameter arrays as constant tensors (no gradients recorded)."""
    return {name: Tensor(arr) for name, arr in params.items()}


# ---------------------------------------------------------------------------
# batched internals; x5 is (B, T, H, W, F)


def _check_x(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    expect = (cfg.t, cfg.h, cfg.w, cfg.feat)
    if x.shape[-4:] != expect or x.ndim not in (4, 5):
        raise ad.ShapeMismatchError(f"input grid {x.shape}, expected (..., {expect})")
    return x if x.ndim == 5 else x[None]


def _gaze_logprobs_b(x5: np.ndarray, w: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, T, H*W) log-probs, normalized per timestep."""
    b = x5.shape[0]
    xc = Tensor(x5.reshape(b * cfg.cells, cfg.feat))
    h1 = ad.relu(ad.affine(xc, w["gaze/trunk_w"], w["gaze/trunk_b"]))
    logits = ad.affine(h1, w["gaze/head_w"], w["gaze/head_b"])
    grouped = ad.reshape(logits, (b, cfg.t, cfg.h * cfg.w))
    return ad.log_softmax(grouped, axis=-1)


def _attention_b(z_flat: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    """(B, T*H*W) gating values from flattened latents (one-hot or simplex)."""
    return ad.sigmoid(ad.affine(z_flat, w["recog/attn_w"], w["recog/attn_b"]))


def _trunk_features_b(x5: np.ndarray, w: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    b = x5.shape[0]
    xc = Tensor(x5.reshape(b * cfg.cells, cfg.feat))
    h1 = ad.relu(ad.affine(xc, w["recog/trunk_w"], w["recog/trunk_b"]))
    return ad.reshape(h1, (b, cfg.cells, cfg.trunk_width))


def _gate_b(feats: Tensor, attn: Tensor, residual: str) -> Tensor:
    """Apply attention via a residual connection; feats (B, cells, D), attn (B, cells)."""
    b, cells, d = feats.shape
    a3 = ad.broadcast_to(ad.reshape(attn, (b, cells, 1)), (b, cells, d))
    if residual == "multiplicative-residual":
        return ad.add(feats, ad.mul(feats, a3))
    return ad.add(feats, a3)


def _head_logprobs_b(pooled: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    h1 = ad.relu(ad.affine(pooled, w["recog/head1_w"], w["recog/head1_b"]))
    logits = ad.affine(h1, w["recog/head2_w"], w["recog/head2_b"])
    return ad.log_softmax(logits, axis=-1)


def _class_logprobs_b(x5: np.ndarray, z_flat: Tensor | None,
                      w: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, C) class log-probs; ``z_flat`` None skips attention entirely."""
    feats = _trunk_features_b(x5, w, cfg)
    if z_flat is not None:
        gated = _gate_b(feats, _attention_b(z_flat, w), cfg.residual)
    else:
        gated = feats
    pooled = ad.reduce_mean(gated, axis=1)
    return _head_logprobs_b(pooled, w)


def _flat_onehot_rows(flat_ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, T) flat cell ids -> (B, T*H*W) structured one-hot rows."""
    b, t = flat_ids.shape
    rows = np.zeros((b, cfg.cells))
    rows[np.arange(b)[:, None], flat_ids + np.arange(t) * (cfg.h * cfg.w)] = 1.0
    return rows


def _grid_onehot(flat_ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, T) flat cell ids -> (B, T, H*W) per-timestep one-hots."""
    b, t = flat_ids.shape
    out = np.zeros((b, t, cfg.h * cfg.w))
    bb, tt = np.meshgrid(np.arange(b), np.arange(t), indexing="ij")
    out[bb, tt, flat_ids] = 1.0
    return out


# ---------------------------------------------------------------------------
# public single-example ops


def gaze_logits(x: np.ndarray, params: ParamSet | Mapping[str, Tensor],
                cfg: ModelConfig) -> GazeDistribution:
    """Gaze distribution for one input grid, deterministic given parameters."""
    w = constants(params) if isinstance(params, ParamSet) else params
    x5 = _check_x(x, cfg)
    lp = _gaze_logprobs_b(x5, w, cfg)
    return GazeDistribution(ad.reshape(lp, (cfg.t, cfg.h, cfg.w)))


def _z_to_flat_tensor(z, cfg: ModelConfig) -> Tensor:
    if isinstance(z, GazeLatent):
        return Tensor(z.flat[None])
    if isinstance(z, Tensor):
        flat = ad.reshape(z, (1, cfg.cells)) if z.data.ndim != 2 else z
        return flat
    arr = np.asarray(z, dtype=np.float64)
    return Tensor(arr.reshape(1, cfg.cells))


def attention_map(z, params: ParamSet | Mapping[str, Tensor], cfg: ModelConfig) -> AttentionMap:
    """Soft attention from a latent: sigmoid of a linear map of flatten(z)."""
    w = constants(params) if isinstance(params, ParamSet) else params
    a = _attention_b(_z_to_flat_tensor(z, cfg), w)
    return AttentionMap(ad.reshape(a, (cfg.t, cfg.h, cfg.w)))


def apply_attention(features: Tensor | np.ndarray, attn: AttentionMap | Tensor,
                    residual: str = "multiplicative-residual") -> Tensor:
    """Gate features (T, H, W, D) with an attention map via a residual."""
    f = ad.as_tensor(features)
    a = attn.tensor if isinstance(attn, AttentionMap) else ad.as_tensor(attn)
    t, h, w, d = f.shape
    if a.shape != (t, h, w):
        raise ad.ShapeMismatchError(f"apply_attention: features {f.shape}, attn {a.shape}")
    gated = _gate_b(ad.reshape(f, (1, t * h * w, d)), ad.reshape(a, (1, t * h * w)), residual)
    return ad.reshape(gated, (t, h, w, d))


def class_loglik(x: np.ndarray, z, params: ParamSet | Mapping[str, Tensor],
                 cfg: ModelConfig) -> Tensor:
    """Per-class log-probabilities for one input under one latent.

    ``z`` may be a GazeLatent, a flattened one-hot/simplex array, a live
    tensor, or None to skip attention.
    """
    w = constants(params) if isinstance(params, ParamSet) else params
    x5 = _check_x(x, cfg)
    zf = None if z is None else _z_to_flat_tensor(z, cfg)
    lp = _class_logprobs_b(x5, zf, w, cfg)
    return ad.reshape(lp, (cfg.classes,))


# ---------------------------------------------------------------------------
# prior and divergence


def _box_blur(grids: np.ndarray, k: int) -> np.ndarray:
    """Same-size k x k box filter with zero padding; grids (T, H, W)."""
    r = k // 2
    t, h, w = grids.shape
    out = np.zeros_like(grids)
    for dh in range(-r, r + 1):
        for dw in range(-r, r + 1):
            hs, he = max(0, dh), h + min(0, dh)
            ws, we = max(0, dw), w + min(0, dw)
            out[:, hs:he, ws:we] += grids[:, hs - dh:he - dh, ws - dw:we - dw]
    return out / (k * k)


def smoothed_prior(gaze_gt: np.ndarray | None, cfg: ModelConfig) -> GazePrior:
    """Prior over latents: blurred, floored ground-truth gaze, else uniform.

    Flooring mixes in ``prior_floor`` of uniform mass so every entry stays at
    or above the floor after normalization.
    """
    hw = cfg.h * cfg.w
    if gaze_gt is None:
        return GazePrior(np.full((cfg.t, cfg.h, cfg.w), 1.0 / hw), "uniform")
    gaze_gt = np.asarray(gaze_gt, dtype=np.int64)
    onehot = np.zeros((cfg.t, cfg.h, cfg.w))
    onehot[np.arange(cfg.t), gaze_gt[:, 0], gaze_gt[:, 1]] = 1.0
    blurred = _box_blur(onehot, cfg.prior_blur)
    blurred /= blurred.reshape(cfg.t, -1).sum(axis=-1)[:, None, None]
    probs = (1.0 - hw * cfg.prior_floor) * blurred + cfg.prior_floor
    return GazePrior(probs, "ground-truth-smoothed")


def gaze_kl(q: GazeDistribution, prior: GazePrior) -> Tensor:
    """KL divergence sum_t sum_hw q (log q - log prior); >= 0, 0 iff q == prior."""
    if np.any(prior.probs <= 0.0):
        raise ValueError("prior contains non-positive entries")
    t, h, w = q.log_probs.shape
    lq = ad.reshape(q.log_probs, (t * h * w,))
    diff = ad.add(lq, Tensor(-np.log(prior.probs.ravel())))
    return ad.reduce_sum(ad.mul(ad.exp(lq), diff))


def _kl_b(lq: Tensor, prior_probs: np.ndarray, cfg: ModelConfig) -> Tensor:
    """(B,) KL values; lq (B, T, HW), prior_probs (B, T, H, W)."""
    b = prior_probs.shape[0]
    flat = ad.reshape(lq, (b, cfg.cells))
    diff = ad.add(flat, Tensor(-np.log(prior_probs.reshape(b, cfg.cells))))
    return ad.reduce_sum(ad.mul(ad.exp(flat), diff), axis=-1)


def _forward_ce_b(lq: Tensor, gt_flat: np.ndarray, cfg: ModelConfig) -> Tensor:
    """(B,) cross-entropy of the annotation against q: -sum_t log q[t, gt_t]."""
    picked = ad.gather_onehot(lq, _grid_onehot(gt_flat, cfg))
    return ad.scalar_mul(ad.reduce_sum(picked, axis=-1), -1.0)


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class LossOutput:
    loss: float
    nll: float
    kl: float
    grads: dict[str, np.ndarray]
    sampled: np.ndarray | None  # (B, T) flat cell ids
    perturbed: np.ndarray | None
    pred_class: np.ndarray  # (B,)


def _supervision_term(lq: Tensor, gaze_gt: np.ndarray | None, cfg: ModelConfig,
                      b: int, priors: np.ndarray | None = None) -> Tensor:
    if cfg.gaze_supervision == "forward-ce" and gaze_gt is not None:
        gt_flat = index_to_flat(gaze_gt, cfg.dims)
        per = _forward_ce_b(lq, gt_flat, cfg)
    else:
        if priors is None:
            if gaze_gt is None:
                priors = np.broadcast_to(
                    np.full((cfg.t, cfg.h, cfg.w), 1.0 / (cfg.h * cfg.w)),
                    (b, cfg.t, cfg.h, cfg.w),
                ).copy()
            else:
                priors = np.stack([smoothed_prior(g, cfg).probs for g in gaze_gt])
        per = _kl_b(lq, priors, cfg)
    return ad.scalar_mul(ad.reduce_mean(per), cfg.lambda_kl)


def precompute_priors(gaze_gt: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(N, T, H, W) smoothed priors for a whole dataset, computed once."""
    return np.stack([smoothed_prior(g, cfg).probs for g in gaze_gt])


def loglik_table_values(feat_values: np.ndarray, params: ParamSet, ys: np.ndarray,
                        base_flat: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Per-cell class log-likelihood contributions, batched, off tape.

    ``feat_values`` (B, cells, D) are recognition trunk outputs;
    ``base_flat`` (B, T) is the sampled latent each sweep is conditioned on.
    Entry [b, t, c] is the log-likelihood of class ys[b] with timestep t
    placed at cell c and the rest at the base. One fused pass covers the
    whole T*H*W sweep: a one-hot edit changes the attention logits by one
    row swap of the linear map, and gating + mean pooling collapse to a
    single matrix product.
    """
    b, cells, d = feat_values.shape
    t, hw = cfg.t, cfg.h * cfg.w
    # the table only drives argmaxes, so the big sweep runs in float32;
    # identical inputs still produce bitwise-identical rows
    w_attn = params["recog/attn_w"].astype(np.float32)
    b_attn = params["recog/attn_b"].astype(np.float32)
    offsets = base_flat + np.arange(t) * hw  # (B, T) rows of W selected by base
    picked = w_attn[offsets]  # (B, T, cells)
    base_logits = picked.sum(axis=1) + b_attn  # (B, cells)
    w_rows = w_attn.reshape(t, hw, cells)
    var_logits = (base_logits[:, None, None, :]
                  - picked[:, :, None, :]
                  + w_rows[None])  # (B, T, HW, cells)
    attn = 1.0 / (1.0 + np.exp(-var_logits))
    feat32 = feat_values.astype(np.float32)
    mean_feat = feat_values.mean(axis=1)  # (B, D)
    if cfg.residual == "multiplicative-residual":
        gated = np.matmul(attn.reshape(b, t * hw, cells), feat32).astype(np.float64) / cells
        pooled = mean_feat[:, None, :] + gated  # (B, T*HW, D)
    else:
        pooled = mean_feat[:, None, :] + attn.reshape(b, t * hw, cells).astype(
            np.float64).mean(axis=-1)[..., None]
    h1 = np.maximum(pooled @ params["recog/head1_w"] + params["recog/head1_b"], 0.0)
    logits = h1 @ params["recog/head2_w"] + params["recog/head2_b"]  # (B, T*HW, C)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    table = logp[np.arange(b)[:, None], :, ys[:, None]].reshape(b, t, hw)
    if not np.all(np.isfinite(table)):
        raise ad.EvaluationError("non-finite class log-likelihood table")
    return table


def minibatch_loss(xs: np.ndarray, ys: np.ndarray, gaze_gt: np.ndarray | None,
                   params: ParamSet, cfg: ModelConfig, mode: str, *,
                   eps: float | None = None, tau: float | None = None,
                   rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None, draws: int = 1,
                   frozen: tuple[np.ndarray, np.ndarray] | None = None,
                   priors: np.ndarray | None = None) -> LossOutput:
    """One loss evaluation with gradient routing for a batch of examples.

    Gradients: recognition parameters by backprop through the sampled (or
    relaxed / ground-truth / absent) attention path; gaze parameters by the
    mode's estimator plus the supervision term. ``noise`` or ``frozen``
    override sampling for deterministic tests.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    xs = _check_x(xs, cfg)
    b = xs.shape[0]
    ys = np.asarray(ys, dtype=np.int64).reshape(b)
    hw = cfg.h * cfg.w
    y_onehot = np.zeros((b, cfg.classes))
    y_onehot[np.arange(b), ys] = 1.0
    if mode == "gt-gaze" and gaze_gt is None:
        raise ConfigError("gt-gaze mode requires gaze annotations")

    sampled = perturbed = None
    with Tape() as tape:
        w = tape.watch(params)
        kl_term = None
        if mode == "direct":
            if eps is None or eps <= 0:
                raise ConfigError("direct mode requires eps > 0")
            lq = _gaze_logprobs_b(xs, w, cfg)
            feats = _trunk_features_b(xs, w, cfg)
            nll_terms, surr_terms = [], []
            for d in range(draws):
                if frozen is not None:
                    z_flat, zeta_flat = frozen
                else:
                    nv = noise if noise is not None else gumbel_values(rng, (b, cfg.t, hw))
                    z_flat = (lq.data + nv).argmax(axis=-1)
                    table = loglik_table_values(feats.data, params, ys, z_flat, cfg)
                    zeta_flat = (eps * table.reshape(b, cfg.t, hw) + lq.data + nv).argmax(axis=-1)
                z_rows = _flat_onehot_rows(z_flat, cfg)
                gated = _gate_b(feats, _attention_b(Tensor(z_rows), w), cfg.residual)
                logp = _head_logprobs_b(ad.reduce_mean(gated, axis=1), w)
                nll_terms.append(ad.neg(ad.reduce_mean(ad.gather_onehot(logp, y_onehot))))
                h_z = ad.reduce_sum(ad.gather_onehot(lq, _grid_onehot(z_flat, cfg)), axis=-1)
                h_zeta = ad.reduce_sum(ad.gather_onehot(lq, _grid_onehot(zeta_flat, cfg)), axis=-1)
                surr_terms.append(ad.scalar_mul(ad.reduce_mean(ad.sub(h_zeta, h_z)), -1.0 / eps))
            nll = _mean_terms(nll_terms)
            surrogate = _mean_terms(surr_terms)
            kl_term = _supervision_term(lq, gaze_gt, cfg, b, priors=priors)
            total = ad.add(ad.add(nll, surrogate), kl_term)
            sampled, perturbed = z_flat, zeta_flat
            class_logp = logp
        elif mode == "gumbel-softmax":
            if tau is None or tau <= 0:
                raise ConfigError("gumbel-softmax mode requires tau > 0")
            lq = _gaze_logprobs_b(xs, w, cfg)
            nv = noise if noise is not None else gumbel_values(rng, (b, cfg.t, hw))
            relaxed = ad.exp(ad.log_softmax(
                ad.scalar_mul(ad.add(lq, Tensor(nv)), 1.0 / tau), axis=-1))
            sampled = (lq.data + nv).argmax(axis=-1)
            logp = _class_logprobs_b(xs, ad.reshape(relaxed, (b, cfg.cells)), w, cfg)
            nll = ad.neg(ad.reduce_mean(ad.gather_onehot(logp, y_onehot)))
            kl_term = _supervision_term(lq, gaze_gt, cfg, b, priors=priors)
            total = ad.add(nll, kl_term)
            class_logp = logp
        elif mode == "gt-gaze":
            gt_flat = index_to_flat(gaze_gt, cfg.dims)
            logp = _class_logprobs_b(xs, Tensor(_flat_onehot_rows(gt_flat, cfg)), w, cfg)
            nll = ad.neg(ad.reduce_mean(ad.gather_onehot(logp, y_onehot)))
            total = nll
            class_logp = logp
        else:  # none
            logp = _class_logprobs_b(xs, None, w, cfg)
            nll = ad.neg(ad.reduce_mean(ad.gather_onehot(logp, y_onehot)))
            total = nll
            class_logp = logp
    grads = backward(tape, total)
    kl_value = float(kl_term.data) if kl_term is not None else 0.0
    return LossOutput(
        loss=float(nll.data) + kl_value,
        nll=float(nll.data),
        kl=kl_value,
        grads=grads,
        sampled=sampled,
        perturbed=perturbed,
        pred_class=class_logp.data.argmax(axis=-1),
    )


def _mean_terms(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scalar_mul(acc, 1.0 / len(terms)) if len(terms) > 1 else acc


def total_loss(x: np.ndarray, y: int, gaze_gt: np.ndarray | None, params: ParamSet,
               cfg: ModelConfig, mode: str, **kwargs) -> LossOutput:
    """Single-example loss with gradient routing; see :func:`minibatch_loss`."""
    gt = None if gaze_gt is None else np.asarray(gaze_gt)[None]
    return minibatch_loss(x[None] if np.asarray(x).ndim == 4 else x,
                          np.array([y]), gt, params, cfg, mode, **kwargs)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class Prediction:
    class_id: int
    gaze: np.ndarray | None  # (T, 2)
    attention: AttentionMap | None


def predict_batch(xs: np.ndarray, params: ParamSet, cfg: ModelConfig,
                  mode: str = "direct", gaze_gt: np.ndarray | None = None):
    """Deterministic batched prediction: MAP gaze, then class argmax.

    Returns (classes (B,), gaze (B, T, 2) or None, attention (B, T, H, W) or
    None, class log-probs (B, C)).
    """
    xs = _check_x(xs, cfg)
    b = xs.shape[0]
    w = constants(params)
    gaze_idx = attn = None
    if mode in ("direct", "gumbel-softmax"):
        lq = _gaze_logprobs_b(xs, w, cfg).data
        flat = lq.argmax(axis=-1)
        gaze_idx = np.stack([flat // cfg.w, flat % cfg.w], axis=-1)
        z_rows = _flat_onehot_rows(flat, cfg)
    elif mode == "gt-gaze":
        if gaze_gt is None:
            raise ConfigError("gt-gaze mode requires gaze annotations at test time")
        flat = index_to_flat(gaze_gt, cfg.dims)
        gaze_idx = np.asarray(gaze_gt)
        z_rows = _flat_onehot_rows(flat, cfg)
    else:
        z_rows = None
    if z_rows is not None:
        attn = _attention_b(Tensor(z_rows), w).data.reshape(b, cfg.t, cfg.h, cfg.w)
        logp = _class_logprobs_b(xs, Tensor(z_rows), w, cfg).data
    else:
        logp = _class_logprobs_b(xs, None, w, cfg).data
    return logp.argmax(axis=-1), gaze_idx, attn, logp


def predict(x: np.ndarray, params: ParamSet, cfg: ModelConfig) -> Prediction:
    """MAP gaze from the learned distribution, then the class under it."""
    classes, gaze, attn, _ = predict_batch(x, params, cfg, mode="direct")
    return Prediction(
        class_id=int(classes[0]),
        gaze=gaze[0],
        attention=AttentionMap(Tensor(attn[0])),
    )


def dump_predictions(path, records) -> None:
    """Write one JSON object per example: ids, classes, gaze traces, attention stats."""
    with open(path, "w") as f:
        for rec in records:
            attn = np.asarray(rec["attention"])
            f.write(json.dumps({
                "id": rec["id"],
                "true_class": int(rec["true_class"]),
                "pred_class": int(rec["pred_class"]),
                "gaze_pred": trace_to_json(rec["gaze_pred"]) if rec.get("gaze_pred") is not None else None,
                "gaze_gt": trace_to_json(rec["gaze_gt"]) if rec.get("gaze_gt") is not None else None,
                "attn_stats": {
                    "min": float(attn.min()),
                    "max": float(attn.max()),
                    "mean": float(attn.mean()),
                },
            }) + "\n")
