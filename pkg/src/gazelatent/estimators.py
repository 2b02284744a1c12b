"""Gradient estimators for the expected class log-likelihood over latents.

All estimators target the same quantity: the gradient, w.r.t. the gaze
network parameters, of E_{z ~ q}[log p(y | x, z)]. They are:

* an exact enumeration oracle (small latent spaces only),
* the class-wise direct estimator: scaled difference of gaze log-prob
  gradients at a perturbed argmax and the plain max-trick sample,
* the temperature-relaxed (Gumbel-Softmax) surrogate,
* a score-function (REINFORCE) baseline,

plus a bias/variance profiler that measures each against the oracle.

Within one replicate the same noise drives both argmaxes (common random
numbers), which is what makes constant tables contribute exactly zero.
Replicate noise comes from counter-based streams derived per fixed-size
chunk, so results never depend on scheduling.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from gazelatent import autodiff as ad
from gazelatent.autodiff import ParamSet, Tape, Tensor, backward, flatten_grads
from gazelatent.gumbel import gumbel_values, substream
from gazelatent.latent import ENUMERATION_CAP, EnumerationCapError, config_onehot_matrix
from gazelatent.model import (
    ModelConfig,
    _class_logprobs_b,
    _gaze_logprobs_b,
    _trunk_features_b,
    constants,
    init_params,
    loglik_table_values,
)

REPLICATE_CHUNK = 4096
_NOISE_DOMAIN = 0xD1


def worker_count() -> int:
    """Parallelism cap from GAZE_LATENT_THREADS; 0 or unset means auto."""
    raw = os.environ.get("GAZE_LATENT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"GAZE_LATENT_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ValueError("GAZE_LATENT_THREADS must be non-negative")
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class ProblemInstance:
    """One (input, label, parameters) triple the estimators are probed on."""

    x: np.ndarray
    y: int
    params: ParamSet
    cfg: ModelConfig


def standard_instance(seed: int = 1234) -> ProblemInstance:
    """Default profiling instance: T=2, H=W=4, C=4, fixed seed.

    Small enough for the 256-configuration oracle, structured enough that
    latent placement genuinely moves the class log-likelihood: the input
    carries a true-class token and a distractor-class token per timestep
    over a weak background, the attention map and class head are scaled up,
    and the head bias is centered so the classifier is undecided at mean
    attention. Without that structure the log-likelihood table is nearly
    flat and every estimator's signal drowns in Monte-Carlo noise.
    """
    cfg = ModelConfig(t=2, h=4, w=4, feat=8, classes=4,
                      trunk_width=8, gaze_hidden=8, recog_hidden=8,
                      prior_floor=1e-3)
    rng = substream(seed, 0x1157)
    x = rng.normal(size=(cfg.t, cfg.h, cfg.w, cfg.feat)) * 0.2
    y = int(rng.integers(0, cfg.classes))
    distractor = (y + 1) % cfg.classes
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.feat, cfg.feat)))
    for t in range(cfg.t):
        ca, cb = rng.choice(cfg.h * cfg.w, size=2, replace=False)
        x[t, ca // cfg.w, ca % cfg.w] += 6.0 * basis[:, y]
        x[t, cb // cfg.w, cb % cfg.w] += 6.0 * basis[:, distractor]
    params = init_params(cfg, seed)
    from gazelatent.model import ATTN_INIT_GAIN  # strip the identity init: the
    # instance wants a generic random attention map, scaled for real effect
    noise = params["recog/attn_w"] - ATTN_INIT_GAIN * np.eye(cfg.cells)
    params["recog/attn_w"] = 6.0 * noise
    params["recog/attn_b"] = np.zeros(cfg.cells)
    params["recog/head2_w"] = params["recog/head2_w"] * 16.0
    feats = _trunk_features_b(x[None], constants(params), cfg).data[0]
    pooled = 1.5 * feats.mean(axis=0)  # mean attention of one half
    h1 = np.maximum(pooled @ params["recog/head1_w"] + params["recog/head1_b"], 0.0)
    params["recog/head2_b"] = -(h1 @ params["recog/head2_w"])
    return ProblemInstance(x=x, y=y, params=params, cfg=cfg)


@dataclass
class GradEstimate:
    """Mean gradient over replicates for the gaze group, with diagnostics."""

    grads: dict[str, np.ndarray]
    eps: float | None
    tau: float | None
    replicates: int
    variance_trace: float
    param_names: list[str]
    per_replicate: np.ndarray | None = None  # (N, P) flat rows when retained

    def mean_flat(self) -> np.ndarray:
        return flatten_grads(self.grads, self.param_names)

    def sum_sq_norm(self) -> float:
        mean = self.mean_flat()
        return self.replicates * (self.variance_trace + float(mean @ mean))


def _unflatten(flat: np.ndarray, params: ParamSet, group: str) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, arr in params.items(group):
        out[name] = flat[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return out


# ---------------------------------------------------------------------------
# shared per-instance precomputations


@dataclass
class _GazeLinearization:
    """Gaze log-probs and their per-cell parameter Jacobian for one input."""

    logq: np.ndarray  # (T, HW)
    jac: np.ndarray  # (T*HW, P): d logq[t, c] / d gaze-params, flattened
    names: list[str]
    _gram: np.ndarray | None = field(default=None, repr=False)

    @property
    def gram(self) -> np.ndarray:
        if self._gram is None:
            self._gram = self.jac @ self.jac.T
        return self._gram


def _linearize_gaze(x: np.ndarray, params: ParamSet, cfg: ModelConfig) -> _GazeLinearization:
    hw = cfg.h * cfg.w
    names = params.names("gaze")
    with Tape() as tape:
        w = {n: Tensor(a) for n, a in params.items("recog")} | tape.watch(params, "gaze")
        lq = _gaze_logprobs_b(x[None], w, cfg)
        picks = []
        for t in range(cfg.t):
            for c in range(hw):
                onehot = np.zeros((1, cfg.t, hw))
                onehot[0, t, c] = 1.0
                picks.append(ad.reduce_sum(ad.gather_onehot(lq, onehot)))
    rows = [flatten_grads(backward(tape, p), names) for p in picks]
    return _GazeLinearization(logq=lq.data[0], jac=np.stack(rows), names=names)


def _config_class_logprobs(x: np.ndarray, params: ParamSet, cfg: ModelConfig,
                           rows: np.ndarray) -> np.ndarray:
    """(M, C) class log-probs for M flattened latent rows, off tape.

    Shares the recognition trunk across rows; attention + mean pooling
    collapse to one matrix product per row block.
    """
    feats = _trunk_features_b(x[None], constants(params), cfg).data[0]  # (cells, D)
    attn = 1.0 / (1.0 + np.exp(-(rows @ params["recog/attn_w"] + params["recog/attn_b"])))
    if cfg.residual == "multiplicative-residual":
        pooled = feats.mean(axis=0)[None] + (attn @ feats) / cfg.cells
    else:
        pooled = feats.mean(axis=0)[None] + attn.mean(axis=-1)[:, None]
    h1 = np.maximum(pooled @ params["recog/head1_w"] + params["recog/head1_b"], 0.0)
    logits = h1 @ params["recog/head2_w"] + params["recog/head2_b"]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# exact enumeration oracle


def _exact_value_and_grads(x, y, params, cfg, cap, f_override=None):
    dims = cfg.dims
    if dims.cardinality > cap:
        raise EnumerationCapError(
            f"structured space has {dims.cardinality} configurations, cap is {cap}"
        )
    rows = config_onehot_matrix(dims, cap)  # (Z, sweep)
    if f_override is not None:
        f_all = np.asarray(f_override, dtype=np.float64)
    else:
        f_all = _config_class_logprobs(x, params, cfg, rows)[:, y]  # (Z,)
    with Tape() as tape:
        w = {n: Tensor(a) for n, a in params.items("recog")} | tape.watch(params, "gaze")
        lq = _gaze_logprobs_b(x[None], w, cfg)
        h_all = ad.matmul(Tensor(rows), ad.reshape(lq, (cfg.cells, 1)))  # (Z, 1) log q(z)
        weighted = ad.mul(ad.exp(h_all), Tensor(f_all[:, None]))
        value = ad.reduce_sum(weighted)
    grads = backward(tape, value)
    return float(value.data), grads


def exact_expected_loglik(x: np.ndarray, y: int, params: ParamSet, cfg: ModelConfig,
                          cap: int = ENUMERATION_CAP) -> float:
    """E_{z ~ q}[log p(y | x, z)] by full enumeration of the latent space."""
    value, _ = _exact_value_and_grads(x, y, params, cfg, cap)
    return value


def exact_grad_phi(x: np.ndarray, y: int, params: ParamSet, cfg: ModelConfig,
                   cap: int = ENUMERATION_CAP) -> dict[str, np.ndarray]:
    """Exact gaze-parameter gradient of the enumerated expectation."""
    _, grads = _exact_value_and_grads(x, y, params, cfg, cap)
    return {n: grads[n] for n in params.names("gaze")}


# ---------------------------------------------------------------------------
# direct estimator


def _chunks(total: int):
    start = 0
    idx = 0
    while start < total:
        n = min(REPLICATE_CHUNK, total - start)
        yield idx, n
        start += n
        idx += 1


def direct_grad(x: np.ndarray, y: int, params: ParamSet, cfg: ModelConfig, *,
                eps: float, seed: int, replicates: int, stream: tuple = (),
                retain: bool = False) -> GradEstimate:
    """Class-wise direct estimator of the gaze-parameter gradient.

    Per replicate: draw Gumbel noise, take the max-trick sample, build the
    per-cell log-likelihood table around it in one batched sweep, re-argmax
    with the table scaled by ``eps``, and average the scaled difference of
    gaze log-prob gradients at the two samples. Only the true class's table
    is ever evaluated; the indicator kills every other class term.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    hw = cfg.h * cfg.w
    lin = _linearize_gaze(x, params, cfg)
    feats = _trunk_features_b(x[None], constants(params), cfg).data[0]
    t_off = np.arange(cfg.t) * hw

    p = lin.jac.shape[1]
    count = np.zeros(cfg.cells)
    sum_sq = 0.0
    retained = np.zeros((replicates, p)) if retain else None
    done = 0
    for chunk_idx, n in _chunks(replicates):
        rng = substream(seed, *stream, _NOISE_DOMAIN, chunk_idx)
        noise = gumbel_values(rng, (n, cfg.t, hw))
        scores = lin.logq[None] + noise
        z = scores.argmax(axis=-1)  # (n, T)
        table = loglik_table_values(
            np.broadcast_to(feats, (n, cfg.cells, feats.shape[-1])), params,
            np.full(n, y, dtype=np.int64), z, cfg)
        zeta = (eps * table + scores).argmax(axis=-1)
        z_off = z + t_off
        zeta_off = zeta + t_off
        np.add.at(count, zeta_off.ravel(), 1.0)
        np.add.at(count, z_off.ravel(), -1.0)
        g_pp = lin.gram[zeta_off[:, :, None], zeta_off[:, None, :]].sum(axis=(1, 2))
        g_zz = lin.gram[z_off[:, :, None], z_off[:, None, :]].sum(axis=(1, 2))
        g_pz = lin.gram[zeta_off[:, :, None], z_off[:, None, :]].sum(axis=(1, 2))
        sum_sq += float((g_pp + g_zz - 2.0 * g_pz).sum()) / eps**2
        if retain:
            rows = (lin.jac[zeta_off].sum(axis=1) - lin.jac[z_off].sum(axis=1)) / eps
            retained[done:done + n] = rows
        done += n

    mean_flat = (count @ lin.jac) / (replicates * eps)
    variance = sum_sq / replicates - float(mean_flat @ mean_flat)
    return GradEstimate(
        grads=_unflatten(mean_flat, params, "gaze"),
        eps=eps, tau=None, replicates=replicates,
        variance_trace=max(variance, 0.0),
        param_names=lin.names,
        per_replicate=retained,
    )


def direct_grad_batch(xs: np.ndarray, ys: np.ndarray, params: ParamSet,
                      cfg: ModelConfig, *, eps: float, seed: int,
                      replicates: int) -> GradEstimate:
    """Batch semantics: the mean of per-example estimates (gradients are linear)."""
    singles = [
        direct_grad(xs[i], int(ys[i]), params, cfg, eps=eps, seed=seed,
                    replicates=replicates, stream=(i,))
        for i in range(len(xs))
    ]
    names = singles[0].param_names
    flat = np.mean([s.mean_flat() for s in singles], axis=0)
    return GradEstimate(
        grads=_unflatten(flat, params, "gaze"), eps=eps, tau=None,
        replicates=replicates * len(xs),
        variance_trace=float(np.mean([s.variance_trace for s in singles])),
        param_names=names,
    )


# ---------------------------------------------------------------------------
# relaxed (Gumbel-Softmax) estimator


def gumbel_softmax_grad(x: np.ndarray, y: int, params: ParamSet, cfg: ModelConfig, *,
                        tau: float, seed: int, replicates: int, stream: tuple = (),
                        retain: bool = False) -> GradEstimate:
    """Relaxed-sample surrogate gradient, one backward pass per replicate.

    The per-timestep softmax of noisy logits replaces the one-hot latent in
    the attention path and the class log-likelihood is backpropagated
    through it to the gaze parameters. Biased for any tau > 0.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    hw = cfg.h * cfg.w
    names = params.names("gaze")
    y_onehot = np.zeros((1, cfg.classes))
    y_onehot[0, y] = 1.0
    recog_consts = {n: Tensor(a) for n, a in params.items("recog")}

    sum_flat = None
    sum_sq = 0.0
    retained = None
    done = 0
    for chunk_idx, n in _chunks(replicates):
        rng = substream(seed, *stream, _NOISE_DOMAIN, chunk_idx)
        noise = gumbel_values(rng, (n, cfg.t, hw))
        for i in range(n):
            with Tape() as tape:
                w = dict(recog_consts) | tape.watch(params, "gaze")
                lq = _gaze_logprobs_b(x[None], w, cfg)
                relaxed = ad.exp(ad.log_softmax(
                    ad.scalar_mul(ad.add(lq, Tensor(noise[i:i + 1])), 1.0 / tau), axis=-1))
                logp = _class_logprobs_b(x[None], ad.reshape(relaxed, (1, cfg.cells)), w, cfg)
                target = ad.reduce_sum(ad.gather_onehot(logp, y_onehot))
            flat = flatten_grads(backward(tape, target), names)
            if sum_flat is None:
                sum_flat = np.zeros_like(flat)
                if retain:
                    retained = np.zeros((replicates, flat.size))
            sum_flat += flat
            sum_sq += float(flat @ flat)
            if retain:
                retained[done] = flat
            done += 1

    mean_flat = sum_flat / replicates
    variance = sum_sq / replicates - float(mean_flat @ mean_flat)
    return GradEstimate(
        grads=_unflatten(mean_flat, params, "gaze"),
        eps=None, tau=tau, replicates=replicates,
        variance_trace=max(variance, 0.0),
        param_names=names,
        per_replicate=retained,
    )


# ---------------------------------------------------------------------------
# score-function baseline


def reinforce_grad(x: np.ndarray, y: int, params: ParamSet, cfg: ModelConfig, *,
                   seed: int, replicates: int, stream: tuple = (),
                   baseline: str | float | None = "moving-average",
                   retain: bool = False) -> GradEstimate:
    """Score-function estimator with a variance-reduction baseline.

    Per replicate: (log p(y | x, z) - baseline) times the gradient of the
    gaze log-prob at the sample. ``baseline`` is "moving-average" (mean of
    previous replicates' values, independent of the current sample so the
    estimator stays unbiased), a fixed float, or None.
    """
    if baseline == "moving-average" and replicates < 2:
        raise ValueError("need at least 2 replicates with the moving-average baseline")
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    hw = cfg.h * cfg.w
    lin = _linearize_gaze(x, params, cfg)
    t_off = np.arange(cfg.t) * hw

    p = lin.jac.shape[1]
    wcount = np.zeros(cfg.cells)
    sum_sq = 0.0
    retained = np.zeros((replicates, p)) if retain else None
    f_running_sum = 0.0
    done = 0
    for chunk_idx, n in _chunks(replicates):
        rng = substream(seed, *stream, _NOISE_DOMAIN, chunk_idx)
        noise = gumbel_values(rng, (n, cfg.t, hw))
        z = (lin.logq[None] + noise).argmax(axis=-1)
        z_off = z + t_off
        rows = np.zeros((n, cfg.cells))
        rows[np.arange(n)[:, None], z_off] = 1.0
        f_vals = _config_class_logprobs(x, params, cfg, rows)[:, y]
        if baseline == "moving-average":
            prior_counts = done + np.arange(n)
            prior_sums = f_running_sum + np.concatenate([[0.0], np.cumsum(f_vals[:-1])])
            baselines = np.where(prior_counts > 0, prior_sums / np.maximum(prior_counts, 1), 0.0)
        elif baseline is None:
            baselines = np.zeros(n)
        else:
            baselines = np.full(n, float(baseline))
        weights = f_vals - baselines
        np.add.at(wcount, z_off.ravel(), np.repeat(weights, cfg.t))
        g_zz = lin.gram[z_off[:, :, None], z_off[:, None, :]].sum(axis=(1, 2))
        sum_sq += float((weights**2 * g_zz).sum())
        if retain:
            retained[done:done + n] = weights[:, None] * lin.jac[z_off].sum(axis=1)
        f_running_sum += float(f_vals.sum())
        done += n

    mean_flat = (wcount @ lin.jac) / replicates
    variance = sum_sq / replicates - float(mean_flat @ mean_flat)
    return GradEstimate(
        grads=_unflatten(mean_flat, params, "gaze"),
        eps=None, tau=None, replicates=replicates,
        variance_trace=max(variance, 0.0),
        param_names=lin.names,
        per_replicate=retained,
    )


# ---------------------------------------------------------------------------
# profiler

ESTIMATOR_KINDS = ("exact", "direct", "gumbel-softmax", "reinforce")


@dataclass(frozen=True)
class EstimatorProfile:
    """Bias/variance summary of one estimator configuration on one instance."""

    bias_l2: float
    variance_trace: float
    exact_grad_norm: float
    settings: dict

    @property
    def relative_bias(self) -> float:
        return self.bias_l2 / self.exact_grad_norm if self.exact_grad_norm else np.inf


def _run_trial(kind, inst, replicates, eps, tau, seed, trial):
    if kind == "direct":
        return direct_grad(inst.x, inst.y, inst.params, inst.cfg, eps=eps,
                           seed=seed, replicates=replicates, stream=(trial,))
    if kind == "gumbel-softmax":
        return gumbel_softmax_grad(inst.x, inst.y, inst.params, inst.cfg, tau=tau,
                                   seed=seed, replicates=replicates, stream=(trial,))
    if kind == "reinforce":
        return reinforce_grad(inst.x, inst.y, inst.params, inst.cfg, seed=seed,
                              replicates=replicates, stream=(trial,))
    raise ValueError(f"unknown estimator kind {kind!r}")


def profile_estimator(kind: str, instance: ProblemInstance, trials: int,
                      replicates: int, *, eps: float | None = None,
                      tau: float | None = None, seed: int = 0) -> EstimatorProfile:
    """Measure bias and variance of an estimator against the exact oracle.

    Bias is the L2 distance between the pooled replicate mean (over all
    trials) and the exact gradient; variance-trace is the mean squared
    deviation of per-replicate gradients around their pooled mean, summed
    over parameter entries. Trials fan out across threads (capped by
    GAZE_LATENT_THREADS) and reduce in trial order.
    """
    if kind not in ESTIMATOR_KINDS:
        raise ValueError(f"estimator kind must be one of {ESTIMATOR_KINDS}")
    exact_flat = flatten_grads(
        exact_grad_phi(instance.x, instance.y, instance.params, instance.cfg),
        instance.params.names("gaze"))
    exact_norm = float(np.linalg.norm(exact_flat))
    settings = {"estimator": kind, "eps": eps, "tau": tau, "trials": trials,
                "replicates": replicates, "seed": seed}
    if kind == "exact":
        return EstimatorProfile(bias_l2=0.0, variance_trace=0.0,
                                exact_grad_norm=exact_norm, settings=settings)

    workers = min(worker_count(), trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda i: _run_trial(kind, instance, replicates, eps, tau, seed, i),
                range(trials)))
    else:
        results = [_run_trial(kind, instance, replicates, eps, tau, seed, i)
                   for i in range(trials)]

    total = trials * replicates
    pooled_mean = np.sum([r.mean_flat() * r.replicates for r in results], axis=0) / total
    pooled_sq = float(np.sum([r.sum_sq_norm() for r in results]))
    variance = pooled_sq / total - float(pooled_mean @ pooled_mean)
    return EstimatorProfile(
        bias_l2=float(np.linalg.norm(pooled_mean - exact_flat)),
        variance_trace=max(variance, 0.0),
        exact_grad_norm=exact_norm,
        settings=settings,
    )


PROFILE_CSV_COLUMNS = ("estimator", "eps_or_tau", "replicates", "bias_l2",
                       "variance_trace", "exact_norm", "seed")


def write_profile_csv(path, profiles) -> None:
    """Emit one row per profile with the fixed column set."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PROFILE_CSV_COLUMNS)
        for prof in profiles:
            s = prof.settings
            eps_or_tau = s.get("eps") if s.get("eps") is not None else s.get("tau")
            writer.writerow([
                s["estimator"],
                "" if eps_or_tau is None else repr(float(eps_or_tau)),
                s["trials"] * s["replicates"] if s["estimator"] != "exact" else 1,
                repr(prof.bias_l2),
                repr(prof.variance_trace),
                repr(prof.exact_grad_norm),
                s["seed"],
            ])
