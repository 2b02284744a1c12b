"""Config-driven training, evaluation and comparison reporting.

A run is fully determined by its RunConfig: task generation, parameter
init, batch sampling and estimator noise all derive from the config seed,
so identical configs reproduce identical metrics files bit for bit.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gazelatent.autodiff import EvaluationError, ParamSet, load_params, save_params
from gazelatent.gumbel import substream
from gazelatent.model import (
    ConfigError,
    MODES,
    ModelConfig,
    init_params,
    minibatch_loss,
    precompute_priors,
    predict_batch,
)
from gazelatent.synthtask import (
    Example,
    TaskConfig,
    gaze_hit_rate,
    generate_dataset,
    load_dataset,
    stack_examples,
)

_BATCH_DOMAIN = 0xB4
_ITER_NOISE_DOMAIN = 0x17E

METRICS_COLUMNS = ("iter", "loss", "nll", "kl", "eps", "train_acc",
                   "test_acc", "test_acc_star")


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; the last state has been saved."""


def epsilon_schedule(iteration: int, start: float, rate: float, floor: float) -> float:
    """Exponentially annealed perturbation scale, clamped at the floor."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if not (start >= floor > 0.0) or rate < 0.0:
        raise ValueError("need start >= floor > 0 and rate >= 0")
    return max(floor, start * float(np.exp(-rate * iteration)))


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 4e-5
    # learning rate divides by 10 at these fractions of the run
    lr_drops: tuple[float, ...] = (0.45, 0.83)

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")


@dataclass(frozen=True)
class EpsSchedule:
    start: float = 1000.0
    rate: float = 1e-3
    floor: float = 0.1

    def __post_init__(self):
        if not (self.start >= self.floor > 0):
            raise ConfigError("need eps start >= floor > 0")

    def at(self, iteration: int) -> float:
        return epsilon_schedule(iteration, self.start, self.rate, self.floor)


@dataclass(frozen=True)
class ModelSettings:
    trunk_width: int = 16
    gaze_hidden: int = 16
    recog_hidden: int = 32
    lambda_kl: float = 1.0
    prior_blur: int = 3
    prior_floor: float = 1e-3
    residual: str = "multiplicative-residual"
    gaze_supervision: str = "kl-qp"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    mode: str = "direct"
    iterations: int = 6000
    batch_size: int = 32
    draws: int = 1
    tau: float = 2.0
    eval_every: int = 500
    checkpoint_every: int = 0  # 0: checkpoint at the end only
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eps: EpsSchedule = field(default_factory=EpsSchedule)
    model: ModelSettings = field(default_factory=ModelSettings)
    task: TaskConfig = field(default_factory=TaskConfig)
    train_data: str | None = None
    test_data: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.batch_size < 1 or self.draws < 1:
            raise ConfigError("batch_size and draws must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    def model_config(self) -> ModelConfig:
        t = self.task
        m = self.model
        return ModelConfig(t=t.t, h=t.h, w=t.w, feat=t.feat, classes=t.classes,
                           **asdict(m))


_SECTION_TYPES = {"optimizer": OptimizerConfig, "eps": EpsSchedule,
                  "model": ModelSettings, "task": TaskConfig}


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from nested dicts, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            cls = _SECTION_TYPES[key]
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            allowed = set(cls.__dataclass_fields__)
            unknown = set(value) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
            if cls is OptimizerConfig and "lr_drops" in value:
                value = {**value, "lr_drops": tuple(value["lr_drops"])}
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {key!r} section: {e}") from e
        elif key in RunConfig.__dataclass_fields__:
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "seed" not in kwargs:
        raise ConfigError("config requires a seed")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def config_to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["optimizer"]["lr_drops"] = list(doc["optimizer"]["lr_drops"])
    return doc


def learning_rate_at(iteration: int, opt: OptimizerConfig, total: int) -> float:
    """Step size with divide-by-10 drops at the configured run fractions."""
    lr = opt.lr
    for frac in opt.lr_drops:
        if total > 0 and iteration >= int(frac * total):
            lr /= 10.0
    return lr


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    acc: float  # mean per-class recall
    acc_star: float  # overall fraction correct
    confusion: np.ndarray  # (C, C) counts, rows = true class
    hit_pred: float | None  # predicted gaze vs true informative cells
    hit_gt: float | None  # annotated gaze vs true informative cells
    per_class_recall: np.ndarray


def evaluate(params: ParamSet, mcfg: ModelConfig, examples: list[Example],
             mode: str, radius: int = 0, chunk: int = 256) -> EvalResult:
    """Accuracy metrics plus gaze hit-rates against the informative cells."""
    xs, ys, gaze_true, gaze_ann = stack_examples(examples)
    n = len(examples)
    preds = np.zeros(n, dtype=np.int64)
    gaze_pred = None
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        cls, gaze, _, _ = predict_batch(xs[sl], params, mcfg, mode=mode,
                                        gaze_gt=gaze_ann[sl])
        preds[sl] = cls
        if gaze is not None:
            if gaze_pred is None:
                gaze_pred = np.zeros((n, mcfg.t, 2), dtype=np.int64)
            gaze_pred[sl] = gaze
    confusion = np.zeros((mcfg.classes, mcfg.classes), dtype=np.int64)
    np.add.at(confusion, (ys, preds), 1)
    counts = confusion.sum(axis=1)
    recall = np.divide(np.diag(confusion), counts, out=np.zeros(mcfg.classes),
                       where=counts > 0)
    present = counts > 0
    return EvalResult(
        acc=float(recall[present].mean()),
        acc_star=float((preds == ys).mean()),
        confusion=confusion,
        hit_pred=None if gaze_pred is None else gaze_hit_rate(gaze_pred, gaze_true, radius),
        hit_gt=gaze_hit_rate(gaze_ann, gaze_true, radius),
        per_class_recall=recall,
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ParamSet
    final_eval: EvalResult
    metrics_path: Path
    checkpoint_path: Path
    wall_time_s: float


def _load_split(cfg: RunConfig) -> tuple[list[Example], list[Example]]:
    if cfg.train_data or cfg.test_data:
        if not (cfg.train_data and cfg.test_data):
            raise ConfigError("provide both train_data and test_data, or neither")
        return (load_dataset(cfg.train_data, cfg.task),
                load_dataset(cfg.test_data, cfg.task))
    return generate_dataset(cfg.task)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train(cfg: RunConfig, out_dir: str | Path) -> TrainResult:
    """SGD with momentum and weight decay over the configured loss.

    Writes metrics.csv (append-only, one row per iteration), the resolved
    config, a final checkpoint (plus periodic ones when configured) and a
    summary.json with the final evaluation. A non-finite loss saves the last
    state and raises DivergenceError.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.resolved.json", "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)

    train_set, test_set = _load_split(cfg)
    if not train_set and cfg.iterations > 0:
        raise ConfigError("cannot train on an empty training set")
    mcfg = cfg.model_config()
    params = init_params(mcfg, cfg.seed)
    velocity = params.zeros_like()
    xs, ys, _, gaze_ann = stack_examples(train_set) if train_set else (None,) * 4

    batch_rng = substream(cfg.seed, _BATCH_DOMAIN)
    metrics_path = out / "metrics.csv"
    ckpt_path = out / "checkpoint.json"
    started = time.perf_counter()
    needs_gaze = cfg.mode in ("direct", "gumbel-softmax", "gt-gaze")
    priors = None
    if cfg.mode in ("direct", "gumbel-softmax") and train_set \
            and cfg.model.gaze_supervision == "kl-qp":
        priors = precompute_priors(gaze_ann, mcfg)

    with open(metrics_path, "w", newline="") as mf:
        writer = csv.writer(mf)
        writer.writerow(METRICS_COLUMNS)
        for it in range(cfg.iterations):
            eps = cfg.eps.at(it)
            lr = learning_rate_at(it, cfg.optimizer, cfg.iterations)
            idx = batch_rng.integers(0, len(train_set), size=cfg.batch_size)
            rng = substream(cfg.seed, _ITER_NOISE_DOMAIN, it)
            try:
                result = minibatch_loss(
                    xs[idx], ys[idx], gaze_ann[idx] if needs_gaze else None,
                    params, mcfg, cfg.mode,
                    eps=eps if cfg.mode == "direct" else None,
                    tau=cfg.tau if cfg.mode == "gumbel-softmax" else None,
                    rng=rng, draws=cfg.draws,
                    priors=None if priors is None else priors[idx])
            except EvaluationError as e:
                save_params(params, ckpt_path)
                raise DivergenceError(f"at iteration {it}: {e}") from e
            if not np.isfinite(result.loss):
                save_params(params, ckpt_path)
                raise DivergenceError(f"non-finite loss at iteration {it}")
            train_acc = float((result.pred_class == ys[idx]).mean())
            for name, _ in params.items():
                g = result.grads[name] + cfg.optimizer.weight_decay * params[name]
                velocity[name] = cfg.optimizer.momentum * velocity[name] - lr * g
                params[name] = params[name] + velocity[name]
            test_acc = test_acc_star = None
            if cfg.eval_every and (it + 1) % cfg.eval_every == 0 and test_set:
                ev = evaluate(params, mcfg, test_set, cfg.mode)
                test_acc, test_acc_star = ev.acc, ev.acc_star
            writer.writerow([it, _fmt(result.loss), _fmt(result.nll), _fmt(result.kl),
                             _fmt(eps), _fmt(train_acc), _fmt(test_acc),
                             _fmt(test_acc_star)])
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_params(params, out / f"checkpoint-{it + 1:06d}.json")

    save_params(params, ckpt_path)
    wall = time.perf_counter() - started
    final_eval = evaluate(params, mcfg, test_set, cfg.mode) if test_set else EvalResult(
        acc=float("nan"), acc_star=float("nan"),
        confusion=np.zeros((mcfg.classes, mcfg.classes), dtype=np.int64),
        hit_pred=None, hit_gt=None, per_class_recall=np.zeros(mcfg.classes))
    summary = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "eps_or_tau": (cfg.eps.floor if cfg.mode == "direct"
                       else cfg.tau if cfg.mode == "gumbel-softmax" else None),
        "iterations": cfg.iterations,
        "acc": final_eval.acc,
        "acc_star": final_eval.acc_star,
        "hit_rate_pred": final_eval.hit_pred,
        "hit_rate_annotation": final_eval.hit_gt,
        "confusion": final_eval.confusion.tolist(),
        "wall_time_s": wall,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return TrainResult(params=params, final_eval=final_eval,
                       metrics_path=metrics_path, checkpoint_path=ckpt_path,
                       wall_time_s=wall)


def load_run(run_dir: str | Path) -> tuple[RunConfig, ParamSet]:
    run = Path(run_dir)
    cfg_path = run / "config.resolved.json"
    ckpt_path = run / "checkpoint.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing {cfg_path}")
    if not ckpt_path.exists():
        raise FileNotFoundError(f"missing {ckpt_path}")
    with open(cfg_path) as f:
        cfg = config_from_dict(json.load(f))
    return cfg, load_params(ckpt_path)


# ---------------------------------------------------------------------------
# comparison report

REPORT_COLUMNS = ("mode", "seed", "eps_or_tau", "acc", "acc_star",
                  "hit_rate_pred", "hit_rate_annotation", "wall_time_s")


def report(run_dirs: list[str | Path]) -> list[dict]:
    """One row per completed run, ordered by mode then seed."""
    if not run_dirs:
        raise ValueError("need at least one run directory")
    rows = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"missing {path}")
        with open(path) as f:
            summary = json.load(f)
        rows.append({k: summary.get(k) for k in REPORT_COLUMNS})
    rows.sort(key=lambda r: (str(r["mode"]), int(r["seed"])))
    return rows


def render_report_csv(rows: list[dict]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(",".join("" if row[c] is None else str(row[c]) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def render_report_table(rows: list[dict]) -> str:
    headers = list(REPORT_COLUMNS)
    cells = [[("" if row[c] is None else
               f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]))
              for c in headers] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def line(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in cells)
    return "\n".join(out) + "\n"
