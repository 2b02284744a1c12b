"""Command-line interface: gen-data, train, eval, profile, report.

Every subcommand takes ``--config <path>`` (JSON) plus repeatable
``--set key=value`` overrides with dotted paths into the config. Exit
codes: 0 success, 2 config error, 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from gazelatent.estimators import (
    profile_estimator,
    standard_instance,
    write_profile_csv,
)
from gazelatent.harness import (
    DivergenceError,
    config_from_dict,
    evaluate,
    load_run,
    render_report_csv,
    render_report_table,
    report,
    train,
)
from gazelatent.model import ConfigError, dump_predictions, predict_batch
from gazelatent.synthtask import (
    DatasetFormatError,
    TaskConfig,
    load_dataset,
    save_dataset,
    generate_dataset,
)

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ValueError) as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except DivergenceError as e:
            click.echo(f"numerical divergence: {e}", err=True)
            sys.exit(EXIT_DIVERGENCE)
        except (DatasetFormatError, FileNotFoundError, OSError) as e:
            click.echo(f"i/o error: {e}", err=True)
            sys.exit(EXIT_IO)
    return wrapper


def _read_config_doc(config_path: str | None, overrides: tuple[str, ...]) -> dict:
    doc: dict = {}
    if config_path:
        try:
            with open(config_path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = value
    return doc


def _task_from_doc(doc: dict) -> TaskConfig:
    section = doc.get("task", {})
    allowed = set(TaskConfig.__dataclass_fields__)
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in 'task': {sorted(unknown)}")
    try:
        return TaskConfig(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid task section: {e}") from e


config_option = click.option("--config", "config_path", type=click.Path(), default=None,
                             help="JSON config file.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override a config entry (dotted path, JSON value).")


@click.group()
def main():
    """Gaze-latent attention: synthetic data, training, profiling, reports."""


@main.command("gen-data")
@config_option
@set_option
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Directory for train.jsonl and test.jsonl.")
@_handle_errors
def gen_data(config_path, overrides, out_dir):
    """Generate the synthetic dataset files from the config's task section."""
    doc = _read_config_doc(config_path, overrides)
    task = _task_from_doc(doc)
    train_set, test_set = generate_dataset(task)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.jsonl", train_set, task)
    save_dataset(out / "test.jsonl", test_set, task)
    with open(out / "task.json", "w") as f:
        json.dump({"task": task.__dict__}, f, indent=2)
    click.echo(f"wrote {len(train_set)} train / {len(test_set)} test examples to {out}")


@main.command("train")
@config_option
@set_option
@click.option("--seed", required=True, type=int, help="Run seed (mandatory).")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run directory (defaults to the config's out_dir).")
@_handle_errors
def train_cmd(config_path, overrides, seed, out_dir):
    """Train a model and write metrics, checkpoints and a summary."""
    doc = _read_config_doc(config_path, overrides)
    doc["seed"] = seed
    cfg = config_from_dict(doc)
    target = out_dir or cfg.out_dir
    if not target:
        raise ConfigError("provide --out or an out_dir config entry")
    result = train(cfg, target)
    ev = result.final_eval
    click.echo(f"done in {result.wall_time_s:.1f}s: "
               f"acc={ev.acc:.4f} acc*={ev.acc_star:.4f} "
               f"hit_pred={'-' if ev.hit_pred is None else f'{ev.hit_pred:.4f}'}")


@main.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(),
              help="Run directory with config.resolved.json and checkpoint.json.")
@click.option("--data", "data_path", type=click.Path(), default=None,
              help="Evaluate on this dataset file instead of the config's test split.")
@click.option("--dump", "dump_path", type=click.Path(), default=None,
              help="Write per-example predictions as JSONL.")
@_handle_errors
def eval_cmd(run_dir, data_path, dump_path):
    """Evaluate a checkpoint: Acc, Acc*, confusion and gaze hit-rates."""
    cfg, params = load_run(run_dir)
    if data_path:
        examples = load_dataset(data_path, cfg.task)
    else:
        _, examples = generate_dataset(cfg.task)
    mcfg = cfg.model_config()
    result = evaluate(params, mcfg, examples, cfg.mode)
    click.echo(json.dumps({
        "acc": result.acc,
        "acc_star": result.acc_star,
        "hit_rate_pred": result.hit_pred,
        "hit_rate_annotation": result.hit_gt,
        "confusion": result.confusion.tolist(),
    }, indent=2))
    if dump_path:
        xs = np.stack([e.x for e in examples])
        classes, gaze, attn, _ = predict_batch(xs, params, mcfg, mode=cfg.mode,
                                               gaze_gt=np.stack([e.gaze_gt for e in examples]))
        records = []
        for i, e in enumerate(examples):
            records.append({
                "id": e.id,
                "true_class": e.y,
                "pred_class": classes[i],
                "gaze_pred": None if gaze is None else gaze[i],
                "gaze_gt": e.gaze_gt,
                "attention": attn[i] if attn is not None else np.zeros((cfg.task.t, 1, 1)),
            })
        dump_predictions(dump_path, records)
        click.echo(f"wrote predictions to {dump_path}")


@main.command("profile")
@config_option
@set_option
@click.option("--seed", required=True, type=int, help="Profiling seed (mandatory).")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Output CSV path.")
@_handle_errors
def profile_cmd(config_path, overrides, seed, out_path):
    """Profile estimator bias/variance against the enumeration oracle."""
    doc = _read_config_doc(config_path, overrides)
    instance = standard_instance(int(doc.get("instance_seed", 1234)))
    trials = int(doc.get("trials", 1))
    replicates = int(doc.get("replicates", 10_000))
    sweeps = doc.get("estimators",
                     [{"kind": "direct", "eps": 10.0}, {"kind": "direct", "eps": 1.0},
                      {"kind": "direct", "eps": 0.1}, {"kind": "gumbel-softmax", "tau": 2.0}])
    profiles = []
    for sweep in sweeps:
        if not isinstance(sweep, dict) or "kind" not in sweep:
            raise ConfigError(f"estimator entries need a 'kind': {sweep!r}")
        kind = sweep["kind"]
        reps = int(sweep.get("replicates", replicates))
        prof = profile_estimator(kind, instance, trials, reps,
                                 eps=sweep.get("eps"), tau=sweep.get("tau"), seed=seed)
        profiles.append(prof)
        click.echo(f"{kind} eps={sweep.get('eps')} tau={sweep.get('tau')}: "
                   f"bias_l2={prof.bias_l2:.6f} variance={prof.variance_trace:.6f}")
    write_profile_csv(out_path, profiles)
    click.echo(f"wrote {out_path}")


@main.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Directory for report.csv and report.txt.")
@_handle_errors
def report_cmd(run_dirs, out_dir):
    """Tabulate completed runs: one row per run, sorted by mode then seed."""
    rows = report(list(run_dirs))
    table = render_report_table(rows)
    click.echo(table, nl=False)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(render_report_csv(rows))
        (out / "report.txt").write_text(table)
        click.echo(f"wrote {out / 'report.csv'} and {out / 'report.txt'}")


if __name__ == "__main__":
    main()
