"""Command line interface: ``kwloc synth | train | eval | locate``.

Exit codes: 0 success, 1 internal error or divergence, 2 bad configuration,
3 missing or malformed data, 4 method not available for the architecture.
``KWLOC_THREADS`` caps the BLAS thread pool and the number of training workers.
"""

import functools
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from .corpus import SynthConfig, load_corpus, read_features, synth_corpus
from .errors import (ConfigError, FormatError, IncompatibleMethodError, InputError,
                     TrainingDiverged)
from .evaluation import DEFAULT_THETA, evaluate, score_corpus
from .localisation import METHODS, check_compatible, locate, write_scores_csv
from .models import checkpoint_extra, forward_full, load_checkpoint
from .training import TrainConfig, train

TASKS = ("oracle", "actual", "spotting")
EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_INCOMPATIBLE = 1, 2, 3, 4

RUN_KEYS = {"data", "task", "method", "theta", "split"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def split_run_config(doc):
    """Split a run configuration into ``(TrainConfig, extras)``; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("run configuration must be a JSON object")
    unknown = set(doc) - RUN_KEYS - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {sorted(unknown)}")
    extras = {k: doc[k] for k in RUN_KEYS if k in doc}
    if "task" in extras and extras["task"] not in TASKS:
        raise ConfigError(f"task: must be one of {TASKS}, got {extras['task']!r}")
    if "method" in extras and extras["method"] not in METHODS:
        raise ConfigError(f"method: must be one of {METHODS}, got {extras['method']!r}")
    if "theta" in extras and not (isinstance(extras["theta"], (int, float)) and 0 <= extras["theta"] <= 1):
        raise ConfigError(f"theta: must be a number in [0, 1], got {extras['theta']!r}")
    cfg = TrainConfig.from_dict({k: v for k, v in doc.items() if k in TRAIN_KEYS})
    return cfg, extras


def _read_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _threads():
    raw = os.environ.get("KWLOC_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KWLOC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"KWLOC_THREADS must be a positive integer, got {raw!r}")
    return n


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    """Map package exceptions to exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            n = _threads()
            with threadpool_limits(limits=n):
                return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, exc)
        except IncompatibleMethodError as exc:
            _fail(EXIT_INCOMPATIBLE, exc)
        except (FormatError, InputError, FileNotFoundError) as exc:
            _fail(EXIT_DATA, exc)
        except TrainingDiverged as exc:
            _fail(EXIT_INTERNAL, f"training diverged: {exc}")

    return wrapper


@click.group()
def main():
    """Weakly supervised keyword detection and localisation."""


@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output corpus directory.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Generator settings (JSON).")
@click.option("--seed", type=int, help="Override the generator seed.")
@handle_errors
def cmd_synth(out_dir, config_path, seed):
    """Generate a synthetic corpus with word alignments."""
    doc = _read_json(config_path)
    if seed is not None:
        doc["seed"] = seed
    try:
        cfg = SynthConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    corpus = synth_corpus(cfg, out_dir)
    sizes = ", ".join(f"{s}={len(ids)}" for s, ids in corpus.splits.items())
    click.echo(f"wrote {out_dir}: {sizes}, vocabulary {len(corpus.vocab)}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run configuration (JSON).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Checkpoint directory.")
@click.option("--data", type=click.Path(), help="Corpus directory (overrides config).")
@click.option("--epochs", type=int, help="Override the number of epochs.")
@click.option("--lr", type=float, help="Override the learning rate.")
@click.option("--seed", type=int, help="Override the training seed.")
@handle_errors
def cmd_train(config_path, out_dir, data, epochs, lr, seed):
    """Train a detector and keep the checkpoint with the lowest dev loss."""
    doc = _read_json(config_path)
    for key, value in (("data", data), ("epochs", epochs), ("lr", lr), ("seed", seed)):
        if value is not None:
            doc[key] = value
    n = _threads()
    if n is not None:
        doc["workers"] = n
    cfg, extras = split_run_config(doc)
    if "data" not in extras:
        raise ConfigError("data: no corpus directory given (use --data or the 'data' key)")
    corpus = load_corpus(extras["data"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", dict(cfg.to_dict(), **extras))

    def progress(rec):
        click.echo(f"epoch {rec['epoch']:3d}  train {rec['train_loss']:.4f}  dev {rec['dev_loss']:.4f}")

    result = train(cfg, corpus, out, progress=progress)
    click.echo(f"best epoch {result.best_epoch}: {result.best_path}")


@main.command("eval")
@click.option("--task", type=click.Choice(TASKS), help="Evaluation protocol.")
@click.option("--method", type=click.Choice(METHODS), help="Localisation method.")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False), help="Checkpoint.")
@click.option("--data", type=click.Path(), help="Corpus directory.")
@click.option("--theta", type=float, help="Detection threshold for the actual task.")
@click.option("--split", type=click.Choice(("train", "dev", "test")), help="Corpus split to score.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Report directory.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run configuration (JSON).")
@handle_errors
def cmd_eval(task, method, model_path, data, theta, split, out_dir, config_path):
    """Score a corpus split and write JSON and text reports."""
    doc = _read_json(config_path)
    for key, value in (("task", task), ("method", method), ("data", data), ("theta", theta), ("split", split)):
        if value is not None:
            doc[key] = value
    _, extras = split_run_config(doc)
    for key in ("task", "method", "data"):
        if key not in extras:
            raise ConfigError(f"{key}: not given (use --{key} or the '{key}' key)")
    extras.setdefault("theta", DEFAULT_THETA)
    extras.setdefault("split", "test")
    params = load_checkpoint(model_path)
    check_compatible(params.spec.name, extras["method"])
    corpus = load_corpus(extras["data"])
    vocab = checkpoint_extra(model_path).get("vocab")
    if vocab is not None and list(vocab) != list(corpus.vocab):
        raise InputError("corpus vocabulary differs from the one the model was trained on")
    if extras["split"] not in corpus.splits or not corpus.splits[extras["split"]]:
        raise InputError(f"corpus has no {extras['split']!r} utterances")

    scores = score_corpus(params, corpus, extras["split"], extras["method"])
    report = evaluate(extras["task"], scores, corpus.alignments, extras["theta"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    effective = dict(extras, model=str(model_path))
    _write_json(out / "config.json", effective)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    text = report.to_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


@main.command("locate")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False), help="Checkpoint.")
@click.option("--features", "features_path", required=True, type=click.Path(dir_okay=False), help="Feature file.")
@click.option("--keyword", required=True, help="Keyword to locate.")
@click.option("--method", required=True, type=click.Choice(METHODS), help="Localisation method.")
@click.option("--csv", "csv_path", required=True, type=click.Path(dir_okay=False), help="Score CSV to write.")
@handle_errors
def cmd_locate(model_path, features_path, keyword, method, csv_path):
    """Locate one keyword in one utterance and export its scores."""
    params = load_checkpoint(model_path)
    check_compatible(params.spec.name, method)
    vocab = checkpoint_extra(model_path).get("vocab") or []
    if keyword not in vocab:
        raise ConfigError(f"keyword {keyword!r} not in the model vocabulary: {' '.join(vocab)}")
    w = vocab.index(keyword)
    feats = read_features(features_path)
    result = locate(params, feats.data, w, method)
    prob = float(np.asarray(forward_full(params, feats.data, w)[0].probs).reshape(-1)[0])
    utt_id = Path(features_path).stem
    write_scores_csv(csv_path, utt_id, keyword, result)
    tau_ms = result.tau * feats.frame_period_ms
    click.echo(f"{keyword}: tau {tau_ms} ms, detection probability {prob:.4f}")
    for flag in result.flags:
        click.echo(f"note: {flag}")


if __name__ == "__main__":
    main()
