"""Adam training loop with SpecAugment-style masking and dev-set model selection."""

import json
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, TrainingDiverged
from .models import ARCHITECTURES, build_architecture, load_checkpoint, save_checkpoint
from .supervision import (
    TaggerNoiseConfig,
    bow_targets,
    read_soft_labels,
    simulate_tagger,
    training_loss,
)

log = logging.getLogger(__name__)

SUPERVISION_KINDS = ("bow", "tagger", "soft-labels")


@dataclass(frozen=True)
class SpecAugmentConfig:
    """Frequency- and time-band masking. Band widths are uniform in ``[min, max]``."""

    enabled: bool = True
    n_freq_masks: int = 1
    max_freq_width: int = 2
    n_time_masks: int = 2
    max_time_width: int = 5
    min_freq_width: int = 0
    min_time_width: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "enabled" and (not isinstance(v, int) or v < 0):
                raise ConfigError(f"spec_augment.{f.name} must be a non-negative integer, got {v!r}")
        if self.min_freq_width > self.max_freq_width or self.min_time_width > self.max_time_width:
            raise ConfigError("spec_augment minimum widths must not exceed maximum widths")


@dataclass(frozen=True)
class TrainConfig:
    architecture: str = "CNN-Attend"
    arch: dict = field(default_factory=dict)
    supervision: str = "bow"
    soft_labels: str = None
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    spec_augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    tagger: TaggerNoiseConfig = field(default_factory=TaggerNoiseConfig)
    workers: int = 1

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture: unknown {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.supervision not in SUPERVISION_KINDS:
            raise ConfigError(f"supervision: expected one of {SUPERVISION_KINDS}, got {self.supervision!r}")
        if self.supervision == "soft-labels" and not self.soft_labels:
            raise ConfigError("soft_labels: a path is required for soft-labels supervision")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs: must be an integer >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size: must be an integer >= 1, got {self.batch_size!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("adam: need 0 <= beta1, beta2 < 1 and eps > 0")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"workers: must be an integer >= 1, got {self.workers!r}")
        unknown = set(self.arch) - {"channels", "hidden", "lme_r"}
        if unknown:
            raise ConfigError(f"arch: unknown key(s) {sorted(unknown)}")

    def to_dict(self):
        d = asdict(self)
        if "channels" in d["arch"]:
            d["arch"]["channels"] = list(d["arch"]["channels"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config key(s): {sorted(unknown)}")
        try:
            if isinstance(d.get("spec_augment"), dict):
                d["spec_augment"] = SpecAugmentConfig(**d["spec_augment"])
            if isinstance(d.get("tagger"), dict):
                d["tagger"] = TaggerNoiseConfig(**d["tagger"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(**d)


# --- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls(
            m={k: np.zeros(a.shape) for k, a in arrays.items()},
            v={k: np.zeros(a.shape) for k, a in arrays.items()},
        )


def adam_step(arrays, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    Returns new parameter arrays (same dtypes as ``arrays``) and a new state;
    the inputs are left untouched. Raises :class:`TrainingDiverged` on a
    non-finite gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingDiverged(
                f"non-finite gradient for {name} at step {state.step + 1} ({bad} entries)"
            )
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_arrays, new_m, new_v = {}, {}, {}
    for name, w in arrays.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != w.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        with np.errstate(over="ignore"):
            # overflow becomes inf and is reported as divergence by the caller
            new_arrays[name] = (w.astype(np.float64) - update).astype(w.dtype)
        new_m[name], new_v[name] = m, v
    return new_arrays, AdamState(new_m, new_v, t)


# --- augmentation ------------------------------------------------------------

def spec_augment(features, cfg, rng):
    """Zero random frequency bands and time bands of a ``(T, D)`` matrix.

    Widths are clipped to the matrix size. Returns a new array.
    """
    x = np.array(features, copy=True)
    if not cfg.enabled:
        return x
    T, D = x.shape
    for _ in range(cfg.n_freq_masks):
        width = min(int(rng.integers(cfg.min_freq_width, cfg.max_freq_width + 1)), D)
        start = int(rng.integers(0, D - width + 1))
        x[:, start:start + width] = 0
    for _ in range(cfg.n_time_masks):
        width = min(int(rng.integers(cfg.min_time_width, cfg.max_time_width + 1)), T)
        start = int(rng.integers(0, T - width + 1))
        x[start:start + width, :] = 0
    return x


# --- training loop -----------------------------------------------------------

def make_targets(config, corpus, split):
    """Targets for every utterance of ``split`` under ``config.supervision``."""
    vocab = corpus.vocab
    ids = corpus.splits[split]
    if config.supervision == "soft-labels":
        table = read_soft_labels(config.soft_labels, len(vocab))
        missing = [u for u in ids if u not in table]
        if missing:
            raise InputError(f"soft labels missing for {len(missing)} {split} utterances, e.g. {missing[0]}")
        return [table[u] for u in ids]
    bow = [bow_targets(corpus.alignments[u], vocab) for u in ids]
    if config.supervision == "tagger":
        return [simulate_tagger(t, config.tagger) for t in bow]
    return bow


@dataclass
class TrainResult:
    best_epoch: int
    best_path: Path
    history: list
    params: object


def select_best(checkpoints, dev_losses):
    """The checkpoint with the lowest dev loss; the earliest one wins ties.

    ``checkpoints`` may hold :class:`ModelParams` or checkpoint paths (loaded).
    """
    if len(checkpoints) == 0:
        raise InputError("no checkpoints to select from")
    if len(checkpoints) != len(dev_losses):
        raise InputError("need one dev loss per checkpoint")
    best = int(np.argmin(np.asarray(dev_losses, dtype=np.float64)))
    chosen = checkpoints[best]
    if isinstance(chosen, (str, Path)):
        return load_checkpoint(chosen)
    return chosen


def _mean_loss(params, items, workers):
    def one(item):
        feats, target = item
        return training_loss(params, feats, target, with_grads=False)[0]

    losses = _map(one, items, workers)
    return float(np.mean(losses))


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def train(config, corpus, out_dir, progress=None):
    """Train on ``corpus`` ("train" split), select on "dev", write checkpoints.

    ``out_dir`` receives ``epoch_NNN.kwck`` per epoch, ``log.jsonl`` (whose
    ``wall_ms`` field is the only output that differs between identical runs),
    ``best.kwck`` and ``best.json``. ``progress`` is called with each epoch's log
    record. On divergence the checkpoints written so far are kept, the last
    finite parameters are saved as ``last_good.kwck`` and
    :class:`TrainingDiverged` is raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not corpus.splits.get("train") or not corpus.splits.get("dev"):
        raise InputError("corpus needs non-empty train and dev splits")
    rng = np.random.default_rng(config.seed)
    first = corpus.features(corpus.splits["train"][0]).data
    params = build_architecture(
        config.architecture, len(corpus.vocab), seed=config.seed,
        input_dim=first.shape[1], **config.arch,
    )
    extra = {"vocab": corpus.vocab, "train_config": config.to_dict()}

    train_ids = corpus.splits["train"]
    train_targets = make_targets(config, corpus, "train")
    dev_items = [
        (corpus.features(u).data, t)
        for u, t in zip(corpus.splits["dev"], make_targets(config, corpus, "dev"))
    ]
    state = AdamState.zeros_like(params.arrays)
    history, paths = [], []
    log_path = out / "log.jsonl"
    log_path.write_text("")

    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_ids))
            batch_losses = []
            for b in range(0, len(order), config.batch_size):
                batch = []
                for i in order[b:b + config.batch_size]:
                    feats = corpus.features(train_ids[i]).data
                    feats = spec_augment(feats, config.spec_augment, rng)
                    batch.append((feats, train_targets[i]))
                results = _map(lambda it: training_loss(params, *it), batch, config.workers)
                losses = [r[0] for r in results]
                if not np.all(np.isfinite(losses)):
                    raise TrainingDiverged(f"non-finite training loss in epoch {epoch}")
                grads = {
                    name: sum(r[1][name] for r in results) / len(results)
                    for name in params.arrays
                }
                arrays, state = adam_step(
                    params.arrays, grads, state, config.lr, config.beta1, config.beta2, config.eps
                )
                if not all(np.all(np.isfinite(a)) for a in arrays.values()):
                    raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}")
                params = params.with_arrays(arrays, epoch=epoch)
                batch_losses.extend(losses)

            dev_loss = _mean_loss(params, dev_items, config.workers)
            if not np.isfinite(dev_loss):
                raise TrainingDiverged(f"non-finite dev loss in epoch {epoch}")
            path = out / f"epoch_{epoch:03d}.kwck"
            save_checkpoint(params, path, extra=extra)
            paths.append(path)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "dev_loss": dev_loss,
                "wall_ms": int(round(1000 * (time.perf_counter() - t0))),
            }
            history.append(record)
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            log.info("epoch %d train %.4f dev %.4f", epoch, record["train_loss"], dev_loss)
            if progress is not None:
                progress(record)
    except TrainingDiverged:
        # params still holds the last finite values
        save_checkpoint(params, out / "last_good.kwck", extra=extra)
        raise

    dev_losses = [h["dev_loss"] for h in history]
    best = select_best(paths, dev_losses)
    best_path = out / "best.kwck"
    shutil.copyfile(paths[best.epoch - 1], best_path)
    (out / "best.json").write_text(
        json.dumps({"epoch": best.epoch, "dev_loss": dev_losses[best.epoch - 1],
                    "checkpoint": paths[best.epoch - 1].name}, sort_keys=True) + "\n"
    )
    return TrainResult(best_epoch=best.epoch, best_path=best_path, history=history, params=best)
