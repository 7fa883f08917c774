"""Weak training targets: bag-of-words labels and a simulated visual tagger."""

import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .models import forward_full, param_layout
from .numerics import Tape, bce_loss


@dataclass(frozen=True)
class TargetVector:
    utt_id: str
    y: np.ndarray
    kind: str = "bow"


@dataclass(frozen=True)
class TaggerNoiseConfig:
    """Corruption applied to bag-of-words labels to mimic an image tagger.

    A positive is demoted with probability ``p_fn`` and a negative promoted with
    probability ``p_fp``. High scores are drawn from Beta(kappa, 1) and low ones
    from Beta(1, kappa), so larger ``kappa`` gives more confident labels.
    """

    p_fn: float = 0.0
    p_fp: float = 0.0
    kappa: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_fn", "p_fp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not self.kappa > 0 or not np.isfinite(self.kappa):
            raise ConfigError(f"kappa must be a finite positive number, got {self.kappa}")

    def to_dict(self):
        return asdict(self)


def bow_targets(alignment, vocab):
    """``y_w = 1`` iff keyword ``w`` is spoken at least once; counts are dropped."""
    if not vocab:
        raise ConfigError("vocabulary is empty")
    present = set(alignment.word_list())
    y = np.array([1.0 if w in present else 0.0 for w in vocab])
    return TargetVector(alignment.utt_id, y, "bow")


def _utt_rng(seed, utt_id):
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8"))])


def simulate_tagger(bow, cfg):
    """Soft, possibly wrong labels derived from ``bow``.

    Draws depend only on ``cfg.seed`` and the utterance id.
    """
    if bow.kind != "bow":
        raise ConfigError(f"simulate_tagger expects bag-of-words targets, got {bow.kind!r}")
    y = np.asarray(bow.y, dtype=np.float64)
    rng = _utt_rng(cfg.seed, bow.utt_id)
    flip = rng.random(y.shape)
    high = rng.beta(cfg.kappa, 1.0, y.shape)
    low = rng.beta(1.0, cfg.kappa, y.shape)
    positive = y > 0.5
    says_present = np.where(positive, flip >= cfg.p_fn, flip < cfg.p_fp)
    return TargetVector(bow.utt_id, np.where(says_present, high, low), "tagger")


def read_soft_labels(path, vocab_size):
    """Load ``{"utt": id, "probs": [...]}`` JSON lines as ``{utt_id: TargetVector}``."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, text in enumerate(f, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", line=lineno, path=path) from None
            if not isinstance(rec, dict) or set(rec) != {"utt", "probs"}:
                raise FormatError("soft label record must have keys 'utt' and 'probs'", line=lineno, path=path)
            probs = rec["probs"]
            if not isinstance(probs, list) or len(probs) != vocab_size:
                raise FormatError(f"'probs' must list {vocab_size} values", line=lineno, path=path)
            y = np.asarray(probs, dtype=np.float64)
            if not np.all((y >= 0) & (y <= 1)):
                raise FormatError("probabilities must lie in [0, 1]", line=lineno, path=path)
            out[rec["utt"]] = TargetVector(rec["utt"], y, "tagger")
    return out


def write_soft_labels(path, targets):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in targets:
            f.write(json.dumps({"utt": t.utt_id, "probs": [float(v) for v in t.y]}) + "\n")


def training_loss(params, features, target, with_grads=True):
    """Mean binary cross-entropy over all ``V`` keywords and its parameter gradients.

    Attention models run one query per keyword (all ``V`` at once). Returns
    ``(loss, grads)`` where ``grads`` maps parameter names to float64 arrays,
    or ``(loss, None)`` when ``with_grads`` is false.
    """
    y = np.asarray(getattr(target, "y", target), dtype=np.float64)
    if y.shape != (params.spec.vocab_size,):
        raise InputError(f"target has shape {y.shape}, expected ({params.spec.vocab_size},)")
    tape = Tape() if with_grads else None
    det, _, _ = forward_full(params, features, tape=tape)
    loss = bce_loss(det.probs, y, tape)
    if not with_grads:
        return float(loss), None
    names = [name for name, _ in param_layout(params.spec)]
    grads = tape.gradients(loss, [params[n] for n in names])
    return float(loss), dict(zip(names, grads))
