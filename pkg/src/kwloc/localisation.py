"""Keyword localisation from a trained detector.

Each method scores every position of an utterance for one keyword and places
the keyword at the best-scoring position (earliest on ties):

``score-agg``  per-frame outputs of a PSC model's last layer
``attention``  attention weights of an attention-pooling model
``gradcam``    last conv layer activations weighted by mean gradients
``masked-in``  detection probability of each segment on its own
``masked-out`` one minus the detection probability with the segment zeroed

Frame-level scores are mapped to input frames through the receptive-field
centres of the encoder; segment scores use the segment midpoint.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import IncompatibleMethodError, InputError
from .models import forward_full
from .numerics import Tape

METHODS = ("gradcam", "masked-in", "masked-out", "score-agg", "attention")

# which method each architecture supports
COMPATIBILITY = {
    "PSC": ("score-agg",),
    "CNN-Pool": ("gradcam",),
    "CNN-Attend": ("masked-in", "masked-out", "attention"),
    "CNN-PoolAttend": ("masked-in", "masked-out", "attention"),
}

MIN_SEGMENT_MS = 200
MAX_SEGMENT_MS = 600
SEGMENT_STEP_MS = 50
SEGMENT_OVERLAP_MS = 30


def check_compatible(arch_name, method):
    if method not in METHODS:
        raise IncompatibleMethodError(f"unknown localisation method {method!r}; expected one of {METHODS}")
    if method not in COMPATIBILITY.get(arch_name, ()):
        raise IncompatibleMethodError(
            f"method {method!r} is not available for architecture {arch_name!r}\n"
            + compatibility_table()
        )


def compatibility_table():
    header = ["architecture"] + list(METHODS)
    rows = [[a] + ["x" if m in ms else "" for m in METHODS] for a, ms in COMPATIBILITY.items()]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    return "\n".join(lines)


@dataclass(frozen=True)
class SegmentGrid:
    """Half-open frame windows ``[start, end)``; ``fallback`` marks a short utterance."""

    windows: tuple
    frame_period_ms: int = 10
    fallback: bool = False

    def __len__(self):
        return len(self.windows)

    def midpoints(self):
        return np.array([(s + e) // 2 for s, e in self.windows], dtype=np.int64)

    def masks(self, n_frames):
        m = np.zeros((len(self.windows), n_frames))
        for i, (s, e) in enumerate(self.windows):
            m[i, s:e] = 1.0
        return m


def segment_grid(n_frames, frame_period_ms=10):
    """Overlapping windows of 200, 250, ..., 600 ms.

    For each duration ``d`` windows start every ``d - 30`` ms from 0; a window
    running past the end is cut at the end if it still lasts 200 ms, and one
    more window is placed flush with the end. Durations longer than the
    utterance are skipped. An utterance shorter than 200 ms gets a single
    full-length window and ``fallback=True``.
    """
    if n_frames < 1:
        raise InputError("cannot build a segment grid for an empty utterance")
    period = frame_period_ms
    min_len = int(round(MIN_SEGMENT_MS / period))
    if n_frames < min_len:
        return SegmentGrid(((0, n_frames),), period, fallback=True)
    windows = []
    seen = set()

    def add(s, e):
        if (s, e) not in seen:
            seen.add((s, e))
            windows.append((s, e))

    for d_ms in range(MIN_SEGMENT_MS, MAX_SEGMENT_MS + 1, SEGMENT_STEP_MS):
        length = int(round(d_ms / period))
        if length > n_frames:
            continue
        stride = max(int(round((d_ms - SEGMENT_OVERLAP_MS) / period)), 1)
        start = 0
        while start + min_len <= n_frames:
            add(start, min(start + length, n_frames))
            start += stride
        add(n_frames - length, n_frames)
    return SegmentGrid(tuple(windows), period)


@dataclass
class LocalisationResult:
    """Scores for one keyword and the predicted location ``tau`` (input frame).

    ``positions`` holds the input frame each score maps to: receptive-field
    centres for ``resolution == "encoder-frame"``, midpoints for ``"segment"``.
    """

    keyword: int
    scores: np.ndarray
    resolution: str
    tau: int
    method: str
    positions: np.ndarray
    segments: tuple = None
    flags: tuple = field(default_factory=tuple)


def predict_location(scores, positions):
    """Input frame of the highest score; ties go to the earliest index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise InputError("cannot locate a keyword from an empty score sequence")
    if len(positions) != scores.size:
        raise InputError("need one position per score")
    return int(positions[int(np.argmax(scores))])


def _masked_inputs(features, grid, mode):
    x = np.asarray(features, dtype=np.float64)
    m = grid.masks(x.shape[0])
    if mode == "out":
        m = 1.0 - m
    return x[None, :, :] * m[:, :, None]


def masked_scores(params, features, grid, keywords=None, mode="in"):
    """Segment scores ``(n_segments, n_keywords)`` from one batched forward pass."""
    batch = _masked_inputs(features, grid, mode)
    probs = forward_full(params, batch, keywords)[0].probs
    return probs if mode == "in" else 1.0 - probs


def masked_scores_naive(params, features, grid, keywords=None, mode="in"):
    """Same as :func:`masked_scores`, one segment at a time."""
    batch = _masked_inputs(features, grid, mode)
    rows = [forward_full(params, batch[i], keywords)[0].probs for i in range(len(grid))]
    probs = np.stack(rows)
    return probs if mode == "in" else 1.0 - probs


def _segment_result(params, features, w, grid, mode):
    if grid is None:
        grid = segment_grid(np.shape(features)[0])
    scores = masked_scores(params, features, grid, [w], mode)[:, 0]
    positions = grid.midpoints()
    flags = ("short-utterance",) if grid.fallback else ()
    return LocalisationResult(
        keyword=w, scores=scores, resolution="segment",
        tau=predict_location(scores, positions), method=f"masked-{mode}",
        positions=positions, segments=grid.windows, flags=flags,
    )


def loc_masked_in(params, features, w, grid=None):
    return _segment_result(params, features, w, grid, "in")


def loc_masked_out(params, features, w, grid=None):
    return _segment_result(params, features, w, grid, "out")


def _frame_result(w, scores, centres, method, flags=()):
    return LocalisationResult(
        keyword=w, scores=scores, resolution="encoder-frame",
        tau=predict_location(scores, centres), method=method,
        positions=np.asarray(centres), flags=tuple(flags),
    )


def _check_keyword(params, w):
    if not 0 <= w < params.spec.vocab_size:
        raise InputError(f"keyword index {w} out of range for vocabulary of size {params.spec.vocab_size}")


def loc_score_agg(params, features, w):
    spec = params.spec
    if spec.pooling != "log-mean-exp" or spec.embed_dim != spec.vocab_size:
        raise IncompatibleMethodError(
            f"score aggregation needs a PSC model (one output channel per keyword, "
            f"log-mean-exp pooling); got {spec.name}"
        )
    _check_keyword(params, w)
    _, enc, _ = forward_full(params, features)
    return _frame_result(w, enc.H[:, w], enc.centres, "score-agg")


def loc_attention(params, features, w):
    if not params.spec.is_attention:
        raise IncompatibleMethodError(f"attention localisation needs an attention model; got {params.spec.name}")
    _check_keyword(params, w)
    _, enc, weights = forward_full(params, features, w)
    return _frame_result(w, weights[0], enc.centres, "attention")


def gradcam_scores(params, features, keywords=None):
    """Grad-CAM maps ``(n_keywords, T')`` and filter weights ``(n_keywords, K)``.

    One forward pass is shared by all keywords; each keyword costs one
    backward sweep to the output of the last convolutional layer.
    """
    keywords = np.arange(params.spec.vocab_size) if keywords is None else np.atleast_1d(keywords)
    maps, gammas = [], []
    if params.spec.is_attention:
        # one query per forward pass
        for w in keywords:
            tape = Tape()
            det, enc, _ = forward_full(params, features, int(w), tape=tape)
            (g,) = tape.gradients(det.probs, [enc.H])
            gammas.append(g.mean(axis=0))
            maps.append(np.maximum(enc.H @ gammas[-1], 0.0))
        return np.stack(maps), np.stack(gammas)
    tape = Tape()
    det, enc, _ = forward_full(params, features, tape=tape)
    for w in keywords:
        seed = np.zeros(det.probs.shape)
        seed[int(w)] = 1.0
        (g,) = tape.gradients(det.probs, [enc.H], seed=seed)
        gammas.append(g.mean(axis=0))
        maps.append(np.maximum(enc.H @ gammas[-1], 0.0))
    return np.stack(maps), np.stack(gammas)


def loc_gradcam(params, features, w):
    _check_keyword(params, w)
    maps, _ = gradcam_scores(params, features, [w])
    _, enc, _ = forward_full(params, features, w if params.spec.is_attention else None)
    alpha = maps[0]
    flags = ("no-evidence",) if not np.any(alpha > 0) else ()
    return _frame_result(w, alpha, enc.centres, "gradcam", flags)


def locate(params, features, w, method, grid=None):
    """Run localisation ``method`` for keyword index ``w``."""
    if method == "masked-in":
        return loc_masked_in(params, features, w, grid)
    if method == "masked-out":
        return loc_masked_out(params, features, w, grid)
    if method == "score-agg":
        return loc_score_agg(params, features, w)
    if method == "attention":
        return loc_attention(params, features, w)
    if method == "gradcam":
        return loc_gradcam(params, features, w)
    raise IncompatibleMethodError(f"unknown localisation method {method!r}; expected one of {METHODS}")


def locate_all(params, features, method, frame_period_ms=10):
    """Detection probabilities and predicted locations for every keyword.

    Returns ``(probs, taus)``, both of length ``V``; ``taus`` are input frames.
    """
    V = params.spec.vocab_size
    det, enc, weights = forward_full(params, features)
    probs = det.probs
    if method in ("masked-in", "masked-out"):
        grid = segment_grid(np.shape(features)[0], frame_period_ms)
        scores = masked_scores(params, features, grid, None, method.split("-")[1])
        taus = grid.midpoints()[np.argmax(scores, axis=0)]
    elif method == "attention":
        if weights is None:
            raise IncompatibleMethodError(f"attention localisation needs an attention model; got {params.spec.name}")
        taus = enc.centres[np.argmax(weights, axis=-1)]
    elif method == "score-agg":
        if params.spec.pooling != "log-mean-exp":
            raise IncompatibleMethodError(f"score aggregation needs a PSC model; got {params.spec.name}")
        taus = enc.centres[np.argmax(enc.H, axis=0)]
    elif method == "gradcam":
        maps, _ = gradcam_scores(params, features)
        taus = enc.centres[np.argmax(maps, axis=-1)]
    else:
        raise IncompatibleMethodError(f"unknown localisation method {method!r}; expected one of {METHODS}")
    return probs, np.asarray(taus, dtype=np.int64).reshape(V)


def write_scores_csv(path, utt_id, keyword, result):
    """One row per score plus a final ``tau`` row.

    Frame-level rows give the input frame ``[c, c + 1)`` at the score's
    receptive-field centre; segment rows give the segment's frames.
    """
    with open(path, "w", newline="", encoding="utf-8") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["utt_id", "keyword", "method", "t_or_segment_start", "t_or_segment_end", "alpha"])
        for i, alpha in enumerate(result.scores):
            if result.resolution == "segment":
                start, end = result.segments[i]
            else:
                start, end = int(result.positions[i]), int(result.positions[i]) + 1
            out.writerow([utt_id, keyword, result.method, start, end, repr(float(alpha))])
        best = float(np.max(result.scores))
        out.writerow([utt_id, keyword, "tau", result.tau, result.tau + 1, repr(best)])
