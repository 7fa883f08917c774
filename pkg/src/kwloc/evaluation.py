"""Evaluation of keyword detection, localisation and spotting against alignments.

The evaluation functions work on a :class:`ScoreTable`: one detection
probability and one predicted location per (utterance, keyword) pair. The
table is produced from a model with :func:`score_corpus` or written by hand
for small fixtures.

A predicted location is correct when its time in ms falls inside the
half-open span ``[start_ms, end_ms)`` of any occurrence of the keyword.
Detection counts use one decision per (utterance, keyword) pair, so a keyword
spoken twice in an utterance is one occurrence.
"""

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, InvariantViolation
from .localisation import locate_all

DEFAULT_THETA = 0.5
GAP = "--"


@dataclass(frozen=True)
class ScoreTable:
    """Scores for ``utt_ids`` x ``vocab``; ``taus_ms`` is the predicted time in ms."""

    utt_ids: tuple
    vocab: tuple
    probs: np.ndarray
    taus_ms: np.ndarray
    method: str = ""

    def __post_init__(self):
        shape = (len(self.utt_ids), len(self.vocab))
        for name in ("probs", "taus_ms"):
            if np.shape(getattr(self, name)) != shape:
                raise InputError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        if len(set(self.utt_ids)) != len(self.utt_ids):
            raise InputError("duplicate utterance ids in score table")

    def row(self, utt_id):
        return self.utt_ids.index(utt_id)


def score_corpus(params, corpus, split, method, progress=None):
    """Detection probabilities and locations for every pair in ``corpus[split]``."""
    ids = tuple(corpus.splits[split])
    probs, taus = [], []
    for i, utt_id in enumerate(ids):
        feats = corpus.features(utt_id)
        p, tau = locate_all(params, feats.data, method, feats.frame_period_ms)
        probs.append(p)
        taus.append(tau * feats.frame_period_ms)
        if progress is not None:
            progress(i + 1, len(ids))
    V = params.spec.vocab_size
    return ScoreTable(
        ids, tuple(corpus.vocab),
        np.asarray(probs, dtype=np.float64).reshape(len(ids), V),
        np.asarray(taus, dtype=np.int64).reshape(len(ids), V),
        method,
    )


def _located(alignment, word, tau_ms):
    return any(s.contains(tau_ms) for s in alignment.spans_of(word))


def _truth(scores, alignments):
    """Boolean presence and correct-location matrices aligned with ``scores``."""
    n, V = scores.probs.shape
    present = np.zeros((n, V), dtype=bool)
    located = np.zeros((n, V), dtype=bool)
    for i, utt_id in enumerate(scores.utt_ids):
        if utt_id not in alignments:
            raise InputError(f"no alignment for utterance {utt_id!r}")
        ali = alignments[utt_id]
        words = set(ali.word_list())
        for j, w in enumerate(scores.vocab):
            if w in words:
                present[i, j] = True
                located[i, j] = _located(ali, w, scores.taus_ms[i, j])
    return present, located


def _ratio(num, den):
    return None if den == 0 else num / den


def _f1(p, r):
    if p is None or r is None:
        return None
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _prf(hits, detected, occurrences):
    p = _ratio(hits, detected)
    r = _ratio(hits, occurrences)
    return {"precision": p, "recall": r, "f1": _f1(p, r)}


@dataclass
class EvalReport:
    """Metrics for one task; ``upper`` holds the bounds the main metrics cannot exceed.

    Construction checks that every metric lies in [0, 1] and that each overall
    metric is at most its counterpart in ``upper``; a violation raises
    :class:`InvariantViolation`.
    """

    task: str
    method: str
    overall: dict
    per_keyword: dict
    upper: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    theta: float = None

    def __post_init__(self):
        tol = 1e-12
        for scope, metrics in [("overall", self.overall), ("upper", self.upper)]:
            for k, v in metrics.items():
                if v is not None and not -tol <= v <= 1 + tol:
                    raise InvariantViolation(f"{scope} {k} = {v} outside [0, 1]")
        for k, v in self.overall.items():
            bound = self.upper.get(k)
            if v is not None and bound is not None and v > bound + tol:
                raise InvariantViolation(f"{self.task}: {k} = {v} exceeds its upper bound {bound}")

    def to_dict(self):
        return {
            "task": self.task, "method": self.method, "theta": self.theta,
            "overall": self.overall, "upper": self.upper, "counts": self.counts,
            "per_keyword": self.per_keyword, "flags": list(self.flags),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self):
        """Aligned-column table: overall row, then one row per keyword."""
        keys = list(self.overall)
        upper_keys = list(self.upper)
        header = ["keyword"] + keys + [f"upper_{k}" for k in upper_keys]
        rows = [["(all)"] + [_fmt(self.overall[k]) for k in keys] + [_fmt(self.upper[k]) for k in upper_keys]]
        for kw, m in self.per_keyword.items():
            up = m.get("upper", {})
            rows.append([kw] + [_fmt(m.get(k)) for k in keys] + [_fmt(up.get(k)) for k in upper_keys])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = [f"task: {self.task}  method: {self.method}" + (f"  theta: {self.theta}" if self.theta is not None else "")]
        for r in [header] + rows:
            lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        lines.extend(f"note: {f}" for f in self.flags)
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "-" if v is None else f"{100 * v:.1f}"


def eval_oracle(scores, alignments):
    """Fraction of pairs whose keyword occurs that have a correctly placed ``tau``."""
    present, located = _truth(scores, alignments)
    per_kw = {}
    for j, w in enumerate(scores.vocab):
        n = int(present[:, j].sum())
        c = int(located[:, j].sum())
        per_kw[w] = {"accuracy": _ratio(c, n), "pairs": n, "correct": c}
    pairs = int(present.sum())
    correct = int(located.sum())
    flags = [] if pairs else ["no keyword occurrences in evaluation set"]
    return EvalReport(
        "oracle", scores.method, {"accuracy": _ratio(correct, pairs)}, per_kw,
        counts={"pairs": pairs, "correct": correct}, flags=flags,
    )


def eval_actual(scores, alignments, theta=DEFAULT_THETA):
    """Detection at ``probs > theta`` followed by localisation.

    Localisation precision counts correctly placed detections over all
    detections and recall counts them over all occurrences; detection
    precision, recall and F1 are reported as upper bounds.
    """
    present, located = _truth(scores, alignments)
    detected = scores.probs > theta
    hits = detected & present
    loc_hits = detected & located
    per_kw = {}
    for j, w in enumerate(scores.vocab):
        d, o = int(detected[:, j].sum()), int(present[:, j].sum())
        per_kw[w] = dict(
            _prf(int(loc_hits[:, j].sum()), d, o),
            upper=_prf(int(hits[:, j].sum()), d, o),
            detected=d, occurrences=o,
            correct_detections=int(hits[:, j].sum()), correct_locations=int(loc_hits[:, j].sum()),
        )
    d, o = int(detected.sum()), int(present.sum())
    counts = {
        "detected": d, "occurrences": o,
        "correct_detections": int(hits.sum()), "correct_locations": int(loc_hits.sum()),
    }
    flags = [] if d else ["no detections: precision undefined"]
    return EvalReport(
        "actual", scores.method, _prf(counts["correct_locations"], d, o), per_kw,
        upper=_prf(counts["correct_detections"], d, o), counts=counts, flags=flags, theta=theta,
    )


def ranking(scores, j):
    """Row indices sorted by descending probability for keyword ``j``, ties by utt_id."""
    order = sorted(range(len(scores.utt_ids)), key=lambda i: (-scores.probs[i, j], scores.utt_ids[i]))
    return np.asarray(order, dtype=np.int64)


def eval_spotting(scores, alignments):
    """P@10 and P@N per keyword averaged over keywords that occur in the set.

    N is the number of utterances containing the keyword. The localisation
    variants count a top-ranked utterance only when it contains the keyword
    and ``tau`` is inside one of its spans.
    """
    present, located = _truth(scores, alignments)
    n_utts = len(scores.utt_ids)
    flags = []
    k10 = min(10, n_utts)
    if n_utts < 10:
        flags.append(f"only {n_utts} utterances: P@10 uses all of them")
    per_kw = {}
    loc10, locN, spot10, spotN = [], [], [], []
    for j, w in enumerate(scores.vocab):
        N = int(present[:, j].sum())
        if N == 0:
            flags.append(f"keyword {w!r} does not occur: excluded from averages")
            per_kw[w] = {"p_at_10": None, "p_at_n": None, "n": 0, "upper": {"p_at_10": None, "p_at_n": None}}
            continue
        order = ranking(scores, j)
        top10, topN = order[:k10], order[:N]
        m = {
            "p_at_10": float(located[top10, j].mean()),
            "p_at_n": float(located[topN, j].mean()),
            "n": N,
            "upper": {"p_at_10": float(present[top10, j].mean()), "p_at_n": float(present[topN, j].mean())},
        }
        per_kw[w] = m
        loc10.append(m["p_at_10"])
        locN.append(m["p_at_n"])
        spot10.append(m["upper"]["p_at_10"])
        spotN.append(m["upper"]["p_at_n"])

    def mean(xs):
        return float(np.mean(xs)) if xs else None

    return EvalReport(
        "spotting", scores.method,
        {"p_at_10": mean(loc10), "p_at_n": mean(locN)}, per_kw,
        upper={"p_at_10": mean(spot10), "p_at_n": mean(spotN)},
        counts={"keywords": len(loc10), "utterances": n_utts}, flags=flags,
    )


def evaluate(task, scores, alignments, theta=DEFAULT_THETA):
    if task == "oracle":
        return eval_oracle(scores, alignments)
    if task == "actual":
        return eval_actual(scores, alignments, theta)
    if task == "spotting":
        return eval_spotting(scores, alignments)
    raise InputError(f"unknown evaluation task {task!r}; expected oracle, actual or spotting")


def per_keyword_f1(report):
    """Per-keyword localisation F1 for keywords detected at least once.

    Returns ``(f1, excluded)``: ``{keyword: f1}`` and ``{keyword: reason}``.
    """
    if report.task != "actual":
        raise InputError(f"per-keyword F1 needs an 'actual' report, got {report.task!r}")
    f1, excluded = {}, {}
    for w, m in report.per_keyword.items():
        if m["detected"] == 0:
            excluded[w] = "never detected: precision undefined"
        else:
            f1[w] = m["f1"]
    return f1, excluded


def micro_f1(report):
    """Localisation F1 recomputed from the per-keyword counts."""
    loc = sum(m["correct_locations"] for m in report.per_keyword.values())
    det = sum(m["detected"] for m in report.per_keyword.values())
    occ = sum(m["occurrences"] for m in report.per_keyword.values())
    return _prf(loc, det, occ)["f1"]


def confusion_top_words(scores, alignments, keyword, k_utts=20, k_words=5):
    """Words found at the predicted location in the ``k_utts`` top-ranked utterances.

    Returns up to ``k_words`` ``(word, count)`` pairs, most frequent first and
    alphabetical on ties; a location in a gap is tallied as ``"--"``.
    """
    if keyword not in scores.vocab:
        raise InputError(f"keyword {keyword!r} not in vocabulary")
    j = scores.vocab.index(keyword)
    tally = Counter()
    for i in ranking(scores, j)[:k_utts]:
        word = alignments[scores.utt_ids[i]].word_at(scores.taus_ms[i, j])
        tally[GAP if word is None else word] += 1
    return sorted(tally.items(), key=lambda kv: (-kv[1], kv[0]))[:k_words]


def _union_ms(spans):
    total, end = 0, None
    for s in sorted(spans, key=lambda s: s.start_ms):
        lo = s.start_ms if end is None else max(s.start_ms, end)
        if s.end_ms > lo:
            total += s.end_ms - lo
        end = s.end_ms if end is None else max(end, s.end_ms)
    return total


def oracle_pairs(alignments, utt_ids, vocab):
    """(alignment, keyword) pairs where the keyword occurs."""
    out = []
    for u in utt_ids:
        ali = alignments[u]
        words = set(ali.word_list())
        out.extend((ali, w) for w in vocab if w in words)
    return out


def chance_accuracy(alignments, utt_ids, vocab):
    """Expected oracle accuracy of a uniformly random ``tau``.

    Equals the mean over keyword occurrences of keyword duration over
    utterance duration.
    """
    pairs = oracle_pairs(alignments, utt_ids, vocab)
    if not pairs:
        raise InputError("no keyword occurrences to compute a chance baseline")
    return float(np.mean([_union_ms(ali.spans_of(w)) / ali.dur_ms for ali, w in pairs]))


def chance_accuracy_mc(alignments, utt_ids, vocab, n_draws=200, seed=0):
    """Monte-Carlo estimate of :func:`chance_accuracy` with ``tau ~ U[0, dur)``."""
    pairs = oracle_pairs(alignments, utt_ids, vocab)
    if not pairs:
        raise InputError("no keyword occurrences to compute a chance baseline")
    rng = np.random.default_rng(seed)
    hits = 0
    for ali, w in pairs:
        taus = rng.uniform(0.0, ali.dur_ms, n_draws)
        spans = ali.spans_of(w)
        hits += int(sum(((taus >= s.start_ms) & (taus < s.end_ms)).sum() for s in spans))
    return hits / (n_draws * len(pairs))
