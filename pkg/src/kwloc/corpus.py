"""Synthetic keyword corpora with exact word alignments, and their file formats.

A corpus directory holds::

    vocab.txt           one keyword per line; line i is keyword index i
    alignments.jsonl    {"utt", "dur_ms", "words": [{"w", "start_ms", "end_ms"}]}
    features/<utt>.kwsf one feature matrix per utterance
    manifest.json       config, seed and split membership; written last

Feature files are ``b"KWSF"``, u16 version, u16 frame period (ms), u32 T,
u32 D, then ``T*D`` float32 values, time-major, all little-endian.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

FEATURE_MAGIC = b"KWSF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHHII")
MANIFEST_FORMAT = "kwloc-corpus"
SPLITS = ("train", "dev", "test")

KEYWORD_NAMES = (
    "dog", "beach", "soccer", "snow", "ball", "water", "grass", "bike",
    "girl", "boy", "camera", "football", "player", "car", "race", "mountain",
    "street", "jumping", "running", "swimming", "rock", "air", "wearing", "dogs",
    "three", "shirt", "red", "field", "people", "young",
)
FILLER_NAMES = (
    "a", "the", "is", "in", "on", "of", "and", "with", "at", "an",
    "are", "his", "her", "to", "from", "into", "by", "two", "some", "while",
)


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray
    frame_period_ms: int = 10

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def dur_ms(self):
        return self.n_frames * self.frame_period_ms


@dataclass(frozen=True)
class WordSpan:
    word: str
    start_ms: int
    end_ms: int

    def contains(self, ms):
        return self.start_ms <= ms < self.end_ms


@dataclass(frozen=True)
class Alignment:
    utt_id: str
    dur_ms: int
    words: tuple

    def word_list(self):
        return [s.word for s in self.words]

    def spans_of(self, word):
        return [s for s in self.words if s.word == word]

    def word_at(self, ms):
        """The aligned word covering time ``ms``, or ``None`` in a gap."""
        for s in self.words:
            if s.contains(ms):
                return s.word
        return None

    def to_json(self):
        return {
            "utt": self.utt_id,
            "dur_ms": self.dur_ms,
            "words": [{"w": s.word, "start_ms": s.start_ms, "end_ms": s.end_ms} for s in self.words],
        }


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    features: FeatureMatrix
    alignment: Alignment


# --- feature files -----------------------------------------------------------

def write_features(path, data, frame_period_ms=10):
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ConfigError(f"feature matrix must be non-empty (T, D), got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ConfigError("feature matrix contains non-finite values")
    T, D = data.shape
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, int(frame_period_ms), T, D))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_features(path):
    raw = Path(path).read_bytes()
    return parse_features(raw, path)


def parse_features(raw, path=None):
    n_head = _FEATURE_HEADER.size
    if len(raw) < len(FEATURE_MAGIC):
        raise FormatError("truncated feature header", offset=len(raw), path=path)
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic {raw[:4]!r}", offset=0, path=path)
    if len(raw) < n_head:
        raise FormatError("truncated feature header", offset=len(raw), path=path)
    _, version, period, T, D = _FEATURE_HEADER.unpack_from(raw, 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature version {version}", offset=4, path=path)
    if period < 1:
        raise FormatError("frame period must be >= 1 ms", offset=6, path=path)
    if T == 0:
        raise FormatError("empty utterance (T=0)", offset=8, path=path)
    if D == 0:
        raise FormatError("zero feature dimension", offset=12, path=path)
    expected = n_head + 4 * T * D
    if len(raw) < expected:
        raise FormatError(
            f"truncated feature data: expected {expected} bytes, got {len(raw)}",
            offset=len(raw), path=path,
        )
    if len(raw) > expected:
        raise FormatError("trailing bytes after feature data", offset=expected, path=path)
    data = np.frombuffer(raw, dtype="<f4", count=T * D, offset=n_head).reshape(T, D)
    if not np.all(np.isfinite(data)):
        raise FormatError("non-finite feature values", offset=n_head, path=path)
    return FeatureMatrix(data=data.astype(np.float32), frame_period_ms=period)


# --- alignments and vocabulary -------------------------------------------------

_UTT_KEYS = {"utt", "dur_ms", "words"}
_WORD_KEYS = {"w", "start_ms", "end_ms"}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def parse_alignment(record, line=None, path=None):
    def fail(msg):
        raise FormatError(msg, line=line, path=path)

    if not isinstance(record, dict) or set(record) != _UTT_KEYS:
        fail(f"alignment record must have exactly the keys {sorted(_UTT_KEYS)}")
    utt, dur, words = record["utt"], record["dur_ms"], record["words"]
    if not isinstance(utt, str) or not utt:
        fail("'utt' must be a non-empty string")
    if not _is_int(dur) or dur <= 0:
        fail("'dur_ms' must be a positive integer")
    if not isinstance(words, list):
        fail("'words' must be a list")
    spans = []
    prev_end = 0
    for w in words:
        if not isinstance(w, dict) or set(w) != _WORD_KEYS:
            fail(f"word entries must have exactly the keys {sorted(_WORD_KEYS)}")
        if not isinstance(w["w"], str) or not w["w"]:
            fail("word 'w' must be a non-empty string")
        start, end = w["start_ms"], w["end_ms"]
        if not (_is_int(start) and _is_int(end)):
            fail("word times must be integers")
        if end <= start:
            fail(f"word {w['w']!r} has end_ms {end} <= start_ms {start}")
        if start < prev_end:
            fail(f"word {w['w']!r} at {start} ms overlaps the previous span or is out of order")
        if start < 0 or end > dur:
            fail(f"word {w['w']!r} span [{start}, {end}) lies outside [0, {dur})")
        spans.append(WordSpan(w["w"], start, end))
        prev_end = end
    return Alignment(utt_id=utt, dur_ms=dur, words=tuple(spans))


def read_alignments(path):
    """Load a JSON-lines alignment file into ``{utt_id: Alignment}``."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, text in enumerate(f, start=1):
            if not text.strip():
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", line=lineno, path=path) from None
            ali = parse_alignment(record, line=lineno, path=path)
            if ali.utt_id in out:
                raise FormatError(f"duplicate utterance {ali.utt_id!r}", line=lineno, path=path)
            out[ali.utt_id] = ali
    return out


def write_alignments(path, alignments):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ali in alignments:
            f.write(json.dumps(ali.to_json(), sort_keys=True) + "\n")


def read_vocab(path):
    words = []
    seen = {}
    with open(path, encoding="utf-8") as f:
        for lineno, text in enumerate(f, start=1):
            word = text.rstrip("\r\n")
            if not word.strip():
                raise FormatError("empty vocabulary line", line=lineno, path=path)
            if word in seen:
                raise FormatError(
                    f"duplicate keyword {word!r} (first on line {seen[word]})",
                    line=lineno, path=path,
                )
            seen[word] = lineno
            words.append(word)
    if not words:
        raise FormatError("empty vocabulary", line=0, path=path)
    return words


def write_vocab(path, vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for w in vocab:
            f.write(w + "\n")


# --- synthesis -----------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``adjacent_pairs`` plants co-occurrences: for each ``[a, b]`` every
    occurrence of keyword ``a`` is immediately followed by keyword ``b``.
    ``tempo_jitter`` stretches each spoken word by a factor drawn uniformly
    from ``[1 - j, 1 + j]``, so no two occurrences are identical.
    """

    vocab_size: int = 10
    feature_dim: int = 13
    frame_period_ms: int = 10
    words_per_utt: tuple = (3, 6)
    word_dur_ms: tuple = (250, 450)
    gap_ms: tuple = (0, 150)
    noise_sigma: float = 0.5
    tempo_jitter: float = 0.0
    n_fillers: int = 10
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0
    adjacent_pairs: tuple = ()

    def __post_init__(self):
        for name in ("words_per_utt", "word_dur_ms", "gap_ms"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "adjacent_pairs", tuple(tuple(p) for p in self.adjacent_pairs))
        self.validate()

    def validate(self):
        def bad(field_name, msg):
            raise ConfigError(f"{field_name}: {msg}")

        if self.vocab_size < 2:
            bad("vocab_size", f"must be >= 2, got {self.vocab_size}")
        if self.vocab_size > len(KEYWORD_NAMES) + 1000:
            bad("vocab_size", "too large")
        if self.feature_dim < 1:
            bad("feature_dim", "must be >= 1")
        if self.frame_period_ms < 1:
            bad("frame_period_ms", "must be >= 1")
        if self.n_fillers < 1:
            bad("n_fillers", "must be >= 1")
        if self.n_fillers > len(FILLER_NAMES) + 1000:
            bad("n_fillers", "too large")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("words_per_utt", "word_dur_ms", "gap_ms"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1]:
                bad(name, f"must be a [min, max] range, got {list(lo_hi)}")
        if self.words_per_utt[0] < 1:
            bad("words_per_utt", "minimum must be >= 1")
        if self.word_dur_ms[0] < self.frame_period_ms:
            bad("word_dur_ms", "words must last at least one frame")
        if self.gap_ms[0] < 0:
            bad("gap_ms", "must be >= 0")
        if self.noise_sigma < 0:
            bad("noise_sigma", "must be >= 0")
        if not 0 <= self.tempo_jitter < 1:
            bad("tempo_jitter", f"must lie in [0, 1), got {self.tempo_jitter}")
        vocab = set(vocabulary(self.vocab_size))
        for pair in self.adjacent_pairs:
            if len(pair) != 2 or not set(pair) <= vocab or pair[0] == pair[1]:
                bad("adjacent_pairs", f"{list(pair)} is not a pair of distinct keywords")

    def to_dict(self):
        d = asdict(self)
        for k in ("words_per_utt", "word_dur_ms", "gap_ms"):
            d[k] = list(d[k])
        d["adjacent_pairs"] = [list(p) for p in self.adjacent_pairs]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SynthConfig field(s): {sorted(unknown)}")
        return cls(**d)


def _names(base, n, prefix):
    if n <= len(base):
        return list(base[:n])
    return list(base) + [f"{prefix}{i:03d}" for i in range(len(base), n)]


def vocabulary(n):
    return _names(KEYWORD_NAMES, n, "kw")


def filler_words(n):
    return _names(FILLER_NAMES, n, "fill")


def make_templates(cfg):
    """The fixed ``(frames, D)`` pattern of every keyword and filler word."""
    rng = np.random.default_rng([cfg.seed, 0])
    lo, hi = (int(round(ms / cfg.frame_period_ms)) for ms in cfg.word_dur_ms)
    templates = {}
    for word in vocabulary(cfg.vocab_size) + filler_words(cfg.n_fillers):
        n = int(rng.integers(max(lo, 1), max(hi, 1) + 1))
        templates[word] = rng.standard_normal((n, cfg.feature_dim))
    return templates


def _stretch(tpl, factor):
    """Linearly resample ``tpl`` along time to ``round(len * factor)`` frames."""
    n = max(int(round(len(tpl) * factor)), 1)
    src = np.linspace(0.0, len(tpl) - 1, n)
    idx = np.arange(len(tpl))
    return np.stack([np.interp(src, idx, tpl[:, d]) for d in range(tpl.shape[1])], axis=1)


def render_utterance(cfg, words, gaps, templates, rng, utt_id):
    """Lay ``words`` out with ``gaps`` (frames; one more than words) and add noise."""
    period = cfg.frame_period_ms
    pieces, spans = [], []
    gaps = [int(g) for g in gaps]
    t = 0
    for i, word in enumerate(words):
        pieces.append(np.zeros((gaps[i], cfg.feature_dim)))
        t += gaps[i]
        tpl = templates[word]
        if cfg.tempo_jitter > 0:
            tpl = _stretch(tpl, 1.0 + rng.uniform(-cfg.tempo_jitter, cfg.tempo_jitter))
        pieces.append(tpl)
        spans.append(WordSpan(word, t * period, (t + len(tpl)) * period))
        t += len(tpl)
    pieces.append(np.zeros((gaps[-1], cfg.feature_dim)))
    t += gaps[-1]
    clean = np.concatenate(pieces, axis=0)
    noisy = clean + cfg.noise_sigma * rng.standard_normal(clean.shape)
    feats = FeatureMatrix(noisy.astype(np.float32), period)
    return Utterance(utt_id, feats, Alignment(utt_id, t * period, tuple(spans)))


def generate(cfg):
    """Yield ``(split, Utterance)`` for the whole corpus, deterministically."""
    templates = make_templates(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    keywords = vocabulary(cfg.vocab_size)
    pool = keywords + filler_words(cfg.n_fillers)
    follow = dict(cfg.adjacent_pairs)
    g_lo, g_hi = (int(round(ms / cfg.frame_period_ms)) for ms in cfg.gap_ms)
    counts = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    for split in SPLITS:
        for i in range(counts[split]):
            n_words = int(rng.integers(cfg.words_per_utt[0], cfg.words_per_utt[1] + 1))
            words = []
            for j in rng.integers(0, len(pool), n_words):
                words.append(pool[j])
                if pool[j] in follow:
                    words.append(follow[pool[j]])
            gaps = rng.integers(g_lo, g_hi + 1, len(words) + 1)
            yield split, render_utterance(cfg, words, gaps, templates, rng, f"{split}_{i:05d}")


def synth_corpus(cfg, out_dir):
    """Write a corpus for ``cfg`` under ``out_dir`` and return it loaded."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    splits = {s: [] for s in SPLITS}
    alignments = []
    for split, utt in generate(cfg):
        write_features(out / "features" / f"{utt.utt_id}.kwsf", utt.features.data, cfg.frame_period_ms)
        alignments.append(utt.alignment)
        splits[split].append(utt.utt_id)
    write_vocab(out / "vocab.txt", vocabulary(cfg.vocab_size))
    write_alignments(out / "alignments.jsonl", alignments)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "splits": splits,
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return load_corpus(out)


# --- loading -------------------------------------------------------------------

@dataclass
class Corpus:
    root: Path
    vocab: list
    alignments: dict
    splits: dict
    manifest: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def frame_period_ms(self):
        return self.manifest.get("config", {}).get("frame_period_ms", 10)

    def features(self, utt_id):
        if utt_id not in self._cache:
            self._cache[utt_id] = read_features(self.root / "features" / f"{utt_id}.kwsf")
        return self._cache[utt_id]

    def utterance(self, utt_id):
        return Utterance(utt_id, self.features(utt_id), self.alignments[utt_id])

    def utterances(self, split):
        return [self.utterance(u) for u in self.splits[split]]


def load_corpus(root):
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid manifest JSON: {exc.msg}", line=exc.lineno, path=manifest_path) from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError("not a kwloc corpus manifest", path=manifest_path)
    vocab = read_vocab(root / "vocab.txt")
    alignments = read_alignments(root / "alignments.jsonl")
    splits = {s: list(manifest["splits"].get(s, [])) for s in SPLITS}
    for split, ids in splits.items():
        missing = [u for u in ids if u not in alignments]
        if missing:
            raise FormatError(f"{split} utterances without alignment: {missing[:3]}", path=manifest_path)
    return Corpus(root=root, vocab=vocab, alignments=alignments, splits=splits, manifest=manifest)
