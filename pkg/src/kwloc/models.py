"""Keyword detection networks built as encoder -> temporal pooling -> classifier.

Four architectures are available:

=============== ========= ============ ==================
name            encoder   pooling      classifier
=============== ========= ============ ==================
PSC             CNN       log-mean-exp none
CNN-Pool        CNN-Pool  max          MLP(K, hidden, V)
CNN-Attend      CNN       attention    MLP(K, hidden, 1)
CNN-PoolAttend  CNN-Pool  attention    MLP(K, hidden, 1)
=============== ========= ============ ==================

The CNN encoder is six stride-1 "same" convolutions (96x9, 4 x 96x11,
1000x11); CNN-Pool is 64x9, 256x11, 1024x11 with non-overlapping max pooling
over 3 frames after the first two layers. PSC swaps the last CNN layer for one
with ``V`` filters and no ReLU so that each channel is a per-frame keyword
score. Attention models pool with a learned query per keyword and share the
classifier across keywords.

Parameters are stored as float32; the forward pass runs in float64.
"""

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .numerics import (
    Conv1DLayer,
    conv1d,
    conv_output_length,
    dot_attention,
    gather_rows,
    linear,
    log_mean_exp,
    maxpool1d,
    pool_output_length,
    relu,
    reshape,
    sigmoid,
)

ARCHITECTURES = ("PSC", "CNN-Pool", "CNN-Attend", "CNN-PoolAttend")

CNN_CHANNELS = (96, 96, 96, 96, 96, 1000)
CNN_WIDTHS = (9, 11, 11, 11, 11, 11)
CNN_PADDINGS = (4, 5, 5, 5, 5, 5)
CNN_POOL_CHANNELS = (64, 256, 1024)
CNN_POOL_WIDTHS = (9, 11, 11)
CNN_POOL_PADDINGS = (4, 5, 5)
INTERMEDIATE_POOL = 3
CLASSIFIER_HIDDEN = 4096
DEFAULT_LME_R = 1.0

_ENCODER = {
    "PSC": "CNN",
    "CNN-Pool": "CNN-Pool",
    "CNN-Attend": "CNN",
    "CNN-PoolAttend": "CNN-Pool",
}
_POOLING = {
    "PSC": "log-mean-exp",
    "CNN-Pool": "max",
    "CNN-Attend": "attention",
    "CNN-PoolAttend": "attention",
}


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    width: int
    padding: int
    pool: int = 0
    relu: bool = True


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    vocab_size: int
    input_dim: int
    encoder: tuple
    pooling: str
    classifier: tuple = ()
    lme_r: float = DEFAULT_LME_R

    @property
    def embed_dim(self):
        return self.encoder[-1].filters

    @property
    def is_attention(self):
        return self.pooling == "attention"

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = [asdict(c) for c in self.encoder]
        d["classifier"] = list(self.classifier)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = tuple(ConvSpec(**c) for c in d["encoder"])
        d["classifier"] = tuple(d["classifier"])
        return cls(**d)


def architecture_spec(name, vocab_size, input_dim=13, *, channels=None, hidden=None,
                      lme_r=DEFAULT_LME_R):
    """Describe architecture ``name``.

    ``channels`` overrides the per-layer filter counts of the encoder (6 values
    for CNN, 3 for CNN-Pool; for PSC the last is replaced by ``vocab_size``)
    and ``hidden`` the classifier width, e.g. for desk-scale runs. The defaults
    are the full-size models.
    """
    if name not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    if vocab_size < 1:
        raise ConfigError(f"vocab_size must be >= 1, got {vocab_size}")
    if input_dim < 1:
        raise ConfigError(f"input_dim must be >= 1, got {input_dim}")
    if not lme_r > 0:
        raise ConfigError(f"lme_r must be > 0, got {lme_r}")
    hidden = CLASSIFIER_HIDDEN if hidden is None else int(hidden)

    if _ENCODER[name] == "CNN":
        default, widths, paddings, pools = CNN_CHANNELS, CNN_WIDTHS, CNN_PADDINGS, (0,) * 6
    else:
        default = CNN_POOL_CHANNELS
        widths, paddings = CNN_POOL_WIDTHS, CNN_POOL_PADDINGS
        pools = (INTERMEDIATE_POOL, INTERMEDIATE_POOL, 0)
    channels = tuple(int(c) for c in (default if channels is None else channels))
    if len(channels) != len(default):
        raise ConfigError(
            f"{name} encoder has {len(default)} layers, got {len(channels)} channel counts"
        )
    if any(c < 1 for c in channels) or hidden < 1:
        raise ConfigError("channel counts and hidden width must be >= 1")

    encoder = [ConvSpec(c, w, p, pool) for c, w, p, pool in zip(channels, widths, paddings, pools)]
    classifier = ()
    if name == "PSC":
        encoder[-1] = ConvSpec(vocab_size, widths[-1], paddings[-1], 0, relu=False)
    elif name == "CNN-Pool":
        classifier = (hidden, vocab_size)
    else:
        classifier = (hidden, 1)
    return ArchitectureSpec(
        name=name,
        vocab_size=vocab_size,
        input_dim=input_dim,
        encoder=tuple(encoder),
        pooling=_POOLING[name],
        classifier=classifier,
        lme_r=float(lme_r) if name == "PSC" else DEFAULT_LME_R,
    )


@dataclass(frozen=True)
class ModelParams:
    """Weights of one model. Arrays are in declaration order (see :func:`param_layout`)."""

    spec: ArchitectureSpec
    arrays: dict
    seed: int = 0
    epoch: int = 0

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def with_arrays(self, arrays, **meta):
        return replace(self, arrays=dict(arrays), **meta)

    def astype(self, dtype):
        return self.with_arrays({k: v.astype(dtype) for k, v in self.arrays.items()})


def param_layout(spec):
    """Ordered ``(name, shape)`` pairs for ``spec``."""
    layout = []
    in_dim = spec.input_dim
    for i, conv in enumerate(spec.encoder):
        layout.append((f"enc.{i}.weight", (conv.filters, in_dim, conv.width)))
        layout.append((f"enc.{i}.bias", (conv.filters,)))
        in_dim = conv.filters
    if spec.is_attention:
        layout.append(("query", (spec.vocab_size, in_dim)))
    for j, out_dim in enumerate(spec.classifier):
        layout.append((f"clf.{j}.weight", (out_dim, in_dim)))
        layout.append((f"clf.{j}.bias", (out_dim,)))
        in_dim = out_dim
    return layout


def _glorot_bound(shape):
    if len(shape) == 3:
        fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
    else:
        fan_in, fan_out = shape[1], shape[0]
    return np.sqrt(6.0 / (fan_in + fan_out))


def init_params(spec, seed=0):
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_layout(spec):
        if name == "query":
            values = rng.standard_normal(shape) / np.sqrt(shape[1])
        elif name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            bound = _glorot_bound(shape)
            values = rng.uniform(-bound, bound, shape)
        arrays[name] = values.astype(np.float32)
    return ModelParams(spec=spec, arrays=arrays, seed=seed, epoch=0)


def build_architecture(name, vocab_size, seed=0, input_dim=13, **overrides):
    """Build and initialise one of :data:`ARCHITECTURES`."""
    return init_params(architecture_spec(name, vocab_size, input_dim, **overrides), seed)


# --- index bookkeeping -------------------------------------------------------

def encoder_length(spec, n_in):
    n = n_in
    for conv in spec.encoder:
        n = conv_output_length(n, conv.width, conv.padding)
        if n < 1:
            return 0
        if conv.pool:
            if n < conv.pool:
                return 0
            n = pool_output_length(n, conv.pool, conv.pool)
    return n


def min_input_frames(spec):
    n = 1
    while encoder_length(spec, n) < 1:
        n += 1
    return n


def _receptive_interval(spec, t):
    lo = hi = t
    for conv in reversed(spec.encoder):
        if conv.pool:
            lo, hi = conv.pool * lo, conv.pool * hi + conv.pool - 1
        lo, hi = lo - conv.padding, hi - conv.padding + conv.width - 1
    return lo, hi


def receptive_field_center(spec, t, n_frames=None):
    """Input frame at the centre of encoder step ``t``'s receptive field.

    The interval is computed without boundary effects, then the centre is
    clipped to ``[0, n_frames)`` when ``n_frames`` is given.
    """
    if t < 0:
        raise InputError(f"encoder index must be >= 0, got {t}")
    if n_frames is not None:
        n_out = encoder_length(spec, n_frames)
        if t >= n_out:
            raise InputError(f"encoder index {t} out of range for {n_out} encoder steps")
    lo, hi = _receptive_interval(spec, t)
    centre = (lo + hi) // 2
    if n_frames is not None:
        centre = min(max(centre, 0), n_frames - 1)
    return centre


def frame_map(spec, n_frames):
    """``(n_out, 2)`` array of clipped receptive-field intervals ``[start, end]``."""
    n_out = encoder_length(spec, n_frames)
    out = np.empty((n_out, 2), dtype=np.int64)
    for t in range(n_out):
        lo, hi = _receptive_interval(spec, t)
        out[t] = (max(lo, 0), min(hi, n_frames - 1))
    return out


def frame_centres(spec, n_frames):
    return np.array(
        [receptive_field_center(spec, t, n_frames) for t in range(encoder_length(spec, n_frames))],
        dtype=np.int64,
    )


# --- forward -----------------------------------------------------------------

@dataclass
class EncoderOutput:
    """Encoder activations ``H`` (``(..., T', K)``) and, per encoder step, its
    clipped receptive field ``[start, end]`` and centre in input frames."""

    H: np.ndarray
    frame_map: np.ndarray
    centres: np.ndarray


@dataclass
class DetectionResult:
    """Probabilities and pre-sigmoid scores.

    ``keywords`` lists the vocabulary index of each entry along the last axis.
    """

    probs: np.ndarray
    logits: np.ndarray
    keywords: np.ndarray


def _check_input(spec, features):
    x = np.asarray(features)
    if x.ndim < 2 or x.shape[-1] != spec.input_dim:
        raise InputError(
            f"expected features of shape (..., T, {spec.input_dim}), got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise InputError("features contain non-finite values")
    need = min_input_frames(spec)
    if x.shape[-2] < need:
        raise InputError(
            f"utterance has {x.shape[-2]} frames; {spec.name} needs at least {need}"
        )
    return x


def _keyword_index(spec, keyword):
    V = spec.vocab_size
    if keyword is None:
        return np.arange(V)
    idx = np.atleast_1d(np.asarray(keyword, dtype=np.int64))
    if np.any(idx < 0) or np.any(idx >= V):
        raise InputError(f"keyword index out of range for vocabulary of size {V}: {keyword}")
    return idx


def encode(params, features, tape=None):
    """Run the encoder; returns ``H`` with shape ``(..., T', K)``."""
    spec = params.spec
    h = features
    for i, conv in enumerate(spec.encoder):
        layer = Conv1DLayer(params[f"enc.{i}.weight"], params[f"enc.{i}.bias"], conv.padding)
        h = conv1d(h, layer, tape)
        if conv.relu:
            h = relu(h, tape)
        if conv.pool:
            h = maxpool1d(h, conv.pool, conv.pool, tape)
    return h


def _classify(params, x, tape):
    n = len(params.spec.classifier)
    for j in range(n):
        x = linear(x, params[f"clf.{j}.weight"], params[f"clf.{j}.bias"], tape)
        if j < n - 1:
            x = relu(x, tape)
    return x


def forward_full(params, features, keyword=None, tape=None):
    """Detection plus internal activations.

    ``features`` is ``(T, D)`` or batched ``(B, T, D)``. For attention models
    ``keyword`` selects the query (an index or a sequence of indices; ``None``
    runs every keyword). For PSC and CNN-Pool all ``V`` scores are computed and
    ``keyword``, if given, selects entries of the result.

    Returns ``(DetectionResult, EncoderOutput, attention_weights)``; the last is
    ``None`` unless the model pools with attention, in which case it has shape
    ``(..., len(keywords), T')``.
    """
    spec = params.spec
    x = _check_input(spec, features)
    H = encode(params, x, tape)
    result, weights = detect_from_encoding(params, H, keyword, tape)
    n_in = x.shape[-2]
    enc = EncoderOutput(H=H, frame_map=frame_map(spec, n_in), centres=frame_centres(spec, n_in))
    return result, enc, weights


def detect_from_encoding(params, H, keyword=None, tape=None):
    """Pooling and classifier applied to encoder output ``H`` (``(..., T', K)``).

    Returns ``(DetectionResult, attention_weights)`` as in :func:`forward_full`.
    """
    spec = params.spec
    idx = _keyword_index(spec, keyword)
    weights = None
    if spec.pooling == "log-mean-exp":
        logits = log_mean_exp(H, spec.lme_r, axis=-2, tape=tape)
    elif spec.pooling == "max":
        n_t = H.shape[-2]
        pooled = maxpool1d(H, n_t, n_t, tape)
        pooled = reshape(pooled, pooled.shape[:-2] + pooled.shape[-1:], tape)
        logits = _classify(params, pooled, tape)
    else:
        q = gather_rows(params["query"], idx, tape)
        weights, context = dot_attention(H, q, tape)
        out = _classify(params, context, tape)
        logits = reshape(out, out.shape[:-1], tape)

    if not spec.is_attention and keyword is not None:
        logits = _select(logits, idx, tape)
    probs = sigmoid(logits, tape)
    return DetectionResult(probs=probs, logits=logits, keywords=idx), weights


def _select(x, idx, tape):
    out = x[..., idx]
    if tape is not None:
        def vjp(g):
            gx = np.zeros(x.shape)
            np.add.at(gx, (..., idx), g)
            return (gx,)
        tape.record(out, (x,), vjp)
    return out


def forward_detect(params, features, keyword=None):
    return forward_full(params, features, keyword)[0]


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"KWCK"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sHI")


def save_checkpoint(params, path, extra=None):
    """Write ``params`` as ``KWCK | u16 version | u32 header_len | JSON | f32 blobs``.

    Blobs are little-endian float32 in :func:`param_layout` order.
    """
    header = {
        "spec": params.spec.to_dict(),
        "seed": int(params.seed),
        "epoch": int(params.epoch),
        "params": [[name, list(shape)] for name, shape in param_layout(params.spec)],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        f.write(blob)
        for name, shape in param_layout(params.spec):
            arr = np.asarray(params[name])
            if arr.shape != tuple(shape):
                raise ConfigError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < _CKPT_PREFIX.size:
        raise FormatError("truncated checkpoint prefix", offset=len(data), path=path)
    magic, version, n_header = _CKPT_PREFIX.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0, path=path)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)
    pos = _CKPT_PREFIX.size
    if len(data) < pos + n_header:
        raise FormatError("truncated checkpoint header", offset=len(data), path=path)
    try:
        header = json.loads(data[pos:pos + n_header].decode("utf-8"))
        spec = ArchitectureSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid checkpoint header: {exc}", offset=pos, path=path) from None
    pos += n_header
    layout = param_layout(spec)
    if [[n, list(s)] for n, s in layout] != header.get("params"):
        raise FormatError("checkpoint parameter table does not match its spec", offset=pos, path=path)
    arrays = {}
    for name, shape in layout:
        n_bytes = 4 * int(np.prod(shape))
        if len(data) < pos + n_bytes:
            raise FormatError(f"truncated weights for {name}", offset=len(data), path=path)
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n_bytes // 4, offset=pos) \
            .reshape(shape).astype(np.float32)
        pos += n_bytes
    if pos != len(data):
        raise FormatError("trailing bytes after weights", offset=pos, path=path)
    return ModelParams(spec=spec, arrays=arrays, seed=header["seed"], epoch=header["epoch"])


def checkpoint_extra(path):
    """The free-form ``extra`` header field of a checkpoint (e.g. the vocabulary)."""
    data = Path(path).read_bytes()
    _, _, n_header = _CKPT_PREFIX.unpack_from(data, 0)
    header = json.loads(data[_CKPT_PREFIX.size:_CKPT_PREFIX.size + n_header])
    return header.get("extra", {})
