import struct

import numpy as np
import pytest

from fd import numeric_grad, rel_error
from kwloc.errors import ConfigError, FormatError, InputError
from kwloc.models import (
    ARCHITECTURES,
    architecture_spec,
    build_architecture,
    checkpoint_extra,
    detect_from_encoding,
    encoder_length,
    forward_detect,
    forward_full,
    frame_map,
    load_checkpoint,
    min_input_frames,
    param_layout,
    receptive_field_center,
    save_checkpoint,
)
from kwloc.numerics import Tape, log_mean_exp, sigmoid

SMALL = {
    "PSC": dict(channels=[6, 6, 6, 6, 6, 6]),
    "CNN-Pool": dict(channels=[6, 8, 10], hidden=12),
    "CNN-Attend": dict(channels=[6, 6, 6, 6, 6, 8], hidden=12),
    "CNN-PoolAttend": dict(channels=[6, 8, 10], hidden=12),
}


def small(name, V=4, seed=0, D=5):
    return build_architecture(name, V, seed=seed, input_dim=D, **SMALL[name])


# full-size layouts

def test_cnn_pool_full_layout():
    spec = architecture_spec("CNN-Pool", 67)
    assert [(c.filters, c.width, c.pool) for c in spec.encoder] == [(64, 9, 3), (256, 11, 3), (1024, 11, 0)]
    assert spec.pooling == "max"
    assert spec.classifier == (4096, 67)


def test_cnn_attend_full_layout():
    spec = architecture_spec("CNN-Attend", 67)
    assert [c.filters for c in spec.encoder] == [96, 96, 96, 96, 96, 1000]
    assert [c.width for c in spec.encoder] == [9, 11, 11, 11, 11, 11]
    assert [c.padding for c in spec.encoder] == [4, 5, 5, 5, 5, 5]
    assert spec.pooling == "attention"
    assert spec.embed_dim == 1000
    assert spec.classifier == (4096, 1)


def test_psc_full_layout():
    spec = architecture_spec("PSC", 10)
    assert [c.filters for c in spec.encoder] == [96, 96, 96, 96, 96, 10]
    assert spec.pooling == "log-mean-exp"
    assert spec.classifier == ()
    assert not spec.encoder[-1].relu


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        architecture_spec("RNN", 10)


def test_spec_round_trip():
    for name in ARCHITECTURES:
        spec = architecture_spec(name, 7, **SMALL[name])
        assert type(spec).from_dict(spec.to_dict()) == spec


def test_init_deterministic_and_shapes():
    for name in ARCHITECTURES:
        a, b = small(name, seed=3), small(name, seed=3)
        for pname, shape in param_layout(a.spec):
            assert a[pname].shape == shape
            assert a[pname].dtype == np.float32
            assert np.array_equal(a[pname], b[pname])
        assert not np.array_equal(small(name, seed=4)[param_layout(a.spec)[0][0]], a[param_layout(a.spec)[0][0]])


def test_glorot_bounds():
    p = small("CNN-Attend")
    w = p["enc.0.weight"]
    fan_in, fan_out = w.shape[1] * w.shape[2], w.shape[0] * w.shape[2]
    assert np.abs(w).max() <= np.sqrt(6 / (fan_in + fan_out))
    assert np.all(p["enc.0.bias"] == 0)


# forward

@pytest.mark.parametrize("name", ARCHITECTURES)
def test_forward_shapes(name):
    p = small(name)
    x = np.random.default_rng(0).normal(size=(40, 5))
    det, enc, weights = forward_full(p, x)
    assert det.probs.shape == (4,)
    assert np.all((det.probs >= 0) & (det.probs <= 1))
    assert np.array_equal(det.probs, sigmoid(det.logits))
    assert enc.H.shape[0] == encoder_length(p.spec, 40)
    if p.spec.is_attention:
        assert weights.shape == (4, enc.H.shape[0])
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
    else:
        assert weights is None


@pytest.mark.parametrize("name", ARCHITECTURES)
def test_forward_detect_matches_full(name):
    p = small(name)
    rng = np.random.default_rng(1)
    for _ in range(100 if name == "CNN-Attend" else 10):
        x = rng.normal(size=(int(rng.integers(30, 60)), 5))
        w = int(rng.integers(0, 4))
        assert np.array_equal(forward_detect(p, x, w).probs, forward_full(p, x, w)[0].probs)


def test_forward_deterministic_and_batched():
    p = small("CNN-Attend")
    xs = np.random.default_rng(2).normal(size=(3, 30, 5))
    one = [forward_full(p, x)[0].probs for x in xs]
    again = [forward_full(p, x)[0].probs for x in xs]
    batched = forward_full(p, xs)[0].probs
    for i in range(3):
        assert np.array_equal(one[i], again[i])
        assert np.array_equal(one[i], batched[i])


def test_psc_constant_encoder_rows():
    p = small("PSC")
    H = np.full((12, 4), 0.7)
    det, _ = detect_from_encoding(p, H)
    np.testing.assert_allclose(det.probs, sigmoid(np.full(4, 0.7)), rtol=1e-12)


def test_psc_score_is_lme_of_h():
    p = small("PSC")
    x = np.random.default_rng(3).normal(size=(25, 5))
    det, enc, _ = forward_full(p, x)
    assert np.array_equal(det.logits, log_mean_exp(enc.H, p.spec.lme_r, axis=-2))


def test_cnn_pool_score_is_classifier_of_temporal_max():
    p = small("CNN-Pool")
    x = np.random.default_rng(4).normal(size=(60, 5))
    det, enc, _ = forward_full(p, x)
    h = np.maximum(enc.H.max(axis=0) @ p["clf.0.weight"].astype(np.float64).T + p["clf.0.bias"], 0)
    logits = h @ p["clf.1.weight"].astype(np.float64).T + p["clf.1.bias"]
    np.testing.assert_allclose(det.logits, logits, rtol=1e-10)


def test_zero_query_gives_mean_context():
    p = small("CNN-Attend")
    arrays = dict(p.arrays)
    arrays["query"] = np.zeros_like(arrays["query"])
    p = p.with_arrays(arrays)
    x = np.random.default_rng(5).normal(size=(30, 5))
    _, enc, weights = forward_full(p, x, 1)
    np.testing.assert_allclose(weights[0], 1 / enc.H.shape[0])
    # order along time does not matter when attention is uniform
    H = enc.H
    a, _ = detect_from_encoding(p, H, 1)
    b, _ = detect_from_encoding(p, H[::-1].copy(), 1)
    np.testing.assert_allclose(a.probs, b.probs, rtol=1e-12)


@pytest.mark.parametrize("name", ["PSC", "CNN-Pool", "CNN-Attend"])
def test_vocab_permutation_permutes_output(name):
    p = small(name)
    perm = np.array([2, 0, 3, 1])
    arrays = dict(p.arrays)
    if name == "PSC":
        last = len(p.spec.encoder) - 1
        arrays[f"enc.{last}.weight"] = arrays[f"enc.{last}.weight"][perm]
        arrays[f"enc.{last}.bias"] = arrays[f"enc.{last}.bias"][perm]
    elif name == "CNN-Pool":
        arrays["clf.1.weight"] = arrays["clf.1.weight"][perm]
        arrays["clf.1.bias"] = arrays["clf.1.bias"][perm]
    else:
        arrays["query"] = arrays["query"][perm]
    q = p.with_arrays(arrays)
    x = np.random.default_rng(6).normal(size=(40, 5))
    np.testing.assert_allclose(forward_detect(q, x).probs, forward_detect(p, x).probs[perm], rtol=1e-12)


def test_keyword_out_of_range():
    p = small("CNN-Attend")
    with pytest.raises(InputError):
        forward_full(p, np.zeros((30, 5)), 4)


def test_too_short_input_names_minimum():
    p = small("CNN-Pool")
    n = min_input_frames(p.spec)
    assert encoder_length(p.spec, n) == 1 and encoder_length(p.spec, n - 1) == 0
    with pytest.raises(InputError, match=str(n)):
        forward_full(p, np.zeros((n - 1, 5)))


def test_wrong_feature_dim_and_nan():
    p = small("CNN-Attend")
    with pytest.raises(InputError):
        forward_full(p, np.zeros((30, 6)))
    x = np.zeros((30, 5))
    x[3, 1] = np.nan
    with pytest.raises(InputError):
        forward_full(p, x)


def test_model_loss_gradient_matches_fd():
    p = small("CNN-Attend", V=2, D=3).astype(np.float64)
    x = np.random.default_rng(7).normal(size=(12, 3))
    for name in ["enc.0.weight", "query", "clf.1.weight"]:
        arr = p.arrays[name].copy()

        def f():
            q = p.with_arrays(dict(p.arrays, **{name: arr}))
            return float(forward_full(q, x)[0].probs.sum())

        tape = Tape()
        q = p.with_arrays(dict(p.arrays, **{name: arr}))
        det, _, _ = forward_full(q, x, tape=tape)
        (g,) = tape.gradients(det.probs, [q[name]])
        assert rel_error(g, numeric_grad(f, arr)) < 1e-4


# receptive fields

def test_cnn_centre_is_identity():
    spec = architecture_spec("CNN-Attend", 4)
    n = 50
    assert encoder_length(spec, n) == n
    for t in range(n):
        assert receptive_field_center(spec, t, n) == t


def test_cnn_pool_centres():
    spec = architecture_spec("CNN-Pool", 4)
    n = 200
    n_out = encoder_length(spec, n)
    assert n_out == n // 9
    # unclipped interval of step t spans [9t - 4 - 15 - 45, 9t + 8 + 4 + 15 + 45]
    for t in range(1, n_out - 1):
        assert receptive_field_center(spec, t, n) == 9 * t + 4
    assert receptive_field_center(spec, 0) == 4
    centres = [receptive_field_center(spec, t, n) for t in range(n_out)]
    assert centres == sorted(centres)


def test_centre_out_of_range():
    spec = architecture_spec("CNN-Attend", 4)
    with pytest.raises(InputError):
        receptive_field_center(spec, 50, 50)
    with pytest.raises(InputError):
        receptive_field_center(spec, -1)


def test_frame_map_monotone_and_within_bounds():
    for name in ARCHITECTURES:
        spec = architecture_spec(name, 4)
        fm = frame_map(spec, 120)
        assert np.all(np.diff(fm[:, 0]) >= 0) and np.all(np.diff(fm[:, 1]) >= 0)
        assert fm.min() >= 0 and fm.max() < 120


# checkpoints

@pytest.mark.parametrize("name", ARCHITECTURES)
def test_checkpoint_round_trip(tmp_path, name):
    p = small(name, seed=9)
    path = tmp_path / "m.kwck"
    save_checkpoint(p, path, extra={"vocab": ["a", "b", "c", "d"]})
    q = load_checkpoint(path)
    assert q.spec == p.spec and q.seed == p.seed and q.epoch == p.epoch
    for k in p.arrays:
        assert q[k].tobytes() == p[k].tobytes()
    x = np.random.default_rng(0).normal(size=(40, 5))
    assert np.array_equal(forward_full(p, x)[0].probs, forward_full(q, x)[0].probs)
    assert checkpoint_extra(path) == {"vocab": ["a", "b", "c", "d"]}
    save_checkpoint(q, tmp_path / "again.kwck", extra={"vocab": ["a", "b", "c", "d"]})
    assert (tmp_path / "again.kwck").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.kwck"
    save_checkpoint(small("CNN-Attend"), path)
    raw = path.read_bytes()
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + struct.pack("<H", 9) + raw[6:],
        "truncated": raw[:-3],
        "trailing": raw + b"\0",
        "short": raw[:5],
    }
    for label, data in cases.items():
        bad = tmp_path / f"{label}.kwck"
        bad.write_bytes(data)
        with pytest.raises(FormatError, match="offset"):
            load_checkpoint(bad)
