import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ildvit import autodiff as ad
from ildvit.model import (CHECKPOINT_MAGIC, DropoutStream, ModelConfig, ModelParams, checkpoint_bytes,
                          count_parameters, forward, init_params, load_checkpoint, mha_forward,
                          model_forward, parameter_shapes, parse_checkpoint, patchify, predict,
                          save_checkpoint, transformer_block, unpatchify)

from conftest import TINY
from gradcheck import H, relative_error

DEFAULT = ModelConfig()


@pytest.fixture(scope="module")
def params():
    return init_params(DEFAULT, seed=3)


# ---------------------------------------------------------------- ledger

def test_ledger_stage_by_stage():
    ledger = count_parameters(DEFAULT)
    assert ledger["patch_encoder"] == 16448
    assert [ledger[f"block{i}"] for i in range(1, 5)] == [83200] * 4
    assert ledger["final_ln"] == 128 and ledger["head"] == 130
    assert ledger["total"] == 349506


def test_three_block_total():
    assert count_parameters(ModelConfig(n_blocks=3))["total"] == 16448 + 3 * 83200 + 128 + 130 == 266306


def test_mha_and_ln_counts_from_shapes():
    shapes = parameter_shapes(DEFAULT)
    mha = sum(int(np.prod(s)) for k, s in shapes.items() if k.startswith("block1.mha."))
    assert mha == 3 * (64 * 256 + 256) + (256 * 64 + 64) == 66368
    ln = sum(int(np.prod(s)) for k, s in shapes.items() if k.startswith("block1.ln1."))
    assert ln == 128


def test_ledger_matches_allocated_arrays(params):
    assert params.n_parameters == 349506
    assert sum(a.size for a in params.arrays.values()) == count_parameters()["total"]


@pytest.mark.parametrize("kwargs", [dict(image_size=60), dict(mlp_dims=(128, 32)), dict(dropout=1.0),
                                    dict(n_heads=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


# ---------------------------------------------------------------- init

def test_init_is_seeded(params):
    again = init_params(DEFAULT, seed=3)
    assert all(np.array_equal(params[k], again[k]) for k in params.arrays)
    other = init_params(DEFAULT, seed=4)
    assert not np.array_equal(params["head.kernel"], other["head.kernel"])


def test_init_distributions(params):
    for k, v in params.arrays.items():
        if k.endswith(".gamma"):
            assert np.all(v == 1)
        if k.endswith(".bias") or k.endswith(".beta"):
            assert np.all(v == 0)
    k = params["patch_encoder.kernel"]
    assert k.size >= 10_000
    target = 2.0 / (k.shape[0] + k.shape[1])
    assert abs(k.var() / target - 1) <= 0.20
    pos = params["patch_encoder.position"]
    assert abs(pos.std() - 0.02) <= 0.002


# ---------------------------------------------------------------- patches

def test_patchify_order():
    img = np.arange(64 * 64 * 3, dtype=float).reshape(64, 64, 3)
    p = patchify(img)
    assert p.shape == (64, 192)
    # patch 9 is grid row 1, column 1; its first row of pixels comes first, channels interleaved
    assert np.array_equal(p[9, :3], img[8, 8])
    assert np.array_equal(p[9, 3:6], img[8, 9])
    assert np.array_equal(p[9, 24:27], img[9, 8])
    assert np.array_equal(p[1], img[0:8, 8:16].reshape(-1))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), batch=st.integers(1, 3))
def test_patchify_round_trip(seed, batch):
    x = np.random.default_rng(seed).random((batch, 64, 64, 3))
    assert np.array_equal(unpatchify(patchify(x)), x)


# ---------------------------------------------------------------- layers

def test_uniform_attention_when_query_and_key_vanish(params):
    p = params.copy()
    for n in ("query", "key"):
        p.arrays[f"block1.mha.{n}.kernel"][:] = 0
    y = np.random.default_rng(0).standard_normal((1, 64, 64))
    out, attn = mha_forward(ad.Tensor(y), p.tensors(), "block1.", DEFAULT)
    assert np.allclose(attn.data, 1 / 64, atol=1e-15)
    v = y @ p["block1.mha.value.kernel"] + p["block1.mha.value.bias"]
    expected = v.mean(axis=1, keepdims=True) @ p["block1.mha.output.kernel"] + p["block1.mha.output.bias"]
    assert np.allclose(out.data, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_zero_weight_block_is_identity(params):
    p = params.copy()
    for k in p.arrays:
        if k.startswith("block1.") and (k.endswith(".kernel") or k.endswith(".bias")):
            p.arrays[k][:] = 0
    y = np.random.default_rng(1).standard_normal((2, 64, 64))
    out, _ = transformer_block(ad.Tensor(y), p.tensors(), 1, DEFAULT, training=False)
    assert out.shape == (2, 64, 64)
    assert np.array_equal(out.data, y)


def test_forward_contract(params):
    img = np.random.default_rng(2).random((64, 64, 3))
    res = model_forward(img, params)
    assert res.probs.shape == (2,) and np.all((res.probs > 0) & (res.probs < 1))
    assert res.gap_embedding.shape == (64,)
    assert len(res.attention_maps) == 4
    for a in res.attention_maps:
        assert a.shape == (4, 64, 64)
        assert np.allclose(a.sum(-1), 1, atol=1e-12)
    assert np.allclose(res.probs, 1 / (1 + np.exp(-res.logits)))


def test_inference_is_deterministic_and_training_uses_stream(params):
    img = np.random.default_rng(3).random((2, 64, 64, 3))
    a, b = model_forward(img, params), model_forward(img, params)
    assert a.probs.tobytes() == b.probs.tobytes()
    t1 = model_forward(img, params, training=True, seed=1, step=0)
    t2 = model_forward(img, params, training=True, seed=1, step=0)
    t3 = model_forward(img, params, training=True, seed=1, step=1)
    assert t1.probs.tobytes() == t2.probs.tobytes()
    assert not np.array_equal(t1.probs, t3.probs)
    with pytest.raises(ValueError):
        forward(params.tensors(), patchify(img), DEFAULT, training=True)


def test_gap_ignores_joint_patch_and_position_permutation(params):
    img = np.random.default_rng(4).random((64, 64, 3))
    patches = patchify(img)[None]
    perm = np.random.default_rng(5).permutation(64)
    p2 = params.copy()
    p2.arrays["patch_encoder.position"] = params["patch_encoder.position"][perm]
    a = forward(params.tensors(), patches, DEFAULT)
    b = forward(p2.tensors(), patches[:, perm], DEFAULT)
    assert np.allclose(a.gap_embedding.data, b.gap_embedding.data, atol=1e-12)
    assert np.allclose(a.probs.data, b.probs.data, atol=1e-12)


def test_predict_matches_forward_bit_for_bit(params):
    imgs = np.random.default_rng(6).random((5, 64, 64, 3))
    probs, emb, attn = predict(params, imgs, keep_attention=True)
    ref = model_forward(imgs, params)
    assert emb.tobytes() == ref.gap_embedding.tobytes()
    assert probs.tobytes() == ref.probs.tobytes()
    assert attn.shape == (5, 4, 4, 64, 64)


# ---------------------------------------------------------------- gradients

def _loss(tensors, patches, target, config, seed=0):
    out = forward(tensors, patches, config, training=True, stream=DropoutStream(seed, 0))
    return ad.binary_cross_entropy(out.probs, target)


def model_gradcheck(config, n_params, seed, batch=2):
    """Max relative error between tape and central differences on sampled parameter entries."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    patches = patchify(rng.random((batch, config.image_size, config.image_size, 3)), config.patch_size)
    target = np.eye(2)[np.arange(batch) % 2]
    tensors = params.tensors(requires_grad=True)
    with ad.Tape() as tape:
        loss = _loss(tensors, patches, target, config)
    ad.backward(loss, tape)
    names = list(params.arrays)
    picks = [names[i % len(names)] for i in rng.permutation(max(n_params, len(names)))[:n_params]]
    worst = 0.0
    for name in picks:
        idx = tuple(rng.integers(0, s) for s in params[name].shape)

        def at(delta):
            p = params.copy()
            p.arrays[name][idx] += delta
            return float(_loss(p.tensors(), patches, target, config).data)

        numeric = (at(H) - at(-H)) / (2 * H)
        worst = max(worst, relative_error(tensors[name].grad[idx], numeric))
    return worst, len(set(picks))


def test_end_to_end_gradient_tiny_model_every_tensor():
    worst, covered = model_gradcheck(TINY, n_params=len(parameter_shapes(TINY)) * 3, seed=0)
    assert covered == len(parameter_shapes(TINY))
    assert worst < 1e-4


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.ildv"
    n = save_checkpoint(path, params, {"note": "x"})
    assert n == path.stat().st_size
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "x"} and loaded.config == DEFAULT
    assert all(loaded[k].tobytes() == params[k].tobytes() for k in params.arrays)
    f32 = params.astype(np.float32)
    back, _ = parse_checkpoint(checkpoint_bytes(f32))
    assert back.dtype == np.float32 and back["head.kernel"].tobytes() == f32["head.kernel"].tobytes()


def test_checkpoint_layout(params):
    data = checkpoint_bytes(params.astype(np.float32))
    assert data[:8] == CHECKPOINT_MAGIC
    version, hlen = struct.unpack_from("<II", data, 8)
    header = json.loads(data[16:16 + hlen])
    assert version == header["version"] == 1
    offset = 0
    for e in header["tensors"]:
        assert e["offset"] == offset and e["dtype"] == "<f4"
        assert e["nbytes"] == 4 * int(np.prod(e["shape"]))
        raw = np.frombuffer(data, "<f4", int(np.prod(e["shape"])), 16 + hlen + offset)
        assert np.array_equal(raw.reshape(e["shape"]), params[e["name"]].astype(np.float32))
        offset += e["nbytes"]
    assert len(data) == 16 + hlen + offset


def test_checkpoint_rejects_garbage(params):
    with pytest.raises(ValueError):
        parse_checkpoint(b"NOTACKPT" + bytes(16))
    data = bytearray(checkpoint_bytes(params))
    data[8] = 9
    with pytest.raises(ValueError):
        parse_checkpoint(bytes(data))


def test_checkpoint_bytes_are_deterministic(params):
    assert checkpoint_bytes(params) == checkpoint_bytes(params.copy())
    assert isinstance(params.copy(), ModelParams)
