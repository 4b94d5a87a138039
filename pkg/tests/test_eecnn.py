import dataclasses

import numpy as np
import pytest
import torch

from helpers import MINI, gradient_check
from semcolor.colorspace import ChromaMap, merge_l_ab, rgb_to_lab, lab_to_rgb
from semcolor.eecnn import (
    PRESETS,
    ColorizationNet,
    ConstantEmbedder,
    EeCnnConfig,
    build_network,
    checkpoint_bytes,
    constant_embedder,
    decode,
    encode,
    forward,
    fuse,
    init_weights,
    load_checkpoint,
    provider_from_name,
    save_checkpoint,
)
from semcolor.errors import CorruptCheckpointError, FingerprintError, ShapeError


@pytest.fixture(scope="module")
def mini_weights():
    return init_weights(MINI, seed=3)


@pytest.fixture(scope="module")
def mini_provider():
    return constant_embedder(MINI.embedding_dim, seed=3)


def test_default_encoder_shape():
    w = init_weights(PRESETS["default"], seed=0)
    enc = encode(np.full((304, 304), 50.0), w)
    assert enc.shape == (38, 38, 512)


@pytest.mark.parametrize("n", [8, 16, 64])
def test_encoder_reduces_by_eight(mini_weights, n):
    assert encode(np.zeros((n, n)), mini_weights).shape == (n // 8, n // 8, 8)


@pytest.mark.parametrize("shape", [(8, 8), (9, 13), (31, 32), (64, 40), (300, 300)])
def test_forward_keeps_size(mini_weights, mini_provider, shape):
    l = np.random.default_rng(0).uniform(0, 100, shape)
    ab = forward(l, mini_provider, mini_weights)
    assert isinstance(ab, ChromaMap)
    assert ab.shape == shape
    assert ab.a.min() >= -128 and ab.a.max() <= 127


def test_forward_deterministic(mini_weights, mini_provider):
    l = np.random.default_rng(1).uniform(0, 100, (24, 24))
    a = forward(l, mini_provider, mini_weights)
    b = forward(l, mini_provider, mini_weights)
    assert np.array_equal(a.a, b.a) and np.array_equal(a.b, b.b)


def test_same_seed_same_weights():
    a, b = init_weights(MINI, 7), init_weights(MINI, 7)
    c = init_weights(MINI, 8)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not all(np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_fusion_replicates_embedding(mini_weights):
    net = build_network(mini_weights)
    enc = torch.randn(1, 8, 3, 5)
    emb = torch.arange(4, dtype=torch.float32)[None]
    x = net.fusion_input(enc, emb)
    assert x.shape == (1, 12, 3, 5)
    assert torch.equal(x[:, :8], enc)
    for c in range(4):
        assert torch.all(x[0, 8 + c] == c)


def test_fusion_embedding_changes_every_position(mini_weights):
    rng = np.random.default_rng(0)
    enc = rng.standard_normal((2, 2, 8))
    emb = rng.standard_normal(4)
    other = emb.copy()
    other[2] += 1.0
    a = fuse(enc, emb, mini_weights)
    b = fuse(enc, other, mini_weights)
    assert a.shape == (2, 2, MINI.fusion_channels)
    # One coordinate of the global vector reaches every spatial position.
    diff = np.abs(a - b).sum(axis=-1)
    assert np.all(diff > 0)


def test_fusion_zero_embedding_matches_no_embedding_weights(mini_weights):
    net = build_network(mini_weights)
    enc = torch.randn(1, 8, 2, 2)
    x = net.fusion_input(enc, torch.zeros(1, 4))
    assert torch.all(x[:, 8:] == 0)


def test_decode_shape_and_bounds(mini_weights):
    fused = np.random.default_rng(0).standard_normal((3, 4, MINI.fusion_channels)) * 50
    ab = decode(fused, mini_weights, np.full((24, 32), 40.0))
    assert ab.shape == (24, 32)
    assert ab.a.min() >= -128 and ab.b.max() <= 127


def test_luminance_untouched(mini_weights, mini_provider):
    gray = merge_l_ab(np.linspace(0, 100, 256).reshape(16, 16), ChromaMap.zeros(16, 16))
    lab = rgb_to_lab(lab_to_rgb(gray))
    ab = forward(lab.l, mini_provider, mini_weights)
    merged = merge_l_ab(lab.l, ab)
    assert np.array_equal(merged.l, lab.l)


def test_embedding_dim_mismatch(mini_weights):
    with pytest.raises(ShapeError):
        forward(np.zeros((8, 8)), constant_embedder(5), mini_weights)


def test_constant_embedder_properties():
    e = constant_embedder(16, seed=2)
    img = np.random.default_rng(0).uniform(0, 1, (20, 24, 3))
    v = e.embed(img)
    assert v.shape == (16,) and np.all(np.isfinite(v))
    assert np.array_equal(v, constant_embedder(16, seed=2).embed(img))
    assert not np.array_equal(v, constant_embedder(16, seed=3).embed(img))
    assert e.name == "constant:dim=16:seed=2"
    again = provider_from_name(e.name)
    assert isinstance(again, ConstantEmbedder)
    assert np.array_equal(again.embed(img), v)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"stride2_layers": (1, 2)},
        {"stride2_layers": (1, 2, 9)},
        {"kernel_size": 3},
        {"decoder_stages": 2},
        {"fusion_channels": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        EeCnnConfig(**kwargs)


def test_config_round_trip():
    cfg = PRESETS["small"]
    assert EeCnnConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.fingerprint() != PRESETS["tiny"].fingerprint()


def test_no_embedding_variant():
    cfg = dataclasses.replace(MINI, use_embedding=False)
    ab = forward(np.zeros((16, 16)), None, init_weights(cfg))
    assert ab.shape == (16, 16)


def test_checkpoint_round_trip(tmp_path, mini_weights):
    path = tmp_path / "w.ckpt"
    save_checkpoint(mini_weights, path)
    back = load_checkpoint(path, MINI)
    assert back.fingerprint == mini_weights.fingerprint
    for k, v in mini_weights.params.items():
        assert back.params[k].dtype == v.dtype
        assert np.array_equal(back.params[k], v)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_fingerprint_mismatch(tmp_path, mini_weights):
    path = tmp_path / "w.ckpt"
    save_checkpoint(mini_weights, path)
    with pytest.raises(FingerprintError):
        load_checkpoint(path, PRESETS["tiny"])


@pytest.mark.parametrize("cut", [10, 200, -1])
def test_truncated_checkpoint(tmp_path, mini_weights, cut):
    path = tmp_path / "w.ckpt"
    save_checkpoint(mini_weights, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_flipped_byte_detected(tmp_path, mini_weights):
    path = tmp_path / "w.ckpt"
    save_checkpoint(mini_weights, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_build_network_rejects_wrong_shapes(mini_weights):
    bad = dict(mini_weights.params)
    key = next(iter(bad))
    bad[key] = bad[key][..., :1]
    with pytest.raises(FingerprintError):
        build_network(dataclasses.replace(mini_weights, params=bad))


def test_network_is_module():
    assert isinstance(build_network(init_weights(MINI)), ColorizationNet)


def test_gradient_check_other_seed():
    errors, zeros = gradient_check(seed=11)
    assert errors.max() <= 1e-3
    assert np.all(np.abs(zeros) < 1e-6)
