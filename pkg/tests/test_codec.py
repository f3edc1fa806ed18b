import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from qgvae import codec
from qgvae.codec import (HEADER_SIZE, FormatError, IndexRangeError, LengthError,
                         ModelMismatchError, TokenFile, bits_per_index, pack_indices,
                         payload_size, unpack_indices)
from qgvae.config import preset
from qgvae.model import QGVAE, GridVQVAE, model_digest

from conftest import tiny_model_config


def oracle_pack(indices, v):
    bits = "".join(format(int(i), f"0{int(np.ceil(np.log2(v)))}b") for i in indices)
    bits += "0" * (-len(bits) % 8)
    return bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8))


def test_benchmark_byte_counts():
    assert payload_size(256, 512) == 288
    assert payload_size(64, 512) == 72
    assert len(pack_indices(np.full(256, 511), 512)) == 288
    assert len(pack_indices(np.zeros(64, dtype=int), 512)) == 72


def test_single_bit_layout():
    assert pack_indices([1], 2) == bytes([0b1000_0000])
    assert pack_indices([2, 1], 3) == bytes([0b1001_0000])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(2, 5000))
def test_payload_formula(c, v):
    assert payload_size(c, v) == -(-c * int(np.ceil(np.log2(v))) // 8)


@settings(max_examples=1000, deadline=None)
@given(st.integers(2, 1024), st.data())
def test_pack_round_trip(v, data):
    c = data.draw(st.integers(1, 64))
    idx = data.draw(st.lists(st.integers(0, v - 1), min_size=c, max_size=c))
    payload = pack_indices(idx, v)
    assert payload == oracle_pack(idx, v)
    assert unpack_indices(payload, c, v).tolist() == idx


def test_pack_errors():
    with pytest.raises(IndexRangeError):
        pack_indices([4], 4)
    with pytest.raises(IndexRangeError):
        pack_indices([-1], 4)
    with pytest.raises(LengthError):
        unpack_indices(bytes(71), 64, 512)
    with pytest.raises(IndexRangeError):
        unpack_indices(bytes([0b1100_0000]), 1, 3)   # 3 >= V
    with pytest.raises(ValueError):
        bits_per_index(1)


def _file(c=64, v=512):
    rng = np.random.default_rng(0)
    return TokenFile(c, v, 32, 32, 0, bytes(range(16)), rng.integers(0, v, c))


def test_header_layout_and_round_trip():
    tf = _file()
    data = tf.to_bytes()
    assert len(data) == HEADER_SIZE + 72 and HEADER_SIZE == 30
    assert data[:4] == b"QGVT" and data[4] == 1
    assert data[5:7] == (64).to_bytes(2, "big") and data[7:9] == (512).to_bytes(2, "big")
    back = TokenFile.from_bytes(data)
    assert (back.num_tokens, back.codebook_size, back.width, back.height, back.downscale,
            back.model_id) == (64, 512, 32, 32, 0, bytes(range(16)))
    assert np.array_equal(back.indices, tf.indices)


def test_header_errors():
    data = _file().to_bytes()
    with pytest.raises(FormatError):
        TokenFile.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        TokenFile.from_bytes(data[:4] + bytes([9]) + data[5:])
    with pytest.raises(LengthError):
        TokenFile.from_bytes(data[:-1])
    with pytest.raises(LengthError):
        TokenFile.from_bytes(data[:10])


def test_file_io(tmp_path):
    tf = _file()
    path = tmp_path / "x.qgvt"
    codec.write_token_file(path, tf)
    assert path.stat().st_size == 102
    assert np.array_equal(codec.read_token_file(path).indices, tf.indices)
    assert [p.name for p in tmp_path.iterdir()] == ["x.qgvt"]


def test_token_counts_of_presets():
    assert QGVAE(preset("mnist", unet_channels=8, unet_blocks=1)).tokens_per_image == 64
    celeba = preset("celeba64")
    assert celeba.num_tokens == 256 and payload_size(celeba.num_tokens, celeba.codebook_size) == 288


@pytest.mark.parametrize("kind", ["qgvae", "grid"])
def test_codec_transparency(kind):
    cfg = tiny_model_config(num_tokens=16, num_heads=4)
    if kind == "grid":
        from qgvae.config import grid_counterpart
        cfg = grid_counterpart(cfg)
    model = (QGVAE if kind == "qgvae" else GridVQVAE)(cfg).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    for _ in range(5):
        x = torch.rand(1, 1, 16, 16) * 2 - 1
        tf = codec.compress(x, model)
        assert tf.num_tokens == cfg.num_tokens
        restored = codec.decompress(TokenFile.from_bytes(tf.to_bytes()), model)
        with torch.no_grad():
            direct = model(x).x_hat
        assert torch.equal(restored, direct)


def test_model_mismatch_refused():
    cfg = tiny_model_config()
    a, b = QGVAE(cfg), QGVAE(cfg)
    tf = codec.compress(torch.zeros(1, 1, 16, 16), a)
    with pytest.raises(ModelMismatchError):
        codec.decompress(tf, b)
    assert model_digest(a) == tf.model_id
    other = QGVAE(tiny_model_config(codebook_size=16))
    tf2 = codec.compress(torch.zeros(1, 1, 16, 16), a)
    with pytest.raises(ModelMismatchError):
        codec.decompress(tf2, other, model_id=tf2.model_id)


def test_digest_ignores_reset_bookkeeping():
    model = QGVAE(tiny_model_config())
    d = model_digest(model)
    model.bank.grad_accum += 1
    model.bank.steps_since_reset += 3
    assert model_digest(model) == d
    with torch.no_grad():
        model.bank.codebooks[0, 0, 0] += 1
    assert model_digest(model) != d
