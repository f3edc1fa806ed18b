"""Token file format: a fixed header followed by bit-packed codeword indices.

Layout (big-endian)::

    magic        4 bytes   b"QGVT"
    version      u8
    num_tokens   u16       C
    codebook     u16       V
    width        u16       W
    height       u16       H
    downscale    u8        f
    model_id     16 bytes  digest of the checkpoint that produced the tokens
    payload      ceil(C * ceil(log2 V) / 8) bytes

Each index occupies ``ceil(log2 V)`` bits, most significant bit first, in
token order; the last byte is zero-padded.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import model_digest

MAGIC = b"QGVT"
VERSION = 1
_HEADER = struct.Struct(">4sBHHHHB16s")
HEADER_SIZE = _HEADER.size


class CodecError(ValueError):
    pass


class FormatError(CodecError):
    """Bad magic or unsupported version."""


class LengthError(CodecError):
    """Payload length disagrees with the header."""


class IndexRangeError(CodecError):
    """A token index is outside the codebook."""


class ModelMismatchError(CodecError):
    """Token file was produced by a different model."""


def bits_per_index(codebook_size: int) -> int:
    if codebook_size < 2:
        raise ValueError("codebook size must be >= 2")
    return (codebook_size - 1).bit_length()


def payload_size(num_tokens: int, codebook_size: int) -> int:
    return -(-num_tokens * bits_per_index(codebook_size) // 8)


def pack_indices(indices, codebook_size: int) -> bytes:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= codebook_size):
        raise IndexRangeError(f"index outside [0, {codebook_size})")
    b = bits_per_index(codebook_size)
    shifts = np.arange(b - 1, -1, -1, dtype=np.int64)
    bits = ((idx[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_indices(payload: bytes, num_tokens: int, codebook_size: int) -> np.ndarray:
    expected = payload_size(num_tokens, codebook_size)
    if len(payload) != expected:
        raise LengthError(f"payload is {len(payload)} bytes, header implies {expected}")
    b = bits_per_index(codebook_size)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:num_tokens * b]
    weights = 1 << np.arange(b - 1, -1, -1, dtype=np.int64)
    idx = bits.reshape(num_tokens, b).astype(np.int64) @ weights
    if idx.size and idx.max() >= codebook_size:
        raise IndexRangeError(f"decoded index {int(idx.max())} >= {codebook_size}")
    return idx


@dataclass
class TokenFile:
    num_tokens: int
    codebook_size: int
    width: int
    height: int
    downscale: int
    model_id: bytes
    indices: np.ndarray
    version: int = VERSION

    def header_bytes(self) -> bytes:
        if len(self.model_id) != 16:
            raise CodecError("model_id must be 16 bytes")
        return _HEADER.pack(MAGIC, self.version, self.num_tokens, self.codebook_size,
                            self.width, self.height, self.downscale, self.model_id)

    def to_bytes(self) -> bytes:
        if len(self.indices) != self.num_tokens:
            raise CodecError(f"{len(self.indices)} indices for {self.num_tokens} tokens")
        return self.header_bytes() + pack_indices(self.indices, self.codebook_size)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TokenFile":
        if len(data) < HEADER_SIZE:
            raise LengthError(f"file is {len(data)} bytes, header needs {HEADER_SIZE}")
        magic, version, c, v, w, h, f, model_id = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported token file version {version}")
        idx = unpack_indices(data[HEADER_SIZE:], c, v)
        return cls(c, v, w, h, f, model_id, idx, version)


def write_token_file(path: str | Path, tf: TokenFile) -> None:
    path = Path(path)
    data = tf.to_bytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_token_file(path: str | Path) -> TokenFile:
    return TokenFile.from_bytes(Path(path).read_bytes())


@torch.no_grad()
def compress(image: torch.Tensor, model, model_id: bytes | None = None) -> TokenFile:
    """Encode one image ``[in, W, H]`` (or ``[1, in, W, H]``) into a token file."""
    if image.dim() == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise ValueError("compress takes a single image")
    model.eval()
    cfg = model.cfg
    idx = model.encode_tokens(image)[0].cpu().numpy()
    return TokenFile(cfg.num_tokens, cfg.codebook_size, cfg.image_size[0], cfg.image_size[1],
                     cfg.downscale_factor, model_id or model_digest(model), idx)


@torch.no_grad()
def decompress(tf: TokenFile, model, model_id: bytes | None = None) -> torch.Tensor:
    """Rebuild the image ``[1, in, W, H]`` from a token file."""
    cfg = model.cfg
    if tf.model_id != (model_id or model_digest(model)):
        raise ModelMismatchError("token file was written by a different model")
    got = (tf.num_tokens, tf.codebook_size, tf.width, tf.height, tf.downscale)
    want = (cfg.num_tokens, cfg.codebook_size, *cfg.image_size, cfg.downscale_factor)
    if got != want:
        raise ModelMismatchError(f"header {got} does not match model config {want}")
    model.eval()
    device = next(model.parameters()).device
    idx = torch.as_tensor(tf.indices, dtype=torch.long, device=device)[None]
    return model.decode_tokens(idx)
