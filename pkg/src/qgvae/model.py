"""Autoencoders: global-token QG-VAE and the vanilla grid VQ-VAE baseline."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Decoder, Encoder
from .bottleneck import (HeadProjection, Quantised, collapse_transpose, expand_transpose,
                         grid_bottleneck, lookup, quantise_all)
from .codebook import CodebookBank
from .config import ModelConfig
from .ordering import OrderingMask, apply_ordering, prefix_mask


@dataclass
class ForwardResult:
    x_hat: torch.Tensor
    prequant: torch.Tensor
    quant: Quantised
    mask: OrderingMask | None = None


class QGVAE(nn.Module):
    """Encoder U-Net, global token bottleneck with per-token codebooks, decoder U-Net."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.bottleneck != "qgvae":
            raise ValueError("QGVAE needs bottleneck='qgvae'")
        self.cfg = cfg
        gw, gh = cfg.grid_size
        self.encoder = Encoder(cfg)
        self.project = HeadProjection(gw * gh, cfg.quant_dim, cfg.num_heads)
        self.bank = CodebookBank(cfg.num_tokens, cfg.codebook_size, cfg.quant_dim,
                                 cfg.codebook_share)
        self.unproject = HeadProjection(cfg.quant_dim, gw * gh, cfg.num_heads)
        self.decoder = Decoder(cfg)

    @property
    def tokens_per_image(self) -> int:
        return self.cfg.num_tokens

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def prequant(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(collapse_transpose(self.encoder(x)))

    def quantise(self, pq: torch.Tensor, mask: OrderingMask | None = None) -> Quantised:
        return quantise_all(pq, self.bank, None if mask is None else mask.mask.to(pq))

    def decode_quantised(self, q: torch.Tensor) -> torch.Tensor:
        gw, gh = self.cfg.grid_size
        return self.decoder(expand_transpose(self.unproject(q), gw, gh))

    def forward(self, x: torch.Tensor, mask: OrderingMask | None = None) -> ForwardResult:
        pq = self.prequant(x)
        quant = self.quantise(pq, mask)
        q = quant.quantised if mask is None else apply_ordering(quant.quantised, mask)
        return ForwardResult(self.decode_quantised(q), pq, quant, mask)

    def encode_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Token indices ``[B, C]``."""
        return self.quantise(self.prequant(x)).indices

    def decode_tokens(self, indices: torch.Tensor, k: int | None = None) -> torch.Tensor:
        """Decode ``[B, C]`` indices, optionally keeping only the first ``k`` tokens."""
        q = lookup(indices, self.bank)
        if k is not None:
            q = apply_ordering(q, prefix_mask(self.cfg.num_tokens, k))
        return self.decode_quantised(q)

    def weight_decay_groups(self):
        decay, no_decay = [], []
        for name, p in self.named_parameters():
            (no_decay if name.startswith("bank.") else decay).append(p)
        return decay, no_decay


class GridVQVAE(nn.Module):
    """Same backbone, but each spatial position of the bottleneck is one local token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.bottleneck != "grid":
            raise ValueError("GridVQVAE needs bottleneck='grid'")
        self.cfg = cfg
        self.encoder = Encoder(cfg, out_channels=cfg.quant_dim)
        self.bank = CodebookBank(1, cfg.codebook_size, cfg.quant_dim)
        self.decoder = Decoder(cfg, in_channels=cfg.quant_dim)

    @property
    def tokens_per_image(self) -> int:
        return self.cfg.num_tokens

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def prequant(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def quantise(self, fm: torch.Tensor, mask: OrderingMask | None = None) -> Quantised:
        if mask is not None:
            raise ValueError("the grid baseline has no token ordering")
        return grid_bottleneck(fm, self.bank.codebooks[0])

    def decode_quantised(self, q: torch.Tensor) -> torch.Tensor:
        return self.decoder(q)

    def forward(self, x: torch.Tensor, mask: OrderingMask | None = None) -> ForwardResult:
        fm = self.prequant(x)
        quant = self.quantise(fm, mask)
        return ForwardResult(self.decoder(quant.quantised), fm, quant, None)

    def encode_tokens(self, x: torch.Tensor) -> torch.Tensor:
        return self.quantise(self.prequant(x)).indices.flatten(1)

    def decode_tokens(self, indices: torch.Tensor, k: int | None = None) -> torch.Tensor:
        if k is not None:
            raise ValueError("the grid baseline has no token ordering")
        gw, gh = self.cfg.grid_size
        book = self.bank.codebooks[0]
        if indices.min() < 0 or indices.max() >= book.shape[0]:
            raise ValueError("token index out of codebook range")
        q = book[indices.reshape(-1, gw, gh)].permute(0, 3, 1, 2)
        return self.decoder(q)

    def weight_decay_groups(self):
        decay, no_decay = [], []
        for name, p in self.named_parameters():
            (no_decay if name.startswith("bank.") else decay).append(p)
        return decay, no_decay


def build_model(cfg: ModelConfig) -> nn.Module:
    return QGVAE(cfg) if cfg.bottleneck == "qgvae" else GridVQVAE(cfg)


def model_digest(model: nn.Module) -> bytes:
    """16-byte digest of the configuration and all decoding-relevant tensors."""
    h = hashlib.blake2b(digest_size=16)
    h.update(repr(sorted(vars(model.cfg).items())).encode())
    for name, t in sorted(model.state_dict().items()):
        if name.endswith(("grad_accum", "steps_since_reset")):
            continue
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.digest()
