"""Codebook bank with gradient-magnitude tracking and dead-codeword relocation.

Every codeword accumulates the L2 norm of its code-loss gradient over a
window of training steps. At the end of the window, codewords whose
accumulator is (still) zero were never selected; each one is moved onto the
codeword with the largest accumulator plus a small random offset, splitting
that overloaded Voronoi cell in two.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


class CodebookBank(nn.Module):
    """``num_codebooks`` codebooks of ``V`` codewords in ``d`` dimensions.

    ``group_of[c]`` names the codebook used by frequency ``c``; with
    ``share == 1`` it is the identity.
    """

    def __init__(self, num_frequencies: int, size: int, dim: int, share: int = 1):
        super().__init__()
        if num_frequencies % share:
            raise ValueError("share must divide the number of frequencies")
        groups = num_frequencies // share
        self.size = size
        self.dim = dim
        self.codebooks = nn.Parameter(torch.empty(groups, size, dim).uniform_(-1 / size, 1 / size))
        self.register_buffer("group_of", torch.arange(num_frequencies) // share)
        self.register_buffer("grad_accum", torch.zeros(groups, size, dtype=torch.float64))
        self.register_buffer("steps_since_reset", torch.zeros((), dtype=torch.long))

    @property
    def num_codebooks(self) -> int:
        return self.codebooks.shape[0]


@dataclass
class ResetPolicy:
    window: int = 100
    perturb_scale: float = 1e-3
    threshold: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("reset window must be >= 1")
        if not self.perturb_scale > 0:
            raise ValueError("perturb_scale must be positive")


@dataclass
class ResetEvent:
    codebook: int
    from_index: int
    to_index: int
    distance: float

    def as_dict(self) -> dict:
        return {"codebook": self.codebook, "from": self.from_index, "to": self.to_index,
                "distance": self.distance}


def codeword_grad_norms(pq: torch.Tensor, indices: torch.Tensor, bank: CodebookBank,
                        code_weight: float = 1.0,
                        mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-codeword code-loss gradient magnitudes for one batch, ``[G, V]``.

    Each (sample, frequency) selection contributes the L2 norm of the
    gradient its own term of ``code_weight * code_loss`` puts on the chosen
    codeword; contributions are summed over the batch. Masked columns
    contribute nothing.
    """
    with torch.no_grad():
        b, d, c = pq.shape
        w = torch.ones(b, c, dtype=pq.dtype, device=pq.device)
        if mask is not None:
            w = w * mask.to(pq.dtype).expand(b, c)
        active = w.sum()
        out = torch.zeros(bank.num_codebooks, bank.size, dtype=torch.float64, device=pq.device)
        if active == 0:
            return out
        books = bank.codebooks[bank.group_of]                           # [C, V, d]
        chosen = books[torch.arange(c, device=pq.device)[None, :], indices]  # [B, C, d]
        diff = chosen - pq.permute(0, 2, 1)
        # d/de of (w / (n*d)) * ||e - x||^2 is 2 w (e - x) / (n*d)
        norms = (2.0 * code_weight / (active * d)) * diff.norm(dim=-1) * w   # [B, C]
        flat = bank.group_of[None, :].expand(b, c) * bank.size + indices
        out.view(-1).index_add_(0, flat.reshape(-1), norms.reshape(-1).double())
        return out


def accumulate(bank: CodebookBank, norms: torch.Tensor) -> CodebookBank:
    if norms.shape != bank.grad_accum.shape:
        raise ValueError(f"expected norms of shape {list(bank.grad_accum.shape)}, "
                         f"got {list(norms.shape)}")
    if (norms < 0).any():
        raise ValueError("gradient norms must be non-negative")
    bank.grad_accum += norms.to(bank.grad_accum)
    bank.steps_since_reset += 1
    return bank


def _unit(dim: int, generator: torch.Generator) -> torch.Tensor:
    while True:
        u = torch.randn(dim, generator=generator, dtype=torch.float64)
        n = u.norm()
        if n > 0:
            return u / n


def maybe_reset(bank: CodebookBank, policy: ResetPolicy,
                generator: torch.Generator | None = None) -> list[ResetEvent]:
    """Relocate unused codewords once the window is full.

    Within one codebook, unused codewords (accumulator <= threshold) are
    handled in ascending index order. Each goes to the codeword with the
    current largest accumulator among those not relocated in this event
    (lowest index on ties), offset by ``perturb_scale`` times the codebook's
    mean codeword norm in a random unit direction. The target's accumulator
    is then split evenly between the pair. All accumulators and the step
    counter are cleared afterwards.
    """
    if int(bank.steps_since_reset) < policy.window:
        return []
    if generator is None:
        generator = torch.Generator().manual_seed(policy.seed)
    events = []
    with torch.no_grad():
        books = bank.codebooks.data
        for g in range(bank.num_codebooks):
            acc = bank.grad_accum[g].clone()
            unused = torch.nonzero(acc <= policy.threshold).flatten().tolist()
            if not unused or len(unused) == bank.size:
                continue
            mean_norm = float(books[g].double().norm(dim=1).mean())
            step = policy.perturb_scale * (mean_norm if mean_norm > 0 else 1.0)
            eligible = torch.ones(bank.size, dtype=torch.bool, device=acc.device)
            eligible[unused] = False
            for j in unused:
                score = torch.where(eligible, acc, torch.full_like(acc, -1.0))
                target = int(torch.argmax(score))
                if score[target] <= policy.threshold:
                    break
                offset = step * _unit(bank.dim, generator)
                books[g, j] = (books[g, target].double() + offset.to(books.device)).to(books.dtype)
                acc[target] = acc[j] = acc[target] / 2
                events.append(ResetEvent(g, j, target,
                                         float((books[g, j] - books[g, target]).norm())))
        bank.grad_accum.zero_()
        bank.steps_since_reset.zero_()
    return events


def usage_entropy(indices: torch.Tensor, size: int) -> float:
    """Shannon entropy (nats) of the empirical index distribution."""
    counts = torch.bincount(indices.reshape(-1), minlength=size).double()
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * p.log()).sum())
