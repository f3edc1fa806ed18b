"""Training loop, evaluation and checkpointing."""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .backbone import NumericFault
from .codebook import ResetPolicy, accumulate, codeword_grad_norms, maybe_reset
from .config import RunConfig
from .data import ImageDataset
from .metrics import LossBreakdown, psnr_per_image, ssim_per_image, vq_loss
from .model import QGVAE, build_model
from .ordering import is_ordering_batch, sample_mask

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qgvae-checkpoint"
CHECKPOINT_VERSION = 1


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = not enabled
        torch.backends.cudnn.deterministic = enabled


@dataclass
class TrainState:
    cfg: RunConfig
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    policy: ResetPolicy
    mask_rng: torch.Generator
    reset_rng: torch.Generator
    global_step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    events: list[dict] = field(default_factory=list)


def make_optimizer(model, cfg: RunConfig) -> torch.optim.Optimizer:
    decay, no_decay = model.weight_decay_groups()
    return torch.optim.AdamW([
        {"params": decay, "weight_decay": cfg.train.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.train.lr)


def init_state(cfg: RunConfig) -> TrainState:
    t = cfg.train
    if t.deterministic:
        set_deterministic(True)
    torch.manual_seed(t.seed)
    model = build_model(cfg.model).to(t.device)
    policy = ResetPolicy(cfg.model.reset_window, t.perturb_scale, t.reset_threshold, t.seed)
    return TrainState(
        cfg=cfg, model=model, optimizer=make_optimizer(model, cfg), policy=policy,
        mask_rng=torch.Generator().manual_seed(t.seed + 1),
        reset_rng=torch.Generator().manual_seed(t.seed + 2),
    )


def _vq_view(model, prequant: torch.Tensor, indices: torch.Tensor):
    """Present any bottleneck as ``[N, d, columns]`` vectors with ``[N, columns]`` indices."""
    if isinstance(model, QGVAE):
        return prequant, indices
    b, d, w, h = prequant.shape
    return prequant.permute(0, 2, 3, 1).reshape(b * w * h, d, 1), indices.reshape(-1, 1)


def train_step(state: TrainState, batch: torch.Tensor,
               snapshot_dir: str | Path | None = None) -> LossBreakdown:
    model, cfg = state.model, state.cfg
    model.train()
    batch = batch.to(cfg.train.device)
    mask = None
    if isinstance(model, QGVAE) and is_ordering_batch(state.global_step, cfg.model.ordering_enabled):
        mask = sample_mask(cfg.model.num_tokens, state.mask_rng)
    try:
        out = model(batch, mask)
        loss = vq_loss(batch, out.x_hat, out.quant, cfg.train.code_weight,
                       cfg.train.commit_weight)
        if not torch.isfinite(loss.total):
            raise NumericFault(f"non-finite loss {loss.as_dict()}")
    except NumericFault as e:
        if snapshot_dir is not None:
            path = Path(snapshot_dir) / f"fault-step{state.global_step}.pt"
            save_checkpoint(path, state, extra={"batch": batch.cpu(), "error": str(e)})
        raise NumericFault(str(e), state.global_step) from e

    pq, idx = _vq_view(model, out.prequant, out.quant.indices)
    norms = codeword_grad_norms(pq, idx, model.bank, cfg.train.code_weight,
                                None if mask is None else mask.mask.to(pq))

    state.optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    state.optimizer.step()

    accumulate(model.bank, norms)
    events = maybe_reset(model.bank, state.policy, state.reset_rng)
    state.global_step += 1
    if events:
        state.events.append({"step": state.global_step, "relocated": len(events),
                             "moves": [[e.codebook, e.from_index, e.to_index] for e in events]})
    return loss


@torch.no_grad()
def reconstruct(model, x: torch.Tensor) -> torch.Tensor:
    model.eval()
    return model(x).x_hat


@torch.no_grad()
def evaluate(model: torch.nn.Module | Callable, dataset: ImageDataset, batch_size: int = 256,
             device: str = "cpu") -> dict:
    """Mean per-image PSNR / SSIM and overall MSE of reconstructions."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    lo, hi = dataset.value_range
    rng = hi - lo
    fn = (lambda x: reconstruct(model, x)) if isinstance(model, torch.nn.Module) else model
    psnrs, ssims, sq = [], [], 0.0
    count = 0
    for x in dataset.batches(batch_size):
        x = x.to(device)
        x_hat = fn(x)
        psnrs.append(psnr_per_image(x, x_hat, rng).cpu())
        ssims.append(ssim_per_image(x, x_hat, rng).cpu())
        sq += float(((x.double() - x_hat.double()) ** 2).sum())
        count += x.numel()
    p = torch.cat(psnrs)
    return {"psnr": float(p.mean()), "ssim": float(torch.cat(ssims).mean()),
            "mse": sq / count, "n": len(dataset)}


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(path: str | Path, state: TrainState, extra: dict | None = None) -> None:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "global_step": state.global_step,
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "rng": {"mask": state.mask_rng.get_state(), "reset": state.reset_rng.get_state(),
                "torch": torch.get_rng_state()},
    }
    if extra:
        obj.update(extra)
    _atomic_save(obj, Path(path))


def load_checkpoint(path: str | Path, device: str | None = None) -> TrainState:
    obj = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    cfg = RunConfig.from_dict(obj["config"])
    if device is not None:
        cfg.train.device = device
    state = init_state(cfg)
    state.model.load_state_dict(obj["model"])
    state.optimizer.load_state_dict(obj["optimizer"])
    state.global_step = obj["global_step"]
    state.epoch = obj["epoch"]
    state.batch_in_epoch = obj["batch_in_epoch"]
    state.mask_rng.set_state(obj["rng"]["mask"])
    state.reset_rng.set_state(obj["rng"]["reset"])
    torch.set_rng_state(obj["rng"]["torch"])
    return state


def load_model(path: str | Path, device: str = "cpu") -> torch.nn.Module:
    """Model only, in eval mode."""
    obj = torch.load(path, map_location=device, weights_only=False)
    if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    cfg = RunConfig.from_dict(obj["config"])
    model = build_model(cfg.model).to(device)
    model.load_state_dict(obj["model"])
    model.eval()
    return model


class JsonlLog:
    def __init__(self, path: str | Path | None):
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _round(d: dict) -> dict:
    return {k: (round(v, 8) if isinstance(v, float) and math.isfinite(v) else v)
            for k, v in d.items()}


def fit(state: TrainState, train_ds: ImageDataset, test_ds: ImageDataset | None = None,
        out_dir: str | Path | None = None, max_steps: int | None = None,
        progress: Callable[[TrainState, LossBreakdown], None] | None = None) -> dict | None:
    """Train until ``cfg.train.epochs`` (or ``max_steps``) is reached.

    Writes ``metrics.jsonl``, ``events.jsonl`` and ``checkpoint.pt`` under
    ``out_dir`` when given. Returns the last evaluation record.
    """
    t = state.cfg.train
    out = None if out_dir is None else Path(out_dir)
    metrics = JsonlLog(None if out is None else out / "metrics.jsonl")
    events = JsonlLog(None if out is None else out / "events.jsonl")
    last_eval = None
    started = time.time()
    while state.epoch < t.epochs:
        for batch in train_ds.batches(t.batch_size, seed=t.seed, epoch=state.epoch,
                                      start=state.batch_in_epoch):
            if max_steps is not None and state.global_step >= max_steps:
                break
            n_events = len(state.events)
            loss = train_step(state, batch, snapshot_dir=out)
            state.batch_in_epoch += 1
            for e in state.events[n_events:]:
                events.write(e)
            if t.log_every and state.global_step % t.log_every == 0:
                metrics.write({"kind": "train", "step": state.global_step, "epoch": state.epoch,
                               **_round(loss.as_dict())})
                d = loss.as_dict()
                log.info("step %d epoch %d loss %.5f rec %.5f (%.0fs)", state.global_step,
                         state.epoch, d["total"], d["rec"], time.time() - started)
            if progress is not None:
                progress(state, loss)
            if out is not None and t.checkpoint_every and state.global_step % t.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.pt", state)
        else:
            state.epoch += 1
            state.batch_in_epoch = 0
            if test_ds is not None:
                last_eval = {"kind": "eval", "split": "test", "step": state.global_step,
                             "epoch": state.epoch,
                             **_round(evaluate(state.model, test_ds, t.eval_batch_size, t.device))}
                metrics.write(last_eval)
                log.info("eval epoch %d: %s", state.epoch, last_eval)
            if out is not None:
                save_checkpoint(out / "checkpoint.pt", state)
            continue
        break
    if out is not None:
        save_checkpoint(out / "checkpoint.pt", state)
    return last_eval
