"""Acceptance criteria, one recorded PASS/FAIL line each.

Criteria 1-6 run in full here. Criteria 7-11 need five 15-epoch trainings of
the default MNIST model (C=64, V=512, 2 blocks, 256 channels). They are
trained on demand when the measured throughput fits the per-run budget, or
read from ``$QGVAE_ACCEPTANCE_RUNS`` when finished runs already exist there;
otherwise they fail with the measured projection. The CPU-scale proxies of
criteria 7-11 live in ``test_proxy_scale.py``.
"""
from __future__ import annotations

import dataclasses
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from qgvae.bottleneck import collapse_transpose, expand_transpose, nearest_codeword, quantise_all
from qgvae.baselines import (dft_curve, dft_forward, dft_inverse, laplacian_build,
                             laplacian_collapse, num_frequency_groups)
from qgvae.codebook import (CodebookBank, ResetPolicy, accumulate, codeword_grad_norms,
                            maybe_reset, usage_entropy)
from qgvae.codec import pack_indices, payload_size
from qgvae.config import ModelConfig, RunConfig, TrainConfig, grid_counterpart, preset
from qgvae.data import DataError, load_dataset
from qgvae.model import QGVAE
from qgvae.train import init_state, load_model, train_step

from criteria import (influence_coverages, metrics_log_digest, ordering_profile,
                      ordering_summary, train_run)

# ---------------------------------------------------------------- criterion 1


def test_c1_codec_arithmetic(report):
    sizes = (payload_size(256, 512), payload_size(64, 512),
             len(pack_indices(np.arange(256) % 512, 512)), len(pack_indices(np.arange(64), 512)))
    ok = sizes == (288, 72, 288, 72)
    report("criterion 1 codec arithmetic", ok,
           f"C=256,V=512 -> {sizes[0]} B (want 288); C=64,V=512 -> {sizes[1]} B (want 72)")
    assert ok


# ---------------------------------------------------------------- criterion 2


def _scan(v, book):
    d = [float(((v.double() - row.double()) ** 2).sum()) for row in book]
    return int(np.argmin(d))


def test_c2_quantiser_oracle(report):
    g = torch.Generator().manual_seed(2024)
    agree = total = 0
    for _ in range(1000):
        d = int(torch.randint(1, 9, (), generator=g))
        v_size = int(torch.randint(2, 17, (), generator=g))
        c = int(torch.randint(1, 5, (), generator=g))
        b = int(torch.randint(1, 4, (), generator=g))
        bank = CodebookBank(c, v_size, d)
        with torch.no_grad():
            bank.codebooks.copy_(torch.randn(c, v_size, d, generator=g))
        books = bank.codebooks.detach()
        pq = torch.randn(b, d, c, generator=g)
        idx = quantise_all(pq, bank).indices
        ok = nearest_codeword(pq[0, :, 0], books[0])[0] == _scan(pq[0, :, 0], books[0])
        ok &= all(int(idx[i, k]) == _scan(pq[i, :, k], books[k])
                  for i in range(b) for k in range(c))
        agree += ok
        total += 1
    passed = agree == total
    report("criterion 2 quantiser oracle", passed,
           f"{agree}/{total} random instances (d<=8, V<=16) match the exhaustive scan")
    assert passed


# ---------------------------------------------------------------- criterion 3


def test_c3_transpose_inverse(report):
    g = torch.Generator().manual_seed(3)
    exact = 0
    for _ in range(100):
        b, c, w, h = (int(torch.randint(1, n, (), generator=g)) for n in (4, 33, 17, 17))
        fm = torch.randn(b, c, w, h, generator=g)
        exact += torch.equal(expand_transpose(collapse_transpose(fm), w, h), fm)
    report("criterion 3 transpose inverse", exact == 100,
           f"{exact}/100 random shapes reproduced exactly")
    assert exact == 100


# ---------------------------------------------------------------- criterion 4


def test_c4_classical_baselines(report):
    rng = np.random.default_rng(4)
    worst_rec = worst_parseval = worst_lap = 0.0
    monotone = True
    for _ in range(10):
        img = rng.random((32, 32))
        f = dft_forward(img)
        worst_rec = max(worst_rec, np.linalg.norm(dft_inverse(f).real - img) / np.linalg.norm(img))
        lhs = np.sum(img ** 2)
        worst_parseval = max(worst_parseval, abs(lhs - np.sum(np.abs(f) ** 2) / img.size) / lhs)
        worst_lap = max(worst_lap, np.abs(laplacian_collapse(laplacian_build(img, 3)) - img).max())
        mse = dft_curve(img[None], list(range(num_frequency_groups(img.shape) + 1)))
        monotone &= all(b <= a + 1e-15 for a, b in zip(mse, mse[1:]))
    ok = worst_rec < 1e-6 and worst_parseval < 1e-6 and worst_lap < 1e-9 and monotone
    report("criterion 4 classical baselines", ok,
           f"DFT rel err {worst_rec:.1e} (<1e-6), Parseval {worst_parseval:.1e} (<1e-6), "
           f"Laplacian {worst_lap:.1e} (<1e-9), truncation MSE non-increasing: {monotone}")
    assert ok


# ---------------------------------------------------------------- criterion 5


def test_c5_gradient_check(report):
    cfg = ModelConfig(num_tokens=2, num_heads=1, downscale_factor=0, image_size=(4, 4),
                      input_channels=1, unet_channels=8, unet_blocks=1, quant_dim=3,
                      codebook_size=2)
    torch.manual_seed(5)
    model = QGVAE(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn_like(p) * 0.3)
    x = torch.randn(2, 1, 4, 4, dtype=torch.float64)

    def loss_fn():   # quantisation replaced by identity
        return ((model.decode_quantised(model.prequant(x)) - x) ** 2).mean()

    params = [(n, p) for n, p in model.named_parameters() if not n.startswith("bank.")]
    model.zero_grad()
    loss_fn().backward()
    floor = 1e-7 * float(torch.cat([p.grad.view(-1) for _, p in params]).norm())
    worst, worst_name, h = 0.0, "", 1e-4
    with torch.no_grad():
        for name, p in params:
            flat, fd = p.view(-1), torch.zeros(p.numel(), dtype=p.dtype)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss_fn())
                flat[i] = old - h
                down = float(loss_fn())
                flat[i] = old
                fd[i] = (up - down) / (2 * h)
            ad = p.grad.view(-1)
            rel = float((ad - fd).norm()) / max(float(ad.norm()), float(fd.norm()), floor)
            if rel > worst:
                worst, worst_name = rel, name
    ok = worst < 1e-3
    report("criterion 5 gradient check", ok,
           f"max relative error {worst:.1e} over {len(params)} parameter tensors "
           f"(worst {worst_name}; want <1e-3)")
    assert ok


# ---------------------------------------------------------------- criterion 6


def test_c6_codebook_reset(report):
    g = torch.Generator().manual_seed(6)
    v, d, window, batch = 8, 2, 50, 64
    bank = CodebookBank(1, v, d)
    with torch.no_grad():
        bank.codebooks.copy_(torch.randn(1, v, d, generator=g))
        bank.codebooks[0, 5] = torch.tensor([40.0, 40.0])   # codeword 5 is unreachable
    opt = torch.optim.SGD([bank.codebooks], lr=0.05)
    policy = ResetPolicy(window=window, perturb_scale=1e-3)
    reset_rng = torch.Generator().manual_seed(7)

    def run_window():
        used, events, snapshot = [], [], None
        for _ in range(window):
            pq = torch.randn(batch, d, 1, generator=g)
            res = quantise_all(pq, bank)
            norms = codeword_grad_norms(pq, res.indices, bank, 1.0)
            opt.zero_grad()
            res.code_loss.backward()
            opt.step()
            accumulate(bank, norms)
            used.append(res.indices.flatten())
            if int(bank.steps_since_reset) >= window:
                snapshot = (bank.codebooks.detach().clone(), bank.grad_accum.clone())
            events += maybe_reset(bank, policy, reset_rng)
        return torch.cat(used), events, snapshot

    before_idx, events, (books, acc) = run_window()
    target = int(torch.argmax(acc[0]))
    eps = policy.perturb_scale * float(books[0].double().norm(dim=1).mean())
    dist = float((bank.codebooks[0, 5].detach() - books[0, target]).norm())
    moved = any(e.from_index == 5 and e.to_index == target for e in events)
    after_idx, _, _ = run_window()
    h0, h1 = usage_entropy(before_idx, v), usage_entropy(after_idx, v)
    slack = 4 * torch.finfo(torch.float32).eps * float(books[0, target].norm())
    ok = moved and dist <= eps + slack and h1 > h0
    report("criterion 6 codebook reset", ok,
           f"unreachable codeword moved to max-accumulator codeword {target} at distance "
           f"{dist:.2e} (eps {eps:.2e}); usage entropy {h0:.4f} -> {h1:.4f} nats")
    assert ok


# ------------------------------------------------------------ criteria 7 - 11

EPOCHS = 15
RUN_BUDGET_S = 3600.0      # "about one hour" per 15-epoch run
BUDGET_TOLERANCE = 1.5     # the "about"
RUN_NAMES = ("qgvae", "grid", "ordering", "qgvae_repeat")


def full_run_configs(device: str) -> dict[str, RunConfig]:
    train = TrainConfig(dataset="mnist", epochs=EPOCHS, device=device, seed=0,
                        deterministic=True)
    base = preset("mnist")
    models = {"qgvae": base, "grid": grid_counterpart(base),
              "ordering": dataclasses.replace(base, ordering_enabled=True),
              "qgvae_repeat": base}
    return {k: RunConfig(model=m, train=dataclasses.replace(train)) for k, m in models.items()}


def _seconds_per_image(cfg: RunConfig) -> float:
    batch = 128 if cfg.train.device != "cpu" else 16
    state = init_state(cfg)
    x = torch.rand(batch, 1, 32, 32) * 2 - 1
    train_step(state, x)                       # warm-up
    if cfg.train.device != "cpu":
        torch.cuda.synchronize()
    start = time.time()
    for _ in range(2):
        train_step(state, x)
    if cfg.train.device != "cpu":
        torch.cuda.synchronize()
    return (time.time() - start) / (2 * batch)


@dataclasses.dataclass
class FullScale:
    available: bool
    reason: str
    runs: dict[str, dict]
    dirs: dict[str, Path]
    test_ds: object = None


@pytest.fixture(scope="module")
def full_scale():
    device = "cuda" if torch.cuda.is_available() else "cpu"
    configs = full_run_configs(device)
    root = Path(os.environ.get("QGVAE_ACCEPTANCE_RUNS",
                               Path(__file__).resolve().parent.parent / "acceptance_runs"))
    dirs = {k: root / k for k in RUN_NAMES}
    try:
        train_ds = load_dataset("mnist", "train")
        test_ds = load_dataset("mnist", "test")
    except DataError as e:
        return FullScale(False, f"MNIST unavailable ({e})", {}, dirs)
    done = {k: d for k, d in dirs.items() if (d / "runtime.json").exists()}
    if len(done) < len(RUN_NAMES):
        per_image = _seconds_per_image(configs["qgvae"])
        projected = per_image * len(train_ds) * EPOCHS
        if projected > RUN_BUDGET_S * BUDGET_TOLERANCE and not os.environ.get(
                "QGVAE_ACCEPTANCE_FORCE"):
            return FullScale(False, (
                f"not trained: measured {per_image * 1e3:.0f} ms/image on {device} projects "
                f"{projected / 3600:.1f} h per 15-epoch run, {len(RUN_NAMES) - len(done)} runs "
                f"missing; budget is ~{RUN_BUDGET_S / 3600:.0f} h per run on one accelerator"),
                {}, dirs, test_ds)
    runs = {k: train_run(configs[k], train_ds, test_ds, dirs[k]) for k in RUN_NAMES}
    return FullScale(True, "", runs, dirs, test_ds)


def _require(full_scale, report, label):
    if not full_scale.available:
        report(label, False, full_scale.reason)
        pytest.fail(full_scale.reason)


def test_c7_training_gate(full_scale, report):
    label = "criterion 7 desk-scale MNIST gate"
    _require(full_scale, report, label)
    r = full_scale.runs["qgvae"]
    ok = (r["psnr"] >= 30 and r["ssim"] >= 0.97 and not r["resumed"]
          and r["seconds"] <= RUN_BUDGET_S * BUDGET_TOLERANCE)
    report(label, ok, f"test PSNR {r['psnr']:.2f} dB (>=30), SSIM {r['ssim']:.4f} (>=0.97), "
                      f"{r['seconds'] / 60:.0f} min on {r['device']}")
    assert ok


def test_c8_global_tokens(full_scale, report):
    label = "criterion 8 single-token influence"
    _require(full_scale, report, label)
    threshold = 0.01 * 2.0     # 1% of the [-1, 1] range
    qg = influence_coverages(load_model(full_scale.dirs["qgvae"] / "checkpoint.pt"),
                             full_scale.test_ds, 50, threshold)
    grid = influence_coverages(load_model(full_scale.dirs["grid"] / "checkpoint.pt"),
                               full_scale.test_ds, 50, threshold)
    ok = qg.mean() >= 0.25 and grid.mean() < 0.10
    report(label, ok, f"mean coverage QG-VAE {qg.mean():.1%} (>=25%), grid {grid.mean():.1%} "
                      f"(<10%) over 50 test images")
    assert ok


def test_c9_head_to_head(full_scale, report):
    label = "criterion 9 QG-VAE vs grid VQ-VAE"
    _require(full_scale, report, label)
    qg, grid = full_scale.runs["qgvae"]["psnr"], full_scale.runs["grid"]["psnr"]
    report(label, qg > grid, f"test PSNR {qg:.2f} dB vs {grid:.2f} dB")
    assert qg > grid


def test_c10_ordering(full_scale, report):
    label = "criterion 10 ordering regulariser"
    _require(full_scale, report, label)
    model = load_model(full_scale.dirs["ordering"] / "checkpoint.pt")
    means, rises = ordering_summary(ordering_profile(model, full_scale.test_ds, 200))
    ok = bool(np.all(np.diff(means) <= 0)) and rises <= 0.05
    report(label, ok, f"mean MSE at k={{0,8,16,32,64}}: {np.round(means, 5).tolist()}, "
                      f"rising pairs {rises:.1%} (<=5%)")
    assert ok


def test_c11_reproducibility(full_scale, report):
    label = "criterion 11 reproducibility"
    _require(full_scale, report, label)
    a = metrics_log_digest(full_scale.dirs["qgvae"])
    b = metrics_log_digest(full_scale.dirs["qgvae_repeat"])
    report(label, a == b, f"metrics logs sha256 {a[:12]} vs {b[:12]}")
    assert a == b
