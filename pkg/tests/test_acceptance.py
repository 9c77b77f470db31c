"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line with the measured numbers; the
lines are repeated in the pytest terminal summary. Criteria 5, 6 and 10 need
desk-scale pretraining (100 epochs on 4096 users, three seeds). The target
encoders are cached under ``.acceptance_cache/`` keyed by the configuration
and the source of the modules that shape training, so a rerun with unchanged
code reuses them. Set ``SWIT_ACCEPTANCE_CACHE`` to move the cache.
"""

from __future__ import annotations

import cmath
import hashlib
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

import swit
from swit import augment as au
from swit import channel_sim as cs
from swit import evaluation as ev
from swit import nn_core as nc
from swit import trainer as tr
from swit.cli import merge_reports
from swit.config import RunConfig, from_pairs, load_config, serialize_config
from swit.encoder import Attention, EncoderConfig, MLPHead, TransformerBlock, WiTEncoder

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk.cfg"
CACHE = Path(os.environ.get("SWIT_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
SEEDS = (0, 1, 2)
D64 = torch.float64


def verdict(record, number: int, ok: bool, detail: str) -> None:
    record(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail.rstrip()}")


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D64)


# --- desk-scale fixtures --------------------------------------------------------------------


def desk_config(seed: int) -> RunConfig:
    return from_pairs({"run.seed": str(seed)}, load_config(DESK_CONFIG))


def _source_digest() -> str:
    pkg = Path(swit.__file__).parent
    h = hashlib.sha256()
    for name in ("channel_sim.py", "augment.py", "nn_core.py", "encoder.py", "trainer.py"):
        h.update((pkg / name).read_bytes())
    return h.hexdigest()


def _cache_dir(cfg: RunConfig) -> Path:
    key = hashlib.sha256((serialize_config(cfg) + _source_digest()).encode()).hexdigest()[:16]
    return CACHE / f"desk-seed{cfg.seed}-{key}"


class Desk:
    """Lazily generated datasets and cached pretrained target encoders per seed."""

    def __init__(self):
        self._data = {}

    def dataset(self, seed: int) -> cs.Dataset:
        if seed not in self._data:
            self._data[seed] = cs.generate_dataset(desk_config(seed).scenario)
        return self._data[seed]

    def pretrained(self, seed: int) -> tuple[WiTEncoder, float]:
        """Target encoder after the full desk schedule, and the pretraining wall time in seconds."""
        cfg = desk_config(seed)
        out = _cache_dir(cfg)
        ckpt = out / "target_encoder.ckpt"
        if not ckpt.exists():
            started = time.perf_counter()
            tr.pretrain(self.dataset(seed), cfg.encoder, cfg.trainer, cfg.augment, seed=cfg.seed, out_dir=out)
            (out / "state.ckpt").unlink()
            (out / "config.cfg").write_text(serialize_config(cfg))
            (out / "pretrain_seconds.txt").write_text(f"{time.perf_counter() - started:.1f}\n")
        seconds = float((out / "pretrain_seconds.txt").read_text())
        return ev.load_encoder(ckpt, cfg.encoder), seconds

    @staticmethod
    def random_encoder(seed: int) -> WiTEncoder:
        cfg = desk_config(seed)
        enc = tr.seeded_module(lambda: WiTEncoder(cfg.encoder), cfg.seed)
        enc.eval()
        return enc


@pytest.fixture(scope="module")
def desk():
    return Desk()


# --- 1. gradient correctness ------------------------------------------------------------------


def _grad_cases():
    enc_cfg = EncoderConfig(token_width=6, embed_dim=16, max_positions=9)
    tr_cfg = tr.TrainerConfig(proj_hidden=16, proj_bottleneck=8, k_global=16, k_local=8, proj_init_std=0.3)
    net = tr.seeded_module(lambda: tr.SwitNetwork(enc_cfg, tr_cfg), 0).double()
    x8 = rand(8, 16, seed=1)
    dense = nc.Dense(16, 8).double()
    attn = Attention(16, shared_qkv=False).double()
    attn_shared = Attention(16).double()
    block = TransformerBlock(16).double()
    head = MLPHead(16, 2, hidden=16).double()
    h = rand(8, 6, seed=2)
    a, b = rand(8, 16, seed=3).requires_grad_(), rand(8, 16, seed=4)
    yield "dense", (lambda: nc.gelu(dense(x8)).sum()), list(dense.parameters())
    yield "layer_norm", (lambda: (nc.layer_norm(a, 1.0, 1e-4) * b).sum()), [a]
    yield "gelu", (lambda: (nc.gelu(a) * b).sum()), [a]
    yield "softmax", (lambda: (nc.softmax(a) * b).sum()), [a]
    yield "attention", (lambda: (attn(x8) ** 2).sum()), list(attn.parameters())
    yield "attention_shared_qkv", (lambda: (attn_shared(x8) ** 2).sum()), list(attn_shared.parameters())
    yield "transformer_block", (lambda: (block(x8) ** 2).sum()), list(block.parameters())
    yield "encoder", (lambda: (net.encoder(h) ** 2).sum()), list(net.encoder.parameters())
    yield "mlp_head", (lambda: (head(x8) ** 2).sum()), list(head.parameters())
    yield "nu_pool", (lambda: (net.pool(x8.unsqueeze(0)) ** 2).sum()), list(net.pool.parameters())
    yield "mlp_global", (lambda: tr.sharpen_log(net.mlp_global(x8), 0.1)[:, 0].sum()), list(
        net.mlp_global.parameters()
    )
    yield "mlp_local", (lambda: tr.sharpen_log(net.mlp_local(x8), 0.1)[:, 0].sum()), list(
        net.mlp_local.parameters()
    )
    trainer = tr.SwitTrainer(enc_cfg, tr_cfg, au.AugmentPolicy(), (1, 1, 1), 1, seed=0, dtype=D64)
    views = [rand(2, n, 6, seed=10 + i) for i, n in enumerate((8, 8, 7, 7))]
    yield "L_SSL", (lambda: trainer.forward(views).loss), list(trainer.online.parameters())


def test_criterion_1_gradient_correctness(report_line):
    started = time.perf_counter()
    failures, worst = [], 0.0
    for name, f, params in _grad_cases():
        report = nc.grad_check(f, params, tol=1e-4, step=1e-5, max_entries=12)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(f"{name}={report.max_rel_error:.2e}")
    elapsed = time.perf_counter() - started
    ok = not failures and elapsed < 60
    verdict(report_line, 1, ok, f"max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s (< 60s) {' '.join(failures)}")
    assert ok


# --- 2. channel model oracle ------------------------------------------------------------------


def _brute_force(n, paths, g):
    k = 2 * math.pi * g.spacing / g.wavelength
    out = []
    for mz in range(g.rows):
        for mx in range(g.cols):
            acc = 0j
            for p in paths:
                phase = k * (mz * math.cos(p.elevation) + mx * math.sin(p.elevation) * math.sin(p.azimuth))
                acc += p.complex_gain * cmath.exp(2j * math.pi * n * g.subcarrier_spacing * p.delay) * cmath.exp(
                    1j * phase
                )
            out.append(acc)
    return np.array(out)


def test_criterion_2_channel_oracle(report_line):
    rng = np.random.default_rng(2024)
    worst, worst_norm = 0.0, 0.0
    for _ in range(100):
        g = cs.ArrayGeometry(int(rng.integers(1, 5)), int(rng.integers(1, 5)), float(rng.uniform(0.01, 0.1)),
                             float(rng.uniform(0.05, 0.2)), float(rng.uniform(1e5, 1e6)))
        paths = [
            cs.PathParams(complex(rng.normal(), rng.normal()), float(rng.uniform(0, 2e-6)),
                          float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(0, math.pi)))
            for _ in range(int(rng.integers(0, 6)))
        ]
        n = int(rng.integers(0, 64))
        worst = max(worst, float(np.max(np.abs(cs.channel_vector(n, paths, g) - _brute_force(n, paths, g)),
                                        initial=0.0)))
        az, el = float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(0, math.pi))
        a = cs.array_response(az, el, g)
        worst_norm = max(worst_norm, abs(np.linalg.norm(a) - math.sqrt(g.rows * g.cols)))
    ok = worst <= 1e-12 and worst_norm <= 1e-9
    verdict(report_line, 2, ok, f"max |h - brute force| {worst:.1e} (<= 1e-12), max norm error {worst_norm:.1e} (<= 1e-9)")
    assert ok


# --- 3. augmentation algebra ---------------------------------------------------------------------


def test_criterion_3_augmentation_algebra(report_line):
    rng = np.random.default_rng(3)
    checks = {}
    x = rng.standard_normal((32, 48))
    checks["rsf_involution"] = np.array_equal(au.rsf(au.rsf(x)), x)
    checks["rsc_involution"] = np.array_equal(au.rsc(au.rsc(x)), x)
    checks["rss_identity"] = np.array_equal(au.rss(x, 1.0, 32, np.random.default_rng(0)), x)
    deltas = (2.0, 3.0, 5.0)
    checks["normalize_homogeneous"] = np.allclose(au.normalize(3.5 * x, *deltas), 3.5 * au.normalize(x, *deltas),
                                                  rtol=0, atol=1e-12)
    rfc = au.rayleigh_fading(0.25, 0.5)
    checks["rfc_scalar"] = abs(rfc - 0.8825) <= 1e-4
    H = rng.standard_normal((6, 16, 32)) + 1j * rng.standard_normal((6, 16, 32))
    policy = au.AugmentPolicy()
    a = au.make_view_batch(H, policy, deltas, np.random.default_rng(9))
    b = au.make_view_batch(H, policy, deltas, np.random.default_rng(9))
    checks["bit_deterministic"] = all(u.tobytes() == v.tobytes() for u, v in zip(a, b))
    single = [au.rgo(x, np.random.default_rng(1)), au.rfc(x, np.random.default_rng(1)),
              au.gaussian_noise(x, 0.01, np.random.default_rng(1))]
    again = [au.rgo(x, np.random.default_rng(1)), au.rfc(x, np.random.default_rng(1)),
             au.gaussian_noise(x, 0.01, np.random.default_rng(1))]
    checks["single_ops_deterministic"] = all(u.tobytes() == v.tobytes() for u, v in zip(single, again))
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(report_line, 3, ok, f"rfc(0.25, 0.5) = {rfc:.6f}; {len(checks) - len(failed)}/{len(checks)} identities hold {failed or ''}")
    assert ok


# --- 4. attention symmetry ---------------------------------------------------------------------------


def test_criterion_4_attention_symmetry(report_line):
    worst_eq, worst_inv = 0.0, 0.0
    for trial in range(20):
        enc = tr.seeded_module(lambda: WiTEncoder(EncoderConfig(token_width=12, embed_dim=32)), trial).double()
        with torch.no_grad():
            enc.positions.zero_()
        h = rand(6, 12, seed=100 + trial)
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(200 + trial))
        with torch.no_grad():
            out, out_p = enc(h), enc(h[perm])
        worst_eq = max(worst_eq, (out_p[1:] - out[1:][perm]).abs().max().item())
        worst_inv = max(worst_inv, (out_p[0] - out[0]).abs().max().item())
    ok = worst_eq <= 1e-6 and worst_inv <= 1e-6
    verdict(report_line, 4, ok, f"token equivariance err {worst_eq:.1e}, LID invariance err {worst_inv:.1e} (<= 1e-6)")
    assert ok


# --- 5. no collapse + random-vs-pretrained k-NN -----------------------------------------------------


def _knn_top1(encoder, dataset, seed):
    cfg = ev.EvalConfig(mode="knn", task="spot", seed=seed)
    return ev.evaluate(encoder, dataset, cfg).report.top1


def test_criterion_5_knn_beats_random(desk, report_line):
    ssl, rnd, stds, minutes = [], [], [], []
    for seed in SEEDS:
        data = desk.dataset(seed)
        enc, seconds = desk.pretrained(seed)
        minutes.append(seconds / 60)
        ssl.append(_knn_top1(enc, data, seed))
        rnd.append(_knn_top1(desk.random_encoder(seed), data, seed))
        tokens = ev.downstream_tokens(data.channels, data.deltas, 36)
        stds.append(float(ev.extract_embeddings(enc, tokens).std(axis=0).mean()))
    ssl_mean, rnd_mean = float(np.mean(ssl)), float(np.mean(rnd))
    no_collapse = min(stds) > 0.01
    ok = ssl_mean >= 2 * rnd_mean and ssl_mean >= 60.0 and no_collapse
    per_seed = ", ".join(f"{s:.1f}/{r:.1f}" for s, r in zip(ssl, rnd))
    verdict(
        report_line,
        5,
        ok,
        f"k-NN top-1 pretrained {ssl_mean:.1f}% vs random {rnd_mean:.1f}% (need >= {2 * rnd_mean:.1f}% and >= 60%); "
        f"per seed {per_seed}; embedding std min {min(stds):.3f} (> 0.01); "
        f"pretrain {max(minutes):.0f} min/seed on {torch.get_num_threads()} thread(s)",
    )
    assert ok


# --- 6. small-data fine-tuning ---------------------------------------------------------------------------


def test_criterion_6_finetune_beats_random_init(desk, report_line, tmp_path):
    wins, lines = 0, []
    for seed in SEEDS:
        data = desk.dataset(seed)
        cfg = ev.EvalConfig(mode="finetune", task="location", train_size=256, seed=seed)
        train, _ = ev.split_dataset(data, cfg)
        pre = ev.evaluate(desk.pretrained(seed)[0], data, cfg)
        rnd = ev.evaluate(desk.random_encoder(seed), data, cfg)
        for name, res in (("finetune", pre), ("finetune-random", rnd)):
            out = tmp_path / f"{name}-{seed}"
            out.mkdir()
            row = ev.report_row(name, cfg, res, len(train))
            (out / "metrics.csv").write_text(ev.format_csv(ev.REPORT_HEADER, [row]))
        wins += pre.report.mae < rnd.report.mae
        lines.append(f"{pre.report.mae:.3f}/{rnd.report.mae:.3f}")
    merged = merge_reports([tmp_path]).splitlines()
    arms = {line.split(",")[1] for line in merged[1:]}
    both_arms = arms == {"finetune", "finetune-random"} and len(merged) == 1 + 2 * len(SEEDS)
    ok = wins >= 2 and both_arms
    verdict(report_line, 6, ok, f"R=256 MAE pretrained/random per seed {', '.join(lines)} m; "
                                f"pretrained wins {wins}/3 (need >= 2); report rows for both arms: {both_arms}")
    assert ok


# --- 7. optimizer and schedule invariants ----------------------------------------------------------------


def test_criterion_7_optimizer_invariants(report_line):
    data = cs.generate_dataset(cs.ScenarioConfig(num_users=16, array_rows=2, array_cols=2))
    enc_cfg = EncoderConfig(token_width=12, embed_dim=16)
    cfg = tr.TrainerConfig(epochs=4, batch_size=8, proj_hidden=16, proj_bottleneck=8, k_global=32, k_local=8,
                           warmup_epochs=2, freeze_epochs=1)
    t = tr.SwitTrainer(enc_cfg, cfg, au.AugmentPolicy(), data.deltas, steps_per_epoch=2, seed=0)
    ema_exact = True
    for step in range(6):
        before = [p.clone() for p in t.target.parameters()]
        frozen = t.frozen(step)
        _, _, kappa = t.schedule(step)
        t.train_step(data.channels[(step % 2) * 8 : (step % 2) * 8 + 8])
        for b, pt, po in zip(before, t.target.parameters(), t.online.parameters()):
            expected = b if frozen else tr.ema_value(b, po, kappa)
            ema_exact &= torch.equal(pt, expected)
    k0 = tr.ema_momentum(0, 100)
    k_end = tr.ema_momentum(100, 100)
    warm = tr.SwitTrainer(enc_cfg, replace(cfg, batch_size=128, warmup_epochs=10, epochs=100), au.AugmentPolicy(),
                          data.deltas, steps_per_epoch=3)
    lr_peak = warm.schedule(30)[0]
    lr_expected = 1.5e-4 * 128 / 256
    # clipping on a loss scaled up so the raw norm exceeds the threshold
    t.online.zero_grad(set_to_none=True)
    (1000 * t.forward(t.views_for(data.channels[:8], 99)).loss).backward()
    raw = nc.clip_gradients(t.online.parameters(), 3.0)
    clipped = nc.global_grad_norm(t.online.parameters())
    checks = {
        "ema_bit_exact": ema_exact,
        "kappa_0": abs(k0 - 0.996) <= 1e-12,
        "kappa_U": abs(k_end - 1.0) <= 1e-12,
        "lr_warmup_end": abs(lr_peak - lr_expected) <= 1e-15,
        "clip": raw > 3.0 and clipped <= 3.0 + 1e-9,
    }
    ok = all(checks.values())
    verdict(report_line, 7, ok, f"EMA bit-exact {ema_exact}; kappa(0)={k0!r}, kappa(U)={k_end!r}; "
                                f"lr(warmup end)={lr_peak:.3e} (want {lr_expected:.3e}); "
                                f"clip {raw:.2f} -> {clipped:.9f} (<= 3 + 1e-9)")
    assert ok


# --- 8. step-0 loss ----------------------------------------------------------------------------------------


def test_criterion_8_step0_loss(desk, report_line):
    cfg = desk_config(0)
    data = desk.dataset(0)
    t = tr.SwitTrainer(cfg.encoder, cfg.trainer, cfg.augment, data.deltas, steps_per_epoch=32, seed=cfg.seed)
    idx = tr.batches_for_epoch(len(data), cfg.trainer.batch_size, cfg.seed, 0)[0]
    with torch.no_grad():
        loss = t.forward(t.views_for(data.channels[idx], 0)).loss.item()
    expected = math.log(cfg.trainer.k_global) + cfg.trainer.beta * math.log(cfg.trainer.k_local)
    rel = abs(loss / expected - 1)
    ok = rel <= 0.10
    verdict(report_line, 8, ok, f"L_SSL(step 0) = {loss:.4f}, oracle {expected:.4f}, rel dev {rel:.3f} (<= 0.10)")
    assert ok


# --- 9. determinism ------------------------------------------------------------------------------------------


def test_criterion_9_determinism(desk, report_line, tmp_path):
    cfg = desk_config(0)
    data = desk.dataset(0)
    runs = [
        tr.pretrain(data, cfg.encoder, cfg.trainer, cfg.augment, seed=cfg.seed, out_dir=tmp_path / name, max_steps=10)
        for name in ("a", "b")
    ]
    gap = max(abs(x["loss_total"] - y["loss_total"]) for x, y in zip(runs[0].trace, runs[1].trace))
    same_len = len(runs[0].trace) == len(runs[1].trace) == 10
    files = ("target_encoder.ckpt", "state.ckpt", "loss_trace.csv")
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ok = same_len and gap <= 1e-12 and identical
    verdict(report_line, 9, ok, f"10-step trace max diff {gap:.1e} (<= 1e-12); checkpoints byte-identical: {identical}")
    assert ok


# --- 10. path-loss transfer -----------------------------------------------------------------------------------


def test_criterion_10_pathloss_transfer(desk, report_line):
    seed = 0
    data = desk.dataset(seed)
    base = ev.EvalConfig(seed=seed)
    probe = ev.pathloss_transfer(desk.pretrained(seed)[0], data, base).report.mae
    random_probe = ev.pathloss_transfer(desk.random_encoder(seed), data, base).report.mae
    supervised_cfg = ev.EvalConfig(mode="finetune", task="pathloss", seed=seed)
    supervised = ev.evaluate(desk.random_encoder(seed), data, supervised_cfg).report.mae
    ok = probe <= 1.5 * supervised and random_probe > probe
    verdict(report_line, 10, ok, f"dB-MAE frozen pretrained {probe:.3f}, fully supervised {supervised:.3f} "
                                 f"(need <= {1.5 * supervised:.3f}), frozen random {random_probe:.3f} (need > pretrained)")
    assert ok
