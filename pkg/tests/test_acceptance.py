"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

import oracles
from r2rproto.attention import masked_pool_queries, region_attention, reconstruct_output, weight_masks
from r2rproto.checkpoint import load_checkpoint, save_checkpoint
from r2rproto.cli import main
from r2rproto.data import generate_synthetic
from r2rproto.explain import localization_eval
from r2rproto.gradcheck import TOLERANCE, run_gradcheck
from r2rproto.metrics import roc_auc
from r2rproto.model import Model, ModelConfig, forward
from r2rproto.tensor import Tensor, no_grad
from r2rproto.training import evaluate, train

OVERFIT_LR = 2.5e-3


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def jittered_desk_model(seed=0, scale=0.3):
    model = Model(ModelConfig.desk_default(seed=seed))
    r = np.random.default_rng(seed + 100)
    for p in model.parameters().values():
        p.data = p.data + r.normal(0.0, scale, size=p.shape)
    return model


def test_c1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    errors = run_gradcheck(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    verdict(capsys, 1, worst <= TOLERANCE and elapsed <= 60,
            f"gradcheck max rel err {worst:.2e} (<= 1e-4) in {elapsed:.1f}s (<= 60s)")


def test_c2_oracle_equivalence(capsys):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        L, d, z = int(r.integers(2, 9)), int(r.integers(1, 9)), int(r.integers(1, 7))
        h, w = int(r.integers(1, 7)), int(r.integers(1, 7))
        logits = r.normal(size=(L, h, w))
        m = np.exp(logits) / np.exp(logits).sum(axis=0)
        f, keys, values = r.normal(size=(d, h, w)), r.normal(size=(L, d)), r.normal(size=(z, L))
        for normalize in (False, True):
            q = masked_pool_queries(Tensor(m), Tensor(f), normalize).data
            worst = max(worst, np.abs(q - oracles.pool_queries(m, f, normalize)).max())
        attn = region_attention(Tensor(q), Tensor(keys)).data
        worst = max(worst, np.abs(attn - oracles.region_attention_mp(q, keys)).max())
        wm = weight_masks(Tensor(attn), Tensor(m)).data
        worst = max(worst, np.abs(wm - oracles.weight_masks(attn, m)).max())
        o = reconstruct_output(Tensor(values), Tensor(wm)).data
        worst = max(worst, np.abs(o - oracles.reconstruct(values, wm)).max())
    verdict(capsys, 2, worst <= 1e-10, f"max |vectorised - loop| over 20 seeds = {worst:.2e} (<= 1e-10)")


def test_c3_mask_simplex(capsys):
    model = jittered_desk_model(seed=1, scale=1.0)
    x = np.random.default_rng(3).random((100, 1, 64, 64))
    with no_grad():
        _, traces = forward(model, Tensor(x), capture_traces=True)
    worst = max(np.abs(t.masks.sum(axis=1) - 1.0).max() for t in traces)
    in_range = all(t.masks.min() >= 0 and t.masks.max() <= 1 for t in traces)
    verdict(capsys, 3, worst <= 1e-6 and in_range,
            f"{len(traces)} blocks x 100 inputs: max |sum_i m_i - 1| = {worst:.2e} (<= 1e-6), values in [0,1]: {in_range}")


def test_c4_permutation_equivariance(capsys):
    model = jittered_desk_model(seed=2)
    x = Tensor(np.random.default_rng(4).random((4, 1, 64, 64)))
    with no_grad():
        before, _ = forward(model, x)
        r = np.random.default_rng(5)
        for _, _, layer in model.attention_layers():
            perm = r.permutation(layer.L)
            layer.mask_weight.data = layer.mask_weight.data[perm]
            layer.mask_bias.data = layer.mask_bias.data[perm]
            layer.keys.data = layer.keys.data[perm]
            layer.values.data = layer.values.data[:, perm]
        after, _ = forward(model, x)
    diff = np.abs(before.data - after.data).max()
    verdict(capsys, 4, diff <= 1e-6, f"max logit change under joint prototype permutation = {diff:.2e} (<= 1e-6)")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("desk") / "best.r2rp"
    model = Model(ModelConfig.desk_default())
    t0 = time.perf_counter()
    report = train(model, generate_synthetic(2000, 64, seed=0), epochs=30, seed=0, checkpoint_path=ckpt)
    return report, time.perf_counter() - t0, ckpt


@pytest.mark.slow
def test_c5_desk_scale_learning(desk_run, capsys):
    report, elapsed, _ = desk_run
    best = report.val_mean_auc[report.best_epoch]
    verdict(capsys, 5, best >= 0.90 and elapsed <= 600,
            f"best validation mean AUC {best:.4f} at epoch {report.best_epoch} (>= 0.90), "
            f"{elapsed:.0f}s for 30 epochs (<= 600s)")


@pytest.mark.slow
def test_c6_explanation_fidelity(desk_run, capsys):
    model, _ = load_checkpoint(desk_run[2])
    held_out = [s for s in generate_synthetic(600, 64, seed=12345) if s.labels.any()][:200]
    assert len(held_out) == 200
    loc = localization_eval(model, held_out, block=-1, mode="mass")
    ok = loc["pointing_rate"] >= 0.6 and loc["mean_iou"] >= 0.3
    verdict(capsys, 6, ok, f"final stage top-1 mask on 200 held-out positives: pointing {loc['pointing_rate']:.3f} "
                           f"(>= 0.6), mean IoU {loc['mean_iou']:.3f} (>= 0.3)")


def test_c7_metric_correctness(capsys):
    r = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        n = int(r.integers(2, 16))
        y = r.integers(0, 2, n)
        y[r.choice(n, 2, replace=False)] = [0, 1]
        s = r.integers(0, 5, n) / 4.0  # few distinct values, so ties are common
        worst = max(worst, abs(roc_auc(s, y) - oracles.auc_pairs(s, y)))
    example = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    verdict(capsys, 7, worst <= 1e-9 and example == 0.75,
            f"max |AUC - pair count| over 1000 tied instances = {worst:.1e} (<= 1e-9); worked example = {example}")


def test_c8_reproducibility(tmp_path, capsys):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["train", "--synthetic", "48", "--epochs", "2", "--seed", "7", "--out", str(out)])
        assert code == 0
        blobs.append((out / "checkpoint.r2rp").read_bytes())
    capsys.readouterr()
    model = Model(ModelConfig.desk_default(seed=7))
    train(model, generate_synthetic(16, 64, seed=1), epochs=1, batch_size=8)
    save_checkpoint(model, None, tmp_path / "roundtrip.r2rp")
    loaded, _ = load_checkpoint(tmp_path / "roundtrip.r2rp")
    x = Tensor(np.random.default_rng(8).random((3, 1, 64, 64)))
    with no_grad():
        ref, _ = forward(model, x)
        out, _ = forward(loaded, x)
    diff = np.abs(ref.data - out.data).max()
    same = blobs[0] == blobs[1]
    verdict(capsys, 8, same and diff <= 1e-6,
            f"same-seed checkpoints bitwise identical: {same}; round-trip logit diff {diff:.1e} (<= 1e-6)")


def test_c9_overfit(capsys):
    data = generate_synthetic(4, 64, seed=0)
    model = Model(ModelConfig.desk_default())
    report = train(model, data, epochs=200, batch_size=4, lr0=OVERFIT_LR, val_fraction=0)
    _, auc = evaluate(model, data)
    final = report.losses[-1]
    verdict(capsys, 9, final < 0.05 and auc == 1.0,
            f"4-sample run: final loss {final:.4f} (< 0.05), self-eval mean AUC {auc} (= 1.0) after 200 epochs")
