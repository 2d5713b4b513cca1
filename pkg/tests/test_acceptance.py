"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line, printed in the terminal summary, then
asserts. Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import json
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from emocaps import context, emoformer
from emocaps import tensor as tc
from emocaps.capsule import build_capsule
from emocaps.cli import main
from emocaps.config import ModelConfig, get_preset
from emocaps.data import SynthSpec, generate_synthetic, split
from emocaps.gradcheck import TOLERANCE, format_rows, run_gradcheck, worst
from emocaps.metrics import confusion_matrix, per_class_scores, weighted_f1
from emocaps.model import EmoCaps, collate
from emocaps.training import evaluate, train

SEEDS = range(5)


def record(name, ok, detail):
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def test_gradient_correctness():
    t0 = time.perf_counter()
    rows = run_gradcheck()
    elapsed = time.perf_counter() - t0
    print(format_rows(rows))
    bad = worst(rows)
    record("gradient correctness", bad.max_rel_error < TOLERANCE and elapsed < 60 and len(rows) >= 4,
           f"max rel err {bad.max_rel_error:.2e} ({bad.component}), {len(rows)} components, "
           f"{elapsed:.1f}s")


def test_normalization():
    worst_attn = worst_prob = 0.0
    for seed in range(100):
        r = tc.Rng(seed)
        cfg = ModelConfig(text_dim=16, audio_dim=16, visual_dim=16, text_emotion_dim=8,
                          audio_emotion_dim=8, visual_emotion_dim=8, hidden_dim=8, mlp_dim=8,
                          n_classes=int(r.integers(2, 8)))
        model = EmoCaps(cfg, seed=seed)
        T = int(r.integers(1, 6))
        U = r.normal((T, 16), scale=float(r.uniform(0.1, 10.0, ())))
        A = emoformer.attention_weights(U, model.group("audio"), cfg.emoformer("audio"))
        worst_attn = max(worst_attn, np.abs(A.sum(axis=-1) - 1).max())
        spec = SynthSpec(n_dialogues=2, min_utterances=1, max_utterances=5, n_classes=cfg.n_classes,
                         audio_len=T, visual_len=int(r.integers(1, 4)), seed=seed)
        P = model.predict_proba(collate(generate_synthetic(spec)[0]))
        worst_prob = max(worst_prob, np.abs(P.sum(axis=1) - 1).max())
    record("normalization", worst_attn <= 1e-6 and worst_prob <= 1e-6,
           f"100 forwards, max |sum-1| attention {worst_attn:.1e}, probabilities {worst_prob:.1e}")


def test_structural_invariants():
    r = tc.Rng(7)
    problems = []
    parts = [r.normal((n,)) for n in (16, 8, 4, 6)]
    cap = build_capsule(*parts)
    if cap.vector.shape != (34,):
        problems.append("capsule extent")
    U, G = tc.Tensor(r.normal((3, 16))), tc.Tensor(r.normal((3, 16)))
    H = emoformer.residual_concat(U, G).data
    if not (np.array_equal(H[:, :16], U.data) and np.array_equal(H[:, 16:], G.data)):
        problems.append("residual slice recovery")
    p = emoformer.init_mapping_params(32, 8, r)
    widths = [p[f"map{k}.W"].shape for k in range(emoformer.mapping_depth(p))]
    chained = all(a[1] == b[0] for a, b in zip(widths, widths[1:]))
    if not (len(widths) == 5 and chained and widths[0][0] == 32 and widths[-1][1] == 8):
        problems.append(f"mapping layers {widths}")
    params = context.init_context_params(34, 8, 8, 4, r)
    X = r.normal((6, 34))
    _, hf, _ = context.bilstm_context(tc.Tensor(X), params, return_directions=True)
    for i in range(6):
        Xp = X.copy()
        Xp[i + 1:] += r.normal(Xp[i + 1:].shape)
        _, hf2, _ = context.bilstm_context(tc.Tensor(Xp), params, return_directions=True)
        if not np.array_equal(hf.data[:i + 1], hf2.data[:i + 1]):
            problems.append(f"causality at {i}")
    record("structural invariants", not problems,
           "capsule extent, residual slices, 5-layer mapping, forward causality"
           + (f"; broken: {problems}" if problems else ""))


def _learn_data(seed, signal=None):
    spec = SynthSpec(n_dialogues=200, n_classes=4, noise=0.5, seed=seed,
                     **({"signal": signal} if signal else {}))
    dialogues, _ = generate_synthetic(spec)
    return split(dialogues, (0.8, 0.1, 0.1), seed)


def _fit(seed, train_set, keep=None):
    cfg = get_preset("iemocap").train_config(epochs=20, seed=seed)
    model = EmoCaps(ModelConfig(n_classes=4), seed=seed)
    kw = {"keep": keep} if keep else {}
    train(model, train_set, cfg, **kw)
    return model, kw


@pytest.mark.slow
def test_learnability():
    t0 = time.perf_counter()
    scores = []
    for seed in SEEDS:
        tr, _, te = _learn_data(seed)
        model, _ = _fit(seed, tr)
        scores.append((evaluate(model, tr).weighted_f1, evaluate(model, te).weighted_f1))
    elapsed = time.perf_counter() - t0
    good = sum(a >= 0.95 and b >= 0.85 for a, b in scores)
    detail = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in scores)
    record("learnability", good >= 4 and elapsed < 300,
           f"{good}/5 seeds meet train>=0.95 and test>=0.85 (train/test {detail}), {elapsed:.0f}s")


def _ablation_means(signal):
    means = {}
    for name, keep in (("T", {"text"}), ("T+V+A", {"text", "visual", "audio"})):
        f1 = []
        for seed in SEEDS:
            tr, _, te = _learn_data(seed, signal)
            model, kw = _fit(seed, tr, frozenset(keep))
            f1.append(evaluate(model, te, **kw).weighted_f1)
        means[name] = float(np.mean(f1))
    return means


@pytest.mark.slow
def test_ablation_direction():
    split_sig = _ablation_means({"text": 0.15, "audio": 1.0, "visual": 1.0})
    null = _ablation_means({"text": 1.0})
    ok = split_sig["T+V+A"] >= split_sig["T"] and abs(null["T+V+A"] - null["T"]) <= 0.02
    record("ablation direction", ok,
           f"split signal T+V+A {split_sig['T+V+A']:.3f} vs T {split_sig['T']:.3f}; "
           f"text-only signal T+V+A {null['T+V+A']:.3f} vs T {null['T']:.3f}")


def _oracle(gold, pred, m):
    cm = np.zeros((m, m), dtype=int)
    for g, p in zip(gold, pred):
        cm[g, p] += 1
    f1, support = [], []
    for c in range(m):
        tp = sum(g == c and p == c for g, p in zip(gold, pred))
        fp = sum(g != c and p == c for g, p in zip(gold, pred))
        fn = sum(g == c and p != c for g, p in zip(gold, pred))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        support.append(tp + fn)
    total = sum(support)
    return cm, f1, (sum(f * s for f, s in zip(f1, support)) / total if total else 0.0)


def test_metric_oracle():
    rng = np.random.default_rng(11)
    mismatches, edge = 0, 0
    for k in range(100):
        m = int(rng.integers(2, 8))
        n = int(rng.integers(1, 30))
        gold = rng.choice(rng.choice(m, int(rng.integers(1, m + 1)), replace=False), n)
        pred = rng.choice(rng.choice(m, int(rng.integers(1, m + 1)), replace=False), n)
        cm_o, f1_o, wf1_o = _oracle(gold.tolist(), pred.tolist(), m)
        cm = confusion_matrix(gold, pred, m)
        _, _, f1, support = per_class_scores(cm)
        edge += bool((support == 0).any() or (cm.sum(axis=0) == 0).any())
        if not (np.array_equal(cm, cm_o) and f1.tolist() == f1_o
                and weighted_f1(gold, pred, m) == wf1_o):
            mismatches += 1
    record("metric oracle", mismatches == 0 and edge > 0,
           f"{mismatches} mismatches over 100 sets ({edge} with zero-support/zero-prediction classes)")


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            with open(os.path.join(dirpath, f), "rb") as fh:
                out[os.path.relpath(os.path.join(dirpath, f), root)] = fh.read()
    return out


def test_train_determinism(tmp_path):
    main(["synth", "--out", str(tmp_path / "data"), "--seed", "2"])
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"manifest": "data/manifest.json", "train": {"epochs": 3},
                               "model": {"hidden_dim": 16, "mlp_dim": 16}}))
    codes = [main(["train", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / d)])
             for d in ("a", "b")]
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    same = codes == [0, 0] and a == b and "loss_log.csv" in a and "checkpoint/index.json" in a
    record("train determinism", same, f"{len(a)} artifacts compared byte-for-byte, exit codes {codes}")


def test_preset_fidelity():
    got = {}
    for name in ("iemocap", "meld"):
        p = get_preset(name)
        t = p.train_config()
        got[name] = (t.epochs, t.lr, t.dropout, t.batch_size, p.dim_v, p.dim_a, p.dim_t)
    ok = (got["iemocap"] == (80, 0.0001, 0.1, 30, 256, 100, 100)
          and got["meld"] == (80, 0.0001, 0.1, 30, 256, 300, 600))
    record("preset fidelity", ok, f"(epochs, lr, dropout, batch, dim_v, dim_a, dim_t) = {got}")
