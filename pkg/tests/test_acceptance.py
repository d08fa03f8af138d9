"""Desk-scale acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary under "acceptance criteria".
"""

import math
import os
import time
from functools import lru_cache

import numpy as np
import pytest

from cdhwr import cli, ctc, data, dct, selftest, train
from cdhwr import tensor as tn
from cdhwr.metrics import EvalReport, cer, edit_distance, wa_waf
from cdhwr.network import HWRCNet, HwrcnetConfig, load_checkpoint, save_checkpoint, tiny_config
from cdhwr.preprocess import save_gray

# toy overfit protocol
TOY_RENDERS = 10
TOY_SEED = 0
TOY_MAX_EPOCHS = 300
TOY_BATCH = 10
TOY_BUDGET_S = 15 * 60


def test_criterion_1_dct_round_trip(record_criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst64 = worst32 = worst_dc = 0.0
    for n, dc in ((8, 8.0), (4, 2 * math.sqrt(2))):
        blocks = rng.uniform(-1, 1, (1000, n, n))
        worst64 = max(worst64, np.abs(dct.inverse_block_dct(dct.forward_block_dct(blocks)) - blocks).max())
        b32 = blocks.astype(np.float32)
        back32 = dct.inverse_block_dct(dct.forward_block_dct(b32))
        assert back32.dtype == np.float32
        worst32 = max(worst32, float(np.abs(back32 - b32).max()))
        for v in rng.uniform(-2, 2, 20):
            worst_dc = max(worst_dc, abs(dct.forward_block_dct(np.full((n, n), v))[0, 0] - dc * v))
    elapsed = time.perf_counter() - t0
    ok = worst64 < 1e-10 and worst32 < 1e-4 and worst_dc < 1e-10 and elapsed < 1.0
    record_criterion(1, "DCT round trip and DC closed forms", ok,
                     f"64-bit {worst64:.1e}, 32-bit {worst32:.1e}, DC {worst_dc:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_2_ctc_brute_force(record_criterion):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    sizes = set()
    for _ in range(200):
        lp, label = selftest.random_ctc_instance(rng, max_t=8, max_u=3, max_c=4)
        sizes.add((lp.shape[0], len(label), lp.shape[1]))
        brute = selftest.brute_force_label_probability(lp, label)
        worst = max(worst, abs(math.exp(-ctc.ctc_loss(lp, label)) - brute))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 30
    record_criterion(2, "CTC equals path enumeration", ok,
                     f"200 instances over {len(sizes)} (T,U,C) shapes, max diff {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_gradients(record_criterion):
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    ctc_err = 0.0
    for _ in range(20):
        T, C = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        lp, label = selftest.random_ctc_instance(rng, max_t=T, max_u=3, max_c=C)
        ctc_err = max(ctc_err, selftest._fd_ctc(lp, label, ctc.ctc_grad(lp, label)))
    with tn.precision(np.float64):
        model = HWRCNet(tiny_config(num_classes=8), seed=7, dtype=np.float64)
        x = rng.uniform(0, 1, (2, 16, 8))
        # every coordinate of every parameter
        net_err = selftest.network_grad_error(model, x, [[0, 1, 2], [5, 5, 3]])
    elapsed = time.perf_counter() - t0
    ok = ctc_err < 1e-6 and net_err < 1e-4 and elapsed < 300
    record_criterion(3, "gradients match finite differences", ok,
                     f"ctc {ctc_err:.1e}, network ({model.parameter_count} params) {net_err:.1e}, "
                     f"{elapsed:.0f}s")
    assert ok


@lru_cache(maxsize=None)
def _lev(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(_lev(a[1:], b) + 1, _lev(a, b[1:]) + 1, _lev(a[1:], b[1:]) + (a[0] != b[0]))


def test_criterion_4_metrics(record_criterion):
    rng = np.random.default_rng(404)
    alphabet = list("abcd")
    mismatches = 0
    for _ in range(500):
        a, b = ("".join(rng.choice(alphabet, int(rng.integers(0, 7)))) for _ in range(2))
        mismatches += edit_distance(a, b) != _lev(a, b)
    fixtures = [
        edit_distance("abc", "abc") == 0,
        edit_distance("kitten", "sitting") == 3,
        edit_distance("", "ab") == 2,
        cer([("ab", "ab"), ("cd", "cd")]) == 0.0,
        cer([("ab", "ab"), ("cd", "ce")]) == 25.0,
        cer([("a", "abc")]) == 200.0,
        wa_waf([("word", "word")] * 4) == (100.0, 100.0),
        wa_waf([("word", "word")] * 3 + [("word", "wo")]) == (75.0, 100.0),
        wa_waf([("word", "word")] * 3 + [("word", "w")]) == (75.0, 75.0),
    ]
    wer_identity = all(
        (r := EvalReport.from_pairs([("ab", "ab")] * k + [("ab", "b")] * (5 - k))).wer == 100 - r.wa
        for k in range(6))
    ok = mismatches == 0 and all(fixtures) and wer_identity
    record_criterion(4, "edit distance and metric fixtures", ok,
                     f"500 pairs, {mismatches} mismatches, {sum(fixtures)}/{len(fixtures)} fixtures")
    assert ok


def test_criterion_5_geometry(record_criterion):
    model = HWRCNet(HwrcnetConfig(), seed=0, dtype=np.float32)
    x = np.random.default_rng(505).uniform(size=(3, 128, 32)).astype(np.float32)
    feats = model.cnn_forward(x).shape
    lp = model.forward(x).data
    norm = float(np.abs(np.logaddexp.reduce(lp.astype(np.float64), axis=-1)).max())
    ok = feats == (3, 32, 256) and lp.shape == (3, 32, 80) and norm < 1e-5
    record_criterion(5, "128x32 input gives [32,256] features and [32,80] log-probs", ok,
                     f"features {feats[1:]}, log-probs {lp.shape[1:]}, max |logsumexp| {norm:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 6: toy overfit in both input modes

@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    samples = data.gen_toy(data.TOY_WORDS, TOY_RENDERS, seed=TOY_SEED)
    vocab = data.build_vocab(samples)
    runs = {}
    for mode in ("dct4", "normal"):
        out = tmp_path_factory.mktemp(f"toy-{mode}")
        cfg = train.TrainConfig(epochs=TOY_MAX_EPOCHS, batch_size=TOY_BATCH, mode=mode, seed=TOY_SEED,
                                checkpoint_dir=str(out), target_wa=95.0, target_cer=2.0)
        t0 = time.perf_counter()
        result = train.train_loop(data.Split(samples, samples, TOY_SEED), vocab, cfg)
        elapsed = time.perf_counter() - t0
        save_checkpoint(out / "final.ckpt", result.checkpoint)
        runs[mode] = (result, elapsed, out / "final.ckpt")
    return samples, runs


def test_criterion_6_toy_overfit(toy_runs, record_criterion):
    samples, runs = toy_runs
    reports = {m: train.evaluate(load_checkpoint(path), samples) for m, (_, _, path) in runs.items()}
    total = sum(elapsed for _, elapsed, _ in runs.values())
    epochs = {m: len(r.history) for m, (r, _, _) in runs.items()}
    ok = (reports["dct4"].wa >= 95 and reports["dct4"].cer <= 2 and reports["normal"].wa >= 95
          and max(epochs.values()) <= TOY_MAX_EPOCHS and total <= TOY_BUDGET_S)
    detail = ", ".join(f"{m}: WA {r.wa:.1f} CER {r.cer:.2f} after {epochs[m]} epochs"
                       for m, r in reports.items())
    record_criterion(6, "toy corpus overfit in dct4 and normal modes", ok, f"{detail}, {total:.0f}s total")
    assert ok


def test_toy_loss_decreases_first_ten_epochs(toy_runs):
    result = toy_runs[1]["dct4"][0]
    losses = [h["mean_loss"] for h in result.history[:10]]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_overfit_model_reads_its_training_image(toy_runs, tmp_path, capsys):
    samples, runs = toy_runs
    sample = samples[0]
    image = tmp_path / f"{sample.id}.png"
    save_gray(image, sample.image)
    capsys.readouterr()
    assert cli.main(["predict", "--model", str(runs["dct4"][2]), "--input", str(image)]) == 0
    assert capsys.readouterr().out.strip() == f"{image}: {sample.transcription} (without correction)"


# ---------------------------------------------------------------------------

def test_criterion_7_determinism(record_criterion, tmp_path):
    samples = data.gen_toy(data.TOY_WORDS[:6], 3, seed=1)
    vocab = data.build_vocab(samples)
    cfg = train.TrainConfig(epochs=1, batch_size=3, mode="dct4", seed=9, max_steps=5)
    first = train.train_loop(data.Split(samples, []), vocab, cfg)
    second = train.train_loop(data.Split(samples, []), vocab, cfg)
    same_losses = len(first.step_losses) == 5 and first.step_losses == second.step_losses
    ckpt = first.checkpoint
    before = train.evaluate(ckpt, samples, decode="beam")
    inputs = train.prepare_inputs(samples, "dct4")
    lp_before = ckpt.model.forward(inputs).data
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "c.ckpt")
    same_eval = (train.evaluate(loaded, samples, decode="beam") == before
                 and np.array_equal(loaded.model.forward(inputs).data, lp_before))
    ok = same_losses and same_eval
    record_criterion(7, "deterministic training and checkpoint round trip", ok,
                     f"first 5 losses identical: {same_losses}, reload evaluation identical: {same_eval}")
    assert ok


@pytest.mark.skipif(not os.environ.get("CDHWR_IAM_ROOT"),
                    reason="full IAM runs need the corpus (set CDHWR_IAM_ROOT) and several hours")
def test_optional_full_iam_runs():
    root = os.environ["CDHWR_IAM_ROOT"]
    samples = data.load_iam(os.path.join(root, "words.txt"), os.path.join(root, "words"))
    split = data.split_95_5(samples, seed=0)
    vocab = data.build_vocab(samples)
    reports = {}
    for mode in ("normal", "dct8", "dct4"):
        result = train.train_loop(split, vocab, train.TrainConfig(mode=mode, seed=0))
        reports[mode] = train.evaluate(result.checkpoint, split.test)
    assert abs(reports["normal"].wa - 80.08) <= 3
    assert abs(reports["dct8"].wa - 69.63) <= 3 and abs(reports["dct8"].cer - 14.72) <= 3
    assert abs(reports["dct4"].wa - 73.41) <= 3 and abs(reports["dct4"].cer - 13.37) <= 3
    assert abs(reports["dct4"].waf - 89.05) <= 3
    assert reports["normal"].wa > reports["dct4"].wa > reports["dct8"].wa
