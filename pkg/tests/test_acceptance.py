"""The ten acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL criterion N`` line; the lines are also
collected into the terminal summary. Run with::

    pytest tests/test_acceptance.py -v
"""
import filecmp
import itertools
import math
import os
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from t1q import rng
from t1q.autodiff import Mode, OpKind, backward, forward, grad_check, numeric_gradient, relative_error
from t1q.nifti import read_nifti, write_nifti
from t1q.phantom import default_spec, make_phantom
from t1q.relaxometry import AcqParams, FitStatus, fit_maps, ir_signal, null_ti
from t1q.saliency import OISConfig, compute_ois
from t1q.segnet import (Fold, PlateauSchedule, Sample, TrainConfig, UNetConfig, build_unet, evaluate_loss,
                        load_model, predict, save_model, train)
from t1q.stats import holm_bonferroni, tpr_per_class, volume_weighted_average, wilcoxon_signed_rank
from t1q.volume import UNLABELED, Volume3D
import t1q.segnet as segnet_mod

ACQ = AcqParams()


# ---------------------------------------------------------------- 1


def test_criterion_01_relaxometry_round_trip():
    t1_vals = [400.0, 577.0, 800.0, 1000.0, 1400.0, 2000.0]
    pd_vals = [0.5, 1.0, 800.0]
    combos = list(itertools.product(pd_vals, t1_vals))
    idx = np.arange(32 ** 3).reshape(32, 32, 32) % len(combos)
    pd = np.array([c[0] for c in combos])[idx]
    t1 = np.array([c[1] for c in combos])[idx]
    mprage = Volume3D(ir_signal(pd, t1, ACQ.ti1, ACQ.tr))
    fgatir = Volume3D(ir_signal(pd, t1, ACQ.ti2, ACQ.tr))
    start = time.perf_counter()
    maps = fit_maps(mprage, fgatir, ACQ, threads=1)
    elapsed = time.perf_counter() - start
    ok_all = bool(np.all(maps.status == FitStatus.OK))
    err_t1 = float(np.max(np.abs(maps.t1.data - t1) / t1))
    err_pd = float(np.max(np.abs(maps.pd.data - pd) / pd))
    ok = ok_all and err_t1 < 1e-6 and err_pd < 1e-6 and elapsed < 5.0
    record_criterion(1, ok, f"max rel err T1 {err_t1:.2e}, PD {err_pd:.2e}, all OK={ok_all}, "
                            f"{elapsed:.2f} s single-threaded")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_02_null_points():
    a = null_ti(577.0, 4000.0)
    b = null_ti(1000.0, 4000.0)
    # closed form: 1 - 2 exp(-TI/T1) + exp(-TR/T1) = 0
    oracle = lambda t1: -t1 * math.log((1 + math.exp(-4000.0 / t1)) / 2)  # noqa: E731
    residuals = [abs(float(ir_signal(p, t1, ti, 4000.0))) / p
                 for t1, ti in ((577.0, a), (1000.0, b)) for p in (0.5, 1.0, 800.0)]
    ok = (abs(a - 399.4) <= 0.1 and abs(b - 675.0) <= 0.1 and max(residuals) < 1e-9
          and abs(a - oracle(577.0)) < 1e-9 and abs(b - oracle(1000.0)) < 1e-9)
    record_criterion(2, ok, f"null_ti(577)={a:.5f}, null_ti(1000)={b:.5f}, max |I|/PD={max(residuals):.1e}")
    assert ok


# ---------------------------------------------------------------- 3

PRIMITIVE_SHAPES = {
    OpKind.CONV3D: [[(1, 2, 3, 3, 3)], [(2, 1, 4, 3, 2)], [(1, 3, 2, 4, 4)]],
    OpKind.TRANSPOSED_CONV3D: [[(1, 2, 2, 2, 2)], [(2, 1, 3, 2, 1)], [(1, 3, 1, 2, 3)]],
    OpKind.INSTANCE_NORM: [[(1, 2, 3, 3, 3)], [(2, 3, 2, 4, 2)], [(1, 1, 5, 2, 3)]],
    OpKind.LEAKY_RELU: [[(1, 2, 3, 3, 3)], [(2, 1, 4, 2, 2)], [(1, 3, 2, 2, 5)]],
    OpKind.DROPOUT: [[(1, 2, 3, 3, 3)], [(2, 1, 4, 2, 2)], [(1, 3, 2, 2, 5)]],
    OpKind.MAX_POOL3D: [[(1, 2, 4, 4, 4)], [(2, 1, 2, 4, 6)], [(1, 3, 2, 2, 2)]],
    OpKind.CONCAT: [[(1, 2, 3, 3, 3), (1, 1, 3, 3, 3)], [(2, 1, 2, 2, 2), (2, 3, 2, 2, 2)],
                    [(1, 2, 2, 3, 4), (1, 2, 2, 3, 4), (1, 1, 2, 3, 4)]],
    OpKind.SOFTMAX: [[(1, 3, 3, 3, 3)], [(2, 2, 2, 4, 2)], [(1, 5, 2, 2, 3)]],
    OpKind.ADD: [[(1, 2, 3, 3, 3), (1, 2, 3, 3, 3)], [(2, 1, 2, 4, 2), (2, 1, 2, 4, 2)],
                 [(1, 3, 2, 2, 5), (1, 3, 2, 2, 5)]],
    OpKind.SCALE: [[(1, 2, 3, 3, 3)], [(2, 1, 4, 2, 2)], [(1, 3, 2, 2, 5)]],
    OpKind.REDUCE_SUM: [[(1, 2, 3, 3, 3)], [(2, 1, 4, 2, 2)], [(1, 3, 2, 2, 5)]],
    OpKind.DICE_TERMS: [[(1, 3, 3, 3, 3)], [(2, 2, 2, 4, 2)], [(1, 4, 2, 2, 3)]],
}


def _unet_input_spot_check(n_checks=12, seed=5):
    model = build_unet(UNetConfig(in_channels=2, num_classes=4, depth=2, base_channels=4), seed=seed)
    gen = rng.stream(seed, "spot-check")
    x = gen.normal(size=(1, 2, 8, 8, 8))
    probs = forward(model.graph, {"image": x}, Mode.EVAL)["probs"]
    r = gen.normal(size=probs.shape)
    analytic = backward(model.graph, {"probs": r}).inputs["image"].reshape(-1)
    idx = sorted(gen.choice(x.size, n_checks, replace=False).tolist())
    scalar = lambda: float(np.sum(forward(model.graph, {"image": x}, Mode.EVAL)["probs"] * r))  # noqa: E731
    numeric = numeric_gradient(scalar, x, 1e-5, idx)
    return relative_error(analytic[idx], numeric)


def test_criterion_03_gradient_suite():
    start = time.perf_counter()
    worst, failures, n = 0.0, [], 0
    for kind, shape_sets in PRIMITIVE_SHAPES.items():
        for shapes in shape_sets:
            rep = grad_check(kind, shapes, tolerance=1e-6, seed=n)
            n += 1
            worst = max(worst, rep.max_error)
            if not rep.passed:
                failures.append((kind.name, shapes, rep.errors))
    unet_err = _unet_input_spot_check()
    elapsed = time.perf_counter() - start
    ok = not failures and unet_err < 1e-4 and elapsed < 60.0
    record_criterion(3, ok, f"{n} primitive checks over {len(PRIMITIVE_SHAPES)} ops, worst {worst:.1e}; "
                            f"U-Net input spot check {unet_err:.1e}; {elapsed:.1f} s")
    assert not failures, failures
    assert ok


# ---------------------------------------------------------------- 4


def _ois_fixture():
    model = build_unet(UNetConfig(in_channels=3, num_classes=3, depth=1, base_channels=2), seed=2)
    gen = rng.stream(2, "ois-data")
    data = {f"s{i}": gen.normal(size=(3, 4, 4, 4)) for i in range(3)}
    return model, data


def test_criterion_04_ois_sanity():
    model, data = _ois_fixture()
    # channel 1 cannot influence anything once its first-layer weights vanish
    model.params["enc0.conv1.w"][:, 1] = 0.0
    rep = compute_ois(model, data, OISConfig(mc_runs=4, seed=1))
    zero_exact = rep.scores[1] == 0.0 and rep.scores[0] > 0 and rep.scores[2] > 0

    m1 = compute_ois(model, data, OISConfig(mc_runs=1, dropout_p=0.0)).scores
    m7 = compute_ois(model, data, OISConfig(mc_runs=7, dropout_p=0.0)).scores
    drift = float(np.max(np.abs(m7 - m1) / np.maximum(np.abs(m1), 1e-300)))

    permuted = {k: data[k] for k in reversed(list(data))}
    a = compute_ois(model, data, OISConfig(mc_runs=3, seed=9)).scores
    b = compute_ois(model, permuted, OISConfig(mc_runs=3, seed=9)).scores
    perm_exact = np.array_equal(a, b)

    ok = bool(zero_exact and drift <= 1e-12 and perm_exact)
    record_criterion(4, ok, f"zero-influence score {float(rep.scores[1])!r}, p=0 drift M=1 vs 7 {drift:.1e}, "
                            f"permutation bit-identical={perm_exact}")
    assert ok


# ---------------------------------------------------------------- 5

DISCOVERY_DIMS = (16, 16, 16)


def _discovery_run(seed, n_subjects=6, epochs=30):
    """Phantom T1 map (seconds) as the one informative channel among three N(0, 1) channels."""
    spec = default_spec(DISCOVERY_DIMS, n_nuclei=4, fill=0.5, jitter=1.0, seed=seed)
    pos = seed % 4
    data = {}
    for i in range(n_subjects):
        ph = make_phantom(spec, seed=1000 * seed + i)
        g = rng.stream(seed, "noise-channels", i)
        chans = [g.normal(size=DISCOVERY_DIMS) for _ in range(3)]
        chans.insert(pos, np.asarray(ph.truth.t1.data) * 1e-3)
        data[f"s{i}"] = Sample(np.stack(chans), np.asarray(ph.labels.labels))
    ids = list(data)
    fold = Fold(tuple(ids[:-2]), (ids[-2],), (ids[-1],))
    model = build_unet(UNetConfig(4, num_classes=5, depth=2, base_channels=4), seed=seed)
    train(model, data, fold, TrainConfig(lr=1e-2, crop_size=DISCOVERY_DIMS, max_epochs=epochs, seed=seed))
    held_out = {s: data[s].image for s in fold.val + fold.test}
    rep = compute_ois(model, held_out, OISConfig(mc_runs=10, seed=seed))
    return pos, rep


@pytest.mark.slow
def test_criterion_05_ois_discovery():
    start = time.perf_counter()
    hits = []
    for seed in range(10):
        pos, rep = _discovery_run(seed)
        hits.append(int(rep.ranks[pos]) == 1)
    elapsed = time.perf_counter() - start
    ok = sum(hits) >= 9 and elapsed < 15 * 60
    record_criterion(5, ok, f"informative channel ranked 1 in {sum(hits)}/10 seeds; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 6


def _brute_force_tpr(pred, gt, n_classes=14):
    tp = [0] * n_classes
    total = [0] * n_classes
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            for k in range(gt.shape[2]):
                g = int(gt[i, j, k])
                if g == UNLABELED:
                    continue
                total[g] += 1
                if int(pred[i, j, k]) == g:
                    tp[g] += 1
    return tp, [t - p for t, p in zip(total, tp)]


def test_criterion_06_metric_oracles():
    gen = rng.stream(6, "tpr-cases")
    mismatches = 0
    for _ in range(100):
        gt = gen.integers(0, 14, (8, 8, 8)).astype(np.uint8)
        gt[gen.random((8, 8, 8)) < gen.uniform(0, 0.9)] = UNLABELED
        pred = np.where(gen.random((8, 8, 8)) < 0.5, gt, gen.integers(0, 14, (8, 8, 8))).astype(np.uint8)
        res = tpr_per_class(pred, gt)
        tp, fn = _brute_force_tpr(pred, gt)
        mismatches += int(res.tp.tolist() != tp or res.fn.tolist() != fn)
    vwa = volume_weighted_average([1.0, 0.0], [3.0, 1.0])
    ok = mismatches == 0 and vwa == 0.75
    record_criterion(6, ok, f"{100 - mismatches}/100 TPR cases match brute force; VWA hand case {vwa}")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_statistics_oracles():
    mismatches, checked = 0, 0
    for n in range(1, 13):
        ranks = np.arange(1, n + 1)
        w_values = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=n)]
        total = len(w_values)
        for w in sorted(set(w_values)):
            lower = sum(1 for v in w_values if v <= w)
            upper = sum(1 for v in w_values if v >= w)
            expected = float(min(Fraction(1), 2 * Fraction(min(lower, upper), total)))
            # one tie-free sample whose positive ranks sum to w
            signs = next(s for s in itertools.product((0, 1), repeat=n)
                         if sum(r for r, b in zip(ranks, s) if b) == w)
            d = np.where(np.array(signs) == 1, ranks, -ranks).astype(float)
            out = wilcoxon_signed_rank(d, np.zeros(n))
            checked += 1
            mismatches += int(out.method != "EXACT" or out.statistic != w or out.p_value != expected)
    all_reject = holm_bonferroni([0.01, 0.02, 0.03]).reject.tolist()
    none_reject = holm_bonferroni([0.04, 0.04, 0.04]).reject.tolist()
    ok = mismatches == 0 and all_reject == [True] * 3 and none_reject == [False] * 3
    record_criterion(7, ok, f"{checked - mismatches}/{checked} exact p-values equal sign enumeration (n<=12); "
                            f"Holm {all_reject} / {none_reject}")
    assert ok


# ---------------------------------------------------------------- 8


def _scripted_schedule():
    losses = [1.0 - 0.05 * e for e in range(1, 11)] + [0.9] * 30  # best at epoch 10
    sched = PlateauSchedule(1e-3)
    lrs, stop_epoch = [], None
    for epoch, loss in enumerate(losses, start=1):
        lrs.append(sched.lr)
        if sched.step(epoch, loss):
            stop_epoch = epoch
            break
    return sched, lrs, stop_epoch


def test_criterion_08_training_protocol(small_phantom, monkeypatch):
    sched, lrs, stop_epoch = _scripted_schedule()
    ratios_exact = all(b == a or b == a * 0.9 for a, b in zip(lrs, lrs[1:]))
    schedule_ok = (sched.drops == [15, 20, 25] and stop_epoch == 25 and sched.best_epoch == 10
                   and ratios_exact and sched.lr == 1e-3 * 0.9 * 0.9 * 0.9)

    # the same script through the real training loop
    script = iter([1.0] + [1.0 - 0.05 * e for e in range(1, 11)] + [0.9] * 30)
    monkeypatch.setattr(segnet_mod, "evaluate_loss", lambda *a, **k: next(script))
    data = {f"s{i}": _phantom_sample(i) for i in range(3)}
    fold = Fold(("s0", "s1"), ("s2",), ())
    model = build_unet(UNetConfig(2, num_classes=5, depth=1, base_channels=2), seed=0)
    rep = train(model, data, fold, TrainConfig(crop_size=(8, 8, 8), max_epochs=60, augment=False))
    loop_ok = (rep.stop_reason == "EARLY_STOP" and len(rep.epochs) == 25 and rep.best_epoch == 10
               and rep.lr_drops == [15, 20, 25] and rep.epochs[15].lr == rep.epochs[14].lr * 0.9)
    monkeypatch.undo()

    model = build_unet(UNetConfig(2, num_classes=5, depth=2, base_channels=4), seed=1)
    data = {f"s{i}": _phantom_sample(i, dims=(16, 16, 16)) for i in range(4)}
    fold = Fold(("s0", "s1", "s2"), ("s3",), ())
    rep = train(model, data, fold, TrainConfig(crop_size=(16, 16, 16), max_epochs=8, seed=1))
    final = evaluate_loss(model, [data["s3"]], (16, 16, 16))
    reduced = final < rep.initial_val_loss
    ok = schedule_ok and loop_ok and reduced
    record_criterion(8, ok, f"lr drops at {sched.drops}, stop at epoch {stop_epoch} (best {sched.best_epoch}); "
                            f"training loop agrees={loop_ok}; val Dice loss {rep.initial_val_loss:.4f} -> {final:.4f}")
    assert ok


def _phantom_sample(i, dims=(8, 8, 8)):
    spec = default_spec(dims, n_nuclei=4, fill=0.5, jitter=1.0, seed=7)
    ph = make_phantom(spec, seed=100 + i)
    image = np.stack([np.asarray(ph.mprage.data), np.asarray(ph.fgatir.data)])
    return Sample(image, np.asarray(ph.labels.labels))


# ---------------------------------------------------------------- 9


def test_criterion_09_io_round_trips(tmp_path):
    gen = rng.stream(9, "nifti")
    data = gen.normal(size=(7, 5, 6)).astype(np.float32)
    data.flat[:4] = [0.0, -0.0, np.float32(1e-45), np.finfo(np.float32).max]
    affine = np.array([[0.9, 0.1, 0, -20], [0, 1.1, 0, 5], [0, 0, 1.3, 7], [0, 0, 0, 1]])
    vol = Volume3D(data, (0.9, 1.1, 1.3), affine)
    write_nifti(vol, tmp_path / "v.nii")
    back = read_nifti(tmp_path / "v.nii")
    nifti_ok = back.data.dtype == np.float32 and back.data.tobytes() == data.tobytes()

    model = build_unet(UNetConfig(in_channels=2, num_classes=4, depth=1, base_channels=3), seed=4)
    image = gen.normal(size=(2, 8, 8, 8))
    before, _ = predict(model, image)
    save_model(model, tmp_path / "m.t1q", {"note": "round trip"})
    loaded, meta = load_model(tmp_path / "m.t1q")
    after, _ = predict(loaded, image)
    ckpt_ok = before.tobytes() == after.tobytes() and meta["note"] == "round trip"
    ok = nifti_ok and ckpt_ok
    record_criterion(9, ok, f"NIfTI float32 bit-exact={nifti_ok}; checkpoint predictions bit-exact={ckpt_ok}")
    assert ok


# ---------------------------------------------------------------- 10

PIPELINE = [
    ["phantom", "--out", "ph", "--subjects", "4", "--dims", "16", "16", "16", "--n-nuclei", "4",
     "--fill", "0.5", "--noise", "0.01", "--seed", "5"],
    ["fit-maps", "--manifest", "ph/manifest.json", "--out", "maps"],
    ["synthesize", "--manifest", "ph/manifest.json", "--maps", "maps", "--out", "syn"],
    ["train", "--manifest", "ph/manifest.json", "--maps", "maps", "--out", "models", "--config-preset",
     "config9", "--folds", "4", "--fold", "0", "1", "--n-val", "1", "--max-epochs", "2", "--crop-size",
     "16", "16", "16", "--seed", "5"],
    ["ois", "--manifest", "ph/manifest.json", "--maps", "maps", "--models", "models", "--out", "ois",
     "--mc-runs", "3", "--seed", "5"],
    ["evaluate", "--manifest", "ph/manifest.json", "--maps", "maps", "--models", "models", "--out", "eval"],
]


def _run_pipeline(root):
    root.mkdir()
    env = dict(os.environ, T1Q_THREADS="1")
    for argv in PIPELINE:
        proc = subprocess.run([sys.executable, "-m", "t1q", *argv], cwd=root, env=env,
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr


def _tree(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_criterion_10_reproducibility(tmp_path):
    a, b = tmp_path / "run_a", tmp_path / "run_b"
    _run_pipeline(a)
    _run_pipeline(b)
    files_a, files_b = _tree(a), _tree(b)
    differing = [f for f in files_a if not filecmp.cmp(a / f, b / f, shallow=False)] if files_a == files_b else ["<tree>"]
    stages = {f.split("/")[0] for f in files_a}
    ok = files_a == files_b and not differing and {"maps", "syn", "models", "ois", "eval"} <= stages
    record_criterion(10, ok, f"{len(files_a)} output files over {len(stages)} stages, "
                             f"{len(differing)} differ between two invocations")
    assert ok, differing


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v", "-s"]))
