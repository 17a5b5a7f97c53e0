"""End-to-end acceptance criteria; a pass/fail line per criterion is printed in the summary."""

import sys
import time

import numpy as np
import pytest

from mmsae.cli import main
from mmsae.crossmodal_eval import (
    alignment_report, mean_reciprocal_rank, sparse_cosine, zero_shot_classify,
)
from mmsae.dict_theory import augment_split_dictionary, is_modality_split, min_code_inner
from mmsae.embedding_store import save_paired
from mmsae.metrics import dead_neuron_census, mms, mms_report
from mmsae.sae_model import SparseCode, topk
from mmsae.synth_bench import (
    SynthSpec, decomposed_pairs, generate, scorer_view, split_model, zero_shot_task,
)
from mmsae.training import TrainConfig, evaluate_loss, group_sparse_loss, train

from conftest import random_params
from oracles import brute_mms, fd_check

# shared-support benchmark used by criteria 4 and 8
BENCH = dict(d=32, p_true=64, s=8, n_pairs=20_000, modality_offset_scale=3.0, n_classes=10, seed=1)
N_TRAIN = 16_000
HYPER = dict(k=8, expansion=8, steps=2000, lr=1e-2, seed=0, log_every=0)
LAMBDA, P_MASK = 0.05, 0.05
MARGIN = 0.02


def _variants():
    return {
        "SAE": TrainConfig(variant="SAE", **HYPER),
        "GSAE": TrainConfig(variant="GSAE", lambda_gs=LAMBDA, **HYPER),
        "MGSAE": TrainConfig(variant="MGSAE", lambda_gs=LAMBDA, p_mask=P_MASK, **HYPER),
    }


def _bench(noise):
    ds, truth = generate(SynthSpec(noise_sigma=noise, **BENCH))
    val_idx = np.arange(N_TRAIN, ds.n_pairs)
    return ds.subset(np.arange(N_TRAIN)), ds.subset(val_idx), zero_shot_task(ds, truth, val_idx)


def test_criterion_1_gradient_oracle(record_property):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, checked, skipped = 0.0, 0, 0
    for i in range(50):
        lam = (0.0, 0.05)[i % 2]
        params = random_params(rng, 8, 32)
        x, y = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        kept = rng.uniform(size=(4, 32)) >= 0.2 if i % 4 >= 2 else None
        w, c, s = fd_check(params, x, y, 4, kept, lam)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {worst:.2e} over {checked} partials "
                              f"({skipped} unstable skipped), {elapsed:.1f}s")
    assert worst < 1e-4
    assert checked > 0.9 * (checked + skipped)
    assert elapsed < 30


def test_criterion_2_split_augmentation(record_property):
    t0 = time.perf_counter()
    worst_inner, worst_resid, max_growth = np.inf, 0.0, 0
    for seed in range(100):
        spec = SynthSpec(d=16, p_true=32, s=3, n_pairs=5, regime="split", c_target=0.3, seed=seed)
        ds, truth = generate(spec)
        pairs = decomposed_pairs(ds, truth)
        assert is_modality_split(pairs)[0]
        dic, out = augment_split_dictionary(truth.dictionary, pairs, 0.3)
        growth = dic.p - truth.dictionary.shape[1]
        assert growth <= len(pairs)
        max_growth = max(max_growth, growth)
        for old, new in zip(pairs, out):
            assert new.code_inner() > 0
            assert new.residual_x < 1e-9 and new.residual_y < 1e-9
            assert len(new.z_y) <= 3 + 1
            worst_resid = max(worst_resid, new.residual_x, new.residual_y)
        worst_inner = min(worst_inner, min_code_inner(out))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"min code inner {worst_inner:.3g}, max residual {worst_resid:.1e}, "
                              f"max growth {max_growth}/5, {elapsed:.1f}s")
    assert elapsed < 10


def test_criterion_3_split_degeneracy(record_property):
    t0 = time.perf_counter()
    ds, truth = generate(SynthSpec(d=32, p_true=64, s=8, n_pairs=2000, noise_sigma=0.05,
                                   modality_offset_scale=3.0, seed=11))
    params = split_model(32, 256, seed=5)
    scores = mms_report(params, ds, scorer_view(ds, truth, seed=2), 8, ("image", "text")).scores
    census = dead_neuron_census(params, ds, 8)
    align = alignment_report(params, ds, 8)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |MMS| {np.abs(scores).max():.1g}, both {census.both}, "
                              f"mean cosine {align.mean_cosine}, {elapsed:.1f}s")
    assert (scores == 0).all()
    assert census.both == 0
    assert align.mean_cosine == 0.0
    assert elapsed < 5


@pytest.fixture(scope="module")
def directional_runs():
    t0 = time.perf_counter()
    train_ds, val, task = _bench(0.05)
    out = {}
    for name, cfg in _variants().items():
        params = train(train_ds, cfg).params
        out[name] = {
            "census": dead_neuron_census(params, val, cfg.k),
            "cos": alignment_report(params, val, cfg.k).mean_cosine,
            "acc": zero_shot_classify(params, task, cfg.k),
        }
    out["elapsed"] = time.perf_counter() - t0
    return out


def test_criterion_4_directional(directional_runs, record_property):
    r = directional_runs
    sae, gs, mg = r["SAE"], r["GSAE"], r["MGSAE"]
    record_property("detail", " | ".join(
        f"{n}: both {r[n]['census'].both} neither {r[n]['census'].neither} "
        f"cos {r[n]['cos']:.3f} acc {r[n]['acc']:.3f}" for n in ("SAE", "GSAE", "MGSAE"))
        + f" | {r['elapsed']:.0f}s")
    assert mg["census"].both > sae["census"].both
    assert mg["census"].neither <= sae["census"].neither
    assert mg["cos"] > gs["cos"] - MARGIN
    assert gs["cos"] > sae["cos"]
    assert mg["acc"] >= sae["acc"]
    assert r["elapsed"] < 600


def test_criterion_5_reduction_identity(record_property):
    train_ds, _, _ = _bench(0.05)
    small = train_ds.subset(np.arange(2000))
    base = dict(k=8, expansion=4, steps=200, lr=1e-2, seed=3, log_every=0)
    sae = train(small, TrainConfig(variant="SAE", **base))
    paired = train(small, TrainConfig(variant="MGSAE", lambda_gs=0.0, p_mask=0.0, tie_pre_bias=True, **base))
    group_off = train(small, TrainConfig(variant="GSAE", lambda_gs=0.0, tie_pre_bias=True, **base))
    record_property("detail", f"{sae.loss_trace.size} steps, final loss {sae.loss_trace[-1]:.6g}")
    assert sae.loss_trace.tobytes() == paired.loss_trace.tobytes()
    assert sae.loss_trace.tobytes() == group_off.loss_trace.tobytes()
    for name, arr in sae.params.as_dict().items():
        assert arr.tobytes() == getattr(paired.params, name).tobytes()


def test_criterion_6_determinism(tmp_path, record_property):
    ds, _ = generate(SynthSpec(d=16, p_true=32, s=4, n_pairs=1000, noise_sigma=0.05,
                               modality_offset_scale=1.0, seed=6))
    save_paired(tmp_path / "m.toml", ds)
    same = True
    for variant in ("sae", "gsae", "mgsae"):
        blobs = []
        for run in range(2):
            out = tmp_path / f"{variant}{run}.msc"
            code = main(["train", "--variant", variant, "--manifest", str(tmp_path / "m.toml"),
                         "--k", "4", "--expansion", "4", "--steps", "100", "--seed", "9",
                         "--out", str(out), "--log", str(tmp_path / f"{variant}{run}.log")])
            assert code == 0
            blobs.append(out.read_bytes())
        same &= blobs[0] == blobs[1]
    record_property("detail", "three variants, two runs each, checkpoints byte-identical" if same else "")
    assert same


def test_criterion_7_metric_suite(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    # tagged examples
    assert mms([], [1.0], np.zeros((0, 1))) == 0.0
    assert mms([1.0], [2.0], [[0.7]]) == pytest.approx(0.7, rel=1e-6)
    assert mms([1.0, 1.0], [1.0], [[0.2], [0.8]]) == pytest.approx(0.5, rel=1e-6)
    ranks = np.array([[1.0, 0, 0, 0], [0.5, 1.0, 0, 0], [1.0, 0.9, 0.8, 0.7]])
    assert mean_reciprocal_rank(ranks, [0, 0, 3]) == pytest.approx(0.58333, abs=1e-5)
    assert sparse_cosine(SparseCode.from_pairs([(0, 1.0), (1, 2.0)], 3),
                         SparseCode.from_pairs([(1, 2.0), (2, 1.0)], 3)) == pytest.approx(0.8, rel=1e-6)
    assert group_sparse_loss([1.0, 2.0, 0.0], [2.0, 2.0, 0.0]) == pytest.approx(5.064495, rel=1e-6)
    assert topk([2.0, 2.0, 1.0], 1).tolist() == [2.0, 0.0, 0.0]
    assert topk([1.0, 3.0, 2.0, 5.0], 2).tolist() == [0.0, 3.0, 0.0, 5.0]

    def close(a, b):
        return abs(a - b) <= 1e-6 * max(abs(a), abs(b)) or a == b

    for _ in range(1000):
        m, n = rng.integers(1, 8, size=2)
        same = bool(rng.integers(2))
        a_m = rng.uniform(0.01, 2, m)
        a_n = a_m if same else rng.uniform(0.01, 2, n)
        sim = rng.uniform(-1, 1, (m, m if same else n))
        assert close(mms(a_m, a_n, sim, same), brute_mms(a_m, a_n, sim, same))

        q, c = rng.integers(1, 10, size=2)
        scores = rng.integers(0, 4, size=(q, c)).astype(float)
        gt = rng.integers(0, c, size=q)
        ranks = [sorted(range(c), key=lambda j: (-scores[i, j], j)).index(gt[i]) + 1 for i in range(q)]
        assert close(mean_reciprocal_rank(scores, gt), float(np.mean([1 / r for r in ranks])))

        p = int(rng.integers(1, 12))
        z = rng.uniform(size=p) * (rng.uniform(size=p) < 0.5)
        w = rng.uniform(size=p) * (rng.uniform(size=p) < 0.5)
        dot = sum(z[i] * w[i] for i in range(p))
        nz, nw = sum(v * v for v in z) ** 0.5, sum(v * v for v in w) ** 0.5
        want = dot / (nz * nw) if nz > 0 and nw > 0 else 0.0
        assert close(sparse_cosine(SparseCode.from_dense(z), SparseCode.from_dense(w)), want)

        assert close(float(group_sparse_loss(z, w)), sum((z[i] ** 2 + w[i] ** 2) ** 0.5 for i in range(p)))

        v = rng.integers(-3, 4, size=p).astype(float)
        k = int(rng.integers(1, p + 1))
        keep = sorted(range(p), key=lambda i: (-v[i], i))[:k]
        want_v = [v[i] if i in keep else 0.0 for i in range(p)]
        assert topk(v, k).tolist() == want_v
    elapsed = time.perf_counter() - t0
    record_property("detail", f"5 metrics x 1000 randomized oracle checks, {elapsed:.1f}s")
    assert elapsed < 30


def test_criterion_8_fve_convergence(record_property):
    train_ds, val, _ = _bench(0.0)
    fve = {}
    for name, cfg in _variants().items():
        rep = evaluate_loss(train(train_ds, cfg).params, val, cfg.k)
        fve[name] = (rep.fve_a, rep.fve_b)
    record_property("detail", " | ".join(f"{n}: fve_a {a:.3f} fve_b {b:.3f}" for n, (a, b) in fve.items()))
    for a, b in fve.values():
        assert a >= 0.9 and b >= 0.9


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
