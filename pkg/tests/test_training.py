import math

import numpy as np
import pytest
import tomli
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmsae.embedding_store import EmbeddingMatrix, PairedDataset
from mmsae.errors import ConfigError, ShapeError, TrainingDiverged
from mmsae.sae_model import SaeParams, encode_dense, init_params, load_checkpoint
from mmsae.rng import Xoshiro256
from mmsae.synth_bench import SynthSpec, generate, split_model
from mmsae.training import (
    AdamState, TrainConfig, adam_step, backward, default_p_mask, evaluate_loss, group_sparse_loss,
    loss_and_grad, total_loss, train,
)

from conftest import paired, random_params
from oracles import adam_reference, dense_forward, fd_check


def test_group_sparse_examples():
    assert group_sparse_loss(np.zeros(3), np.zeros(3)) == 0
    assert group_sparse_loss([3.0, 0.0], [4.0, 0.0]) == 5.0
    assert group_sparse_loss([1.0, 2.0, 0.0], [2.0, 2.0, 0.0]) == pytest.approx(5.064495, abs=1e-6)
    assert group_sparse_loss([1.0, 2.0, 0.0], [2.0, 2.0, 0.0]) == pytest.approx(math.sqrt(5) + math.sqrt(8))


@given(arrays(np.float64, 6, elements=st.floats(0, 10)), arrays(np.float64, 6, elements=st.floats(0, 10)))
def test_group_sparse_bounds(z, w):
    # between the L2 norm of the stacked codes and the sum of L1 norms
    gs = group_sparse_loss(z, w)
    assert math.sqrt((z ** 2).sum() + (w ** 2).sum()) <= gs + 1e-9
    assert gs <= z.sum() + w.sum() + 1e-9
    assert group_sparse_loss(z, w) == pytest.approx(group_sparse_loss(w, z))


def test_group_sparse_shape_mismatch():
    with pytest.raises(ShapeError):
        group_sparse_loss(np.zeros(3), np.zeros(4))


def _identity_params(d):
    return SaeParams(np.eye(d), np.eye(d), np.zeros(d), np.zeros(d), np.zeros(d))


def test_perfect_reconstruction_zero_loss_and_grad():
    x = np.array([[0.6, 0.8], [0.8, 0.6]])
    params = _identity_params(2)
    report, grads = loss_and_grad(params, x, x, 2)
    assert report.total == 0.0
    assert all(not g.any() for g in grads.as_dict().values())


def test_lambda_zero_decouples(rng):
    params = random_params(rng, 4, 8)
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    rep = total_loss(params, x, y, 2)
    assert rep.total == rep.recon_a + rep.recon_b


def test_forward_matches_dense_oracle(rng):
    for _ in range(5):
        params = random_params(rng, 4, 8)
        x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        kept = rng.uniform(size=(3, 8)) > 0.3
        rep = total_loss(params, x, y, 2, kept, 0.05)
        ra, rb, gs, tot = dense_forward(params, x, y, 2, kept, 0.05)
        for got, want in ((rep.recon_a, ra), (rep.recon_b, rb), (rep.gs, gs), (rep.total, tot)):
            assert got == pytest.approx(want, rel=1e-6)


@pytest.mark.parametrize("lam", [0.0, 0.05])
def test_gradient_finite_differences(rng, lam):
    for _ in range(3):
        params = random_params(rng, 4, 12)
        x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        kept = rng.uniform(size=(3, 12)) > 0.2
        worst, checked, _ = fd_check(params, x, y, 3, kept, lam)
        assert checked > 0 and worst < 1e-4


def test_disjoint_supports_give_l1_gradient():
    params = split_model(6, 10, seed=1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    za = encode_dense(params, x, "a", 3)
    zb = encode_dense(params, x, "b", 3)
    assert not ((za > 0) & (zb > 0)).any()
    lam = 0.3
    g0 = backward(params, x, x, 3, None, 0.0)
    g1 = backward(params, x, x, 3, None, lam)
    # d/dz sqrt(z^2 + 0) = 1 on every active coordinate, batch mean over 4 rows
    active = (za > 0).sum(axis=0) + (zb > 0).sum(axis=0)
    np.testing.assert_allclose(g1.b_enc - g0.b_enc, lam / 4 * active, atol=1e-12)


def test_adam_first_step():
    params = _identity_params(1)
    grads = SaeParams([[0.5]], [[2.0]], [1e-3], [3.0], [7.0])
    before = params.copy()
    adam_step(params, grads, AdamState(), lr=0.01, renorm_decoder=False)
    for name in ("w_enc", "w_dec", "b_enc", "b_pre_a", "b_pre_b"):
        g = getattr(grads, name)
        expect = -0.01 * g / (np.sqrt(g * g) + 1e-8)
        np.testing.assert_allclose(getattr(params, name) - getattr(before, name), expect, rtol=1e-12)
        assert getattr(params, name) - getattr(before, name) == pytest.approx(-0.01, rel=1e-4)


def test_adam_zero_gradient_is_noop(rng):
    params = init_params(3, 6, Xoshiro256(0))
    before = params.copy()
    zero = SaeParams(**{k: np.zeros_like(v) for k, v in params.as_dict().items()})
    state = AdamState()
    for _ in range(5):
        adam_step(params, zero, state, lr=0.1)
    for name, arr in before.as_dict().items():
        np.testing.assert_allclose(getattr(params, name), arr, atol=1e-15)


def test_adam_matches_reference_trace(rng):
    d, p = 2, 3
    target = random_params(rng, d, p)
    params = random_params(rng, d, p)
    names = list(params.as_dict())
    flat_t = np.concatenate([target.as_dict()[n].ravel() for n in names])
    flat0 = np.concatenate([params.as_dict()[n].ravel() for n in names])
    quad = np.linspace(0.5, 3.0, flat_t.size)

    def grad_flat(theta):
        return [quad[i] * (theta[i] - flat_t[i]) for i in range(len(theta))]

    ref = adam_reference(flat0.tolist(), grad_flat, 100, lr=0.01)
    state = AdamState()
    worst = 0.0
    for t in range(100):
        flat = np.concatenate([params.as_dict()[n].ravel() for n in names])
        g = quad * (flat - flat_t)
        parts, pos = {}, 0
        for n in names:
            shape = params.as_dict()[n].shape
            size = int(np.prod(shape))
            parts[n] = g[pos:pos + size].reshape(shape)
            pos += size
        adam_step(params, SaeParams(**parts), state, lr=0.01, renorm_decoder=False)
        flat = np.concatenate([params.as_dict()[n].ravel() for n in names])
        worst = max(worst, np.abs(flat - np.array(ref[t])).max())
    assert worst < 1e-10


def test_renormalization_after_step(rng):
    params = random_params(rng, 4, 8)
    adam_step(params, random_params(rng, 4, 8), AdamState(), lr=0.1)
    np.testing.assert_allclose(params.decoder_norms(), 1.0)


def test_config_variants():
    sae = TrainConfig(variant="sae", lambda_gs=0.3, p_mask=0.4)
    assert (sae.variant, sae.lambda_gs, sae.p_mask, sae.tie_pre_bias) == ("SAE", 0.0, 0.0, True)
    gsae = TrainConfig(variant="GSAE", p_mask=0.4)
    assert gsae.p_mask == 0.0 and gsae.lambda_gs == 0.05
    assert TrainConfig().resolved(("image", "text")).p_mask == 0.2
    assert TrainConfig().resolved(("audio", "text")).p_mask == 0.1
    assert default_p_mask(("Audio", "text")) == 0.1
    for bad in ({"variant": "VAE"}, {"lambda_gs": -1}, {"p_mask": 1.5}, {"k": 0}, {"lr": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_defaults_match_reference_regime():
    cfg = TrainConfig()
    assert (cfg.k, cfg.expansion, cfg.lambda_gs, cfg.batch_size, cfg.steps) == (32, 16, 0.05, 128, 25_000)


def test_zero_steps_returns_initialization(rng):
    ds = paired(rng, 40, 4)
    cfg = TrainConfig(variant="GSAE", k=2, expansion=2, steps=0)
    res = train(ds, cfg)
    init = init_params(4, 8, Xoshiro256(__import__("mmsae.rng").rng.derive_seed(0, "init")),
                       ds.side_a.data, ds.side_b.data)
    for name, arr in init.as_dict().items():
        np.testing.assert_array_equal(getattr(res.params, name), arr)
    assert res.loss_trace.size == 0


def test_training_is_deterministic(rng, tmp_path):
    ds = paired(rng, 200, 6)
    cfg = TrainConfig(variant="MGSAE", k=3, expansion=2, steps=30, lr=1e-3, seed=5, log_every=10)
    a = train(ds, cfg, log_path=tmp_path / "a.log")
    b = train(ds, cfg, log_path=tmp_path / "b.log")
    np.testing.assert_array_equal(a.loss_trace, b.loss_trace)
    for name, arr in a.params.as_dict().items():
        np.testing.assert_array_equal(getattr(b.params, name), arr)
    c = train(ds, TrainConfig(variant="MGSAE", k=3, expansion=2, steps=30, lr=1e-3, seed=6, log_every=0))
    assert not np.array_equal(a.loss_trace, c.loss_trace)


def test_log_is_toml_lines(rng, tmp_path):
    ds = paired(rng, 100, 4)
    train(ds, TrainConfig(k=2, expansion=2, steps=20, log_every=10), log_path=tmp_path / "t.log")
    lines = (tmp_path / "t.log").read_text().splitlines()
    assert lines[0].startswith("config = ")
    header = tomli.loads(lines[0])["config"]
    assert header["variant"] == "MGSAE" and header["p_mask"] == 0.2
    steps = [tomli.loads("r = " + line)["r"]["step"] for line in lines[1:]]
    assert steps == [10, 20]


def test_periodic_checkpoint(rng, tmp_path):
    ds = paired(rng, 100, 4)
    cfg = TrainConfig(k=2, expansion=2, steps=20, checkpoint_every=10, log_every=0)
    train(ds, cfg, checkpoint_path=tmp_path / "c.msc")
    _, k, meta = load_checkpoint(tmp_path / "c.msc")
    assert k == 2 and meta["steps"] == 20 and meta["modalities"] == ["image", "text"]


def test_tied_pre_bias_stays_tied(rng):
    ds = paired(rng, 100, 4)
    res = train(ds, TrainConfig(variant="SAE", k=2, expansion=2, steps=15, lr=1e-2, log_every=0))
    np.testing.assert_array_equal(res.params.b_pre_a, res.params.b_pre_b)


def test_divergence_reports_last_good(rng):
    ds = paired(rng, 50, 3)
    bad = init_params(3, 6, Xoshiro256(0))
    bad.w_enc *= 1e200
    with pytest.raises(TrainingDiverged) as info:
        train(ds, TrainConfig(k=2, expansion=2, steps=5, log_every=0), init=bad)
    assert info.value.step == 1 and info.value.last_good is not None


def test_k_larger_than_dictionary(rng):
    with pytest.raises(ConfigError):
        train(paired(rng, 10, 2), TrainConfig(k=5, expansion=2, steps=1))


def test_fve_on_realizable_synthetic_data():
    ds, _ = generate(SynthSpec(d=32, p_true=64, s=4, n_pairs=8000, seed=4))
    train_ds, val = ds.subset(np.arange(6000)), ds.subset(np.arange(6000, 8000))
    res = train(train_ds, TrainConfig(variant="SAE", k=8, expansion=4, lr=3e-3, steps=2000, log_every=0))
    rep = evaluate_loss(res.params, val, 8)
    assert rep.fve_a >= 0.9 and rep.fve_b >= 0.9
