import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from phycast import tensor as T
from phycast.checkpoint import load_checkpoint
from phycast.config import RunConfig
from phycast.datagen import SequenceBatch, generate_blobs
from phycast.diffops import DiffKernelBank
from phycast.metrics import frame_mae, frame_mse, sequence_metrics, ssim
from phycast.tensor import ShapeError, Tensor
from phycast.train import (
    LOG_FIELDS,
    Adam,
    CopyLastFrame,
    Protocol,
    TrainingDiverged,
    evaluate,
    image_loss,
    smoothed_trend,
    total_loss,
    train,
)

# -- objective ---------------------------------------------------------------


def test_perfect_predictions_and_exact_bank_give_zero_total():
    x = np.random.default_rng(0).uniform(size=(2, 3, 1, 4, 4))
    preds = [Tensor(x[:, i]) for i in range(3)]
    loss, rep = total_loss(preds, x, DiffKernelBank.exact(2, 3), 1.0)
    assert rep.image_loss == 0.0
    assert rep.total == pytest.approx(0.0, abs=1e-9)


def test_lambda_zero_total_is_image_loss():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(1, 2, 1, 4, 4))
    preds = [Tensor(rng.uniform(size=(1, 1, 4, 4))) for _ in range(2)]
    bank = DiffKernelBank.create(2, 3, rng, np.float64)
    _, rep = total_loss(preds, x, bank, 0.0)
    assert rep.total == rep.image_loss and rep.moment_loss > 0


def test_zero_vs_one_image_loss():
    preds = [Tensor(np.zeros((2, 1, 3, 3)))]
    assert image_loss(preds, np.ones((2, 1, 1, 3, 3))).data == 1.0


@settings(max_examples=20, deadline=None)
@given(lam=st.floats(0, 10), seed=st.integers(0, 2**16))
def test_loss_decomposition(lam, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(1, 2, 1, 5, 5))
    preds = [Tensor(rng.uniform(size=(1, 1, 5, 5))) for _ in range(2)]
    bank = DiffKernelBank.create(1, 3, rng, np.float64)
    _, rep = total_loss(preds, x, bank, lam)
    assert abs(rep.total - (rep.image_loss + lam * rep.moment_loss)) <= 1e-7 * max(1.0, rep.total)


def test_loss_shape_errors():
    with pytest.raises(ShapeError):
        image_loss([Tensor(np.zeros((1, 1, 3, 3)))], np.zeros((1, 2, 1, 3, 3)))
    with pytest.raises(ShapeError):
        image_loss([Tensor(np.zeros((1, 1, 3, 3)))], np.zeros((1, 1, 1, 4, 3)))
    with pytest.raises(ValueError):
        total_loss([Tensor(np.zeros((1, 1, 3, 3)))], np.zeros((1, 1, 1, 3, 3)), [], -1.0)


# -- Adam --------------------------------------------------------------------


def test_adam_first_step_is_unit_update():
    p = T.parameter(np.array([0.0]))
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = T.parameter(np.array([0.3, -2.0]))
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    assert np.array_equal(p.data, [0.3, -2.0])


def test_adam_skips_non_finite():
    p = T.parameter(np.array([1.0]))
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([np.nan])
    assert opt.step() is False
    assert opt.skipped == 1 and p.data[0] == 1.0 and opt.t == 0


def test_adam_matches_closed_form_on_constant_gradient():
    # with a constant gradient the bias-corrected ratio is exactly 1 each step
    p = T.parameter(np.array([0.0]))
    opt = Adam({"p": p}, lr=0.01, eps=0.0)
    for _ in range(5):
        p.grad = np.array([3.0])
        opt.step()
    assert p.data[0] == pytest.approx(-0.05, rel=1e-12)


# -- metrics -----------------------------------------------------------------


def test_ssim_identity_is_exactly_one():
    x = np.random.default_rng(0).uniform(size=(16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_inverted_binary_is_negative():
    x = (np.random.default_rng(1).uniform(size=(16, 16)) > 0.5).astype(float)
    assert ssim(x, 1 - x) < 0


def test_ssim_brightened_below_one():
    x = np.random.default_rng(2).uniform(size=(16, 16))
    assert ssim(x, np.clip(x + 0.5, 0, 1)) < 1


@pytest.mark.parametrize("size", [11, 16, 32])
def test_ssim_matches_skimage(size):
    rng = np.random.default_rng(size)
    a, b = rng.uniform(size=(2, size, size))
    ref = structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_ssim_small_frame_falls_back_to_global():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    b = np.array([[0.2, 0.8], [0.9, 0.1]])
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - ma) * (b - mb)).mean()
    c1, c2 = 0.01**2, 0.03**2
    ref = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    assert ssim(a, b) == pytest.approx(ref, abs=1e-12)


def test_mse_mae_sum_over_pixels():
    pred = np.zeros((1, 1, 1, 4, 4))
    tgt = np.full((1, 1, 1, 4, 4), 0.5)
    assert frame_mse(pred[:, 0], tgt[:, 0])[0] == pytest.approx(16 * 0.25)
    assert frame_mae(pred[:, 0], tgt[:, 0])[0] == pytest.approx(16 * 0.5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_metric_identities(seed):
    x = np.random.default_rng(seed).uniform(size=(2, 3, 1, 12, 12))
    for r in sequence_metrics(x, x):
        assert r.mse == 0 and r.mae == 0 and r.ssim == 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 1, 2, 1, 12, 12))
    for r in sequence_metrics(a, b):
        assert r.mse >= 0 and r.mae >= 0 and -1 <= r.ssim <= 1


# -- evaluation --------------------------------------------------------------


def static_batch(B=3, T_=8, size=16):
    one = generate_blobs(B, 1, size, size, 1, seed=0, size=5).frames
    return SequenceBatch(np.repeat(one, T_, axis=1))


def test_copy_model_on_static_sequences_is_perfect():
    rep = evaluate(CopyLastFrame(), static_batch(), 4, 4)
    assert len(rep.per_step) == 4
    assert all(r.mse == 0 and r.ssim == 1 for r in rep.per_step)


def test_protocol_parsing():
    assert Protocol.parse("standard").kind == "standard"
    assert Protocol.parse("longterm:80").horizon == 80
    assert Protocol.parse("missing:0.3").ratio == 0.3
    assert str(Protocol.parse("missing:0.3")) == "missing:0.3"
    for bad in ("longterm:0", "longterm:x", "missing:0.7", "nope"):
        with pytest.raises(ValueError):
            Protocol.parse(bad)


def test_longterm_needs_long_sequences():
    with pytest.raises(ShapeError):
        evaluate(CopyLastFrame(), static_batch(T_=8), 4, 4, "longterm:10")


def test_longterm_rows_and_trend():
    rep = evaluate(CopyLastFrame(), static_batch(T_=14), 4, 4, "longterm:10")
    assert len(rep.per_step) == 10
    doc = json.loads(rep.aggregate_json())
    assert doc["steps"] == 10 and "smoothed_mse_nondecreasing" in doc and "final_step_mse" in doc


def test_missing_protocol_paired_with_clean():
    data = generate_blobs(4, 8, 16, 16, 1, seed=3, size=5)
    clean = evaluate(CopyLastFrame(), data, 4, 4, "missing:0.0")
    missing = evaluate(CopyLastFrame(), data, 4, 4, "missing:0.5", seed=1)
    assert clean.protocol == "missing:0" and missing.protocol == "missing:0.5"
    assert np.isfinite(missing.aggregate.mse - clean.aggregate.mse)


def test_eval_csv_layout():
    rep = evaluate(CopyLastFrame(), static_batch(), 4, 2)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "step,mse,mae,ssim" and len(lines) == 3


def test_smoothed_trend():
    assert np.allclose(smoothed_trend([1, 2, 3, 4, 5, 6], window=5), [3, 4])


# -- training ----------------------------------------------------------------


def tiny_run(**train_kw):
    doc = {
        "model": {
            "frame_size": 16,
            "latent_channels": 4,
            "encoder_channels": [4, 4],
            "phycell": {"k": 3},
            "residual": {"layers": 1, "channels": 4},
        },
        "train": {"epochs": 1, "batch": 4, "seed": 0, **train_kw},
        "data": {
            "T": 3,
            "delta": 2,
            "generator": {"kind": "blobs", "n_blobs": 1, "blob_size": 5, "n_train": 8, "n_val": 4, "n_test": 4},
        },
    }
    return doc


def test_one_epoch_smoke_writes_loadable_checkpoint(tmp_path):
    cfg = RunConfig.from_dict(tiny_run())
    res = train(cfg, out_dir=str(tmp_path))
    model, cfg2 = load_checkpoint(res.checkpoint)
    assert cfg2 == cfg
    for k, p in res.model.parameters().items():
        assert np.array_equal(model.parameters()[k].data, p.data)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_FIELDS) and len(lines) == 2


def test_logged_losses_decompose():
    res = train(RunConfig.from_dict(tiny_run(epochs=2, **{"lambda": 0.5})))
    for row in res.history:
        assert abs(row["total"] - (row["image_loss"] + 0.5 * row["moment_loss"])) <= 1e-6 * row["total"]


def test_moment_loss_decreases_across_epochs():
    res = train(RunConfig.from_dict(tiny_run(epochs=4, patience=10)))
    mom = [r["moment_loss"] for r in res.history]
    assert all(b < a for a, b in zip(mom, mom[1:]))


def test_phycell_only_has_no_residual_parameters():
    doc = tiny_run()
    doc["model"]["branch_mode"] = "phycell_only"
    res = train(RunConfig.from_dict(doc))
    assert not any(n.startswith("res.") for n in res.model.parameters())
    assert res.model.parameter_groups()["w_r"] == {}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_report():
    with pytest.raises(TrainingDiverged) as info:
        train(RunConfig.from_dict(tiny_run(epochs=3, lr=1e3, divergence_factor=2.0)))
    assert "total" in info.value.report


def test_training_is_bit_reproducible():
    cfg = RunConfig.from_dict(tiny_run(epochs=2))
    a, b = train(cfg), train(cfg)
    assert a.history == b.history
    for k, p in a.model.parameters().items():
        assert p.data.tobytes() == b.model.parameters()[k].data.tobytes()


def test_training_with_masked_inputs_runs():
    doc = tiny_run()
    doc["data"]["mask_ratio"] = 0.3
    doc["data"]["T"] = 4
    res = train(RunConfig.from_dict(doc))
    assert np.isfinite(res.best_val_mse)
