import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c2fmae.masking import (
    MaskConfig, build_mask_plan, patch_object_flags, patch_semantic_labels, schedule_alphas, semantic_quotas,
)
from c2fmae.model import C2FMAE, ModelConfig
from c2fmae.numerics import Tensor
from c2fmae.synthdata import SceneConfig, generate_sample
from c2fmae.tokenizer import TASKS, TokenLayout
from c2fmae.trainer import (
    CheckpointError, NumericError, OptimState, TrainConfig, decays, load_checkpoint, lr_at, make_batch,
    optimizer_step, save_checkpoint, train_loop, train_step,
)

SCENE = SceneConfig(image_size=16, shape_count_range=(1, 3), min_visible_pixels=4)
LAYOUT = TokenLayout(16, 4)
TINY = ModelConfig(d_enc=8, enc_depth=1, enc_heads=2, d_dec=8, dec_heads=2, patch_size=4, k_max=4)


def tiny_model(seed=0, dtype=np.float64):
    return C2FMAE(TINY, LAYOUT, SCENE.class_count, seed=seed, dtype=dtype)


def tiny_samples(count=4):
    return [generate_sample(SCENE, i) for i in range(count)]


def build(config, dtype):
    return tiny_model(dtype=dtype)


def tiny_train_cfg(**kw):
    return TrainConfig(**{"epochs": 3, "warmup_epochs": 1, "batch_size": 2, "base_lr": 2.0, "dtype": "float64",
                          **kw})


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(epochs=10, warmup_epochs=2, batch_size=256, base_lr=1e-3)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(2, cfg) == pytest.approx(1e-3, abs=1e-12)
        assert abs(lr_at(10, cfg)) < 1e-12

    def test_warmup_linear_and_decay_monotone(self):
        cfg = TrainConfig(epochs=20, warmup_epochs=4, batch_size=128)
        lrs = [lr_at(s, cfg, 3) for s in range(61)]
        np.testing.assert_allclose(lrs[:13], np.arange(13) / 12 * cfg.peak_lr, rtol=0, atol=1e-15)
        assert all(b <= a for a, b in zip(lrs[12:], lrs[13:]))

    def test_peak_scaling(self):
        assert TrainConfig(base_lr=1e-4, batch_size=512).peak_lr == pytest.approx(2e-4)


def adamw_oracle(theta, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        theta = theta - lr * wd * theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


class TestOptimizer:
    def test_zero_grad_zero_decay_is_noop(self):
        p = {"a.weight": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        p["a.weight"].grad = np.zeros(2)
        optimizer_step(p, OptimState.zeros_like(p), 0.1, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(p["a.weight"].data, [1.0, -2.0])

    def test_step_opposes_gradient(self):
        p = {"a.weight": Tensor(np.zeros(4), requires_grad=True)}
        p["a.weight"].grad = np.array([3.0, -0.5, 1e-3, -7.0])
        optimizer_step(p, OptimState.zeros_like(p), 0.01, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(np.sign(p["a.weight"].data), -np.sign(p["a.weight"].grad))
        np.testing.assert_allclose(np.abs(p["a.weight"].data), 0.01, rtol=1e-4)

    @pytest.mark.parametrize("name,wd", [("x.weight", 0.05), ("x.bias", 0.0)])
    def test_ten_step_trajectory(self, name, wd):
        grads = [0.3, -1.2, 0.05, 2.0, 0.0, -0.7, 0.9, 1.1, -0.2, 0.4]
        cfg = TrainConfig()
        p = {name: Tensor(np.array([0.8]), requires_grad=True)}
        state = OptimState.zeros_like(p)
        got = []
        for g in grads:
            p[name].grad = np.array([g])
            optimizer_step(p, state, 1e-2, cfg)
            got.append(float(p[name].data[0]))
        want = adamw_oracle(0.8, grads, 1e-2, *cfg.betas, cfg.eps, wd)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)

    def test_decay_exclusions(self):
        assert decays("enc.0.attn.qkv.weight")
        assert not decays("enc.0.norm1.bias")
        assert not decays("enc.0.norm1.gain")
        assert not decays("mask_token")

    def test_nonfinite_grad_names_parameter(self):
        p = {"good.weight": Tensor(np.ones(2), requires_grad=True), "bad.weight": Tensor(np.ones(2), requires_grad=True)}
        p["good.weight"].grad = np.ones(2)
        p["bad.weight"].grad = np.array([1.0, np.nan])
        with pytest.raises(NumericError, match="bad.weight"):
            optimizer_step(p, OptimState.zeros_like(p), 0.1, TrainConfig())
        np.testing.assert_array_equal(p["good.weight"].data, 1.0)

    def test_clipping_bounds_update_input(self):
        p = {"a.weight": Tensor(np.zeros(2), requires_grad=True)}
        p["a.weight"].grad = np.array([30.0, 40.0])
        state = OptimState.zeros_like(p)
        optimizer_step(p, state, 0.0, TrainConfig(grad_clip=5.0))
        np.testing.assert_allclose(state.m["a.weight"], 0.1 * np.array([3.0, 4.0]))


class TestSteps:
    def test_step_one_is_deterministic(self):
        samples = tiny_samples()
        cfg = tiny_train_cfg()
        runs = []
        for _ in range(2):
            model = tiny_model()
            batch = make_batch(model, samples, [0, 1], MaskConfig(), 0.0, 0, cfg)
            runs.append(train_step(model, batch, OptimState.zeros_like(model.params), 1e-3, cfg))
        assert runs[0] == runs[1]
        other = tiny_model(seed=1)
        batch = make_batch(other, samples, [0, 1], MaskConfig(), 0.0, 0, cfg)
        assert train_step(other, batch, OptimState.zeros_like(other.params), 1e-3, cfg) != runs[0]

    def test_zero_lr_leaves_loss_unchanged(self):
        samples = tiny_samples()
        cfg = tiny_train_cfg()
        model = tiny_model()
        batch = make_batch(model, samples, [2, 3], MaskConfig(), 0.5, 0, cfg)
        state = OptimState.zeros_like(model.params)
        first = train_step(model, batch, state, 0.0, cfg)
        assert train_step(model, batch, state, 0.0, cfg) == first

    def test_nonfinite_loss_raises(self):
        samples = tiny_samples()
        cfg = tiny_train_cfg()
        model = tiny_model()
        model.params["dec.embed.weight"].data[0, 0] = np.nan
        batch = make_batch(model, samples, [0, 1], MaskConfig(), 0.5, 0, cfg)
        with pytest.raises(NumericError):
            train_step(model, batch, OptimState.zeros_like(model.params), 1e-3, cfg)

    def test_redraw_per_step_changes_masks(self):
        model, samples, cfg = tiny_model(), tiny_samples(), tiny_train_cfg()
        fixed = [make_batch(model, samples, [0], MaskConfig(), 0.5, s, cfg).masks["R"] for s in (0, 1)]
        fresh = [make_batch(model, samples, [0], MaskConfig(redraw_per_step=True), 0.5, s, cfg).masks["R"]
                 for s in range(4)]
        np.testing.assert_array_equal(fixed[0], fixed[1])
        assert len({m.tobytes() for m in fresh}) > 1


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        samples = tiny_samples()
        model = tiny_model()
        state, _ = train_loop(model, samples, MaskConfig(), tiny_train_cfg(), stop_at=2)
        save_checkpoint(tmp_path / "a", model, state, {"note": 1})
        model2, state2, manifest = load_checkpoint(tmp_path / "a", build)
        save_checkpoint(tmp_path / "b", model2, state2, manifest["config"])
        for name in ("manifest.json", "params.bin", "optim.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert state2.step == 2
        for k, p in model.params.items():
            assert p.data.tobytes() == model2.params[k].data.tobytes()

    def test_float32_round_trip(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        save_checkpoint(tmp_path, model, OptimState.zeros_like(model.params), {})
        back, _, manifest = load_checkpoint(tmp_path, build)
        assert manifest["dtype"] == "float32" and back.dtype == np.float32

    def test_corrupt_blob_reports_diff(self, tmp_path):
        model = tiny_model()
        save_checkpoint(tmp_path, model, OptimState.zeros_like(model.params), {})
        raw = bytearray((tmp_path / "params.bin").read_bytes())
        raw[5] ^= 0xFF
        (tmp_path / "params.bin").write_bytes(bytes(raw[:-8]))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(tmp_path, build)
        assert "params.bin: nbytes" in str(err.value) and "sha256" in str(err.value)

    def test_missing_blob(self, tmp_path):
        model = tiny_model()
        save_checkpoint(tmp_path, model, OptimState.zeros_like(model.params), {})
        (tmp_path / "optim.bin").unlink()
        with pytest.raises(CheckpointError, match="optim.bin"):
            load_checkpoint(tmp_path, build)

    def test_resume_matches_uninterrupted(self, tmp_path):
        samples = tiny_samples()
        cfg = tiny_train_cfg()
        _, full = train_loop(tiny_model(), samples, MaskConfig(), cfg)
        model = tiny_model()
        train_loop(model, samples, MaskConfig(), cfg, out_dir=tmp_path, stop_at=3)
        model, state, _ = load_checkpoint(tmp_path, build)
        _, rest = train_loop(model, samples, MaskConfig(), cfg, out_dir=tmp_path, state=state)
        assert [r["step"] for r in rest] == [3, 4, 5]
        for a, b in zip(full[3:], rest):
            for key in ("L_S", "L_I", "L_R", "total"):
                assert abs(a[key] - b[key]) <= 1e-10
        logged = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in logged] == list(range(6))

    def test_periodic_checkpoint_drops_later_log_lines(self, tmp_path):
        samples = tiny_samples()
        cfg = tiny_train_cfg(checkpoint_every=2)
        train_loop(tiny_model(), samples, MaskConfig(), cfg, out_dir=tmp_path, stop_at=5)
        model, state, _ = load_checkpoint(tmp_path, build)
        assert state.step == 5
        train_loop(tiny_model(), samples, MaskConfig(), cfg, out_dir=tmp_path, stop_at=3)
        logged = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in logged] == [0, 1, 2]


class TestLog:
    def test_metrics_lines(self, tmp_path):
        samples = tiny_samples()
        cfg = tiny_train_cfg()
        _, history = train_loop(tiny_model(), samples, MaskConfig(), cfg, out_dir=tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 6
        total = len(lines)
        for step, line in enumerate(lines):
            rec = json.loads(line)
            assert {"step", "lr", "alpha_I", "alpha_S", "L_S", "L_I", "L_R", "total"} <= set(rec)
            assert rec["step"] == step
            assert (rec["alpha_I"], rec["alpha_S"]) == schedule_alphas(step / total)
            assert rec["lr"] == lr_at(step, cfg, 2)
        assert history[-1]["total"] == json.loads(lines[-1])["total"]

    def test_fixed_modes_log_fixed_alphas(self):
        _, history = train_loop(tiny_model(), tiny_samples(), MaskConfig(), tiny_train_cfg(masking_mode="random"))
        assert {(r["alpha_I"], r["alpha_S"]) for r in history} == {(0.0, 0.0)}


class TestCurriculum:
    def test_object_share_falls_after_instance_peak(self):
        samples = [generate_sample(SceneConfig(), i) for i in range(16)]
        layout = TokenLayout(64, 8)
        cfg = MaskConfig()
        flags = [patch_object_flags(s, 8, cfg.object_patch_threshold) for s in samples]
        epochs = 40
        shares = []
        for e in range(epochs):
            u = e / epochs
            if u < 0.6:
                continue
            plans = [build_mask_plan(s, cfg, layout, u, 0, i) for i, s in enumerate(samples)]
            hit = sum(int(p.masks[t][f].sum()) for p, f in zip(plans, flags) for t in TASKS)
            shares.append(hit / sum(sum(p.masked_counts.values()) for p in plans))
        assert all(b <= a for a, b in zip(shares, shares[1:]))
        assert shares[-1] < shares[0]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 500), st.integers(0, 2**31 - 1))
    def test_start_of_training_follows_semantic_quotas(self, index, seed):
        sample = generate_sample(SceneConfig(), index)
        layout = TokenLayout(64, 8)
        plan = build_mask_plan(sample, MaskConfig(), layout, 0.0, seed, index)
        labels = patch_semantic_labels(sample, 8)
        for t in TASKS:
            quotas = semantic_quotas(labels, plan.masked_counts[t])
            got = {c: int(plan.masks[t][labels == c].sum()) for c in quotas}
            assert got == quotas
