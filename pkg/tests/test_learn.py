import itertools

import numpy as np
import pytest

from gsfusion.core import EMPTY_CLASS, GaussianSet, GridGeometry
from gsfusion.fusion import FusionConfig, FusionParams
from gsfusion.learn import (
    AdamW,
    Calibration,
    DivergenceError,
    TrainConfig,
    TrainExample,
    backward_fusion,
    cross_entropy,
    load_calibration,
    lovasz_softmax,
    lr_at,
    save_calibration,
    scene_loss_and_grads,
    softmax_probs,
    softmax_vjp,
    total_loss,
    train,
    train_calibration,
)
from gsfusion.splat import SplatConfig, splat

from helpers import jaccard_by_counting, random_gaussian_set

RNG = np.random.default_rng(60601)
C = 13


class TestSoftmax:
    def test_uniform(self):
        ch = np.full((2, 2, 1, C), 3.7)
        p = softmax_probs(ch)
        assert np.allclose(p, 1.0 / C)

    def test_rows_sum_to_one(self):
        ch = RNG.normal(size=(4, 3, 2, C)) * 5
        p = softmax_probs(ch)
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)

    def test_saturation(self):
        ch = np.zeros((1, 1, 1, C))
        ch[..., 4] = 60.0
        p = softmax_probs(ch)
        assert p[0, 0, 0, 4] >= 1.0 - 1e-12

    def test_matches_exp_normalize_oracle(self):
        ch = RNG.normal(size=(5, 4, 3, C))
        p = softmax_probs(ch)
        want = np.exp(ch) / np.sum(np.exp(ch), axis=-1, keepdims=True)
        assert np.max(np.abs(p - want)) < 1e-12


class TestCrossEntropy:
    def test_perfect_prediction(self):
        labels = RNG.integers(0, C, size=(3, 3, 2))
        ch = np.zeros((3, 3, 2, C))
        np.put_along_axis(ch, labels[..., None], 50.0, axis=-1)
        loss, _ = cross_entropy(softmax_probs(ch), labels)
        assert loss <= 1e-6

    def test_uniform_prediction(self):
        labels = RNG.integers(0, C, size=(4, 4, 2))
        probs = np.full((4, 4, 2, C), 1.0 / C)
        loss, _ = cross_entropy(probs, labels)
        assert abs(loss - np.log(13.0)) < 1e-12

    def test_label_out_of_range(self):
        probs = np.full((2, 2, 1, C), 1.0 / C)
        labels = np.full((2, 2, 1), C)
        with pytest.raises(ValueError, match="label"):
            cross_entropy(probs, labels)

    def test_gradient_matches_fd(self):
        labels = RNG.integers(0, C, size=(2, 2, 2))
        ch = RNG.normal(size=(2, 2, 2, C))
        _, grad = cross_entropy(softmax_probs(ch), labels)
        eps = 1e-6
        flat = ch.ravel()
        for k in RNG.choice(flat.size, size=30, replace=False):
            old = flat[k]
            flat[k] = old + eps
            fp = cross_entropy(softmax_probs(ch), labels)[0]
            flat[k] = old - eps
            fm = cross_entropy(softmax_probs(ch), labels)[0]
            flat[k] = old
            num = (fp - fm) / (2 * eps)
            got = grad.ravel()[k]
            assert abs(got - num) <= 1e-5 * max(abs(got), abs(num), 1e-3)


class TestLovasz:
    def test_perfect_hard_predictions(self):
        labels = RNG.integers(0, 3, size=16)
        probs = np.zeros((16, C))
        probs[np.arange(16), labels] = 1.0
        loss, _, _ = lovasz_softmax(probs, labels)
        assert loss == 0.0

    def test_binary_toy_equals_one_minus_iou(self):
        # 4-voxel toy, 2 classes: at every probability vertex the extension
        # equals 1 - IoU from explicit set counting, for all 2^4 labelings
        for labels_bits in itertools.product([0, 1], repeat=4):
            labels = np.array(labels_bits)
            for pred_bits in itertools.product([0, 1], repeat=4):
                pred = np.array(pred_bits)
                probs = np.zeros((4, 2))
                probs[np.arange(4), pred] = 1.0
                loss, _, per_class = lovasz_softmax(probs, labels)
                expected_terms = []
                for c in np.unique(labels):
                    j = jaccard_by_counting(pred == c, labels == c)
                    expected_terms.append(j)
                    assert per_class[c] == pytest.approx(j, abs=1e-12)
                assert loss == pytest.approx(np.mean(expected_terms), abs=1e-12)

    def test_value_in_unit_interval(self):
        for _ in range(20):
            labels = RNG.integers(0, C, size=40)
            probs = softmax_probs(RNG.normal(size=(40, C)))
            loss, _, per_class = lovasz_softmax(probs, labels)
            assert 0.0 <= loss <= 1.0
            assert np.all(per_class >= 0.0) and np.all(per_class <= 1.0)

    def test_absent_class_not_counted(self):
        labels = np.zeros(10, dtype=int)          # only class 0 present
        probs = softmax_probs(RNG.normal(size=(10, C)))
        loss, _, per_class = lovasz_softmax(probs, labels)
        assert loss == pytest.approx(per_class[0])
        assert np.all(per_class[1:] == 0.0)

    def test_gradient_matches_fd_away_from_ties(self):
        labels = RNG.integers(0, 3, size=6)
        probs = RNG.uniform(0.05, 0.95, size=(6, C))
        _, grad, _ = lovasz_softmax(probs, labels)
        eps = 1e-7
        flat = probs.ravel()
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            fp = lovasz_softmax(probs, labels)[0]
            flat[k] = old - eps
            fm = lovasz_softmax(probs, labels)[0]
            flat[k] = old
            num = (fp - fm) / (2 * eps)
            got = grad.ravel()[k]
            assert abs(got - num) <= 1e-4 * max(abs(got), abs(num), 1e-2)


class TestTotalLoss:
    def test_composition_exact(self):
        labels = RNG.integers(0, C, size=(3, 3, 1))
        ch = RNG.normal(size=(3, 3, 1, C))
        report, _ = total_loss(ch, labels)
        assert report.total == report.ce + report.lovasz

    def test_combined_gradient_matches_fd(self):
        labels = RNG.integers(0, 4, size=(2, 2, 1))
        ch = RNG.normal(size=(2, 2, 1, C))
        _, grad = total_loss(ch, labels)
        eps = 1e-6
        flat = ch.ravel()
        for k in RNG.choice(flat.size, size=26, replace=False):
            old = flat[k]
            flat[k] = old + eps
            fp = total_loss(ch, labels)[0].total
            flat[k] = old - eps
            fm = total_loss(ch, labels)[0].total
            flat[k] = old
            num = (fp - fm) / (2 * eps)
            got = grad.ravel()[k]
            assert abs(got - num) <= 1e-4 * max(abs(got), abs(num), 1e-3)

    def test_softmax_vjp_consistency(self):
        probs = softmax_probs(RNG.normal(size=(5, C)))
        g = RNG.normal(size=(5, C))
        out = softmax_vjp(probs, g)
        for i in range(5):
            p = probs[i]
            jac = np.diag(p) - np.outer(p, p)
            assert np.allclose(out[i], jac @ g[i], atol=1e-12)


def toy_example(rng, noise=0.15, n=6, grid=(8, 8, 2)):
    geom = GridGeometry(np.array([-1.6, -1.6, -0.4]), 0.4, grid, num_classes=C)
    true = random_gaussian_set(rng, n, center_span=1.2, scale_lo=0.25, scale_hi=0.5)
    true.semantics[:] = 0.0
    classes = rng.integers(0, C - 1, size=n)
    true.semantics[np.arange(n), classes] = 1.0
    true.opacities[:] = 1.0
    fixed = GaussianSet(
        np.zeros((1, 3)), np.full((1, 3), 8.0), np.array([[1.0, 0, 0, 0]]),
        np.ones(1), np.eye(C)[EMPTY_CLASS][None, :])
    clean = splat(GaussianSet.concat([true, fixed]), geom, SplatConfig())
    from gsfusion.splat import labels_from_channels

    gt = labels_from_channels(clean).labels

    def noisy_copy():
        g = true.copy()
        g.means += rng.normal(0, noise, size=g.means.shape)
        flip = rng.random(n) < 0.3
        for i in np.nonzero(flip)[0]:
            g.semantics[i] = 0.0
            g.semantics[i, rng.integers(0, C - 1)] = 1.0
        return g

    ego = noisy_copy()
    received = [noisy_copy()]
    stacked = GaussianSet.concat([ego] + received)
    return TrainExample(stacked, received, fixed, gt, geom)


class TestBackwardFusionWrapper:
    def test_state_error_without_tape(self):
        with pytest.raises(RuntimeError, match="recorded"):
            backward_fusion(None, {})

    def test_pipeline_gradient_matches_fd(self):
        rng = np.random.default_rng(4242)
        example = toy_example(rng)
        fusion_cfg = FusionConfig(radius_rho=0.6, pooling="attention")
        splat_cfg = SplatConfig(truncation_sigma=6.0, min_contribution=0.0)
        params = FusionParams.init(seed=77)
        _, grads = scene_loss_and_grads(example, fusion_cfg, splat_cfg, params)

        def objective():
            report, _ = scene_loss_and_grads(example, fusion_cfg, splat_cfg, params,
                                             want_grads=False)
            return report.total

        eps = 1e-6
        check = np.random.default_rng(5)
        for name, g in grads.items():
            arr = getattr(params, name)
            flat = arr.ravel()
            for k in check.choice(flat.size, size=min(12, flat.size), replace=False):
                old = flat[k]
                flat[k] = old + eps
                fp = objective()
                flat[k] = old - eps
                fm = objective()
                flat[k] = old
                num = (fp - fm) / (2 * eps)
                got = g.ravel()[k]
                # the additive term covers central-difference roundoff noise
                assert abs(got - num) <= 1e-4 * max(abs(got), abs(num)) + 1e-9, (name, k)


class TestOptimizer:
    def test_zero_lr_keeps_params(self):
        p = {"a": RNG.normal(size=(3, 3))}
        before = p["a"].copy()
        opt = AdamW(p)
        opt.step({"a": RNG.normal(size=(3, 3))}, lr=0.0)
        assert np.array_equal(p["a"], before)

    def test_quadratic_descent(self):
        p = {"x": np.array([5.0])}
        opt = AdamW(p, weight_decay=0.0)
        for _ in range(800):
            opt.step({"x": 2.0 * p["x"]}, lr=0.05)
        assert abs(p["x"][0]) < 1e-2

    def test_schedule_shape(self):
        cfg = TrainConfig(steps=100, warmup_steps=10, peak_lr=1e-3)
        assert lr_at(0, cfg) == pytest.approx(1e-4)
        assert lr_at(9, cfg) == pytest.approx(1e-3)
        assert lr_at(10, cfg) == pytest.approx(1e-3)
        assert lr_at(99, cfg) < lr_at(50, cfg) < lr_at(10, cfg)


class TestTrain:
    def _dataset(self, n=4):
        rng = np.random.default_rng(999)
        return [toy_example(rng) for _ in range(n)]

    def test_zero_steps_identity(self):
        data = self._dataset(1)
        p0 = FusionParams.init(seed=1)
        p1, curve = train(p0, data, TrainConfig(steps=0, seed=3))
        assert curve == []
        for name in FusionParams._ORDER:
            assert np.array_equal(getattr(p0, name), getattr(p1, name))

    def test_loss_decreases(self):
        data = self._dataset(4)
        cfg = TrainConfig(steps=60, warmup_steps=10, peak_lr=3e-3, batch=2, seed=0)
        fusion_cfg = FusionConfig(radius_rho=0.6)
        p0 = FusionParams.init(seed=1)
        _, curve = train(p0, data, cfg, fusion_cfg=fusion_cfg)
        first = np.mean([r[3] for r in curve[:5]])
        last = np.mean([r[3] for r in curve[-5:]])
        assert last < first

    def test_deterministic(self):
        data = self._dataset(2)
        cfg = TrainConfig(steps=8, warmup_steps=2, peak_lr=1e-3, batch=1, seed=11)
        fusion_cfg = FusionConfig(radius_rho=0.6)
        pa, ca = train(FusionParams.init(seed=1), data, cfg, fusion_cfg=fusion_cfg)
        pb, cb = train(FusionParams.init(seed=1), data, cfg, fusion_cfg=fusion_cfg)
        assert ca == cb
        for name in FusionParams._ORDER:
            assert np.array_equal(getattr(pa, name), getattr(pb, name))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        data = self._dataset(1)
        p0 = FusionParams.init(seed=1)
        p0.b3[:] = 1e6                      # force absurd proposals
        with pytest.raises(DivergenceError):
            train(p0, data, TrainConfig(steps=3, peak_lr=1e30, seed=0))


class TestCalibration:
    def test_identity_is_exact(self):
        cal = Calibration.identity(C)
        ch = RNG.uniform(0, 2, size=(3, 3, 2, C))
        assert np.array_equal(cal.apply(ch), ch)

    def test_gradient_matches_fd(self):
        cal = Calibration(RNG.normal(0, 0.2, C))
        ch = RNG.uniform(0, 2, size=(4, 4, 1, C))
        labels = RNG.integers(0, C, size=(4, 4, 1))
        gain = np.exp(cal.log_gain)
        _, grad_ch = total_loss(ch * gain, labels)
        grad = np.sum(grad_ch * ch, axis=(0, 1, 2)) * gain
        eps = 1e-6
        for k in range(C):
            old = cal.log_gain[k]
            cal.log_gain[k] = old + eps
            fp = total_loss(ch * np.exp(cal.log_gain), labels)[0].total
            cal.log_gain[k] = old - eps
            fm = total_loss(ch * np.exp(cal.log_gain), labels)[0].total
            cal.log_gain[k] = old
            num = (fp - fm) / (2 * eps)
            assert abs(grad[k] - num) <= 1e-5 * max(abs(grad[k]), abs(num), 1e-3)

    def test_training_reduces_loss(self):
        rng = np.random.default_rng(321)
        examples = []
        for _ in range(3):
            ch = rng.uniform(0, 1, size=(6, 6, 2, C))
            labels = rng.integers(0, C, size=(6, 6, 2))
            examples.append((ch, labels))
        cal0 = Calibration.identity(C)
        cfg = TrainConfig(steps=80, warmup_steps=10, peak_lr=5e-2, batch=3, seed=1)
        cal, curve = train_calibration(cal0, examples, cfg)
        assert curve[-1][3] < curve[0][3]

    def test_save_load_roundtrip(self, tmp_path):
        cal = Calibration(RNG.normal(size=C).astype(np.float32).astype(np.float64))
        p = tmp_path / "cal.fprm"
        save_calibration(cal, p)
        back = load_calibration(p)
        assert np.array_equal(back.log_gain, cal.log_gain)
