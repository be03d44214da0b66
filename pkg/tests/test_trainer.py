import math

import numpy as np
import pytest
from helpers import stage_cfg, toy_data, toy_net
from hypothesis import given, settings
from hypothesis import strategies as st

from metaquant import tensor as T
from metaquant.data import Dataset, normalize, synth_dataset
from metaquant.errors import InputError, ShapeError, StageOrderError, TrainingDiverged
from metaquant.optim import Adam, lr_at
from metaquant.quantizer import FP_BITS
from metaquant.runner import clone
from metaquant.tensor import Tensor
from metaquant.trainer import (
    BitSampler,
    DistillConfig,
    SigmaSchedule,
    StageConfig,
    distill_loss,
    evaluate_assignment,
    evaluate_fixed,
    evaluate_random,
    make_streams,
    tbn_variance_report,
    train_stage,
    train_stage1,
    train_stage2,
    train_stage3,
)

F32 = np.float32


def params_equal(a, b):
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


@pytest.fixture(scope="module")
def data():
    return toy_data()


@pytest.fixture(scope="module")
def stage1_net(data):
    net = toy_net()
    rows = train_stage1(net, data, stage_cfg(1, epochs=12))
    return net, rows


@pytest.fixture(scope="module")
def stage2_net(stage1_net, data):
    net = clone(stage1_net[0])
    train_stage2(net, data, stage_cfg(2, epochs=3))
    return net


class TestSigmaSchedule:
    def test_ramp_and_cap(self):
        s = SigmaSchedule(k=0.75, ramp_end_epoch=8)
        vals = [s.p_independent(e) for e in range(20)]
        assert vals[0] == 0.0
        assert vals[4] == pytest.approx(0.375)
        assert all(v == 0.75 for v in vals[8:])
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert s.sigma(10) == pytest.approx(0.25)

    def test_default_k_in_range(self):
        assert 2 / 3 < SigmaSchedule().k < 4 / 5

    def test_invalid_k(self):
        with pytest.raises(InputError):
            SigmaSchedule(k=1.0)
        with pytest.raises(InputError):
            SigmaSchedule(k=-0.1)

    def test_sampler_rate_after_ramp(self):
        _, bits_rng, coin_rng = make_streams(11)
        s = BitSampler((2, 3, 4), 6, bits_rng, coin_rng)
        n, k = 20000, 0.75
        hits = sum(s.draw(k)[1] for _ in range(n))
        assert abs(hits - n * k) <= 3 * math.sqrt(n * k * (1 - k))


class TestStageConfig:
    def test_validation(self):
        with pytest.raises(InputError):
            StageConfig(stage=4)
        with pytest.raises(InputError):
            StageConfig(stage=1, bit_set=())
        with pytest.raises(InputError):
            StageConfig(stage=1, epochs=0)

    def test_stage3_gets_default_schedule(self):
        assert StageConfig(stage=3).sigma == SigmaSchedule()


class TestStageOrder:
    def test_stage2_needs_stage1(self, data):
        with pytest.raises(StageOrderError, match="Stage I"):
            train_stage(toy_net(), data, stage_cfg(2, epochs=1))

    def test_stage3_needs_stage2(self, stage1_net, data):
        with pytest.raises(StageOrderError, match="Stage II"):
            train_stage(clone(stage1_net[0]), data, stage_cfg(3, epochs=1))

    def test_wrapper_mismatch(self, data):
        with pytest.raises(InputError):
            train_stage2(toy_net(), data, stage_cfg(1, epochs=1))

    def test_bit_set_outside_network(self, data):
        with pytest.raises(InputError):
            train_stage(toy_net(), data, stage_cfg(1, epochs=1, bit_set=(1, 2)))


class TestStage1:
    def test_loss_halves(self, stage1_net):
        rows = stage1_net[1]
        assert rows[-1]["loss"] <= 0.5 * rows[0]["loss"]
        assert [r["stage"] for r in rows] == [1] * 12

    def test_weights_stay_real_valued(self, stage1_net):
        net = stage1_net[0]
        for layer in net.quantized_layers():
            assert not any(layer.w_scales.ready.values())
            assert np.unique(layer.weight.data).size > 2 ** 4

    def test_offdiagonal_untouched_and_rand_unreported(self, stage1_net):
        net, rows = stage1_net
        assert rows[-1]["acc_rand"] is None
        for t in net.tbn_layers():
            for (i, j), c in t.cells.items():
                if i != j:
                    assert not c.ready and np.all(c.mean == 0) and np.all(c.var == 1)

    def test_fp_bit_set_is_plain_training(self, data):
        """A {32} meta-net follows exactly the loop of an unquantized baseline."""
        net = toy_net(bits=(FP_BITS,))
        ref = clone(net)
        c = stage_cfg(1, epochs=2, bit_set=(FP_BITS,))
        rows = train_stage(net, data, c, evaluate=False)

        data_rng, _, _ = make_streams(c.seed)
        opt = Adam(ref.named_parameters(), weight_decay=c.weight_decay)
        losses = []
        for e in range(c.epochs):
            lr = lr_at(c.schedule, e + 0.5)
            tot = 0.0
            for idx in np.array_split(data_rng.permutation(len(data.y_train)), range(32, len(data.y_train), 32)):
                logits = ref.forward(Tensor(data.x_train[idx]), ref.constant(FP_BITS), training=True)
                loss = T.softmax_cross_entropy(logits, data.y_train[idx])
                opt.zero_grad()
                T.backward(loss)
                T.get_tape().clear()
                opt.step(lr)
                tot += float(loss.data) * len(idx)
            losses.append(tot / len(data.y_train))
        assert [r["loss"] for r in rows] == losses
        assert params_equal(net, ref)


class TestStage2:
    def test_other_weight_scales_untouched(self, stage1_net, data):
        net = clone(stage1_net[0])
        train_stage(net, data, stage_cfg(2, epochs=1, bit_set=(3,)), evaluate=False)
        for layer in net.quantized_layers():
            assert layer.w_scales.ready[3]
            for b in (2, 4):
                assert not layer.w_scales.ready[b]
                assert layer.w_scales.alpha[b].data == 1.0

    def test_only_diagonal_cells_trained(self, stage2_net):
        for t in stage2_net.tbn_layers():
            for (i, j), c in t.cells.items():
                assert c.ready == (i == j)

    def test_orders_four_over_two(self, stage2_net, data):
        assert evaluate_fixed(stage2_net, data, 4) >= evaluate_fixed(stage2_net, data, 2)


class TestStage3:
    def test_k_zero_reproduces_stage2(self, stage2_net, data):
        a, b = clone(stage2_net), clone(stage2_net)
        ra = train_stage(a, data, stage_cfg(2, epochs=2, seed=3), evaluate=False)
        rb = train_stage3(b, data, stage_cfg(3, epochs=2, seed=3), sigma=SigmaSchedule(k=0.0), evaluate=False)
        assert [r["loss"] for r in ra] == [r["loss"] for r in rb]
        diag = {n: p for n, p in b.named_parameters() if not _offdiag(n)}
        pa = dict(a.named_parameters())
        assert all(np.array_equal(pa[n].data, p.data) for n, p in diag.items())

    def test_independent_iterations_follow_schedule(self, stage2_net, data):
        net = clone(stage2_net)
        rows = train_stage(net, data, stage_cfg(3, epochs=3, sigma=SigmaSchedule(0.75, 2)), evaluate=False)
        assert [r["sigma"] for r in rows] == [1.0, pytest.approx(0.625), 0.25]
        assert rows[0]["independent_iters"] == 0
        assert rows[2]["independent_iters"] > 0

    def test_offdiagonal_cells_ready_after_stage3(self, stage2_net, data):
        net = clone(stage2_net)
        rows = train_stage3(net, data, stage_cfg(3, epochs=1))
        assert all(c.ready for t in net.tbn_layers() for c in t.cells.values())
        assert rows[-1]["acc_rand"] is not None

    def test_divergence_reports_iteration(self, stage2_net, data):
        net = clone(stage2_net)
        net.fc.weight.data[...] = np.nan
        with pytest.raises(TrainingDiverged) as ei:
            train_stage(net, data, stage_cfg(3, epochs=1))
        assert ei.value.iteration == 0 and ei.value.stage == 3


def _offdiag(name):
    if ".gamma." not in name and ".beta." not in name:
        return False
    i, j = name.rsplit(".", 1)[1].split("_")
    return i != j


class TestDistillLoss:
    def test_zero_weight_is_ce(self):
        rng = np.random.default_rng(0)
        s = Tensor(rng.standard_normal((6, 4)).astype(F32))
        t = rng.standard_normal((6, 4)).astype(F32)
        y = rng.integers(0, 4, 6)
        ce = T.softmax_cross_entropy(s, y)
        assert float(distill_loss(s, t, y, DistillConfig(2.0, 0.0)).data) == float(ce.data)

    def test_self_distillation_kl_is_zero(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((5, 3)).astype(F32)
        loss = distill_loss(Tensor(z), z, rng.integers(0, 3, 5), DistillConfig(2.0, 1.0))
        assert abs(float(loss.data)) < 1e-6

    def test_two_class_closed_form(self):
        sig = lambda u: 1 / (1 + math.exp(-u))  # noqa: E731
        s, t, lam, temp = (1.0, 0.0), (0.0, 2.0), 0.5, 2.0
        ps = sig((s[0] - s[1]) / temp)
        pt = sig((t[0] - t[1]) / temp)
        kl = pt * math.log(pt / ps) + (1 - pt) * math.log((1 - pt) / (1 - ps))
        ce = -math.log(sig(s[0] - s[1]))
        want = (1 - lam) * ce + lam * temp ** 2 * kl
        got = distill_loss(Tensor(np.array([s], F32)), np.array([t], F32), np.array([0]), DistillConfig(temp, lam))
        assert float(got.data) == pytest.approx(want, rel=1e-6)
        assert want == pytest.approx(0.67147, abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            distill_loss(Tensor(np.zeros((2, 3), F32)), np.zeros((2, 4), F32), np.zeros(2, int), DistillConfig())

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0.5, 5.0))
    def test_nonnegative(self, seed, lam, temp):
        rng = np.random.default_rng(seed)
        s = Tensor((rng.standard_normal((4, 5)) * 3).astype(F32))
        t = (rng.standard_normal((4, 5)) * 3).astype(F32)
        assert float(distill_loss(s, t, rng.integers(0, 5, 4), DistillConfig(temp, lam)).data) >= -1e-6


class TestEvaluation:
    def test_singleton_random_equals_fixed(self, stage2_net, data):
        net = clone(stage2_net)
        net.init_offdiagonal_cells()
        assert evaluate_random(net, data, {4}, seed=9, batch_size=7) == evaluate_fixed(net, data, 4)

    def test_deterministic(self, stage2_net, data):
        net = clone(stage2_net)
        net.init_offdiagonal_cells()
        assert evaluate_random(net, data, net.bits, seed=2, batch_size=5) == \
            evaluate_random(net, data, net.bits, seed=2, batch_size=5)
        assert evaluate_fixed(net, data, 3) == evaluate_fixed(net, data, 3)

    def test_chance_level_for_random_weights(self):
        s = synth_dataset(10, 30, 5, 1.0, 0)
        x, _ = normalize(s.x, s.x)
        d = Dataset(x, s.y, x, s.y, 10)
        net = toy_net(classes=10)
        net.forward(Tensor(x), net.constant(4), training=True)  # populate diagonal stats
        assert evaluate_fixed(net, d, 4) <= 30.0

    def test_memorizes_noise_free_set(self):
        d = toy_data(noise=0.0, per_class=8)
        d = Dataset(d.x_train, d.y_train, d.x_train, d.y_train, d.classes)
        net = toy_net(bits=(FP_BITS,))
        train_stage(net, d, stage_cfg(1, epochs=15, bit_set=(FP_BITS,)), evaluate=False)
        assert evaluate_fixed(net, d, FP_BITS) == 100.0

    def test_assignment_eval(self, stage2_net, data):
        assert evaluate_assignment(stage2_net, data, stage2_net.constant(4)) == evaluate_fixed(stage2_net, data, 4)

    def test_variance_report_shape(self, stage2_net, data):
        rep = tbn_variance_report(stage2_net, data.x_test[:16])
        assert set(rep) == {2, 3, 4}
        assert all(v[0] > 0 and v[1] > 0 for v in rep.values())
        assert all(t.probe is None for t in stage2_net.tbn_layers())
