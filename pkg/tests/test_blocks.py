import numpy as np
import pytest

from eyenet import tensor as T
from eyenet.blocks import (
    BranchParams, ConnectionBlockParams, EyeNet, MergeParams, ModelConfig, SharedMlp,
    LfaParams, attentive_pool, channel_enhance, connection_block, decoder_upsample,
    feature_merge, lfa, prepare_input, shared_mlp, squeeze_excitation,
)
from eyenet.errors import InvalidArgument, InvariantViolation
from eyenet.geometry import SpatialIndex, sample_human_vision_batch
from eyenet.selfcheck import GradcheckConfig, toy_cloud
from eyenet.tensor import ParamRegistry, Tensor

from oracles import affine, attentive_pool_ref, channel_enhance_ref, connection_block_ref


def randomize(reg: ParamRegistry, rng, scale=0.5):
    """Nonzero biases so ReLU units sit away from their kinks."""
    for name, p in reg.items():
        if name.endswith(".b"):
            p.data = rng.uniform(-scale, scale, p.shape)


def param(x):
    return Tensor(x, requires_grad=True)


class TestSharedMlp:
    def test_identity(self):
        reg = ParamRegistry()
        p = SharedMlp(reg.add("W", np.eye(3)), reg.add("b", np.zeros(3)))
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(shared_mlp(Tensor(x), p, "none").data, x)

    def test_rows_share_weights(self):
        reg, rng = ParamRegistry(), np.random.default_rng(1)
        p = SharedMlp.create(reg, "m", 4, 6, rng)
        row = rng.normal(size=4)
        out = shared_mlp(Tensor(np.stack([row, row])), p).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_gradient(self):
        reg, rng = ParamRegistry(), np.random.default_rng(2)
        p = SharedMlp.create(reg, "m", 5, 4, rng)
        randomize(reg, rng)
        assert T.finite_diff_check(lambda x: shared_mlp(x, p), param(rng.normal(size=(7, 5)))) < 1e-6

    def test_unknown_activation(self):
        reg = ParamRegistry()
        p = SharedMlp.create(reg, "m", 2, 2, np.random.default_rng(0))
        with pytest.raises(InvalidArgument):
            shared_mlp(Tensor(np.ones((1, 2))), p, "tanh")


class TestLfa:
    def test_single_point(self):
        reg, rng = ParamRegistry(), np.random.default_rng(0)
        p = LfaParams.create(reg, "l", 3, 8, rng)
        out = lfa(np.zeros((1, 3)), Tensor(rng.normal(size=(1, 3))), np.zeros((1, 1), int), p)
        assert out.shape == (1, 8) and np.isfinite(out.data).all()

    def test_neighbor_permutation_invariance(self):
        reg, rng = ParamRegistry(), np.random.default_rng(1)
        p = LfaParams.create(reg, "l", 4, 8, rng)
        randomize(reg, rng)
        pts = rng.normal(size=(20, 3))
        F = Tensor(rng.normal(size=(20, 4)))
        idx = SpatialIndex(pts).knn_batch(pts, 6)
        shuffled = idx.copy()
        for row in shuffled:
            rng.shuffle(row)
        np.testing.assert_allclose(lfa(pts, F, idx, p).data, lfa(pts, F, shuffled, p).data, atol=1e-12)

    def test_gradient_on_toy_cluster(self):
        reg, rng = ParamRegistry(), np.random.default_rng(2)
        p = LfaParams.create(reg, "l", 3, 4, rng)
        randomize(reg, rng)
        pts = rng.normal(size=(12, 3))
        idx = SpatialIndex(pts).knn_batch(pts, 4)
        x = param(rng.normal(size=(12, 3)))
        assert T.finite_diff_check(lambda f: lfa(pts, f, idx, p), x) < 1e-6
        report = T.check_param_gradients(lambda: lfa(pts, x, idx, p), reg, eps=1e-6)
        # a bias shared by all K scores cancels in the softmax: its gradient is
        # exactly zero and the finite difference is pure roundoff
        del report["l.att.b"]
        assert max(report.values()) < 1e-5
        T.backward(T.sum(lfa(pts, x, idx, p)), reg)
        np.testing.assert_allclose(p.att.b.grad, 0.0, atol=1e-12)


def branch_toy(d, seed):
    reg, rng = ParamRegistry(), np.random.default_rng(seed)
    br = BranchParams.create(reg, "br", d, rng)
    randomize(reg, rng)
    return br, rng


class TestAttentivePool:
    def test_constant_row(self):
        reg = ParamRegistry()
        W = SharedMlp(reg.add("W", np.zeros((3, 4))), reg.add("b", np.full(4, 0.7)))
        F_ap, f_prime = attentive_pool(Tensor(np.ones((2, 3))), W)
        np.testing.assert_allclose(f_prime.data, 0.7)

    def test_within_channel_range(self):
        br, rng = branch_toy(6, 0)
        F_ap, f_prime = attentive_pool(Tensor(rng.normal(size=(30, 6))), br.W_a)
        assert np.all(f_prime.data[:, 0] >= F_ap.data.min(axis=1) - 1e-12)
        assert np.all(f_prime.data[:, 0] <= F_ap.data.max(axis=1) + 1e-12)

    def test_matches_reference(self):
        br, rng = branch_toy(6, 1)
        F = rng.normal(size=(4, 6))
        F_ap, f_prime = attentive_pool(Tensor(F), br.W_a)
        ref_ap, ref_f = attentive_pool_ref(F, *affine(br.W_a))
        np.testing.assert_allclose(F_ap.data, ref_ap, atol=1e-12)
        np.testing.assert_allclose(f_prime.data, ref_f, atol=1e-12)


class TestChannelEnhance:
    def test_between_F_and_2F(self):
        br, rng = branch_toy(8, 2)
        F = rng.uniform(0.1, 2.0, size=(5, 8))
        F_ap, f_prime = attentive_pool(Tensor(F), br.W_a)
        out = channel_enhance(Tensor(F), F_ap, f_prime, br.W_ce, br.W_fc).data
        assert np.all(out > F) and np.all(out < 2 * F)

    def test_closed_gate_is_residual(self):
        br, rng = branch_toy(8, 3)
        br.W_fc.b.data = np.full(8, -60.0)
        F = rng.normal(size=(5, 8))
        F_ap, f_prime = attentive_pool(Tensor(F), br.W_a)
        out = channel_enhance(Tensor(F), F_ap, f_prime, br.W_ce, br.W_fc).data
        np.testing.assert_allclose(out, F, atol=1e-12)

    def test_matches_reference(self):
        br, rng = branch_toy(8, 4)
        F = rng.normal(size=(5, 8))
        F_ap, f_prime = attentive_pool(Tensor(F), br.W_a)
        out = channel_enhance(Tensor(F), F_ap, f_prime, br.W_ce, br.W_fc).data
        ref = channel_enhance_ref(F, F_ap.data, f_prime.data, *affine(br.W_ce), *affine(br.W_fc))
        np.testing.assert_allclose(out, ref, atol=1e-12)


def cb_toy(d, n, seed):
    reg, rng = ParamRegistry(), np.random.default_rng(seed)
    p = ConnectionBlockParams.create(reg, "cb", d, rng)
    randomize(reg, rng)
    F_c, F_ph = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    msg_c = np.sort(rng.choice(n, n // 4, replace=False))
    msg_ph = np.arange(n - n // 4, n)
    return reg, p, F_c, F_ph, msg_c, msg_ph, rng


class TestConnectionBlock:
    def test_non_messenger_rows_untouched(self):
        _, p, F_c, F_ph, msg_c, msg_ph, _ = cb_toy(6, 16, 0)
        out_c, out_ph = connection_block(Tensor(F_c), Tensor(F_ph), msg_c, msg_ph, p)
        keep_c = np.setdiff1d(np.arange(16), msg_c)
        np.testing.assert_array_equal(out_c.data[keep_c], F_c[keep_c])
        np.testing.assert_array_equal(out_ph.data[:12], F_ph[:12])

    def test_matches_reference(self):
        _, p, F_c, F_ph, msg_c, msg_ph, _ = cb_toy(6, 8, 1)
        out_c, out_ph = connection_block(Tensor(F_c), Tensor(F_ph), msg_c, msg_ph, p)
        ref_c, ref_ph = connection_block_ref(F_c, F_ph, msg_c, msg_ph, p)
        np.testing.assert_allclose(out_c.data, ref_c, atol=1e-12)
        np.testing.assert_allclose(out_ph.data, ref_ph, atol=1e-12)

    def test_swapping_branches_swaps_updates(self):
        _, p, F_c, _, _, _, _ = cb_toy(6, 8, 2)
        msg = np.array([1, 5])
        a_c, a_ph = connection_block(Tensor(F_c), Tensor(F_c), msg, msg, p)
        p.central, p.peripheral = p.peripheral, p.central
        b_c, b_ph = connection_block(Tensor(F_c), Tensor(F_c), msg, msg, p)
        np.testing.assert_array_equal(a_c.data, b_ph.data)
        np.testing.assert_array_equal(a_ph.data, b_c.data)

    def test_misaligned_maps(self):
        _, p, F_c, F_ph, msg_c, msg_ph, _ = cb_toy(6, 16, 3)
        with pytest.raises(InvariantViolation):
            connection_block(Tensor(F_c), Tensor(F_ph), msg_c[:3], msg_ph, p)
        ids = np.arange(16)
        with pytest.raises(InvariantViolation):
            connection_block(Tensor(F_c), Tensor(F_ph), msg_c, msg_ph, p, ids, ids[::-1])

    def test_gradient(self):
        reg, p, F_c, F_ph, msg_c, msg_ph, _ = cb_toy(4, 8, 4)
        fc, fph = param(F_c), param(F_ph)

        def f():
            a, b = connection_block(fc, fph, msg_c, msg_ph, p)
            return T.concat([a, b], axis=0) * Tensor(np.linspace(-1, 1, 64).reshape(16, 4))

        assert max(T.check_param_gradients(f, reg, eps=1e-6).values()) < 1e-5
        assert T.finite_diff_check(lambda x: connection_block(x, fph, msg_c, msg_ph, p)[1], fc) < 1e-6


class TestUpsample:
    def test_same_points_nearest(self):
        rng = np.random.default_rng(0)
        pts, F = rng.normal(size=(10, 3)), rng.normal(size=(10, 4))
        np.testing.assert_array_equal(decoder_upsample(pts, Tensor(F), pts).data, F)

    def test_idw3_against_brute_force(self):
        rng = np.random.default_rng(1)
        coarse, fine = rng.normal(size=(20, 3)), rng.normal(size=(80, 3))
        F = rng.normal(size=(20, 5))
        out = decoder_upsample(coarse, Tensor(F), fine, "idw3").data
        for i, q in enumerate(fine):
            d = np.linalg.norm(coarse - q, axis=1)
            near = np.argsort(d, kind="stable")[:3]
            w = 1.0 / (d[near] + 1e-9)
            expected = (w[:, None] * F[near]).sum(axis=0) / w.sum()
            np.testing.assert_allclose(out[i], expected, atol=1e-12)
            assert np.all(out[i] >= F[near].min(axis=0) - 1e-12)
            assert np.all(out[i] <= F[near].max(axis=0) + 1e-12)


def merge_toy(d, n, seed):
    reg, rng = ParamRegistry(), np.random.default_rng(seed)
    p = MergeParams.create(reg, "merge", d, 2, rng)
    randomize(reg, rng)
    return reg, p, rng


class TestSqueezeExcitation:
    def test_sign_preserved(self):
        _, p, rng = merge_toy(8, 6, 0)
        F = rng.normal(size=(6, 8))
        np.testing.assert_array_equal(np.sign(squeeze_excitation(Tensor(F), p).data), np.sign(F))

    def test_duplicate_rows_same_gate(self):
        _, p, rng = merge_toy(8, 6, 1)
        F = rng.normal(size=(6, 8))
        a = squeeze_excitation(Tensor(F), p).data
        b = squeeze_excitation(Tensor(np.repeat(F, 2, axis=0)), p).data
        np.testing.assert_allclose(b[::2], a, atol=1e-15)

    def test_gradient(self):
        reg, p, rng = merge_toy(8, 6, 2)
        assert T.finite_diff_check(lambda x: squeeze_excitation(x, p), param(rng.normal(size=(6, 8)))) < 1e-6


class TestFeatureMerge:
    def test_row_count(self):
        _, p, rng = merge_toy(4, 16, 3)
        out = feature_merge(Tensor(rng.normal(size=(16, 4))), Tensor(rng.normal(size=(16, 4))),
                            np.arange(4), np.arange(12, 16), p)
        assert out.shape == (28, 4)

    def test_identity_smoothing_open_gate(self):
        reg, p, rng = merge_toy(2, 8, 4)
        eye = np.eye(2)
        for mlp in (p.smooth_c, p.smooth_ph):
            mlp.W.data, mlp.b.data = eye.copy(), np.zeros(2)
        p.smooth_m.W.data, p.smooth_m.b.data = np.vstack([eye, eye]), np.zeros(2)
        p.se_expand.W.data[:] = 0.0
        p.se_expand.b.data = np.full(2, 60.0)
        F_c, F_ph = rng.uniform(0.1, 1, (8, 2)), rng.uniform(0.1, 1, (8, 2))
        msg_c, msg_ph = np.array([2, 5]), np.array([6, 7])
        out = feature_merge(Tensor(F_c), Tensor(F_ph), msg_c, msg_ph, p).data
        np.testing.assert_allclose(out[6:8], F_c[msg_c] + F_ph[msg_ph], atol=1e-12)
        np.testing.assert_allclose(out[:6], F_c[[0, 1, 3, 4, 6, 7]], atol=1e-12)


def toy_input(variant="parallel-cb", N=64):
    cfg = GradcheckConfig(variant=variant, N=N)
    cloud = toy_cloud(num_classes=3)
    index = SpatialIndex(cloud.positions)
    batch = sample_human_vision_batch(cloud, index, 400, N, np.random.default_rng(0))
    return cfg.model_config(), prepare_input(cloud, batch, cfg.model_config(), np.random.default_rng(1))


class TestEyeNet:
    def test_output_shape(self):
        mcfg, inp = toy_input()
        logits = EyeNet.create(mcfg, 0).forward(inp)
        assert logits.shape == (112, 3) and np.isfinite(logits.data).all()
        assert len(np.unique(inp.output_ids)) == 112

    def test_zero_head_gives_uniform(self):
        mcfg, inp = toy_input()
        model = EyeNet.create(mcfg, 0)
        model.heads["out"].fc2.W.data[:] = 0.0
        probs = T.softmax(model.forward(inp)).data
        np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)

    @pytest.mark.parametrize("variant", ["baseline", "sequential", "parallel-no-cb"])
    def test_other_variants(self, variant):
        mcfg, inp = toy_input(variant)
        logits = EyeNet.create(mcfg, 0).forward(inp)
        rows = 64 if variant in ("baseline", "sequential") else 112
        assert logits.shape == (rows, 3)

    def test_cb_toggle_is_structural(self):
        cb = EyeNet.create(ModelConfig(variant="parallel-cb"), 0).registry
        nocb = EyeNet.create(ModelConfig(variant="parallel-no-cb"), 0).registry
        extra = set(cb.names()) - set(nocb.names())
        assert extra and all(n.startswith("cb") for n in extra)
        assert set(nocb.names()) <= set(cb.names())

    def test_sequential_matches_parallel_size(self):
        seq = EyeNet.create(ModelConfig(variant="sequential"), 0).num_parameters()
        par = EyeNet.create(ModelConfig(variant="parallel-no-cb"), 0).num_parameters()
        assert abs(seq - par) / par < 0.10

    def test_seeded_creation(self):
        a = EyeNet.create(ModelConfig(), 3).registry.state()
        b = EyeNet.create(ModelConfig(), 3).registry.state()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_config_validation(self):
        with pytest.raises(InvalidArgument):
            ModelConfig(widths=(8, 16), k_schedule=(16,), ratios=(4, 4)).validate()
        with pytest.raises(InvalidArgument):
            ModelConfig(in_channels=6).validate()
        assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()
