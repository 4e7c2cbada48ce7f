import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mohd.autodiff import no_grad
from mohd.model import build_model
from mohd.sparsity import (
    SITES,
    ActivationTrace,
    ProbeRecorder,
    activation_flow_trace,
    cumulative_magnitude_curve,
    magnitude,
    read_trace,
    shared_activation_count,
    sparsity,
    site_report,
    write_trace,
)


class TestMagnitude:
    def test_hand_values(self):
        np.testing.assert_array_equal(magnitude(np.array([1.0, -2.0, 3.0])), [1, 4, 9])

    def test_zero_vector(self):
        np.testing.assert_array_equal(magnitude(np.zeros(5)), np.zeros(5))

    def test_elementwise_square_oracle(self):
        x = np.random.default_rng(0).normal(size=16)
        np.testing.assert_array_equal(magnitude(x), np.array([v * v for v in x]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
    def test_sign_flip_invariant(self, xs):
        x = np.array(xs)
        np.testing.assert_array_equal(magnitude(x), magnitude(-x))


class TestSparsity:
    def test_hand_example(self):
        assert abs(sparsity(np.array([0.0, 0.5, 2.0]), eps=0.1) - 1 / 3) < 1e-15

    def test_all_zero(self):
        assert sparsity(np.zeros(7), eps=1e-6) == 1.0

    def test_median_threshold_counting_oracle(self):
        x = np.random.default_rng(1).normal(size=101)
        m = magnitude(x)
        frac = sparsity(x, eps=float(np.median(m)))
        assert abs(frac - 0.5) <= 1.0 / len(x)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sparsity(np.array([]), eps=0.1)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            sparsity(np.ones(3), eps=0.0)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-10, 10), min_size=2, max_size=20),
        st.floats(1e-6, 1.0),
        st.floats(1.0, 10.0),
    )
    def test_monotone_in_eps(self, xs, eps, factor):
        x = np.array(xs)
        assert sparsity(x, eps) <= sparsity(x, eps * factor)


class TestCumulativeCurve:
    def test_uniform(self):
        np.testing.assert_allclose(
            cumulative_magnitude_curve(np.ones(4)), [0.25, 0.5, 0.75, 1.0], atol=1e-15
        )

    def test_one_hot(self):
        curve = cumulative_magnitude_curve(np.array([0.0, 3.0, 0.0, 0.0]))
        np.testing.assert_allclose(curve, [1.0, 1.0, 1.0, 1.0], atol=1e-15)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            cumulative_magnitude_curve(np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=30))
    def test_nondecreasing_concave_and_ends_at_one(self, xs):
        x = np.array(xs)
        if (x * x).sum() == 0:
            return
        curve = cumulative_magnitude_curve(x)
        assert abs(curve[-1] - 1.0) <= 1e-12
        steps = np.diff(np.concatenate([[0.0], curve]))
        assert (steps >= -1e-15).all()
        assert (np.diff(steps) <= 1e-12).all()  # concavity: increments shrink


class TestSharedActivation:
    def test_identical_patterns(self):
        x = np.tile(np.arange(1.0, 11.0), (4, 1))
        assert shared_activation_count(x, q=0.2) == 2  # ceil(0.2 * 10)

    def test_disjoint_top_sets(self):
        x = np.array([[5.0, 4.0, 0.1, 0.2], [0.1, 0.2, 5.0, 4.0]])
        assert shared_activation_count(x, q=0.5) == 0

    def test_nonincreasing_in_window_and_set_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 32))
        q = 0.25
        k = int(np.ceil(q * 32))
        prev = None
        for w in range(2, 7):
            got = shared_activation_count(x[:w], q)
            tops = [
                set(np.argsort(-magnitude(x[t]), kind="stable")[:k].tolist())
                for t in range(w)
            ]
            assert got == len(set.intersection(*tops))
            if prev is not None:
                assert got <= prev
            prev = got

    def test_window_too_small(self):
        with pytest.raises(ValueError):
            shared_activation_count(np.ones((1, 4)), q=0.2)

    def test_q_bounds(self):
        with pytest.raises(ValueError):
            shared_activation_count(np.ones((2, 4)), q=1.0)


class TestProbesAndTraces:
    def _tiny_model(self):
        from mohd.config import ModelConfig

        cfg = ModelConfig(
            arch="mohd", d_base=16, heads=2, head_dim=8, ffn_dim=32, depth=1,
            fusion_r=4, attn_subdims=4, attn_delta=0.75, attn_shared=0.25,
            ffn_subdims=4, ffn_delta=0.75, ffn_shared=0.25,
        )
        return build_model(cfg, seed=0)

    def test_one_layer_model_emits_each_site_once(self):
        model = self._tiny_model()
        probes = ProbeRecorder()
        tokens = np.random.default_rng(3).integers(0, 257, size=(2, 5))
        with no_grad():
            model.forward(tokens, probes=probes)
        assert [(t.layer, t.site) for t in probes.traces] == [(0, s) for s in SITES]

    def test_duplicate_site_rejected(self):
        probes = ProbeRecorder()
        probes.record(0, "attn_input", np.ones((2, 4)))
        with pytest.raises(ValueError, match="already recorded"):
            probes.record(0, "attn_input", np.ones((2, 4)))

    def test_residual_dominates_zeroed_sublayer_outputs(self):
        model = self._tiny_model()
        blk = model.blocks[0]
        blk.attn.wo.data = np.zeros_like(blk.attn.wo.data)
        blk.ffn.w_down.data = np.zeros_like(blk.ffn.w_down.data)
        tokens = np.random.default_rng(4).integers(0, 257, size=(2, 6))
        flow = {(l, s): v for l, s, v in activation_flow_trace(model, tokens)}
        assert flow[(0, "attn_residual_out")] >= flow[(0, "attn_o_out")]
        assert flow[(0, "ffn_residual_out")] >= flow[(0, "ffn_down_out")]
        assert flow[(0, "attn_o_out")] == 0.0

    def test_flow_normalizes_block_input_to_100(self):
        model = self._tiny_model()
        tokens = np.random.default_rng(5).integers(0, 257, size=(2, 6))
        flow = {(l, s): v for l, s, v in activation_flow_trace(model, tokens)}
        assert abs(flow[(0, "attn_input")] - 100.0) < 1e-9

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            activation_flow_trace(self._tiny_model(), np.zeros((0, 4), dtype=int))

    def test_trace_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        traces = [
            ActivationTrace(0, "attn_input", rng.normal(size=(3, 8))),
            ActivationTrace(0, "ffn_up_out", rng.normal(size=(3, 16))),
        ]
        path = tmp_path / "t.trace"
        write_trace(str(path), traces)
        back = read_trace(str(path))
        assert [(t.layer, t.site) for t in back] == [(0, "attn_input"), (0, "ffn_up_out")]
        for a, b in zip(traces, back):
            np.testing.assert_array_equal(a.values, b.values)

    def test_trace_bad_header(self, tmp_path):
        p = tmp_path / "bad.trace"
        p.write_text("NOPE v9\n")
        with pytest.raises(ValueError, match="header"):
            read_trace(str(p))

    def test_site_report_fields(self):
        rng = np.random.default_rng(7)
        trace = ActivationTrace(1, "ffn_input", rng.normal(size=(4, 12)))
        rep = site_report(trace, eps=1e-4)
        assert 0.0 <= rep.sparsity <= 1.0
        assert rep.mean_magnitude >= 0.0
        assert abs(rep.cumulative_curve[-1] - 1.0) < 1e-12


class TestTrainedModelProperties:
    def test_attention_outputs_fluctuate_more_across_layers(self, toy_trained_dense):
        cfg, result = toy_trained_dense
        from mohd.data import load_windows

        inputs, _ = load_windows(cfg.train.corpus, cfg.train.seq_len)
        flow = activation_flow_trace(result.model, inputs[:8])
        per_site = {}
        for layer, site, value in flow:
            per_site.setdefault(site, []).append(value)
        attn_std = np.std(per_site["attn_o_out"])
        ffn_std = np.std(per_site["ffn_down_out"])
        assert attn_std > ffn_std
