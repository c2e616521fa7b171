import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mtts_fusion.gradcore as G
from mtts_fusion.fusion import (
    EarlyModel,
    FusionSpec,
    GatingParams,
    InputWindow,
    ModelConfig,
    Normalizer,
    align_latest,
    build_model,
    corr_penalty,
    encode_batch,
    forward,
    fuse_concat,
    fuse_gating,
    fuse_mean,
    fuse_share,
    take_batch,
    valid_combinations,
    _run_lstm,
)
from mtts_fusion.gradcore import Tape, Tensor, backward
from mtts_fusion.synthgen import ConfigError

from conftest import brute_align, grad_error

K = 3


def random_window(rng, n_events=None, lc=8, dt=0.25):
    end = float(rng.integers(5, 20)) * dt
    cont_times = end - dt * np.arange(lc)[::-1]
    n = int(rng.integers(0, 6)) if n_events is None else n_events
    # events on the sampling grid half the time so ties with samples occur
    raw = rng.uniform(cont_times[0] - 1.0, end, n)
    snap = rng.random(n) < 0.5
    raw[snap] = cont_times[0] + dt * np.round((raw[snap] - cont_times[0]) / dt)
    ev_times = np.unique(np.clip(raw, None, end))
    n = len(ev_times)
    dts = np.diff(np.concatenate([[ev_times[0] - 0.7] if n else [], ev_times]))
    return InputWindow(
        cont_times=cont_times,
        cont_values=rng.standard_normal(lc),
        ev_times=ev_times,
        ev_types=rng.integers(0, K, n),
        ev_dts=dts,
        window_end=end,
    )


def small_cfg(seed=0):
    return ModelConfig(k=K, hidden=4, fused_hidden=3, dec_hidden=2, seed=seed)


def model_loss(model, batch):
    out = model.run(batch)
    w = np.random.default_rng(5)
    loss = G.sum(out.cont * Tensor(w.standard_normal(out.cont.shape)))
    loss = loss + G.sum(out.logits * Tensor(w.standard_normal(out.logits.shape)))
    loss = loss + G.sum(out.dt * Tensor(w.standard_normal(out.dt.shape)))
    if out.corr_pair is not None:
        loss = loss - corr_penalty(*out.corr_pair) * 0.3
    return loss


class TestOperators:
    def test_mean_endpoints_exact(self):
        rng = np.random.default_rng(0)
        xc, xe = rng.standard_normal(6), rng.standard_normal(6)
        assert np.array_equal(fuse_mean(xc, xe, 0.0).data, xc)
        assert np.array_equal(fuse_mean(xc, xe, 1.0).data, xe)

    def test_concat(self):
        assert fuse_concat(Tensor([1.0]), Tensor([2.0, 3.0])).data.tolist() == [1.0, 2.0, 3.0]

    @pytest.mark.parametrize("l_c, l_e, r", [(4, 4, 1), (4, 4, 3), (5, 7, 2), (8, 3, 2)])
    def test_share_length_and_layout(self, l_c, l_e, r):
        xc = np.arange(l_c, dtype=float)
        xe = 100.0 + np.arange(l_e)
        out = fuse_share(xc, xe, 0.25, r).data
        assert len(out) == l_c + l_e - r
        np.testing.assert_array_equal(out[:r], 0.25 * xe[:r] + 0.75 * xc[:r])
        np.testing.assert_array_equal(out[r:], np.concatenate([xe[r:], xc[r:]]))

    @pytest.mark.parametrize("r", [0, 4])
    def test_share_bad_r(self, r):
        with pytest.raises(ConfigError):
            fuse_share(np.zeros(4), np.zeros(6), 0.5, r)

    def test_gating_zero_gate_weights_halve(self):
        rng = np.random.default_rng(0)
        p = GatingParams(3, 5, 4, rng)
        p.w_f.data = np.zeros_like(p.w_f.data)
        xc, xe = rng.standard_normal((2, 3)), rng.standard_normal((2, 5))
        h_c = np.tanh(xc @ p.w_c.data)
        h_e = np.tanh(xe @ p.w_e.data)
        out = fuse_gating(Tensor(xc), Tensor(xe), p).data
        assert np.array_equal(out, 0.5 * h_e + (1.0 - 0.5) * h_c)

    def test_corr_penalty_values(self):
        x = np.array([[1.0, 2.0], [2.0, 2.0], [3.0, 2.0]])
        assert corr_penalty(x, x).item() == pytest.approx(0.5)  # second column has no variance
        assert corr_penalty(x, -x).item() == pytest.approx(-0.5)

    def test_corr_needs_two_rows(self):
        with pytest.raises(ValueError):
            corr_penalty(np.ones((1, 3)), np.ones((1, 3)))


class TestOperatorGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_each_method(self, seed):
        rng = np.random.default_rng(seed)
        xc = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        xe = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 4)))
        gate = GatingParams(4, 4, 3, rng)
        w3 = Tensor(rng.standard_normal((5, 3)))
        w7 = Tensor(rng.standard_normal((5, 7)))
        w8 = Tensor(rng.standard_normal((5, 8)))
        cases = [
            (lambda: G.sum(fuse_concat(xc, xe) * w8), [xc, xe]),
            (lambda: G.sum(fuse_mean(xc, xe, 0.3) * w), [xc, xe]),
            (lambda: G.sum(fuse_share(xc, xe, 0.3, 1) * w7), [xc, xe]),
            (lambda: G.sum(fuse_gating(xc, xe, gate) * w3), [xc, xe] + gate.parameters()),
            (lambda: corr_penalty(xc, xe), [xc, xe]),
        ]
        for fn, leaves in cases:
            assert grad_error(fn, leaves) < 1e-4


class TestAlignLatest:
    def test_matches_oracle_on_1000_timelines(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            nc, ne = rng.integers(0, 12, size=2)
            ct = np.unique(rng.integers(0, 15, nc) * 0.5)
            et = np.unique(rng.integers(0, 15, ne) * 0.5)
            cont = [(t, rng.standard_normal(2)) for t in ct]
            events = [(t, rng.standard_normal(3)) for t in et]
            got = align_latest(cont, events, 2, 3)
            want = brute_align(cont, events, 2, 3)
            assert len(got) == len(want)
            for g, w in zip(got, want):
                assert g[0] == w[0] and g[1] == w[1]
                assert np.array_equal(g[2], w[2]) and np.array_equal(g[3], w[3])

    def test_example(self):
        out = align_latest([(0.0, [1.0]), (1.0, [2.0])], [(0.5, [9.0])])
        assert [(t, m, list(c), list(e)) for t, m, c, e in out] == [
            (0.0, "cont", [1.0], [0.0]),
            (0.5, "event", [1.0], [9.0]),
            (1.0, "cont", [2.0], [9.0]),
        ]


class TestSpecs:
    def test_fourteen_combinations(self):
        keys = [s.key for s in valid_combinations()]
        assert len(keys) == len(set(keys)) == 14
        assert "late_gating" not in keys and "unimodal_cont_none" in keys

    @pytest.mark.parametrize("ftype, method", [
        ("late", "gating"), ("late", "concat"), ("late", "share"), ("early", "none"),
        ("unimodal_cont", "mean"), ("bogus", "mean"), ("early", "bogus"),
    ])
    def test_invalid_rejected(self, ftype, method):
        with pytest.raises(ConfigError):
            build_model(FusionSpec(ftype, method), small_cfg())

    @pytest.mark.parametrize("kw", [dict(beta=1.5), dict(lam=-1.0), dict(r=0), dict(late_betas=(0.5, 2.0, 0.5))])
    def test_bad_hyperparameters(self, kw):
        with pytest.raises(ConfigError):
            FusionSpec("early", "share", **kw).validate()

    def test_dict_round_trip(self):
        spec = FusionSpec("late", "corr", beta=0.2, lam=0.4, late_betas=(0.1, 0.2, 0.3))
        assert FusionSpec.from_dict(spec.to_dict()) == spec
        assert FusionSpec.from_dict({"ftype": "early", "method": "corr", "lambda": 0.7}).lam == 0.7


ALL = valid_combinations()


class TestModels:
    @pytest.mark.parametrize("spec", ALL, ids=[s.key for s in ALL])
    def test_output_shapes_and_gradient_flow(self, spec):
        rng = np.random.default_rng(1)
        windows = [random_window(rng, n_events=n) for n in (0, 2, 4)]
        batch = encode_batch(windows, Normalizer(), K)
        model = build_model(spec, small_cfg())
        out = model.run(batch)
        assert out.cont.shape == (3, 5) and out.logits.shape == (3, K) and out.dt.shape == (3,)
        with Tape() as tape:
            loss = model_loss(model, batch)
        grads = backward(tape, loss)
        touched = {n for n, p in model.named_parameters() if p in grads and np.any(grads[p] != 0)}
        wants_cont = spec.ftype != "unimodal_event"
        wants_event = spec.ftype != "unimodal_cont"
        assert any(("cont" in n or n.startswith("encoder")) for n in touched) or not wants_cont
        if wants_cont and spec.ftype != "unimodal_cont":
            assert any(n.startswith(("cont_enc", "cont_model")) for n in touched)
        if wants_event and spec.ftype != "unimodal_event":
            assert any(n.startswith(("event_enc", "event_model")) for n in touched)
        if spec.ftype.startswith("unimodal"):
            assert any(n.startswith("encoder") for n in touched)

    @pytest.mark.parametrize("key", ["early_gating", "early_corr", "intermediate_share", "late_corr"])
    def test_model_gradcheck(self, key):
        spec = next(s for s in ALL if s.key == key)
        rng = np.random.default_rng(2)
        batch = encode_batch([random_window(rng, n_events=n) for n in (1, 3)], Normalizer(), K)
        model = build_model(spec, ModelConfig(k=K, hidden=2, fused_hidden=2, dec_hidden=2))
        assert grad_error(lambda: model_loss(model, batch), model.parameters()) < 1e-4

    @pytest.mark.parametrize("spec", ALL, ids=[s.key for s in ALL])
    def test_batched_equals_single(self, spec):
        rng = np.random.default_rng(3)
        windows = [random_window(rng) for _ in range(6)]
        model = build_model(spec, small_cfg(4))
        norm = Normalizer(0.1, 1.3, 0.5, 0.8, 0.9, 0.4)
        full = model.run(encode_batch(windows, norm, K))
        for i, w in enumerate(windows):
            one = model.run(encode_batch([w], norm, K))
            for a, b in ((full.cont, one.cont), (full.logits, one.logits), (full.dt, one.dt)):
                np.testing.assert_allclose(a.data[i], b.data[0], rtol=0, atol=1e-12)

    def test_take_batch_matches_fresh_encoding(self):
        rng = np.random.default_rng(4)
        windows = [random_window(rng, n_events=n) for n in (5, 1, 2)]
        batch = encode_batch(windows, Normalizer(), K)
        sub = take_batch(batch, np.array([1, 2]))
        fresh = encode_batch(windows[1:], Normalizer(), K)
        np.testing.assert_array_equal(sub.ev_x, fresh.ev_x)
        np.testing.assert_array_equal(sub.ev_mask, fresh.ev_mask)

    def test_unimodal_ignores_other_modality(self):
        rng = np.random.default_rng(5)
        w = random_window(rng, n_events=3)
        other_events = InputWindow(w.cont_times, w.cont_values, w.ev_times[:1], (w.ev_types[:1] + 1) % K,
                                   w.ev_dts[:1], w.window_end)
        other_cont = InputWindow(w.cont_times, w.cont_values * 3 + 1, w.ev_times, w.ev_types,
                                 w.ev_dts, w.window_end)
        uc = build_model(FusionSpec("unimodal_cont"), small_cfg())
        ue = build_model(FusionSpec("unimodal_event"), small_cfg())
        assert np.array_equal(forward(uc, w).cont_next, forward(uc, other_events).cont_next)
        assert np.array_equal(forward(ue, w).event_logits, forward(ue, other_cont).event_logits)

    def test_late_full_event_weights_give_event_branch(self):
        rng = np.random.default_rng(6)
        batch = encode_batch([random_window(rng, n_events=2) for _ in range(3)], Normalizer(), K)
        late = build_model(FusionSpec("late", "mean", late_betas=(1.0, 1.0, 1.0)), small_cfg())
        out = late.run(batch)
        ev = late.event_model.run(batch)
        np.testing.assert_array_equal(out.cont.data, ev.cont.data)
        np.testing.assert_array_equal(out.dt.data, ev.dt.data)
        np.testing.assert_allclose(out.logits.data, G.log_softmax(ev.logits).data, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(b=st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), seed=st.integers(0, 1000))
    def test_late_event_probabilities_on_simplex(self, b, seed):
        rng = np.random.default_rng(seed)
        batch = encode_batch([random_window(rng) for _ in range(2)], Normalizer(), K)
        late = build_model(FusionSpec("late", "mean", late_betas=b), small_cfg())
        p = np.exp(late.run(batch).logits.data)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("method", ["concat", "gating", "share"])
    def test_early_matches_explicit_alignment(self, method):
        rng = np.random.default_rng(7)
        w = random_window(rng, n_events=4)
        model = build_model(FusionSpec("early", method), small_cfg())
        assert isinstance(model, EarlyModel)
        batch = encode_batch([w], Normalizer(), K)
        hc = model.cont_enc(batch)
        he = model.event_enc(batch)
        paired = align_latest(
            list(zip(w.cont_times, [h.data[0] for h in hc])),
            list(zip(w.ev_times, [h.data[0] for h in he])),
        )
        xs = [model.fuser(Tensor(c[None]), Tensor(e[None])) for _, _, c, e in paired]
        h = _run_lstm(model.mm, xs)[-1]
        cont, logits, dt = model.head(h)
        out = model.run(batch)
        np.testing.assert_allclose(out.cont.data, cont.data, atol=1e-12)
        np.testing.assert_allclose(out.logits.data, logits.data, atol=1e-12)

    def test_forward_destandardizes(self):
        rng = np.random.default_rng(8)
        w = random_window(rng, n_events=2)
        model = build_model(FusionSpec("intermediate", "concat"), small_cfg())
        base = forward(model, w)
        model.norm = Normalizer(cont_mean=2.0, cont_std=1.0, dt_mean=3.0, dt_std=2.0)
        # cont input shift is undone by the same mean; outputs move with the stats
        shifted = InputWindow(w.cont_times, w.cont_values + 2.0, w.ev_times, w.ev_types, w.ev_dts, w.window_end)
        out = forward(model, shifted)
        np.testing.assert_allclose(out.cont_next, base.cont_next + 2.0, atol=1e-12)
        assert out.dt_next == pytest.approx(base.dt_next * 2.0 + 3.0, abs=1e-12)
