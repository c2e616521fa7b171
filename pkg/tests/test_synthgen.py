import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtts_fusion.core import encode_record, validate_record
from mtts_fusion.synthgen import (
    ConfigError,
    GeneratorConfig,
    SineComponent,
    blended_mean,
    config_from_dict,
    draw_phase_shift,
    event_values,
    generate_grid,
    generate_sequence,
    generate_split,
    grid_values,
    hash64,
    intermodal_mean,
    mean_trajectory,
    ou_step,
    random_transition_model,
    transition_distribution,
)


def entropy_bits(p):
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def uniform_cfg(k=3, **kw):
    return GeneratorConfig(m=np.full((k, k), 1.0 / k), t_mat=np.ones((k, k)), **kw)


class TestEventValues:
    def test_k2(self):
        assert event_values(2).tolist() == [-1.0, 1.0]

    def test_k5(self):
        assert event_values(5).tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]

    def test_k1_rejected(self):
        with pytest.raises(ConfigError):
            event_values(1)


class TestIntermodalMean:
    cmap = event_values(4)

    def test_single_event_any_decay(self):
        for decay in (0.01, 1.0, 50.0):
            assert intermodal_mean([(0.3, 3)], self.cmap, decay, 5.0) == 1.0

    def test_symmetric_pair(self):
        assert intermodal_mean([(1.0, 0), (1.0, 3)], self.cmap, 0.7, 2.0) == 0.0

    def test_staggered_hand_computed(self):
        events = [(0.0, 0), (1.0, 2), (2.5, 3)]
        t, decay = 3.0, 0.5
        w = [math.exp(-decay * (t - s)) for s, _ in events]
        c = [self.cmap[j] for _, j in events]
        expected = sum(a * b for a, b in zip(w, c)) / sum(w)
        assert intermodal_mean(events, self.cmap, decay, t) == pytest.approx(expected, rel=1e-14)

    def test_future_events_ignored_and_empty_is_zero(self):
        assert intermodal_mean([(2.0, 3)], self.cmap, 1.0, 1.0) == 0.0
        assert intermodal_mean([(0.0, 0), (2.0, 3)], self.cmap, 1.0, 1.0) == -1.0


class TestBlendedMean:
    @pytest.mark.parametrize("m_c, m_e, i_ec, expected", [
        (0.3, -0.8, 0.0, 0.3),
        (0.3, -0.8, 1.0, -0.8),
        (1.0, -1.0, 0.5, 0.0),
    ])
    def test_examples(self, m_c, m_e, i_ec, expected):
        assert blended_mean(m_c, m_e, i_ec) == expected


class TestTransitionDistribution:
    def test_no_interaction_returns_row_exactly(self, transition4):
        m, t_mat = transition4
        cfg = GeneratorConfig(m=m, t_mat=t_mat)
        for prev in range(4):
            p = transition_distribution(prev, 0.37, cfg, event_values(4))
            assert np.array_equal(p, m[prev])

    def test_full_interaction_k2(self):
        cfg = uniform_cfg(2, i_ce=1.0)
        p = transition_distribution(0, -1.0, cfg, event_values(2))
        assert p.tolist() == [0.0, 1.0]

    def test_half_interaction_hand_computed(self):
        cfg = uniform_cfg(3, i_ce=0.5)
        # C = [-1, 0, 1], c = 0: d = [1, 0, 1], d/sum = [.5, 0, .5]
        p = transition_distribution(0, 0.0, cfg, event_values(3))
        expected = np.array([0.5 * 0.5 + 0.5 / 3, 0.5 / 3, 0.5 * 0.5 + 0.5 / 3])
        np.testing.assert_allclose(p, expected, rtol=0, atol=1e-15)

    def test_bad_prev(self):
        with pytest.raises(ConfigError):
            transition_distribution(3, 0.0, uniform_cfg(3), event_values(3))

    @settings(max_examples=300, deadline=None)
    @given(
        k=st.integers(2, 8),
        seed=st.integers(0, 2**32 - 1),
        c=st.floats(-10, 10),
        i_ce=st.floats(0, 1),
    )
    def test_is_a_distribution(self, k, seed, c, i_ce):
        rng = np.random.default_rng(seed)
        m = rng.dirichlet(np.ones(k), size=k)
        cfg = GeneratorConfig(m=m, t_mat=np.ones((k, k)), i_ce=i_ce)
        p = transition_distribution(int(rng.integers(k)), c, cfg, event_values(k))
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-9


class TestRandomTransitionModel:
    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_max_entropy_is_uniform(self, k):
        m, _ = random_transition_model(k, math.log2(k), 1.0, np.random.default_rng(0))
        np.testing.assert_allclose(m, 1.0 / k, atol=1e-15)

    def test_zero_entropy_is_one_hot(self):
        m, _ = random_transition_model(5, 0.0, 1.0, np.random.default_rng(0))
        assert np.all(m.max(axis=1) == 1.0) and np.all(m.sum(axis=1) == 1.0)

    def test_one_bit_k4(self):
        m, _ = random_transition_model(4, 1.0, 1.0, np.random.default_rng(3))
        for row in m:
            assert abs(entropy_bits(row) - 1.0) < 1e-3

    def test_times_positive_with_mean(self):
        _, t_mat = random_transition_model(6, 1.5, 2.5, np.random.default_rng(4))
        assert np.all(t_mat > 0)
        assert abs(t_mat.mean() - 2.5) < 0.05 * 2.5

    @pytest.mark.parametrize("target", [-0.1, 2.5])
    def test_unreachable(self, target):
        with pytest.raises(ConfigError):
            random_transition_model(4, target, 1.0, np.random.default_rng(0))


class TestOU:
    def test_step_formula(self):
        cfg = uniform_cfg(theta=2.0, sigma=0.5, dt=0.04)
        x = ou_step(1.0, 0.25, cfg, 0.3)
        assert x == pytest.approx(1.0 + 2.0 * (0.25 - 1.0) * 0.04 + 0.5 * 0.2 * 0.3, rel=1e-15)

    def test_mean_trajectory(self):
        comps = (SineComponent(2.0, 0.25),)
        assert mean_trajectory(1.0, comps) == pytest.approx(2.0)
        assert mean_trajectory(0.0, comps, shift=1.0) == pytest.approx(2.0)

    def test_phase_shift_range(self):
        rng = np.random.default_rng(0)
        comps = (SineComponent(1.0, 0.5), SineComponent(1.0, 0.125))
        shifts = [draw_phase_shift(comps, rng) for _ in range(1000)]
        assert min(shifts) >= 0.0 and max(shifts) < 8.0

    def test_displaced_start_relaxes_with_exponential_envelope(self):
        theta, dt = 1.5, 0.01
        comps = (SineComponent(0.8, 0.1),)
        cfg = uniform_cfg(theta=theta, sigma=0.0, dt=dt, horizon=10.0,
                          mean_components=comps, seed=11)
        rec = generate_sequence(cfg)
        shift = draw_phase_shift(comps, np.random.default_rng(11).spawn(3)[0])
        values = rec.cont.array
        # the record follows the noiseless OU recursion toward the sine mean
        x = values[0]
        assert x == pytest.approx(mean_trajectory(0.0, comps, shift), abs=1e-15)
        y = x + 1.0
        for i in range(1, len(values)):
            m = mean_trajectory((i - 1) * dt, comps, shift)
            x = ou_step(x, m, cfg, 0.0)
            y = ou_step(y, m, cfg, 0.0)
            assert x == pytest.approx(values[i], abs=1e-12)
            gap = y - x
            assert gap == pytest.approx((1 - theta * dt) ** i, rel=1e-9)
            assert 0 < gap <= math.exp(-theta * i * dt)

    def test_stationary_statistics(self):
        cfg = uniform_cfg(theta=1.0, sigma=0.1, dt=0.01, horizon=1000.0 - 0.01,
                          mean_components=(SineComponent(0.0, 1.0),), mean_offset=0.5, seed=5)
        vals = generate_sequence(cfg).cont.array
        assert len(vals) == 100_000
        assert abs(vals.mean() - 0.5) < 0.02
        assert abs(vals.var() / 0.005 - 1.0) < 0.2


class TestGenerateSequence:
    def test_deterministic(self, base_cfg):
        a = generate_sequence(base_cfg.with_(i_ec=0.4, i_ce=0.6))
        b = generate_sequence(base_cfg.with_(i_ec=0.4, i_ce=0.6))
        assert encode_record(a) == encode_record(b)

    def test_record_fields_and_validity(self, base_cfg):
        cfg = base_cfg.with_(i_ec=0.25, i_ce=0.75, seed=99)
        rec = generate_sequence(cfg, record_id="x")
        assert (rec.id, rec.i_ec, rec.i_ce, rec.seed) == ("x", 0.25, 0.75, 99)
        assert len(rec.cont.values) == 121
        assert validate_record(rec, k=4) == []
        assert rec.events.events[0][0] == 0.0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**64 - 1), i_ec=st.floats(0, 1), i_ce=st.floats(0, 1))
    def test_event_times_increase_and_follow_t_mat(self, base_cfg, seed, i_ec, i_ce):
        rec = generate_sequence(base_cfg.with_(seed=seed, i_ec=i_ec, i_ce=i_ce))
        times, types = rec.events.times, rec.events.types
        assert np.all(np.diff(times) > 0)
        assert times[-1] <= rec.cont.last_time
        np.testing.assert_allclose(np.diff(times), base_cfg.t_mat[types[:-1], types[1:]], rtol=1e-12)

    def test_event_stream_independent_of_continuous_without_interaction(self, base_cfg):
        a = generate_sequence(base_cfg.with_(sigma=0.1))
        b = generate_sequence(base_cfg.with_(sigma=0.9, theta=3.0))
        assert a.events == b.events

    def test_markov_fidelity(self, transition4):
        m, t_mat = transition4
        cfg = GeneratorConfig(m=m, t_mat=t_mat, dt=1.0, horizon=60_000.0, seed=3)
        rec = generate_sequence(cfg)
        types = rec.events.types
        counts = np.zeros((4, 4))
        np.add.at(counts, (types[:-1], types[1:]), 1)
        freq = counts / counts.sum(axis=1, keepdims=True)
        assert counts.sum() > 50_000
        assert np.abs(freq - m).max() < 0.02

    def test_coupling_pulls_toward_event_mean(self, base_cfg):
        def gap(i_ec, seed):
            rec = generate_sequence(base_cfg.with_(i_ec=i_ec, seed=seed))
            cmap = event_values(4)
            me = [intermodal_mean(rec.events, cmap, base_cfg.decay_rate, t) for t in rec.cont.times]
            return float(np.mean(np.abs(rec.cont.array - np.array(me))))

        lo = [gap(0.9, s) for s in range(30)]
        hi = [gap(0.0, s) for s in range(30)]
        assert np.mean(lo) < np.mean(hi)


class TestGrid:
    def test_grid_values(self):
        assert grid_values(1) == [0.0]
        assert grid_values(3) == [0.0, 0.5, 1.0]

    def test_desk_scale_counts(self, base_cfg):
        ds = generate_split(base_cfg.with_(horizon=2.0), "train", 5, 2)
        assert ds.manifest.record_count == len(ds.records) == 50
        assert ds.manifest.grid_shape == (5, 5)
        assert len({r.seed for r in ds.records}) == 50
        assert sorted(ds.cells()) == [(a, b) for a in grid_values(5) for b in grid_values(5)]

    @pytest.mark.parametrize("res, per_cell, total", [(200, 2, 80_000), (20, 1000, 400_000)])
    def test_full_scale_counts(self, res, per_cell, total):
        # count arithmetic only; seeds must not collide at that scale
        seeds = {hash64(7, 0, r, c, i) for r in range(res) for c in range(res) for i in range(per_cell)}
        assert res * res * per_cell == total
        assert len(seeds) == total

    def test_splits_differ_and_workers_agree(self, base_cfg):
        cfg = base_cfg.with_(horizon=3.0)
        tr1, te1 = generate_grid(2, 2, 2, 1, cfg, workers=1)
        tr2, te2 = generate_grid(2, 2, 2, 1, cfg, workers=2)
        assert [encode_record(r) for r in tr1.records] == [encode_record(r) for r in tr2.records]
        assert te1.records == te2.records
        assert tr1.records[0].seed != te1.records[0].seed


class TestConfig:
    def test_transition_block(self):
        plan = config_from_dict({"k": 3, "transition": {"entropy_bits": 1.0, "mean_dt": 2.0, "seed": 1},
                                 "grid": {"train_res": 2, "train_per_cell": 1}})
        assert plan.base.k == 3
        assert plan.grid.train_res == 2 and plan.grid.test_res == 5

    @pytest.mark.parametrize("obj", [
        {"k": 3},
        {"m": [[1.0]], "t_mat": [[1.0]]},
        {"m": [[0.5, 0.5], [0.5, 0.5]], "t_mat": [[1, 1], [1, 1]], "bogus": 1},
        {"m": [[0.5, 0.5], [0.5, 0.5]], "t_mat": [[1, 1], [1, 1]], "i_ec": 2.0},
        {"m": [[0.5, 0.5], [0.5, 0.5]], "t_mat": [[1, 1], [1, 1]], "grid": {"test_res": 0}},
    ])
    def test_rejected(self, obj):
        with pytest.raises(ConfigError):
            config_from_dict(obj)
