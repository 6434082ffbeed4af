import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentrl.errors import CapacityError, ContractError
from latentrl.model import ModelConfig, init_params
from latentrl.objective import replay_step_probs
from latentrl.rollout import (compute_advantages, distinct_count, dump_trajectories,
                              generate_trajectory, rollout_batch, rollout_group)
from latentrl.rng import stream
from latentrl.sampler import SamplerConfig
from latentrl.tasks import DEFAULT_MIXTURE, DEFAULT_VOCAB, make_dataset

V = DEFAULT_VOCAB


@pytest.fixture(scope="module")
def params():
    return init_params(ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=64), seed=1, std=0.5)


@pytest.fixture(scope="module")
def problems():
    return make_dataset(DEFAULT_MIXTURE, 12, seed=3)


class TestGenerate:
    def test_pure_discrete(self, params, problems):
        t = generate_trajectory(params, problems[0].query_ids, 0, SamplerConfig(), 5, stream(0, 9))
        assert t.n_latent == 0 and t.latent_tokens.shape == (0, 64)
        assert 1 <= t.n_answer <= 5
        assert t.total_length == t.n_answer

    def test_deterministic_latents_repeat(self, params, problems):
        cfg = SamplerConfig(noise_kind="none")
        a = generate_trajectory(params, problems[0].query_ids, 4, cfg, 3, stream(0, 1))
        b = generate_trajectory(params, problems[0].query_ids, 4, cfg, 3, stream(0, 2))
        assert a.latent_tokens.tobytes() == b.latent_tokens.tobytes()

    def test_gumbel_latents_differ_across_seeds(self, params, problems):
        q = problems[0].query_ids
        for s in range(100):
            a = generate_trajectory(params, q, 3, SamplerConfig(tau_g=0.5), 1, stream(s, 0))
            b = generate_trajectory(params, q, 3, SamplerConfig(tau_g=0.5), 1, stream(s, 1))
            assert np.abs(a.latent_tokens - b.latent_tokens).max() > 1e-6

    def test_latents_on_simplex_and_answer_terminates(self, params, problems):
        for i, inst in enumerate(problems):
            t = generate_trajectory(params, inst.query_ids, 3, SamplerConfig(), 4, stream(i, 0))
            np.testing.assert_allclose(t.latent_tokens.sum(axis=1), 1.0, atol=1e-6)
            assert t.answer_ids[-1] == V.eos or t.n_answer == 4
            assert V.eos not in t.answer_ids[:-1]

    def test_budget_overflow(self, params, problems):
        with pytest.raises(CapacityError):
            generate_trajectory(params, problems[0].query_ids, 60, SamplerConfig(), 6, stream(0))

    def test_replay_reproduces_step_distributions(self, params, problems):
        for i, inst in enumerate(problems[:5]):
            t = generate_trajectory(params, inst.query_ids, 4, SamplerConfig(), 5, stream(i, 3))
            np.testing.assert_allclose(replay_step_probs(params, t), t.step_probs, atol=1e-10)


class TestGroups:
    def test_group_of_two(self, params, problems):
        g = rollout_group(params, problems[0], 2, 2, SamplerConfig(), 3, seed=4)
        assert g.size == 2 and set(g.rewards) <= {0.0, 1.0}

    def test_same_seed_identical(self, params, problems):
        a = rollout_group(params, problems[1], 4, 3, SamplerConfig(), 4, seed=4, step=2)
        b = rollout_group(params, problems[1], 4, 3, SamplerConfig(), 4, seed=4, step=2)
        for x, y in zip(a.trajectories, b.trajectories):
            assert x.key() == y.key()

    def test_group_size_one_rejected(self, params, problems):
        with pytest.raises(ContractError):
            rollout_group(params, problems[0], 1, 2, SamplerConfig(), 3)

    def test_distinct_answers_at_init(self, params, problems):
        with_two = 0
        for q, inst in enumerate(problems):
            g = rollout_group(params, inst, 8, 2, SamplerConfig(), 4, seed=7, query_index=q)
            with_two += len({tuple(t.answer_ids) for t in g.trajectories}) >= 2
        assert with_two >= 0.9 * len(problems)

    def test_batch_matches_single_groups(self, params, problems):
        cfg = SamplerConfig()
        batch = rollout_batch(params, problems[:6], 3, 2, cfg, 4, seed=5, step=1)
        for q, inst in enumerate(problems[:6]):
            single = rollout_group(params, inst, 3, 2, cfg, 4, seed=5, step=1, query_index=q)
            for a, b in zip(batch[q].trajectories, single.trajectories):
                np.testing.assert_allclose(a.latent_tokens, b.latent_tokens, atol=1e-10)
                assert a.answer_ids == b.answer_ids and a.reward == b.reward

    def test_stochastic_beats_deterministic_distinctness(self, params, problems):
        inst = problems[0]
        stoch = rollout_group(params, inst, 32, 3, SamplerConfig(tau_g=0.5), 1, seed=2)
        det = rollout_group(params, inst, 32, 3, SamplerConfig(noise_kind="none"), 1, seed=2)
        assert len({t.latent_tokens.tobytes() for t in det.trajectories}) == 1
        assert distinct_count(stoch.trajectories) > distinct_count(det.trajectories)


class TestAdvantages:
    def test_balanced(self):
        np.testing.assert_allclose(compute_advantages([1, 0, 0, 1]), [1, -1, -1, 1])

    def test_all_equal(self):
        np.testing.assert_array_equal(compute_advantages([1, 1, 1, 1]), np.zeros(4))

    def test_single_success_of_eight(self):
        adv = compute_advantages([1, 0, 0, 0, 0, 0, 0, 0])
        std = np.sqrt(7) / 8
        np.testing.assert_allclose(adv[0], 0.875 / std, atol=1e-12)
        np.testing.assert_allclose(adv[1:], -0.125 / std, atol=1e-12)
        np.testing.assert_allclose([adv[0], adv[1]], [2.6457513110645907, -0.3779644730092272], atol=1e-12)

    def test_too_small_group(self):
        with pytest.raises(ContractError):
            compute_advantages([1.0])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=64))
    def test_normalised_or_zero(self, r):
        adv = compute_advantages(r)
        if np.std(r) < 1e-8:
            assert np.all(adv == 0)
        else:
            assert abs(adv.mean()) < 1e-10
            assert abs(adv.std() - 1.0) < 1e-10


class TestDump:
    def test_records(self, params, problems, tmp_path):
        g = rollout_group(params, problems[0], 3, 2, SamplerConfig(), 4, seed=1)
        dump_trajectories(g.trajectories, tmp_path / "t.jsonl")
        recs = [json.loads(ln) for ln in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert len(recs) == 3
        for rec, t in zip(recs, g.trajectories):
            assert rec["answer_ids"] == t.answer_ids and rec["reward"] == t.reward
            assert len(rec["latent_top"]) == 2 and all(len(step) == 5 for step in rec["latent_top"])
            probs = [p for _, p in rec["latent_top"][0]]
            assert probs == sorted(probs, reverse=True)
