import numpy as np
import pytest

from latentrl import tensor as T
from latentrl.errors import ContractError, DimensionError
from latentrl.model import DecodeCache, ModelConfig, init_params, snapshot_reference
from latentrl.objective import (ObjectiveConfig, answer_nll, discrete_objective, kl_regularizer,
                                latent_objective, lepo_loss)
from latentrl.rollout import RolloutGroup, Trajectory, compute_advantages
from latentrl.tensor import Tensor

from conftest import central_diff, rel_err


def random_simplex(rng, n, v, conc=1.0):
    return rng.dirichlet(np.full(v, conc), size=n)


def make_group(rng, v, g, n_latent, rewards, query_len=3, answer_len=(1, 3)):
    query = list(rng.integers(0, v, size=query_len))
    trajs = []
    for r in rewards:
        ans = list(rng.integers(0, v, size=int(rng.integers(answer_len[0], answer_len[1] + 1))))
        trajs.append(Trajectory(query, random_simplex(rng, n_latent, v), ans, float(r)))
    return RolloutGroup(query, trajs, compute_advantages(rewards))


def stepwise_log_probs(params, tr):
    """Independent teacher forcing: KV-cache decode one position at a time."""
    v = params.config.vocab_size
    cache = DecodeCache(params, 1)
    rows = [np.eye(v)[q] for q in tr.query_ids]
    logits = cache.prefill(np.stack([cache.embed(r[None], i)[0] for i, r in enumerate(rows)])[None])
    out = []
    pos = len(rows)
    for x in list(tr.latent_tokens) + [np.eye(v)[a] for a in tr.answer_ids]:
        out.append(T.log_softmax_np(logits[0]))
        logits = cache.step(cache.embed(x[None], pos))
        pos += 1
    return np.array(out)


def loop_oracle(groups, params, reference, beta, supervise_latent=True):
    """Scalar double loop over groups and trajectories."""
    obj, kl_sum, count = 0.0, 0.0, 0
    for g in groups:
        for tr, adv in zip(g.trajectories, g.advantages):
            lp = stepwise_log_probs(params, tr)
            ref = stepwise_log_probs(reference, tr)
            n_lat = tr.n_latent
            term = 0.0
            if supervise_latent:
                for t in range(n_lat):
                    term += float(np.dot(tr.latent_tokens[t], lp[t]))
            for j, a in enumerate(tr.answer_ids):
                term += lp[n_lat + j, a]
            obj += adv * term / tr.total_length / (g.size * len(groups))
            for t in range(tr.total_length):
                kl_sum += float(np.sum(np.exp(lp[t]) * (lp[t] - ref[t])))
                count += 1
    return -obj + beta * kl_sum / count


@pytest.fixture
def small():
    cfg = ModelConfig(vocab_size=7, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=16)
    return init_params(cfg, seed=5, std=0.4)


class TestPieces:
    def test_one_hot_latent_reduces_to_discrete(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 6))
        ids = [2, 0, 5, 3]
        a = Tensor(x, requires_grad=True)
        b = Tensor(x, requires_grad=True)
        la = latent_objective(T.log_softmax(a), np.eye(6)[ids], 1.7)
        lb = discrete_objective(T.log_softmax(b), ids, 1.7)
        np.testing.assert_allclose(la.data, lb.data, atol=1e-12)
        la.backward()
        lb.backward()
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)

    def test_discrete_example(self):
        out = discrete_objective(Tensor([[-0.5, -9.0], [-9.0, -1.5]]), [0, 1], 2.0)
        assert float(out.data) == pytest.approx(-4.0, abs=1e-12)

    def test_kl_example(self):
        p = np.log([[0.5, 0.5]])
        q = np.log([[0.9, 0.1]])
        expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
        assert float(kl_regularizer(Tensor(p), q).data) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.5108256237659907, abs=1e-12)

    def test_kl_identical_is_zero(self):
        p = np.log(random_simplex(np.random.default_rng(2), 5, 4))
        assert abs(float(kl_regularizer(Tensor(p), p).data)) < 1e-15

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            latent_objective(Tensor(np.zeros((2, 3))), np.zeros((3, 3)), 1.0)
        with pytest.raises(DimensionError):
            discrete_objective(Tensor(np.zeros((2, 3))), [0], 1.0)
        with pytest.raises(ContractError):
            discrete_objective(Tensor(np.zeros((1, 3))), [3], 1.0)

    def test_config_validation(self):
        with pytest.raises(ContractError):
            ObjectiveConfig(beta=-1.0)
        with pytest.raises(ContractError):
            ObjectiveConfig(mode="ppo")


class TestLoss:
    def test_matches_loop_oracle(self, small):
        rng = np.random.default_rng(11)
        ref = init_params(small.config, seed=6, std=0.4)
        groups = [make_group(rng, 7, 3, 2, [1, 0, 1]), make_group(rng, 7, 3, 2, [0, 0, 1])]
        out = lepo_loss(groups, small, ref, ObjectiveConfig(beta=0.3))
        assert out.total_loss == pytest.approx(loop_oracle(groups, small, ref, 0.3), abs=1e-10)

    def test_grpo_mode_ignores_latents(self, small):
        rng = np.random.default_rng(12)
        ref = snapshot_reference(small)
        groups = [make_group(rng, 7, 2, 0, [1, 0])]
        out = lepo_loss(groups, small, ref, ObjectiveConfig(mode="grpo_discrete", beta=0.0))
        assert out.j_latent == 0.0
        assert out.total_loss == pytest.approx(loop_oracle(groups, small, ref, 0.0), abs=1e-10)

    def test_deterministic_mode_drops_latent_term(self, small):
        rng = np.random.default_rng(13)
        ref = snapshot_reference(small)
        groups = [make_group(rng, 7, 3, 2, [1, 0, 0])]
        out = lepo_loss(groups, small, ref, ObjectiveConfig(mode="deterministic_latent", beta=0.1))
        assert out.j_latent == 0.0
        expected = loop_oracle(groups, small, ref, 0.1, supervise_latent=False)
        assert out.total_loss == pytest.approx(expected, abs=1e-10)

    def test_equal_rewards_leave_only_kl(self, small):
        rng = np.random.default_rng(14)
        ref = init_params(small.config, seed=9, std=0.4)
        groups = [make_group(rng, 7, 4, 2, [1, 1, 1, 1])]
        out = lepo_loss(groups, small, ref, ObjectiveConfig(beta=0.7))
        assert out.j_latent == 0.0 and out.j_discrete == 0.0
        assert out.total_loss == pytest.approx(0.7 * out.kl_term, abs=1e-14)

    def test_missing_advantages(self, small):
        rng = np.random.default_rng(15)
        g = make_group(rng, 7, 2, 1, [1, 0])
        g.advantages = None
        with pytest.raises(ContractError):
            lepo_loss(g, small, None, ObjectiveConfig())

    @pytest.mark.parametrize("mode", ["lepo", "grpo_discrete"])
    def test_gradient_finite_differences(self, small, mode):
        rng = np.random.default_rng(16)
        ref = init_params(small.config, seed=8, std=0.4)
        n_lat = 0 if mode == "grpo_discrete" else 2
        groups = [make_group(rng, 7, 2, n_lat, [1, 0])]
        cfg = ObjectiveConfig(beta=0.5, mode=mode)
        lepo_loss(groups, small, ref, cfg).loss.backward()
        pick = np.random.default_rng(0)
        for name in ("tok_emb", "head", "layers.0.attn.wq", "layers.0.mlp.w1"):
            arr = small[name].data
            idx = pick.choice(arr.size, size=6, replace=False)
            num = central_diff(lambda: lepo_loss(groups, small, ref, cfg).total_loss, arr, indices=idx)
            assert rel_err(small[name].grad.reshape(-1)[idx], num.reshape(-1)[idx], floor=1e-7) < 1e-5, name

    def test_gradient_step_raises_objective(self, small):
        rng = np.random.default_rng(17)
        groups = [make_group(rng, 7, 4, 2, [1, 0, 0, 1])]
        cfg = ObjectiveConfig(beta=0.0)
        before = lepo_loss(groups, small, None, cfg)
        before.loss.backward()
        for _, t in small.items():
            t.data -= 1e-3 * t.grad
            t.grad = None
        after = lepo_loss(groups, small, None, cfg)
        assert after.total_loss < before.total_loss


class TestAnswerNLL:
    def test_uniform_head(self, small):
        small["head"].data[:] = 0.0
        tr = Trajectory([1, 2], np.zeros((0, 7)), [3, 4])
        assert float(answer_nll(small, [tr]).data) == pytest.approx(np.log(7), abs=1e-12)

    def test_smoothing_range(self, small):
        tr = Trajectory([1], np.zeros((0, 7)), [3])
        with pytest.raises(ContractError):
            answer_nll(small, [tr], label_smoothing=1.0)
