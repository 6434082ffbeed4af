"""Hybrid rollouts: ``L_g`` latent steps, then discrete answer tokens.

Each latent step feeds back the expectation embedding of a sampled latent
token; afterwards ordinary tokens are sampled until ``<eos>`` or the answer
budget runs out. Sequences that share a prompt length are decoded together
through one :class:`~latentrl.model.DecodeCache`, but every trajectory owns
its own random stream, so results do not depend on how rows are batched
beyond floating-point summation order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ContractError
from .model import DecodeCache, ModelParams
from .rng import ROLLOUT, stream
from .sampler import SamplerConfig, sample_discrete, sample_latent
from .tasks import DEFAULT_VOCAB, TaskInstance, Vocabulary, reward

ADV_STD_FLOOR = 1e-8


@dataclass
class Trajectory:
    query_ids: list[int]
    latent_tokens: np.ndarray  # [L_g, V]
    answer_ids: list[int]
    reward: float | None = None
    step_probs: np.ndarray | None = None  # [L_g + L_d, V], pi at each generated step

    @property
    def n_latent(self) -> int:
        return int(self.latent_tokens.shape[0])

    @property
    def n_answer(self) -> int:
        return len(self.answer_ids)

    @property
    def total_length(self) -> int:
        return self.n_latent + self.n_answer

    def key(self) -> tuple[bytes, tuple[int, ...]]:
        """Exact identity of the generated part, for counting distinct rollouts."""
        return np.ascontiguousarray(self.latent_tokens).tobytes(), tuple(self.answer_ids)


@dataclass
class RolloutGroup:
    query_ids: list[int]
    trajectories: list[Trajectory]
    advantages: np.ndarray | None = None
    instance: TaskInstance | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajectories], dtype=np.float64)


def compute_advantages(rewards) -> np.ndarray:
    """Group-normalised advantages with the population standard deviation.

    A group whose rewards are (numerically) constant carries no signal and
    gets all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("advantages need a group of at least 2 rewards")
    # Second centring pass removes the rounding left by the first, so the
    # mean stays at rounding level even when |r| >> std(r).
    c = r - r.mean()
    c -= c.mean()
    std = math.sqrt(float(np.mean(c * c)))
    if std < ADV_STD_FLOOR:
        return np.zeros_like(r)
    return c / std


def check_budget(params: ModelParams, query_len: int, n_latent: int, max_answer_len: int) -> None:
    need = query_len + n_latent + max_answer_len
    if need > params.config.max_seq_len:
        raise CapacityError(f"query ({query_len}) + latent ({n_latent}) + answer ({max_answer_len}) "
                            f"= {need} exceeds max_seq_len {params.config.max_seq_len}")


def _probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    x = logits / temperature
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def generate_trajectories(params: ModelParams, query_ids: Sequence[int], n_latent: int,
                          sampler_cfg: SamplerConfig, max_answer_len: int,
                          rngs: Sequence[np.random.Generator],
                          eos_id: int = DEFAULT_VOCAB.eos) -> list[Trajectory]:
    """One trajectory per generator in ``rngs``, all from the same query."""
    return _generate(params, [list(query_ids)] * len(rngs), n_latent, sampler_cfg,
                     max_answer_len, rngs, eos_id)


def _generate(params: ModelParams, queries: Sequence[Sequence[int]], n_latent: int,
              sampler_cfg: SamplerConfig, max_answer_len: int,
              rngs: Sequence[np.random.Generator], eos_id: int) -> list[Trajectory]:
    """Decode one row per (query, rng) pair; all queries must share a length."""
    queries = np.asarray(queries, dtype=np.intp)
    if queries.ndim != 2 or queries.shape[1] == 0:
        raise ContractError("queries must be nonempty and of equal length")
    if n_latent < 0 or max_answer_len < 0:
        raise ContractError("n_latent and max_answer_len must be nonnegative")
    b, n = queries.shape
    v = params.config.vocab_size
    check_budget(params, n, n_latent, max_answer_len)
    if queries.max() >= v or queries.min() < 0:
        raise ContractError("query token id out of range")
    temp = sampler_cfg.temperature

    cache = DecodeCache(params, b)
    onehot = np.zeros((b, n, v))
    onehot[np.arange(b)[:, None], np.arange(n)[None, :], queries] = 1.0
    x = onehot @ cache.w["tok_emb"] + cache.w["pos_emb"][:n]
    pi = _probs(cache.prefill(x), temp)

    latents = np.zeros((b, n_latent, v))
    step_probs: list[np.ndarray] = []
    for t in range(n_latent):
        step_probs.append(pi)
        z = np.stack([sample_latent(pi[i], sampler_cfg, rngs[i]) for i in range(b)])
        latents[:, t] = z
        pi = _probs(cache.step(cache.embed(z, n + t)), temp)

    answers: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    pos = n + n_latent
    for j in range(max_answer_len):
        step_probs.append(pi)
        tokens = np.full(b, eos_id)
        for i in range(b):
            if not done[i]:
                tok = sample_discrete(pi[i], sampler_cfg, rngs[i])
                answers[i].append(tok)
                tokens[i] = tok
                done[i] = tok == eos_id
        if done.all() or j == max_answer_len - 1:
            break
        step = np.zeros((b, v))
        step[np.arange(b), tokens] = 1.0
        pi = _probs(cache.step(cache.embed(step, pos + j)), temp)

    probs = np.stack(step_probs, axis=1) if step_probs else np.zeros((b, 0, v))
    return [Trajectory([int(q) for q in queries[i]], latents[i].copy(), answers[i], None,
                       probs[i, :n_latent + len(answers[i])].copy()) for i in range(b)]


def generate_trajectory(params: ModelParams, query_ids: Sequence[int], n_latent: int,
                        sampler_cfg: SamplerConfig, max_answer_len: int,
                        rng: np.random.Generator, eos_id: int = DEFAULT_VOCAB.eos) -> Trajectory:
    return generate_trajectories(params, query_ids, n_latent, sampler_cfg, max_answer_len,
                                 [rng], eos_id)[0]


def rollout_rngs(seed: int, step: int, query_index: int, group_size: int) -> list[np.random.Generator]:
    return [stream(seed, ROLLOUT, step, query_index, i) for i in range(group_size)]


def rollout_group(params: ModelParams, instance: TaskInstance, group_size: int, n_latent: int,
                  sampler_cfg: SamplerConfig, max_answer_len: int, *, seed: int = 0,
                  step: int = 0, query_index: int = 0,
                  vocab: Vocabulary = DEFAULT_VOCAB) -> RolloutGroup:
    """``group_size`` independent rollouts of one query, with rewards filled in."""
    return rollout_batch(params, [instance], group_size, n_latent, sampler_cfg, max_answer_len,
                         seed=seed, step=step, vocab=vocab, first_index=query_index)[0]


def rollout_batch(params: ModelParams, instances: Sequence[TaskInstance], group_size: int,
                  n_latent: int, sampler_cfg: SamplerConfig, max_answer_len: int, *,
                  seed: int = 0, step: int = 0, vocab: Vocabulary = DEFAULT_VOCAB,
                  first_index: int = 0) -> list[RolloutGroup]:
    """Groups for a batch of queries, in query order.

    Queries of equal length are decoded together; the stream of rollout ``i``
    of query ``q`` is keyed by ``(seed, step, first_index + q, i)``.
    """
    if group_size < 2:
        raise ContractError(f"group size must be >= 2, got {group_size}")
    by_len: dict[int, list[int]] = {}
    for q, inst in enumerate(instances):
        by_len.setdefault(len(inst.query_ids), []).append(q)

    groups: list[RolloutGroup | None] = [None] * len(instances)
    for _, members in sorted(by_len.items()):
        queries, rngs = [], []
        for q in members:
            queries += [instances[q].query_ids] * group_size
            rngs += rollout_rngs(seed, step, first_index + q, group_size)
        trajs = _generate(params, queries, n_latent, sampler_cfg, max_answer_len, rngs, vocab.eos)
        for j, q in enumerate(members):
            inst = instances[q]
            mine = trajs[j * group_size:(j + 1) * group_size]
            for t in mine:
                t.reward = float(reward(t.answer_ids, inst, vocab))
            groups[q] = RolloutGroup(list(inst.query_ids), mine, None, inst)
    return groups  # type: ignore[return-value]


def distinct_count(trajectories: Sequence[Trajectory]) -> int:
    return len({t.key() for t in trajectories})


def dump_trajectories(trajectories: Sequence[Trajectory], path, vocab: Vocabulary = DEFAULT_VOCAB,
                      top: int = 5) -> None:
    """Line-delimited JSON, one record per trajectory."""
    with Path(path).open("w") as fh:
        for t in trajectories:
            fh.write(json.dumps(trajectory_record(t, vocab, top)) + "\n")


def top_tokens(z: np.ndarray, vocab: Vocabulary = DEFAULT_VOCAB, top: int = 5) -> list[list]:
    order = np.argsort(-z, kind="stable")[:top]
    return [[vocab.symbols[int(k)], float(z[k])] for k in order]


def trajectory_record(t: Trajectory, vocab: Vocabulary = DEFAULT_VOCAB, top: int = 5) -> dict:
    return {
        "query_ids": list(t.query_ids),
        "latent_top": [top_tokens(z, vocab, top) for z in t.latent_tokens],
        "answer_ids": list(t.answer_ids),
        "answer": vocab.detokenize(t.answer_ids),
        "reward": t.reward,
    }
