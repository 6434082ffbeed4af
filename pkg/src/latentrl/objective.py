"""Policy objectives over hybrid trajectories.

For trajectory ``i`` with advantage ``A_i`` the latent part scores the current
policy against each stored latent token as a soft label,
``A_i * sum_t sum_k z_tk log pi_k``, and the discrete part is REINFORCE,
``A_i * sum_t log pi(o_t)``. Their sum is divided by the trajectory length,
averaged over the group and the batch, and a per-token KL to a frozen
reference policy is subtracted with weight ``beta``. The loss returned for
minimisation is the negated objective.

Latent tokens are constants here: no gradient flows into ``z``, but gradients
do flow through the replayed embeddings ``sum_k z_k e_k`` into the table.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .model import ModelParams, embed_soft, forward_logits, frozen_view
from .rollout import RolloutGroup, Trajectory
from .tensor import Tensor

MODES = ("lepo", "grpo_discrete", "deterministic_latent")


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 1e-3
    length_normalize: bool = True
    mode: str = "lepo"
    temperature: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError(f"beta must be nonnegative, got {self.beta}")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")

    @property
    def supervise_latent(self) -> bool:
        # Without injected noise the latent tokens are a deterministic function
        # of the query and carry no exploration signal to reinforce.
        return self.mode == "lepo"


@dataclass
class LossBreakdown:
    loss: Tensor
    j_latent: float
    j_discrete: float
    kl_term: float
    tokens_counted: int

    @property
    def total_loss(self) -> float:
        return float(self.loss.data)


# ---------------------------------------------------------------------------
# per-trajectory pieces
# ---------------------------------------------------------------------------

def latent_objective(log_probs: Tensor, soft_labels, advantage: float) -> Tensor:
    """``A * sum_t sum_k z_tk log pi_tk``; ``soft_labels`` carry no gradient."""
    log_probs = T.as_tensor(log_probs)
    z = np.asarray(soft_labels, dtype=np.float64)
    if z.shape != log_probs.shape:
        raise DimensionError(f"soft labels {z.shape} vs log-probs {log_probs.shape}")
    return T.sum(log_probs * (z * float(advantage)))


def discrete_objective(log_probs: Tensor, token_ids: Sequence[int], advantage: float) -> Tensor:
    """``A * sum_t log pi_t(o_t)``."""
    log_probs = T.as_tensor(log_probs)
    ids = np.asarray(token_ids, dtype=np.intp).reshape(-1)
    if log_probs.ndim != 2 or log_probs.shape[0] != ids.size:
        raise DimensionError(f"{ids.size} token ids vs log-probs {log_probs.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= log_probs.shape[1]):
        raise ContractError("token id out of range")
    picked = T.gather(log_probs, ids[:, None], axis=1)
    return T.sum(picked) * float(advantage)


def kl_regularizer(log_probs_policy: Tensor, log_probs_reference) -> Tensor:
    """Mean over positions of the exact categorical KL(policy || reference)."""
    lp = T.as_tensor(log_probs_policy)
    ref = np.asarray(log_probs_reference.data if isinstance(log_probs_reference, Tensor)
                     else log_probs_reference, dtype=np.float64)
    if lp.shape != ref.shape:
        raise DimensionError(f"policy positions {lp.shape} vs reference {ref.shape}")
    per_pos = T.sum(T.exp(lp) * (lp - ref), axis=-1)
    return T.mean(per_pos)


# ---------------------------------------------------------------------------
# batched replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayBatch:
    """Padded teacher-forcing inputs and targets for a list of trajectories."""
    inputs: np.ndarray          # [B, L, V] one-hot / simplex rows
    latent_targets: np.ndarray  # [B, L, V] z at positions that predict a latent step
    discrete_targets: np.ndarray  # [B, L, V] one-hot at positions predicting an answer token
    latent_mask: np.ndarray     # [B, L]
    discrete_mask: np.ndarray   # [B, L]
    lengths: np.ndarray         # [B] generated length T_i


def build_replay(trajectories: Sequence[Trajectory], vocab_size: int) -> ReplayBatch:
    rows = []
    for tr in trajectories:
        full = len(tr.query_ids) + tr.n_latent + tr.n_answer
        rows.append(max(full - 1, len(tr.query_ids)))
    b, width = len(trajectories), max(rows)
    inputs = np.zeros((b, width, vocab_size))
    lat_t = np.zeros_like(inputs)
    dis_t = np.zeros_like(inputs)
    lat_m = np.zeros((b, width))
    dis_m = np.zeros((b, width))
    lengths = np.zeros(b, dtype=np.int64)
    for i, tr in enumerate(trajectories):
        if tr.latent_tokens.shape[1:] != (vocab_size,) and tr.n_latent:
            raise DimensionError(f"latent tokens {tr.latent_tokens.shape} vs vocab {vocab_size}")
        n, nl, na = len(tr.query_ids), tr.n_latent, tr.n_answer
        seq = np.zeros((n + nl + na, vocab_size))
        seq[np.arange(n), tr.query_ids] = 1.0
        if nl:
            seq[n:n + nl] = tr.latent_tokens
        if na:
            seq[n + nl + np.arange(na), tr.answer_ids] = 1.0
        used = min(seq.shape[0], width)
        inputs[i, :used] = seq[:used]
        if nl:
            lat_t[i, n - 1:n - 1 + nl] = tr.latent_tokens
            lat_m[i, n - 1:n - 1 + nl] = 1.0
        if na:
            dis_t[i, n - 1 + nl:n - 1 + nl + na] = seq[n + nl:]
            dis_m[i, n - 1 + nl:n - 1 + nl + na] = 1.0
        lengths[i] = nl + na
    return ReplayBatch(inputs, lat_t, dis_t, lat_m, dis_m, lengths)


def replay_log_probs(params: ModelParams, inputs: np.ndarray, temperature: float = 1.0) -> Tensor:
    logits = forward_logits(params, embed_soft(params, inputs))
    return T.log_softmax(logits * (1.0 / temperature), axis=-1)


def _reference_log_probs(reference: ModelParams, inputs: np.ndarray, temperature: float) -> np.ndarray:
    return replay_log_probs(frozen_view(reference), inputs, temperature).data


def _flatten(groups) -> tuple[list[Trajectory], np.ndarray]:
    if isinstance(groups, RolloutGroup):
        groups = [groups]
    trajs, weights = [], []
    for g in groups:
        if g.advantages is None:
            raise ContractError("advantages must be computed before the loss")
        if len(g.advantages) != g.size:
            raise DimensionError("one advantage per trajectory is required")
        for tr, adv in zip(g.trajectories, g.advantages):
            trajs.append(tr)
            weights.append(adv / (g.size * len(groups)))
    return trajs, np.asarray(weights, dtype=np.float64)


def lepo_loss(groups, params: ModelParams, reference: ModelParams | None,
              cfg: ObjectiveConfig) -> LossBreakdown:
    """Negated unified objective for one group or a batch of groups."""
    trajs, weights = _flatten(groups)
    if not trajs:
        raise ContractError("no trajectories to score")
    batch = build_replay(trajs, params.config.vocab_size)
    lengths = np.maximum(batch.lengths, 1)
    if cfg.length_normalize:
        weights = np.where(batch.lengths > 0, weights / lengths, 0.0)

    lp = replay_log_probs(params, batch.inputs, cfg.temperature)
    w = weights[:, None, None]
    j_lat = T.sum(lp * (batch.latent_targets * w)) if cfg.supervise_latent else Tensor(0.0)
    j_dis = T.sum(lp * (batch.discrete_targets * w))
    objective = j_lat + j_dis

    kl_mask = np.maximum(batch.latent_mask, batch.discrete_mask)
    count = int(kl_mask.sum())
    if reference is not None and count:
        ref = _reference_log_probs(reference, batch.inputs, cfg.temperature)
        if cfg.beta > 0:
            per_pos = T.sum(T.exp(lp) * (lp - ref), axis=-1)
            kl = T.sum(per_pos * (kl_mask / count))
            kl_value = float(kl.data)
            loss = -objective + kl * cfg.beta
        else:
            kl_value = float(((np.exp(lp.data) * (lp.data - ref)).sum(-1) * kl_mask).sum() / count)
            loss = -objective
    else:
        kl_value = 0.0
        loss = -objective
    return LossBreakdown(loss, float(j_lat.data), float(j_dis.data), kl_value, count)


def answer_nll(params: ModelParams, trajectories: Sequence[Trajectory],
               temperature: float = 1.0, label_smoothing: float = 0.0) -> Tensor:
    """Mean per-token cross-entropy of the answer tokens.

    Used for the supervised warm start: latent tokens are context only.
    ``label_smoothing`` mixes each one-hot target with the uniform distribution.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ContractError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    v = params.config.vocab_size
    batch = build_replay(trajectories, v)
    lp = replay_log_probs(params, batch.inputs, temperature)
    targets = ((1.0 - label_smoothing) * batch.discrete_targets
               + (label_smoothing / v) * batch.discrete_mask[..., None])
    per_traj = np.maximum(batch.discrete_mask.sum(axis=1), 1.0)
    w = (1.0 / (per_traj * len(trajectories)))[:, None, None]
    return -T.sum(lp * (targets * w))


def trajectory_log_likelihood(params: ModelParams, trajectory: Trajectory,
                              temperature: float = 1.0) -> float:
    """``sum_t sum_k z_tk log pi_tk + sum_t log pi(o_t)`` under ``params``."""
    batch = build_replay([trajectory], params.config.vocab_size)
    lp = replay_log_probs(frozen_view(params), batch.inputs, temperature).data
    return float((lp * (batch.latent_targets + batch.discrete_targets)).sum())


def replay_step_probs(params: ModelParams, trajectory: Trajectory,
                      temperature: float = 1.0) -> np.ndarray:
    """Distributions at each generated step, recomputed by teacher forcing."""
    batch = build_replay([trajectory], params.config.vocab_size)
    lp = replay_log_probs(frozen_view(params), batch.inputs, temperature).data[0]
    n = len(trajectory.query_ids)
    return np.exp(lp[n - 1:n - 1 + trajectory.total_length])
