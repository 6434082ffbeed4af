"""Training loop: rollout groups, unified loss, AdamW with cosine schedule.

A run has two phases. A short supervised warm start teaches the freshly
initialised network the answer format (``<ans> digits <eos>``) so that
outcome rewards are not vanishingly rare; the result is frozen as the KL
reference. Reinforcement steps follow, one on-policy update per batch.

Every random draw is keyed by ``(seed, domain, step, ...)``, so the state
needed to resume a run is just the parameters, optimiser moments, reference
and step counter.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import read_container, write_container
from .errors import CheckpointError, ContractError, NonFiniteError, NumericAbort
from .model import ModelConfig, ModelParams, init_params, snapshot_reference
from .objective import MODES, ObjectiveConfig, answer_nll, lepo_loss
from .rng import DATA, PRETRAIN, stream
from .rollout import RolloutGroup, Trajectory, _generate, compute_advantages, rollout_batch
from .sampler import SamplerConfig, entropy
from .tasks import DEFAULT_VOCAB, TaskInstance, Vocabulary

CHECKPOINT_KIND = "train-state"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_ratio: float = 0.03
    max_grad_norm: float = 1.0
    group_size: int = 8
    batch_size: int = 8
    total_steps: int = 200
    n_latent: int = 8
    max_answer_len: int = 6
    beta: float = 1e-3
    length_normalize: bool = True
    mode: str = "lepo"
    seed: int = 0
    pretrain_steps: int = 300
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    pretrain_label_smoothing: float = 0.3
    max_consecutive_aborts: int = 5

    def __post_init__(self):
        for name in ("learning_rate", "pretrain_lr", "weight_decay", "beta", "adam_eps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if not 0 <= self.warmup_ratio < 1:
            raise ContractError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ContractError("adam betas must be in [0, 1)")
        if self.group_size < 2:
            raise ContractError("group_size must be >= 2")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ContractError("batch_size and total_steps must be >= 1")
        if not 0 <= self.pretrain_label_smoothing < 1:
            raise ContractError("pretrain_label_smoothing must be in [0, 1)")
        if self.n_latent < 0 or self.max_answer_len < 1:
            raise ContractError("n_latent must be >= 0 and max_answer_len >= 1")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def effective_latent(self) -> int:
        return 0 if self.mode == "grpo_discrete" else self.n_latent

    def objective(self, temperature: float = 1.0) -> ObjectiveConfig:
        return ObjectiveConfig(self.beta, self.length_normalize, self.mode, temperature)

    def sampler(self, base: SamplerConfig) -> SamplerConfig:
        if self.mode == "deterministic_latent":
            return replace(base, noise_kind="none")
        return base


# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()}, 0)


def cosine_lr(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def adamw_update(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
                 lr: float, beta1: float, beta2: float, eps: float, weight_decay: float) -> None:
    """Decoupled-weight-decay Adam; matrices decay, vectors (norms, biases) do not."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, t in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        decay = weight_decay if t.data.ndim >= 2 else 0.0
        t.data = t.data - lr * update - lr * decay * t.data


def collect_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}


def clear_grads(params: ModelParams) -> None:
    for t in params.tensors.values():
        t.grad = None


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("step", "lr", "reward_mean", "loss_total", "j_latent", "j_discrete", "kl",
                 "entropy_mean", "tokens_mean", "grad_norm", "wall_ms")


@dataclass
class MetricsRecord:
    step: int
    lr: float
    reward_mean: float
    loss_total: float
    j_latent: float
    j_discrete: float
    kl: float
    entropy_mean: float
    tokens_mean: float
    grad_norm: float
    wall_ms: float
    aborted: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def trajectory_entropy(t: Trajectory) -> float:
    if t.step_probs is None or not len(t.step_probs):
        return 0.0
    return float(entropy(t.step_probs).mean())


class MetricsWriter:
    """Line-delimited JSON metrics plus a CSV mirror; config echoed first."""

    def __init__(self, directory, config: dict):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.jsonl = (self.dir / "metrics.jsonl").open("w")
        self.csv_fh = (self.dir / "metrics.csv").open("w", newline="")
        self.csv = csv.writer(self.csv_fh)
        self.csv.writerow(METRIC_FIELDS)
        self.jsonl.write(json.dumps({"type": "config", "config": config}, sort_keys=True) + "\n")
        self.jsonl.flush()

    def write(self, rec: MetricsRecord) -> None:
        self.jsonl.write(json.dumps({"type": "step", **rec.to_dict()}) + "\n")
        self.csv.writerow([getattr(rec, f) for f in METRIC_FIELDS])
        self.jsonl.flush()
        self.csv_fh.flush()

    def close(self) -> None:
        self.jsonl.close()
        self.csv_fh.close()


def read_metrics(path) -> tuple[dict, list[dict]]:
    config, steps = {}, []
    with Path(path).open() as fh:
        for ln in fh:
            rec = json.loads(ln)
            if rec.get("type") == "config":
                config = rec["config"]
            else:
                steps.append(rec)
    return config, steps


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(x.size):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# one reinforcement step
# ---------------------------------------------------------------------------

def train_step(params: ModelParams, reference: ModelParams, state: OptimizerState,
               batch: Sequence[TaskInstance], cfg: TrainConfig, sampler_cfg: SamplerConfig,
               step: int, vocab: Vocabulary = DEFAULT_VOCAB) -> tuple[MetricsRecord, list[RolloutGroup]]:
    """Rollout, score, backpropagate and update ``params`` in place.

    On a non-finite loss or gradient the update is skipped and the record is
    flagged ``aborted``; parameters and optimiser state are left untouched.
    """
    t0 = time.perf_counter()
    lr = cosine_lr(step, cfg.total_steps, cfg.warmup_ratio, cfg.learning_rate)
    scfg = cfg.sampler(sampler_cfg)
    groups = rollout_batch(params, batch, cfg.group_size, cfg.effective_latent, scfg,
                           cfg.max_answer_len, seed=cfg.seed, step=step, vocab=vocab)
    for g in groups:
        g.advantages = compute_advantages(g.rewards)
    trajs = [t for g in groups for t in g.trajectories]
    reward_mean = float(np.mean([t.reward for t in trajs]))
    entropy_mean = float(np.mean([trajectory_entropy(t) for t in trajs]))
    tokens_mean = float(np.mean([t.n_answer for t in trajs]))

    def record(loss, jl, jd, kl, gn, aborted=False, note=""):
        return MetricsRecord(step, lr, reward_mean, loss, jl, jd, kl, entropy_mean, tokens_mean,
                             gn, (time.perf_counter() - t0) * 1e3, aborted, note)

    clear_grads(params)
    try:
        lb = lepo_loss(groups, params, reference, cfg.objective(scfg.temperature))
        if not np.isfinite(lb.total_loss):
            raise NonFiniteError("loss is not finite")
        lb.loss.backward()
        grads = collect_grads(params)
        gn = global_grad_norm(grads)
        if not np.isfinite(gn):
            raise NonFiniteError("gradient is not finite")
    except NonFiniteError as exc:
        clear_grads(params)
        return record(float("nan"), float("nan"), float("nan"), float("nan"), float("nan"),
                      True, str(exc)), groups
    clear_grads(params)

    if gn > 0.0:
        if cfg.max_grad_norm > 0 and gn > cfg.max_grad_norm:
            scale = cfg.max_grad_norm / gn
            grads = {k: g * scale for k, g in grads.items()}
        adamw_update(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2,
                     cfg.adam_eps, cfg.weight_decay)
    return record(lb.total_loss, lb.j_latent, lb.j_discrete, lb.kl_term, gn), groups


# ---------------------------------------------------------------------------
# supervised warm start
# ---------------------------------------------------------------------------

def pretrain(params: ModelParams, dataset: Sequence[TaskInstance], cfg: TrainConfig,
             sampler_cfg: SamplerConfig, vocab: Vocabulary = DEFAULT_VOCAB) -> list[float]:
    """Teacher-forced answer likelihood with self-generated latent context."""
    if cfg.pretrain_steps <= 0:
        return []
    state = OptimizerState.zeros_like(params)
    scfg = cfg.sampler(sampler_cfg)
    losses = []
    for k in range(cfg.pretrain_steps):
        rng = stream(cfg.seed, PRETRAIN, k)
        picks = rng.integers(0, len(dataset), size=cfg.pretrain_batch)
        insts = [dataset[int(i)] for i in picks]
        trajs = []
        by_len: dict[int, list[int]] = {}
        for j, inst in enumerate(insts):
            by_len.setdefault(len(inst.query_ids), []).append(j)
        slots: list[Trajectory | None] = [None] * len(insts)
        for _, members in sorted(by_len.items()):
            rngs = [stream(cfg.seed, PRETRAIN, k, j) for j in members]
            out = _generate(params, [insts[j].query_ids for j in members], cfg.effective_latent,
                            scfg, 0, rngs, vocab.eos)
            for j, tr in zip(members, out):
                tr.answer_ids = insts[j].target_ids(vocab)
                slots[j] = tr
        trajs = [t for t in slots if t is not None]
        clear_grads(params)
        loss = answer_nll(params, trajs, scfg.temperature, cfg.pretrain_label_smoothing)
        loss.backward()
        grads = collect_grads(params)
        clear_grads(params)
        adamw_update(params, grads, state, cfg.pretrain_lr, cfg.adam_beta1, cfg.adam_beta2,
                     cfg.adam_eps, 0.0)
        losses.append(float(loss.data))
    return losses


# ---------------------------------------------------------------------------
# trainer object
# ---------------------------------------------------------------------------

@dataclass
class Trainer:
    model_cfg: ModelConfig
    sampler_cfg: SamplerConfig
    cfg: TrainConfig
    dataset: list[TaskInstance]
    params: ModelParams
    reference: ModelParams
    state: OptimizerState
    step: int = 0
    history: list[MetricsRecord] = field(default_factory=list)
    vocab: Vocabulary = DEFAULT_VOCAB
    pretrain_losses: list[float] = field(default_factory=list)
    _aborts: int = 0

    @classmethod
    def fresh(cls, model_cfg: ModelConfig, sampler_cfg: SamplerConfig, cfg: TrainConfig,
              dataset: Sequence[TaskInstance], vocab: Vocabulary = DEFAULT_VOCAB) -> "Trainer":
        if model_cfg.vocab_size != len(vocab):
            raise ContractError(f"model vocab_size {model_cfg.vocab_size} != vocabulary size {len(vocab)}")
        params = init_params(model_cfg, cfg.seed)
        losses = pretrain(params, list(dataset), cfg, sampler_cfg, vocab)
        reference = snapshot_reference(params)
        return cls(model_cfg, sampler_cfg, cfg, list(dataset), params, reference,
                   OptimizerState.zeros_like(params), 0, [], vocab, losses)

    def batch_at(self, step: int) -> list[TaskInstance]:
        """Queries for ``step``: consecutive slices of per-epoch permutations."""
        n, b = len(self.dataset), self.cfg.batch_size
        out = []
        for j in range(step * b, (step + 1) * b):
            epoch, pos = divmod(j, n)
            perm = stream(self.cfg.seed, DATA, epoch).permutation(n)
            out.append(self.dataset[int(perm[pos])])
        return out

    def train_step(self) -> MetricsRecord:
        rec, _ = train_step(self.params, self.reference, self.state, self.batch_at(self.step),
                            self.cfg, self.sampler_cfg, self.step, self.vocab)
        self.history.append(rec)
        self.step += 1
        self._aborts = self._aborts + 1 if rec.aborted else 0
        if self._aborts >= self.cfg.max_consecutive_aborts:
            raise NumericAbort(f"{self._aborts} consecutive non-finite steps (last at step {rec.step})")
        return rec

    def run(self, steps: int | None = None,
            callback: Callable[[MetricsRecord], None] | None = None) -> list[MetricsRecord]:
        end = self.cfg.total_steps if steps is None else min(self.step + steps, self.cfg.total_steps)
        out = []
        while self.step < end:
            rec = self.train_step()
            out.append(rec)
            if callback is not None:
                callback(rec)
        return out

    # -- checkpoints ---------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None) -> None:
        save_checkpoint(path, self.params, self.state, self.reference, self.model_cfg,
                        self.sampler_cfg, self.cfg, self.step, extra_meta)

    @classmethod
    def load(cls, path, dataset: Sequence[TaskInstance], vocab: Vocabulary = DEFAULT_VOCAB) -> "Trainer":
        ck = load_checkpoint(path)
        return cls(ck["model_config"], ck["sampler_config"], ck["train_config"], list(dataset),
                   ck["params"], ck["reference"], ck["optimizer"], ck["step"], [], vocab)


def _dataclass_from(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ContractError(f"unknown {cls.__name__} fields {sorted(unknown)}")
    return cls(**data)


def save_checkpoint(path, params: ModelParams, state: OptimizerState, reference: ModelParams,
                    model_cfg: ModelConfig, sampler_cfg: SamplerConfig, cfg: TrainConfig,
                    step: int, extra_meta: dict | None = None) -> None:
    """Parameters, AdamW moments, frozen reference and step counter.

    Random streams are pure functions of ``(seed, step, ...)``, so the seed
    and step recorded here fully determine every future draw.
    """
    arrays = dict(params.arrays())
    arrays.update({f"ref/{k}": v for k, v in reference.arrays().items()})
    arrays.update({f"adam_m/{k}": v for k, v in state.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    meta = {"kind": CHECKPOINT_KIND, "model_config": asdict(model_cfg),
            "sampler_config": asdict(sampler_cfg), "train_config": asdict(cfg),
            "step": int(step), "optimizer_step": int(state.step),
            "rng": {"seed": int(cfg.seed), "next_step": int(step)}}
    if extra_meta:
        meta.update({k: v for k, v in extra_meta.items() if k not in meta})
    write_container(path, meta, arrays)


def load_checkpoint(path) -> dict:
    meta, arrays = read_container(path)
    try:
        model_cfg = ModelConfig(**meta["model_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad field model_config ({exc})") from None
    plain = {k: v for k, v in arrays.items() if "/" not in k}
    params = ModelParams.from_arrays(model_cfg, plain)
    out = {"meta": meta, "model_config": model_cfg, "params": params, "step": int(meta.get("step", 0))}
    if meta.get("kind") != CHECKPOINT_KIND:
        return out
    for key, cls in (("sampler_config", SamplerConfig), ("train_config", TrainConfig)):
        try:
            out[key] = _dataclass_from(cls, meta[key])
        except (KeyError, TypeError, ContractError) as exc:
            raise CheckpointError(f"{path}: bad field {key} ({exc})") from None
    ref = {k[4:]: v for k, v in arrays.items() if k.startswith("ref/")}
    out["reference"] = snapshot_reference(ModelParams.from_arrays(model_cfg, ref, requires_grad=False))
    out["optimizer"] = OptimizerState(
        {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")},
        {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")},
        int(meta["optimizer_step"]))
    return out
