"""Evaluation harness: pass@1, pass@k, entropy, token counts, difficulty bins.

pass@1 is the mean correctness over all ``k`` samples of every problem, not
one draw; pass@j for ``j <= k`` is the fraction of problems solved by at least
one of their first ``j`` samples. Both come from the same sample matrix, so
the curve is monotone by construction, and :class:`EvalReport` asserts it.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .model import ModelParams
from .rng import EVAL, stream
from .rollout import Trajectory, _generate, distinct_count
from .sampler import SamplerConfig, entropy
from .tasks import DEFAULT_VOCAB, TaskInstance, Vocabulary, reward

BIN_EDGES = (0.0, 0.2, 0.5, 0.8, 1.0)
EVAL_TEMPERATURE = 0.6


def eval_sampler(base: SamplerConfig | None = None) -> SamplerConfig:
    """Sampler at the evaluation temperature, other settings unchanged."""
    return replace(base or SamplerConfig(), temperature=EVAL_TEMPERATURE)


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

def _matrix(correct) -> np.ndarray:
    c = np.asarray(correct, dtype=bool)
    if c.ndim != 2 or c.shape[1] < 1:
        raise ContractError(f"correctness matrix must be [problems, k>=1], got {c.shape}")
    return c


def pass_at_1(correct) -> float:
    c = _matrix(correct)
    return float(c.mean()) if c.size else 0.0


def pass_at_k(correct, k: int | None = None) -> float:
    """Fraction of problems with a correct sample among the first ``k``."""
    c = _matrix(correct)
    k = c.shape[1] if k is None else k
    if not 1 <= k <= c.shape[1]:
        raise ContractError(f"k must be in [1, {c.shape[1]}], got {k}")
    return float(c[:, :k].any(axis=1).mean()) if c.shape[0] else 0.0


def pass_curve(correct) -> dict[int, float]:
    c = _matrix(correct)
    if not c.shape[0]:
        return {j: 0.0 for j in range(1, c.shape[1] + 1)}
    solved = np.logical_or.accumulate(c, axis=1).mean(axis=0)
    return {j + 1: float(v) for j, v in enumerate(solved)}


@dataclass(frozen=True)
class DifficultyBins:
    edges: tuple[float, ...] = BIN_EDGES
    counts: tuple[int, ...] = ()

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.size < 2 or np.any(np.diff(e) <= 0):
            raise ContractError(f"bin edges must be strictly increasing, got {self.edges}")
        if self.counts and len(self.counts) != e.size - 1:
            raise ContractError("one count per bin is required")

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def labels(self) -> list[str]:
        e = self.edges
        return [f"[{e[i]:.1f},{e[i + 1]:.1f}{']' if i == self.n_bins - 1 else ')'}"
                for i in range(self.n_bins)]

    def index(self, accuracy: float) -> int:
        """Left-closed bins; the last bin also includes its right edge."""
        e = self.edges
        if not e[0] <= accuracy <= e[-1]:
            raise ContractError(f"accuracy {accuracy} outside [{e[0]}, {e[-1]}]")
        i = int(np.searchsorted(e, accuracy, side="right")) - 1
        return min(i, self.n_bins - 1)

    def histogram(self, accuracies: Sequence[float]) -> "DifficultyBins":
        counts = [0] * self.n_bins
        for a in accuracies:
            counts[self.index(float(a))] += 1
        return DifficultyBins(self.edges, tuple(counts))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class ProblemResult:
    problem_id: str
    kind: str
    difficulty: int
    query: str
    correct: list[bool]
    distinct: int
    entropy_mean: float
    tokens_mean: float

    @property
    def base_accuracy(self) -> float:
        return float(np.mean(self.correct))


@dataclass
class Summary:
    n_problems: int
    pass_at_1: float
    pass_at_k: float
    mean_at_k: float
    entropy_mean: float
    tokens_mean: float


def _summarise(problems: Sequence[ProblemResult], k: int) -> Summary:
    if not problems:
        return Summary(0, 0.0, 0.0, 0.0, 0.0, 0.0)
    c = np.array([p.correct for p in problems], dtype=bool)
    p1 = pass_at_1(c)
    return Summary(len(problems), p1, pass_at_k(c, k), p1,
                   float(np.mean([p.entropy_mean for p in problems])),
                   float(np.mean([p.tokens_mean for p in problems])))


@dataclass
class EvalReport:
    k: int
    problems: list[ProblemResult]
    aggregate: Summary = field(init=False)
    per_kind: dict[str, Summary] = field(init=False)
    curve: dict[int, float] = field(init=False)
    bins: DifficultyBins = field(init=False)

    def __post_init__(self):
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if any(len(p.correct) != self.k for p in self.problems):
            raise ContractError("every problem needs exactly k samples")
        self.aggregate = _summarise(self.problems, self.k)
        kinds = sorted({p.kind for p in self.problems})
        self.per_kind = {kd: _summarise([p for p in self.problems if p.kind == kd], self.k)
                         for kd in kinds}
        mat = np.array([p.correct for p in self.problems], dtype=bool).reshape(-1, self.k)
        self.curve = pass_curve(mat)
        self.bins = DifficultyBins().histogram([p.base_accuracy for p in self.problems])
        self.check()

    # Structural consistency, asserted on every report.
    def check(self) -> None:
        vals = [self.curve[j] for j in sorted(self.curve)]
        if any(b < a - 1e-15 for a, b in zip(vals, vals[1:])):
            raise ContractError("pass@k is not monotone in k")
        if self.aggregate.pass_at_k < self.aggregate.pass_at_1 - 1e-15:
            raise ContractError("pass@k < pass@1")
        if sum(self.bins.counts) != len(self.problems):
            raise ContractError("bin counts do not sum to the problem count")

    @property
    def pass_at_1(self) -> float:
        return self.aggregate.pass_at_1

    @property
    def pass_at_k(self) -> float:
        return self.aggregate.pass_at_k

    def problem_keys(self) -> list[tuple[str, str]]:
        return [(p.problem_id, p.query) for p in self.problems]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "aggregate": asdict(self.aggregate),
            "per_kind": {kd: asdict(s) for kd, s in sorted(self.per_kind.items())},
            "pass_curve": {str(j): v for j, v in sorted(self.curve.items())},
            "bins": {"edges": list(self.bins.edges), "counts": list(self.bins.counts),
                     "labels": self.bins.labels()},
            "problems": [{"problem_id": p.problem_id, "kind": p.kind, "difficulty": p.difficulty,
                          "query": p.query, "base_accuracy": p.base_accuracy,
                          "correct": [int(c) for c in p.correct], "distinct": p.distinct,
                          "entropy_mean": p.entropy_mean, "tokens_mean": p.tokens_mean}
                         for p in self.problems],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        probs = [ProblemResult(p["problem_id"], p["kind"], int(p["difficulty"]), p["query"],
                               [bool(c) for c in p["correct"]], int(p["distinct"]),
                               float(p["entropy_mean"]), float(p["tokens_mean"]))
                 for p in doc["problems"]]
        return cls(int(doc["k"]), probs)

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            write_problem_csv(self, csv_path)


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_problem_csv(report: EvalReport, path) -> None:
    labels = report.bins.labels()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["problem_id", "kind", "difficulty", "base_accuracy", "bin"])
        for p in sorted(report.problems, key=lambda p: p.problem_id):
            w.writerow([p.problem_id, p.kind, p.difficulty, f"{p.base_accuracy:.6f}",
                        labels[report.bins.index(p.base_accuracy)]])


# ---------------------------------------------------------------------------
# running rollouts
# ---------------------------------------------------------------------------

def sample_problems(params: ModelParams, dataset: Sequence[TaskInstance], k: int,
                    sampler_cfg: SamplerConfig, n_latent: int, max_answer_len: int, *,
                    seed: int = 0, vocab: Vocabulary = DEFAULT_VOCAB) -> list[list[Trajectory]]:
    """``k`` scored rollouts for each problem, keyed by ``(seed, problem, sample)``."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    by_len: dict[int, list[int]] = {}
    for p, inst in enumerate(dataset):
        by_len.setdefault(len(inst.query_ids), []).append(p)
    out: list[list[Trajectory]] = [[] for _ in dataset]
    for _, members in sorted(by_len.items()):
        queries, rngs = [], []
        for p in members:
            queries += [dataset[p].query_ids] * k
            rngs += [stream(seed, EVAL, p, i) for i in range(k)]
        trajs = _generate(params, queries, n_latent, sampler_cfg, max_answer_len, rngs, vocab.eos)
        for j, p in enumerate(members):
            mine = trajs[j * k:(j + 1) * k]
            for t in mine:
                t.reward = float(reward(t.answer_ids, dataset[p], vocab))
            out[p] = mine
    return out


def _traj_entropy(t: Trajectory) -> float:
    return float(entropy(t.step_probs).mean()) if t.total_length else 0.0


def evaluate(params: ModelParams, dataset: Sequence[TaskInstance], k: int = 32,
             sampler_cfg: SamplerConfig | None = None, *, n_latent: int = 8,
             max_answer_len: int = 6, seed: int = 0,
             vocab: Vocabulary = DEFAULT_VOCAB) -> EvalReport:
    """Score ``k`` independent rollouts per problem.

    ``sampler_cfg`` defaults to :func:`eval_sampler`; pass one explicitly to
    evaluate at another temperature or noise kind.
    """
    scfg = sampler_cfg or eval_sampler()
    samples = sample_problems(params, dataset, k, scfg, n_latent, max_answer_len,
                              seed=seed, vocab=vocab)
    problems = []
    for p, (inst, trajs) in enumerate(zip(dataset, samples)):
        problems.append(ProblemResult(
            f"{p:05d}", inst.kind, inst.difficulty, inst.query,
            [t.reward == 1.0 for t in trajs], distinct_count(trajs),
            float(np.mean([_traj_entropy(t) for t in trajs])),
            float(np.mean([t.n_answer for t in trajs]))))
    return EvalReport(k, problems)


# ---------------------------------------------------------------------------
# comparisons and profiles
# ---------------------------------------------------------------------------

@dataclass
class DifficultyShift:
    before: DifficultyBins
    after: DifficultyBins

    @property
    def delta(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.before.counts, self.after.counts))

    def rows(self) -> list[dict]:
        return [{"bin": lab, "before": a, "after": b, "delta": b - a}
                for lab, a, b in zip(self.before.labels(), self.before.counts, self.after.counts)]


def difficulty_shift(report_a: EvalReport, report_b: EvalReport) -> DifficultyShift:
    """Paired base-accuracy histograms of two reports on the same problems."""
    if report_a.problem_keys() != report_b.problem_keys():
        raise ContractError("difficulty_shift needs identical problem sets")
    return DifficultyShift(report_a.bins, report_b.bins)


def bins_from_accuracies(accuracies: Sequence[float]) -> DifficultyBins:
    return DifficultyBins().histogram(accuracies)


@dataclass
class EntropyProfile:
    latent: np.ndarray    # mean entropy at each latent step
    discrete: np.ndarray  # mean entropy at each answer step, over rollouts reaching it
    discrete_counts: np.ndarray

    @property
    def latent_mean(self) -> float:
        return float(self.latent.mean()) if self.latent.size else 0.0

    @property
    def discrete_mean(self) -> float:
        if not self.discrete_counts.sum():
            return 0.0
        return float((self.discrete * self.discrete_counts).sum() / self.discrete_counts.sum())


def entropy_profile_from(trajectories: Sequence[Trajectory], max_answer_len: int) -> EntropyProfile:
    if not trajectories:
        raise ContractError("no trajectories")
    nl = trajectories[0].n_latent
    lat = np.zeros(nl)
    dis = np.zeros(max_answer_len)
    cnt = np.zeros(max_answer_len)
    for t in trajectories:
        h = entropy(t.step_probs)
        lat += h[:nl]
        na = t.n_answer
        dis[:na] += h[nl:nl + na]
        cnt[:na] += 1
    lat /= len(trajectories)
    dis = np.divide(dis, cnt, out=np.zeros_like(dis), where=cnt > 0)
    return EntropyProfile(lat, dis, cnt.astype(np.int64))


def rollout_entropy_profile(params: ModelParams, dataset_sample: Sequence[TaskInstance],
                            sampler_cfg: SamplerConfig, *, n_latent: int = 8,
                            max_answer_len: int = 6, samples: int = 1, seed: int = 0,
                            vocab: Vocabulary = DEFAULT_VOCAB) -> EntropyProfile:
    """Per-step Shannon entropy of ``pi``, split into latent and answer phases."""
    per_problem = sample_problems(params, dataset_sample, samples, sampler_cfg, n_latent,
                                  max_answer_len, seed=seed, vocab=vocab)
    return entropy_profile_from([t for ts in per_problem for t in ts], max_answer_len)


def distinct_counts(params: ModelParams, dataset: Sequence[TaskInstance], n: int,
                    sampler_cfg: SamplerConfig, *, n_latent: int = 8, max_answer_len: int = 6,
                    seed: int = 0, vocab: Vocabulary = DEFAULT_VOCAB) -> np.ndarray:
    """Number of distinct generated trajectories among ``n`` per problem."""
    per_problem = sample_problems(params, dataset, n, sampler_cfg, n_latent, max_answer_len,
                                  seed=seed, vocab=vocab)
    return np.array([distinct_count(ts) for ts in per_problem], dtype=np.int64)
