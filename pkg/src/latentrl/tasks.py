"""Synthetic verifiable reasoning tasks over a fixed 64-symbol vocabulary.

Four task kinds are supported:

``add_chain``   sum of ``difficulty`` operands, e.g. ``3+4=`` -> ``7``
``mod_arith``   ``(a*b+c)%7=`` style expressions over one-digit operands
``parity``      XOR of a bitstring, ``1^0^1=`` -> ``0``
``list_max``    maximum of a list of 0-99 integers, ``[5,31]=`` -> ``31``

A query is ``<bos>`` followed by the character tokens of the query string.
The model must answer with ``<ans>`` + answer characters + ``<eos>``; the
reward extracts everything after the last ``<ans>`` and compares exactly.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError
from .rng import stream

SPECIALS = ("<pad>", "<bos>", "<eos>", "<ans>", "<sep>")
DIGITS = tuple("0123456789")
SYMBOLS = tuple("+-*%^=<>,[]()")
LETTERS = tuple("abcdefghijklmnopqrstuvwxyz")
RESERVED = tuple(f"<r{i}>" for i in range(10))

TASK_KINDS = ("add_chain", "mod_arith", "parity", "list_max")
MODULUS = 7

# (min, max) difficulty per kind; difficulty is the operand / element count.
DIFFICULTY_BOUNDS = {
    "add_chain": (1, 8),
    "mod_arith": (2, 4),
    "parity": (1, 16),
    "list_max": (1, 8),
}


class Vocabulary:
    """Ordered symbol table with character-level tokenisation."""

    def __init__(self, symbols: Sequence[str]):
        if len(set(symbols)) != len(symbols):
            raise ContractError("vocabulary symbols must be distinct")
        missing = [s for s in SPECIALS if s not in symbols]
        if missing:
            raise ContractError(f"vocabulary lacks specials {missing}")
        self.symbols = tuple(symbols)
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        self.pad, self.bos, self.eos, self.answer, self.sep = (self._ids[s] for s in SPECIALS)
        multi = sorted((s for s in self.symbols if len(s) > 1), key=len, reverse=True)
        self._pattern = re.compile("|".join([re.escape(s) for s in multi] + ["."]), re.DOTALL)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    def id(self, symbol: str) -> int:
        return self._ids[symbol]

    def tokenize(self, text: str) -> list[int]:
        out = []
        for piece in self._pattern.findall(text):
            if piece not in self._ids:
                raise ContractError(f"symbol {piece!r} is not in the vocabulary")
            out.append(self._ids[piece])
        return out

    def detokenize(self, ids: Iterable[int]) -> str:
        try:
            return "".join(self.symbols[int(i)] for i in ids)
        except IndexError:
            raise ContractError("token id out of range") from None

    @property
    def hash(self) -> str:
        return hashlib.sha256("\x1f".join(self.symbols).encode()).hexdigest()[:16]


DEFAULT_VOCAB = Vocabulary(SPECIALS + DIGITS + SYMBOLS + LETTERS + RESERVED)


@dataclass
class TaskInstance:
    kind: str
    difficulty: int
    query: str
    answer: str
    query_ids: list[int]
    canonical_answer: list[int]
    seed: int | None = None

    def target_ids(self, vocab: Vocabulary = DEFAULT_VOCAB) -> list[int]:
        """The ideal discrete answer: ``<ans> answer <eos>``."""
        return [vocab.answer, *self.canonical_answer, vocab.eos]


def make_instance(kind: str, difficulty: int, query: str, answer: str,
                  seed: int | None = None, vocab: Vocabulary = DEFAULT_VOCAB) -> TaskInstance:
    return TaskInstance(kind, difficulty, query, answer,
                        [vocab.bos, *vocab.tokenize(query)], vocab.tokenize(answer), seed)


def _operand(rng: np.random.Generator, digits: int) -> int:
    lo = 0 if digits == 1 else 10 ** (digits - 1)
    return int(rng.integers(lo, 10 ** digits))


def generate_instance(kind: str, difficulty: int, rng: np.random.Generator, *,
                      digits: int = 1, vocab: Vocabulary = DEFAULT_VOCAB,
                      seed: int | None = None) -> TaskInstance:
    """Draw one well-formed instance; the answer is computed exactly."""
    if kind not in DIFFICULTY_BOUNDS:
        raise ContractError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    lo, hi = DIFFICULTY_BOUNDS[kind]
    if not lo <= difficulty <= hi:
        raise ContractError(f"{kind} difficulty must be in [{lo}, {hi}], got {difficulty}")
    if digits not in (1, 2):
        raise ContractError(f"digits must be 1 or 2, got {digits}")

    if kind == "add_chain":
        xs = [_operand(rng, digits) for _ in range(difficulty)]
        query, value = "+".join(map(str, xs)) + "=", sum(xs)
    elif kind == "mod_arith":
        xs = [int(rng.integers(0, 10)) for _ in range(difficulty)]
        ops = [str(rng.choice(["+", "*"])) for _ in range(difficulty - 1)]
        expr = str(xs[0]) + "".join(op + str(x) for op, x in zip(ops, xs[1:]))
        # Only digits, '+' and '*' appear, so eval is exact integer arithmetic.
        query, value = f"({expr})%{MODULUS}=", eval(expr) % MODULUS  # noqa: S307
    elif kind == "parity":
        bits = [int(b) for b in rng.integers(0, 2, size=difficulty)]
        query, value = "^".join(map(str, bits)) + "=", int(np.bitwise_xor.reduce(bits))
    else:
        xs = [int(x) for x in rng.integers(0, 100, size=difficulty)]
        query, value = "[" + ",".join(map(str, xs)) + "]=", max(xs)
    return make_instance(kind, difficulty, query, str(value), seed, vocab)


def instance_from_seed(kind: str, difficulty: int, seed: int, digits: int = 1,
                       vocab: Vocabulary = DEFAULT_VOCAB) -> TaskInstance:
    return generate_instance(kind, difficulty, np.random.default_rng(seed),
                             digits=digits, vocab=vocab, seed=seed)


def extract_answer(answer_ids: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> list[int] | None:
    """Tokens strictly after the last ``<ans>`` marker, up to ``<eos>``.

    Returns None when no marker is present.
    """
    ids = [int(i) for i in answer_ids]
    marks = [i for i, t in enumerate(ids) if t == vocab.answer]
    if not marks:
        return None
    tail = ids[marks[-1] + 1:]
    if vocab.eos in tail:
        tail = tail[:tail.index(vocab.eos)]
    return tail


def reward(answer_ids: Sequence[int], instance: TaskInstance,
           vocab: Vocabulary = DEFAULT_VOCAB) -> int:
    """Binary outcome reward: 1 iff the extracted answer matches exactly."""
    got = extract_answer(answer_ids, vocab)
    return int(got is not None and got == list(instance.canonical_answer))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureComponent:
    kind: str
    weight: float
    difficulties: tuple[int, ...]
    digits: tuple[int, ...] = (1,)


DEFAULT_MIXTURE = (
    MixtureComponent("add_chain", 0.6, (2, 3, 4), (1, 2)),
    MixtureComponent("mod_arith", 0.2, (2, 3, 4)),
    MixtureComponent("parity", 0.1, tuple(range(1, 9))),
    MixtureComponent("list_max", 0.1, tuple(range(1, 7))),
)


def single_task_mixture(kind: str, difficulty: int, digits: int = 1) -> tuple[MixtureComponent, ...]:
    return (MixtureComponent(kind, 1.0, (difficulty,), (digits,)),)


def mixture_from_dicts(entries: Sequence[dict]) -> tuple[MixtureComponent, ...]:
    out = []
    for e in entries:
        diffs = e.get("difficulties", e.get("difficulty"))
        diffs = tuple(diffs) if isinstance(diffs, (list, tuple)) else (int(diffs),)
        digits = e.get("digits", (1,))
        digits = tuple(digits) if isinstance(digits, (list, tuple)) else (int(digits),)
        out.append(MixtureComponent(e["kind"], float(e.get("weight", 1.0)), diffs, digits))
    return tuple(out)


def make_dataset(mixture: Sequence[MixtureComponent], size: int, seed: int,
                 vocab: Vocabulary = DEFAULT_VOCAB) -> list[TaskInstance]:
    """Reproducible list of instances drawn from a weighted task mixture."""
    if size < 1:
        raise ContractError("dataset size must be >= 1")
    if not mixture:
        raise ContractError("empty task mixture")
    weights = np.array([c.weight for c in mixture], dtype=np.float64)
    if (weights < 0).any() or weights.sum() <= 0:
        raise ContractError("mixture weights must be nonnegative with positive sum")
    weights = weights / weights.sum()
    picker = stream(seed, 0)
    out = []
    for i in range(size):
        comp = mixture[int(picker.choice(len(mixture), p=weights))]
        difficulty = int(picker.choice(comp.difficulties))
        digits = int(picker.choice(comp.digits))
        inst_seed = int(np.random.SeedSequence([seed, 1, i]).generate_state(1)[0])
        out.append(instance_from_seed(comp.kind, difficulty, inst_seed, digits, vocab))
    return out


DATASET_FORMAT = "latentrl-dataset"
DATASET_VERSION = 1


def save_dataset(instances: Sequence[TaskInstance], path, vocab: Vocabulary = DEFAULT_VOCAB) -> None:
    """Write a JSON-lines file: one header line, then one record per instance."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                             "vocab_hash": vocab.hash, "count": len(instances)}) + "\n")
        for inst in instances:
            fh.write(json.dumps({"kind": inst.kind, "difficulty": inst.difficulty,
                                 "query": inst.query, "answer": inst.answer,
                                 "seed": inst.seed}) + "\n")


def load_dataset(path, vocab: Vocabulary = DEFAULT_VOCAB) -> list[TaskInstance]:
    path = Path(path)
    with path.open() as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ContractError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise ContractError(f"{path}: not a dataset file (format={header.get('format')!r})")
    if header.get("vocab_hash") != vocab.hash:
        raise ContractError(f"{path}: vocabulary hash {header.get('vocab_hash')} "
                            f"does not match current vocabulary {vocab.hash}")
    out = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        out.append(make_instance(rec["kind"], int(rec["difficulty"]), rec["query"],
                                 rec["answer"], rec.get("seed"), vocab))
    return out
