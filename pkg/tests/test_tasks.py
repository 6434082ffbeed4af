import json
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentrl.errors import ContractError
from latentrl.tasks import (DEFAULT_MIXTURE, DEFAULT_VOCAB, DIFFICULTY_BOUNDS, TASK_KINDS, Vocabulary,
                            extract_answer, generate_instance, instance_from_seed, load_dataset,
                            make_dataset, make_instance, reward, save_dataset, single_task_mixture)

V = DEFAULT_VOCAB


def independent_answer(kind: str, query: str) -> int:
    """Recompute the answer from the query text without the generator's code path."""
    body = query.rstrip("=")
    if kind == "add_chain":
        return sum(int(x) for x in body.split("+"))
    if kind == "mod_arith":
        inner = re.fullmatch(r"\((.*)\)%(\d+)", body)
        terms = [int(np.prod([int(f) for f in t.split("*")])) for t in inner.group(1).split("+")]
        return sum(terms) % int(inner.group(2))
    if kind == "parity":
        return sum(int(b) for b in body.split("^")) % 2
    return max(int(x) for x in body.strip("[]").split(","))


class TestVocabulary:
    def test_size_and_specials(self):
        assert len(V) == 64
        assert [V.pad, V.bos, V.eos, V.answer, V.sep] == [0, 1, 2, 3, 4]

    def test_duplicate_symbols_rejected(self):
        with pytest.raises(ContractError):
            Vocabulary(["<pad>", "<bos>", "<eos>", "<ans>", "<sep>", "a", "a"])

    def test_missing_specials_rejected(self):
        with pytest.raises(ContractError):
            Vocabulary(["<pad>", "a"])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(V.symbols), max_size=20))
    def test_round_trip(self, pieces):
        s = "".join(pieces)
        assert V.detokenize(V.tokenize(s)) == s

    def test_unknown_symbol(self):
        with pytest.raises(ContractError):
            V.tokenize("3&4")

    def test_multi_char_symbols_win(self):
        assert V.tokenize("<ans>7") == [V.answer, V.id("7")]


class TestGenerateInstance:
    def test_add_chain_seeded(self):
        inst = instance_from_seed("add_chain", 2, seed=0)
        a, b = (int(x) for x in inst.query.rstrip("=").split("+"))
        assert re.fullmatch(r"\d\+\d=", inst.query)
        assert inst.answer == str(a + b)
        assert inst.query_ids == [V.bos, *V.tokenize(inst.query)]

    def test_single_bit_parity(self):
        for seed in range(20):
            inst = instance_from_seed("parity", 1, seed)
            assert inst.answer == inst.query[0]

    def test_singleton_list(self):
        for seed in range(20):
            inst = instance_from_seed("list_max", 1, seed)
            assert inst.answer == inst.query.strip("[]=")

    def test_handmade_instances(self):
        assert make_instance("parity", 1, "1=", "1").canonical_answer == [V.id("1")]
        assert make_instance("list_max", 1, "[5]=", "5").canonical_answer == [V.id("5")]

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            generate_instance("sorting", 2, np.random.default_rng(0))

    @pytest.mark.parametrize("kind", TASK_KINDS)
    def test_difficulty_bounds(self, kind):
        lo, hi = DIFFICULTY_BOUNDS[kind]
        with pytest.raises(ContractError):
            generate_instance(kind, hi + 1, np.random.default_rng(0))
        with pytest.raises(ContractError):
            generate_instance(kind, lo - 1, np.random.default_rng(0))

    @pytest.mark.parametrize("kind", TASK_KINDS)
    def test_answers_match_independent_arithmetic(self, kind):
        lo, hi = DIFFICULTY_BOUNDS[kind]
        for seed in range(200):
            d = lo + seed % (hi - lo + 1)
            inst = instance_from_seed(kind, d, seed, digits=1 + seed % 2)
            assert int(inst.answer) == independent_answer(kind, inst.query)


class TestReward:
    inst = make_instance("add_chain", 2, "5+7=", "12")

    def test_exact_match(self):
        assert reward([V.answer, V.id("1"), V.id("2"), V.eos], self.inst) == 1

    def test_missing_marker(self):
        assert reward([V.id("1"), V.id("2"), V.eos], self.inst) == 0

    def test_stray_separator(self):
        assert reward([V.answer, V.id("1"), V.sep, V.id("2"), V.eos], self.inst) == 0

    def test_last_marker_wins(self):
        assert reward([V.answer, V.id("3"), V.answer, V.id("1"), V.id("2")], self.inst) == 1
        assert extract_answer([V.answer, V.id("3"), V.eos, V.id("9")]) == [V.id("3")]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 63), max_size=12))
    def test_total_and_binary(self, ids):
        assert reward(ids, self.inst) in (0, 1)

    def test_verifier_sound_on_1000_add_chain(self):
        data = make_dataset(single_task_mixture("add_chain", 3), 1000, seed=5)
        assert all(reward(i.target_ids(), i) == 1 for i in data)


class TestDataset:
    def test_singleton(self):
        assert len(make_dataset(DEFAULT_MIXTURE, 1, 0)) == 1

    def test_reproducible(self):
        a, b = make_dataset(DEFAULT_MIXTURE, 50, 3), make_dataset(DEFAULT_MIXTURE, 50, 3)
        assert [(i.query, i.answer) for i in a] == [(i.query, i.answer) for i in b]

    def test_mixture_proportions(self):
        data = make_dataset(DEFAULT_MIXTURE, 4000, 1)
        share = {k: np.mean([i.kind == k for i in data]) for k in TASK_KINDS}
        for comp in DEFAULT_MIXTURE:
            assert abs(share[comp.kind] - comp.weight) < 0.03

    def test_every_generated_instance_verifies(self):
        assert all(reward(i.target_ids(), i) == 1 for i in make_dataset(DEFAULT_MIXTURE, 500, 2))

    @pytest.mark.parametrize("kind,difficulty,space", [
        ("add_chain", 2, 19), ("add_chain", 3, 28), ("mod_arith", 3, 7),
        ("parity", 4, 2), ("list_max", 3, 100)])
    def test_answer_space_coverage(self, kind, difficulty, space):
        answers = {i.answer for i in make_dataset(single_task_mixture(kind, difficulty), 1000, 9)}
        assert len(answers) >= min(10, space)

    def test_file_round_trip(self, tmp_path):
        data = make_dataset(DEFAULT_MIXTURE, 20, 4)
        save_dataset(data, tmp_path / "d.jsonl")
        back = load_dataset(tmp_path / "d.jsonl")
        assert [(i.kind, i.difficulty, i.query, i.answer, i.query_ids) for i in back] == \
               [(i.kind, i.difficulty, i.query, i.answer, i.query_ids) for i in data]
        header = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
        assert header["vocab_hash"] == V.hash and header["count"] == 20

    def test_vocabulary_change_is_loud(self, tmp_path):
        save_dataset(make_dataset(DEFAULT_MIXTURE, 3, 4), tmp_path / "d.jsonl")
        other = Vocabulary(list(V.symbols[:-1]) + ["<zz>"])
        with pytest.raises(ContractError, match="hash"):
            load_dataset(tmp_path / "d.jsonl", other)
