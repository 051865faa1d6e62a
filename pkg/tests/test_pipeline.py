import dataclasses

import numpy as np
import pytest

from steppref.corpus import (
    GRAN_FIRST_STEP,
    GRAN_FULL,
    GRAN_REJECT_ALL,
    PairRecord,
    Problem,
    Rationale,
    RationaleRecord,
)
from steppref.extraction import extract_answer, style_for
from steppref.genclient import ProviderHandle, SamplingConfig
from steppref.pipeline import (
    ExplorationError,
    ExploreConfig,
    PairingConfig,
    build_granular_pairs,
    build_pairs,
    build_rft,
    explore_first_pit,
    sweep_exploration_size,
    token_edit_distance,
)
from steppref.synthworld import SynthConfig, gen_problem, oracle_first_error, simulate_solution

from conftest import correct_rationale, trace_with_error
from test_kernels import lev_oracle


def _r(steps):
    return Rationale(steps=tuple(steps))


class TestTokenEditDistance:
    def test_identical_zero(self):
        a = _r(["a b c", "d e"])
        assert token_edit_distance(a, a) == 0

    def test_single_substitution(self):
        assert token_edit_distance(_r(["a b"]), _r(["a c"])) == 1

    def test_symmetric(self):
        a, b = _r(["x y z"]), _r(["x q"])
        assert token_edit_distance(a, b) == token_edit_distance(b, a)

    def test_matches_dp_oracle(self):
        rng = np.random.default_rng(0)
        words = [f"w{i}" for i in range(6)]
        for _ in range(60):
            ta = [words[int(i)] for i in rng.integers(0, 6, size=rng.integers(0, 21))]
            tb = [words[int(i)] for i in rng.integers(0, 6, size=rng.integers(0, 21))]
            a, b = _r([" ".join(ta) or "pad"]), _r([" ".join(tb) or "pad"])
            want = lev_oracle(a.steps[0].split(), b.steps[0].split())
            assert token_edit_distance(a, b) == want


def _fixture_problem(pid="p1"):
    return Problem(id=pid, question=f"question {pid}", gold_answer="7")


def _gen_records(pid, rationales):
    return [RationaleRecord(pid, r) for r in rationales]


def _correct(steps):
    return Rationale(steps=tuple(steps), conclusion="The answer is 7.",
                     label="correct", extracted_answer="7")


def _incorrect(steps):
    return Rationale(steps=tuple(steps), conclusion="The answer is 9.",
                     label="incorrect", extracted_answer="9")


class TestBuildPairs:
    def test_max_distance_partner_chosen(self):
        # chosen 'a b c'; inc1 differs by 1 token, inc2 by 4 tokens (hand DP).
        problem = _fixture_problem()
        chosen = _correct(["a b c"])
        inc1 = _incorrect(["a b d"])
        inc2 = _incorrect(["w x y z"])
        pairs = build_pairs([problem], _gen_records("p1", [chosen]),
                            _gen_records("p1", [chosen, inc1, inc2]),
                            PairingConfig())
        assert len(pairs) == 1
        assert pairs[0].rejected.steps == inc2.steps
        assert pairs[0].granularity == "outcome"
        assert pairs[0].pit_index is None
        assert pairs[0].input == problem.question

    def test_tie_breaks_to_lowest_index(self):
        problem = _fixture_problem()
        chosen = _correct(["a b"])
        inc1 = _incorrect(["c d"])
        inc2 = _incorrect(["e f"])  # same distance 2
        pairs = build_pairs([problem], _gen_records("p1", [chosen]),
                            _gen_records("p1", [inc1, inc2]), PairingConfig())
        assert pairs[0].rejected.steps == inc1.steps

    def test_cap_at_max_pairs(self):
        problem = _fixture_problem()
        corrects = [_correct([f"c{i} x"]) for i in range(10)]
        incorrects = [_incorrect([f"i{i} y"]) for i in range(10)]
        pairs = build_pairs([problem], _gen_records("p1", corrects),
                            _gen_records("p1", incorrects),
                            PairingConfig(max_pairs_per_problem=8))
        assert len(pairs) == 8

    def test_no_incorrect_no_pairs(self):
        problem = _fixture_problem()
        pairs = build_pairs([problem], _gen_records("p1", [_correct(["a"])]),
                            _gen_records("p1", [_correct(["a"])]), PairingConfig())
        assert pairs == []

    def test_rejected_loses_conclusion_and_no_reuse(self):
        problem = _fixture_problem()
        corrects = [_correct([f"c{i} q r"]) for i in range(3)]
        incorrects = [_incorrect([f"i{i} s t"]) for i in range(3)]
        pairs = build_pairs([problem], _gen_records("p1", corrects),
                            _gen_records("p1", incorrects), PairingConfig())
        assert len(pairs) == 3
        assert all(p.rejected.conclusion is None for p in pairs)
        used = [p.rejected.steps for p in pairs]
        assert len(set(used)) == len(used)

    def test_greedy_agrees_with_bruteforce(self):
        rng = np.random.default_rng(5)
        words = [f"t{i}" for i in range(8)]
        for trial in range(30):
            nc, ni = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            corrects = [
                _correct([" ".join(words[int(i)] for i in rng.integers(0, 8, size=rng.integers(1, 8)))])
                for _ in range(nc)
            ]
            incorrects = [
                _incorrect([" ".join(words[int(i)] for i in rng.integers(0, 8, size=rng.integers(1, 8)))])
                for _ in range(ni)
            ]
            problem = _fixture_problem()
            pairs = build_pairs([problem], _gen_records("p1", corrects),
                                _gen_records("p1", incorrects), PairingConfig())
            # independent greedy replay on the oracle distance
            used = set()
            expect = []
            for c in corrects:
                if len(expect) == 8:
                    break
                best, best_d = None, -1
                for j, inc in enumerate(incorrects):
                    if j in used:
                        continue
                    d = lev_oracle(" ".join(c.steps).split(), " ".join(inc.steps).split())
                    if d > best_d:
                        best, best_d = j, d
                if best is None:
                    break
                used.add(best)
                expect.append((c.steps, incorrects[best].steps))
            got = [(p.chosen.steps, p.rejected.steps) for p in pairs]
            assert got == expect

    def test_unknown_problem_id_rejected(self):
        with pytest.raises(ValueError):
            build_pairs([], _gen_records("ghost", [_correct(["a"])]), [], PairingConfig())


class TestBuildRft:
    def test_eps0_dedups_to_single_correct(self):
        cfg = SynthConfig(t=3, epsilon=0.0, seed=1)
        provider = ProviderHandle.synthetic(cfg)
        problems = [gen_problem(cfg, 0)]
        out = build_rft(problems, provider, SamplingConfig(n=5, temperature=0.7, seed=2))
        assert len(out.gen) == 1
        assert len(out.rft) == 1
        assert out.rft[0].rationale.extracted_answer == problems[0].gold_answer
        assert out.skipped == []

    def test_eps1_gives_empty_rft_and_skip_entry(self):
        cfg = SynthConfig(t=3, epsilon=1.0, seed=1)
        provider = ProviderHandle.synthetic(cfg)
        problems = [gen_problem(cfg, 0)]
        out = build_rft(problems, provider, SamplingConfig(n=5, temperature=0.7, seed=2))
        assert out.rft == []
        assert len(out.skipped) == 1
        assert out.skipped[0].problem_id == problems[0].id
        assert out.skipped[0].reason == "no-correct-samples"

    def test_labels_match_extraction(self):
        cfg = SynthConfig(t=4, epsilon=0.4, seed=3)
        provider = ProviderHandle.synthetic(cfg)
        problems = [gen_problem(cfg, i) for i in range(3)]
        out = build_rft(problems, provider, SamplingConfig(n=20, temperature=0.7, seed=5))
        by_id = {p.id: p for p in problems}
        for rec in out.gen:
            gold = by_id[rec.problem_id].gold_answer
            want = "correct" if rec.rationale.extracted_answer == gold else "incorrect"
            assert rec.rationale.label == want
        rft_keys = {(r.problem_id, r.rationale.steps) for r in out.rft}
        gen_correct = {(r.problem_id, r.rationale.steps)
                       for r in out.gen if r.rationale.label == "correct"}
        assert rft_keys == gen_correct

    def test_provider_error_reported_per_problem(self, stub_server):
        def respond(payload):
            if "FAIL" in payload["prompt"]:
                return 500, {}
            return 200, {"choices": [{"text": "steps here\nThe answer is 7."}]
                         * int(payload["n"])}

        server = stub_server(respond)
        provider = ProviderHandle.http(server.url, max_in_flight=2)
        problems = [
            Problem(id="ok", question="fine question", gold_answer="7"),
            Problem(id="bad", question="FAIL question", gold_answer="7"),
        ]
        out = build_rft(problems, provider, SamplingConfig(n=2))
        assert [r.problem_id for r in out.rft] == ["ok"]
        assert len(out.skipped) == 1
        assert out.skipped[0].problem_id == "bad"
        assert "provider-error" in out.skipped[0].reason


def _explorer(eps, seed=0, t=5):
    return ProviderHandle.synthetic(SynthConfig(t=t, epsilon=eps, seed=seed))


class TestExploreFirstPit:
    def test_eps0_explorer_finds_exact_pit(self):
        cfg = SynthConfig(t=5, epsilon=0.3, seed=4)
        p = gen_problem(cfg, 0)
        for e in (1, 2, 3, 4, 5):
            rejected = trace_with_error(p, cfg, e)
            pit = explore_first_pit(p, rejected, _explorer(0.0), ExploreConfig(k=3, seed=1))
            assert pit.pit_index == e
            tallies = pit.per_step_success
            assert len(tallies) == e
            assert tallies[-1] == (0, 3)
            assert all(s >= 1 for s, _ in tallies[:-1])
            if e == 1:
                assert pit.rescue is None
            else:
                assert pit.rescue is not None
                prefix = "\n".join(rejected.steps[: e - 1])
                assert extract_answer(prefix + "\n" + pit.rescue,
                                      style_for(p.style)) == p.gold_answer

    def test_never_late(self):
        cfg = SynthConfig(t=5, epsilon=0.25, seed=5)
        found = 0
        for idx in range(40):
            p = gen_problem(cfg, idx)
            for draw in range(6):
                tr = simulate_solution(p, cfg, draw_seed=draw)
                if tr.true_first_error is None:
                    continue
                found += 1
                pit = explore_first_pit(p, tr.rationale, _explorer(0.25, seed=idx),
                                        ExploreConfig(k=3, seed=draw))
                assert pit.pit_index is not None
                assert pit.pit_index <= tr.true_first_error
        assert found > 50

    def test_requires_incorrect_label(self):
        cfg = SynthConfig(t=3, epsilon=0.0, seed=6)
        p = gen_problem(cfg, 0)
        with pytest.raises(ValueError):
            explore_first_pit(p, correct_rationale(p, cfg), _explorer(0.0),
                              ExploreConfig())

    def test_provider_failure_carries_partial_tallies(self, stub_server):
        cfg = SynthConfig(t=4, epsilon=0.3, seed=7)
        p = gen_problem(cfg, 0)
        rejected = trace_with_error(p, cfg, 3)

        def respond(payload):
            depth = payload["prompt"].count("\n")
            if depth > 1:
                return 500, {}
            text = f"The answer is {p.gold_answer}."
            return 200, {"choices": [{"text": text}] * int(payload["n"])}

        server = stub_server(respond)
        explorer = ProviderHandle.http(server.url)
        with pytest.raises(ExplorationError) as err:
            explore_first_pit(p, rejected, explorer, ExploreConfig(k=2, seed=0))
        assert err.value.partial == [(2, 2)]


class TestBuildGranularPairs:
    def _setup(self, e, t=5, seed=8):
        cfg = SynthConfig(t=t, epsilon=0.3, seed=seed)
        p = gen_problem(cfg, 0)
        chosen = correct_rationale(p, cfg)
        rejected = trace_with_error(p, cfg, e)
        record = PairRecord(p.id, p.question, chosen, rejected, "outcome", None)
        return cfg, p, record

    def test_variant_full_mid_pit(self):
        cfg, p, record = self._setup(e=3)
        out = build_granular_pairs([p], [record], _explorer(0.0),
                                   ExploreConfig(k=3, seed=2), "full")
        assert out.dropped == [] and out.failures == []
        (rec,) = out.records
        assert rec.granularity == GRAN_FULL
        assert rec.pit_index == 3
        assert rec.input == p.question + "\n" + "\n".join(record.rejected.steps[:2])
        assert rec.rejected.steps == (record.rejected.steps[2],)
        assert rec.rejected.conclusion is None
        assert rec.chosen.label == "correct"
        assert extract_answer(rec.chosen.text(), style_for(p.style)) == p.gold_answer

    def test_variant_reject_all(self):
        cfg, p, record = self._setup(e=3)
        out = build_granular_pairs([p], [record], _explorer(0.0),
                                   ExploreConfig(k=3, seed=2), "reject-all")
        (rec,) = out.records
        assert rec.granularity == GRAN_REJECT_ALL
        assert rec.rejected.steps == record.rejected.steps[2:]
        assert rec.rejected.conclusion is None

    def test_variant_first_step(self):
        cfg, p, record = self._setup(e=3)
        out = build_granular_pairs([p], [record], _explorer(0.0),
                                   ExploreConfig(k=3, seed=2), "first-step")
        (rec,) = out.records
        assert rec.granularity == GRAN_FIRST_STEP
        assert len(rec.chosen.steps) == 1
        assert rec.chosen.conclusion is None
        # the single kept step continues the prefix correctly
        full = build_granular_pairs([p], [record], _explorer(0.0),
                                    ExploreConfig(k=3, seed=2), "full").records[0]
        assert rec.chosen.steps[0] == full.chosen.steps[0]

    def test_pit_at_one_uses_original_chosen(self):
        cfg, p, record = self._setup(e=1)
        out = build_granular_pairs([p], [record], _explorer(0.0),
                                   ExploreConfig(k=3, seed=2), "full")
        (rec,) = out.records
        assert rec.pit_index == 1
        assert rec.input == p.question
        assert rec.chosen == record.chosen
        assert rec.rejected.steps == (record.rejected.steps[0],)

    def test_no_pit_record_dropped(self, stub_server):
        cfg, p, record = self._setup(e=2)

        def respond(payload):
            text = f"The answer is {p.gold_answer}."
            return 200, {"choices": [{"text": text}] * int(payload["n"])}

        server = stub_server(respond)
        out = build_granular_pairs([p], [record], ProviderHandle.http(server.url),
                                   ExploreConfig(k=2, seed=0), "full")
        assert out.records == []
        assert len(out.dropped) == 1
        assert out.dropped[0].reason == "no-pit"

    def test_exploration_failures_collected(self, stub_server):
        cfg, p, record = self._setup(e=3)
        server = stub_server(lambda payload: (500, {}))
        out = build_granular_pairs([p], [record], ProviderHandle.http(server.url),
                                   ExploreConfig(k=2, seed=0), "full")
        assert out.records == []
        assert len(out.failures) == 1

    def test_reward_design_correspondence(self):
        # One rejected step, chosen ends at gold, shared prefix lives in the
        # input of both sides.
        cfg = SynthConfig(t=5, epsilon=0.3, seed=11)
        problems, records = [], []
        for idx in range(12):
            p = gen_problem(cfg, idx)
            for draw in range(8):
                tr = simulate_solution(p, cfg, draw_seed=draw)
                if tr.true_first_error is not None:
                    problems.append(p)
                    records.append(PairRecord(
                        p.id, p.question, correct_rationale(p, cfg),
                        dataclasses.replace(tr.rationale, conclusion=None),
                        "outcome", None))
                    break
        out = build_granular_pairs(problems, records, _explorer(0.1, seed=1),
                                   ExploreConfig(k=4, seed=3), "full")
        assert out.records
        by_id = {p.id: p for p in problems}
        for rec in out.records:
            p = by_id[rec.problem_id]
            assert len(rec.rejected.steps) == 1
            assert rec.input.startswith(p.question)
            prefix_steps = rec.input[len(p.question):].strip("\n")
            n_prefix = len(prefix_steps.splitlines()) if prefix_steps else 0
            assert n_prefix == rec.pit_index - 1
            assert rec.rejected.steps[0] not in rec.input.splitlines()
            if rec.pit_index > 1:
                assert extract_answer(rec.chosen.text(), style_for(p.style)) == p.gold_answer

    def test_requires_outcome_granularity(self):
        cfg, p, record = self._setup(e=2)
        granular = dataclasses.replace(record, granularity="granular-full", pit_index=1)
        with pytest.raises(ValueError):
            build_granular_pairs([p], [granular], _explorer(0.0), ExploreConfig(), "full")

    def test_unknown_variant(self):
        cfg, p, record = self._setup(e=2)
        with pytest.raises(ValueError):
            build_granular_pairs([p], [record], _explorer(0.0), ExploreConfig(),
                                 "bespoke")


class TestSweep:
    def _records(self, n, cfg, seed_base=0):
        problems, records = [], []
        idx = 0
        while len(records) < n:
            p = gen_problem(cfg, idx)
            idx += 1
            for draw in range(30):
                tr = simulate_solution(p, cfg, draw_seed=draw + seed_base)
                if tr.true_first_error is not None:
                    problems.append(p)
                    records.append(PairRecord(
                        p.id, p.question, correct_rationale(p, cfg),
                        dataclasses.replace(tr.rationale, conclusion=None),
                        "outcome", None))
                    break
        return problems, records

    def test_requires_nested_flag(self):
        cfg = SynthConfig(t=3, epsilon=0.3, seed=12)
        problems, records = self._records(2, cfg)
        with pytest.raises(ValueError):
            sweep_exploration_size(problems, records, _explorer(0.3, t=3), [2, 4],
                                   ExploreConfig(nested_sampling=False))

    def test_singleton_sweep_equals_direct_build(self):
        cfg = SynthConfig(t=4, epsilon=0.3, seed=13)
        problems, records = self._records(8, cfg)
        explorer = _explorer(0.2, seed=13, t=4)
        (entry,) = sweep_exploration_size(problems, records, explorer, [4],
                                          ExploreConfig(temperature=0.7,
                                                        nested_sampling=True, seed=5))
        direct = build_granular_pairs(problems, records, explorer,
                                      ExploreConfig(k=4, temperature=0.7, seed=5),
                                      "full")
        assert entry.build.records == direct.records
        assert entry.k == 4

    def test_pits_monotone_in_k(self):
        cfg = SynthConfig(t=5, epsilon=0.3, seed=14)
        problems, records = self._records(25, cfg)
        entries = sweep_exploration_size(problems, records, _explorer(0.3, seed=14),
                                         [2, 4, 8],
                                         ExploreConfig(temperature=0.7,
                                                       nested_sampling=True, seed=2))
        assert [e.k for e in entries] == [2, 4, 8]
        for a, b in zip(entries, entries[1:]):
            for pit_small, pit_big in zip(a.pits, b.pits):
                if pit_big is None:
                    continue
                assert pit_small is not None
                assert pit_big >= pit_small
        means = [e.mean_pit_index for e in entries]
        assert means[0] <= means[-1]
