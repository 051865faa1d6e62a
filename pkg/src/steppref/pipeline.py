"""The four data-construction stages.

1. build_rft: sample N rationales per problem, grade them against the gold
   answer, dedup, and keep the correct subset.
2. build_pairs: outcome-supervised preference pairs. Each correct rationale
   (in dataset order) grabs the still-unused incorrect rationale at maximal
   token edit distance; every rationale is used at most once, at most
   `max_pairs_per_problem` pairs per problem, and rejected payloads are
   stored without their conclusion line.
3. explore_first_pit: step-level rollouts. For each prefix of the rejected
   rationale, draw k completions and count how many reach the gold answer;
   the first prefix with zero successes marks the pit. Rollouts stop there.
4. build_granular_pairs / sweep_exploration_size: reassemble pairs at step
   granularity around the pit, with the Table-2-style ablation variants and
   a nested exploration-size sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import fmean

import numpy as np

from . import genclient, kernels
from .corpus import (
    GRAN_FIRST_STEP,
    GRAN_FULL,
    GRAN_OUTCOME,
    GRAN_REJECT_ALL,
    PairRecord,
    Problem,
    Rationale,
    RationaleRecord,
)
from .extraction import (
    EmptyRationaleError,
    dedup,
    extract_answer,
    split_steps,
    strip_conclusion,
    style_for,
)
from .genclient import GenClientError, ProviderHandle, SamplingConfig
from .rng import rng_for

VARIANT_FULL = "full"
VARIANT_FIRST_STEP = "first-step"
VARIANT_REJECT_ALL = "reject-all"
VARIANTS = (VARIANT_FULL, VARIANT_FIRST_STEP, VARIANT_REJECT_ALL)

_GRANULARITY_FOR_VARIANT = {
    VARIANT_FULL: GRAN_FULL,
    VARIANT_FIRST_STEP: GRAN_FIRST_STEP,
    VARIANT_REJECT_ALL: GRAN_REJECT_ALL,
}


class ExplorationError(RuntimeError):
    """Provider failure mid-exploration; carries the tallies gathered so far."""

    def __init__(self, message: str, partial: list[tuple[int, int]]):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class PairingConfig:
    max_pairs_per_problem: int = 8
    distance: str = "token-edit"
    tie_break: str = "earliest-index"

    def __post_init__(self) -> None:
        if self.max_pairs_per_problem < 1:
            raise ValueError("max_pairs_per_problem must be >= 1")
        if self.distance != "token-edit":
            raise ValueError("only token-edit distance is supported")
        if self.tie_break != "earliest-index":
            raise ValueError("only earliest-index tie breaking is supported")


@dataclass(frozen=True)
class ExploreConfig:
    k: int = 4
    temperature: float = 0.7
    nested_sampling: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class PitResult:
    pit_index: int | None
    per_step_success: tuple[tuple[int, int], ...]
    rescue: str | None


@dataclass(frozen=True)
class SkipEntry:
    problem_id: str
    reason: str


@dataclass
class RftBuild:
    gen: list[RationaleRecord] = field(default_factory=list)
    rft: list[RationaleRecord] = field(default_factory=list)
    skipped: list[SkipEntry] = field(default_factory=list)


@dataclass(frozen=True)
class DropEntry:
    problem_id: str
    record_index: int
    reason: str


@dataclass
class GranularBuild:
    records: list[PairRecord] = field(default_factory=list)
    dropped: list[DropEntry] = field(default_factory=list)
    failures: list[DropEntry] = field(default_factory=list)


@dataclass
class SweepEntry:
    k: int
    build: GranularBuild
    mean_pit_index: float | None
    pits: list[int | None]


def token_edit_distance(a: Rationale, b: Rationale) -> int:
    """Levenshtein distance over whitespace tokens of the joined steps."""
    ta = " ".join(a.steps).split()
    tb = " ".join(b.steps).split()
    vocab: dict[str, int] = {}

    def ids(tokens: list[str]) -> np.ndarray:
        out = np.empty(len(tokens), dtype=np.int64)
        for i, t in enumerate(tokens):
            out[i] = vocab.setdefault(t, len(vocab))
        return out

    return int(kernels.levenshtein(ids(ta), ids(tb)))


def build_rft(
    problems: list[Problem],
    provider: ProviderHandle,
    cfg: SamplingConfig,
) -> RftBuild:
    """Sample, parse, grade and dedup rationales for each problem.

    Problems whose sampling failed, or that yielded no parseable or no
    correct rationale, are listed in the skip report rather than dropped
    silently.
    """
    out = RftBuild()
    if not problems:
        return out
    results = genclient.sample_batch(provider, [p.question for p in problems], cfg)
    for problem, result in zip(problems, results):
        if isinstance(result, GenClientError):
            out.skipped.append(SkipEntry(problem.id, f"provider-error: {result}"))
            continue
        style = style_for(problem.style)
        rationales = []
        for text in result:
            try:
                steps, conclusion = split_steps(text, style)
            except EmptyRationaleError:
                continue
            if not steps:
                # A bare answer declaration with no reasoning is unusable.
                continue
            extracted = extract_answer(text, style)
            label = "correct" if extracted == problem.gold_answer else "incorrect"
            rationales.append(
                Rationale(tuple(steps), conclusion, "SFT", label, extracted)
            )
        if not rationales:
            out.skipped.append(SkipEntry(problem.id, "no-parseable-samples"))
            continue
        deduped = dedup(rationales)
        out.gen.extend(RationaleRecord(problem.id, r) for r in deduped)
        correct = [r for r in deduped if r.label == "correct"]
        if not correct:
            out.skipped.append(SkipEntry(problem.id, "no-correct-samples"))
        out.rft.extend(RationaleRecord(problem.id, r) for r in correct)
    return out


def build_pairs(
    problems: list[Problem],
    d_rft: list[RationaleRecord],
    d_gen: list[RationaleRecord],
    cfg: PairingConfig,
) -> list[PairRecord]:
    """Greedy max-distance outcome pairing, each rationale used at most once."""
    by_id = {p.id: p for p in problems}
    for rec in d_rft + d_gen:
        if rec.problem_id not in by_id:
            raise ValueError(f"record references unknown problem {rec.problem_id!r}")
    corrects: dict[str, list[Rationale]] = {}
    incorrects: dict[str, list[Rationale]] = {}
    for rec in d_rft:
        corrects.setdefault(rec.problem_id, []).append(rec.rationale)
    for rec in d_gen:
        if rec.rationale.label == "incorrect":
            incorrects.setdefault(rec.problem_id, []).append(rec.rationale)

    pairs: list[PairRecord] = []
    for problem in problems:
        pos = corrects.get(problem.id, [])
        neg = incorrects.get(problem.id, [])
        used = [False] * len(neg)
        emitted = 0
        for chosen in pos:
            if emitted >= cfg.max_pairs_per_problem:
                break
            best_idx = -1
            best_dist = -1
            for j, candidate in enumerate(neg):
                if used[j]:
                    continue
                dist = token_edit_distance(chosen, candidate)
                if dist > best_dist:
                    best_dist = dist
                    best_idx = j
            if best_idx < 0:
                break
            used[best_idx] = True
            emitted += 1
            pairs.append(
                PairRecord(
                    problem_id=problem.id,
                    input=problem.question,
                    chosen=chosen,
                    rejected=strip_conclusion(neg[best_idx]),
                    granularity=GRAN_OUTCOME,
                    pit_index=None,
                )
            )
    return pairs


def _explore_table(
    problem: Problem,
    rejected: Rationale,
    explorer: ProviderHandle,
    k: int,
    temperature: float,
    seed: int,
) -> list[list[tuple[str, bool]]]:
    """Per explored step: the k (completion, reached-gold) rollouts.

    Exploration stops after the first step whose k rollouts all fail.
    """
    style = style_for(problem.style)
    sampling = SamplingConfig(n=k, temperature=temperature, seed=seed)
    table: list[list[tuple[str, bool]]] = []
    for i in range(1, len(rejected.steps) + 1):
        prompt = problem.question + "\n" + "\n".join(rejected.steps[:i])
        try:
            completions = genclient.sample(explorer, prompt, sampling)
        except GenClientError as e:
            partial = [(sum(ok for _, ok in row), len(row)) for row in table]
            raise ExplorationError(
                f"provider failed at step {i} of {problem.id}: {e}", partial
            ) from e
        row = [
            (c, extract_answer(c, style) == problem.gold_answer) for c in completions
        ]
        table.append(row)
        if not any(ok for _, ok in row):
            break
    return table


def _pit_from_table(
    table: list[list[tuple[str, bool]]],
    k: int,
    n_steps: int,
    problem: Problem,
    seed: int,
) -> PitResult:
    tallies: list[tuple[int, int]] = []
    pit: int | None = None
    for i, row in enumerate(table, start=1):
        successes = sum(ok for _, ok in row[:k])
        tallies.append((successes, k))
        if successes == 0:
            pit = i
            break
    if pit is None and len(tallies) < n_steps:
        raise RuntimeError("exploration table is shorter than the rationale")
    rescue = None
    if pit is not None and pit > 1:
        pool = [c for c, ok in table[pit - 2][:k] if ok]
        rng = rng_for(seed, "rescue", problem.id, pit, k)
        rescue = pool[int(rng.integers(0, len(pool)))]
    return PitResult(pit_index=pit, per_step_success=tuple(tallies), rescue=rescue)


def explore_first_pit(
    problem: Problem,
    rejected: Rationale,
    explorer: ProviderHandle,
    cfg: ExploreConfig,
) -> PitResult:
    """Locate the first zero-success step of a rejected rationale."""
    if rejected.label != "incorrect":
        raise ValueError("exploration expects a rationale labeled incorrect")
    if not rejected.steps:
        raise ValueError("exploration expects at least one step")
    table = _explore_table(problem, rejected, explorer, cfg.k, cfg.temperature,
                           cfg.seed)
    return _pit_from_table(table, cfg.k, len(rejected.steps), problem, cfg.seed)


def _assemble_granular(
    problem: Problem,
    record: PairRecord,
    pit: PitResult,
    variant: str,
) -> PairRecord:
    w = pit.pit_index
    steps = record.rejected.steps
    if variant == VARIANT_REJECT_ALL:
        rejected_steps = steps[w - 1:]
    else:
        rejected_steps = steps[w - 1: w]
    rejected = Rationale(
        steps=rejected_steps,
        conclusion=None,
        producer=record.rejected.producer,
        label="incorrect",
        extracted_answer=None,
    )
    if w == 1:
        input_text = problem.question
        chosen = record.chosen
    else:
        input_text = problem.question + "\n" + "\n".join(steps[: w - 1])
        style = style_for(problem.style)
        rescue_steps, rescue_conclusion = split_steps(pit.rescue, style)
        if variant == VARIANT_FIRST_STEP:
            if not rescue_steps:
                raise ValueError("rescue completion has no step to keep")
            chosen = Rationale(
                steps=(rescue_steps[0],),
                conclusion=None,
                producer="EXPLORER",
                label="ungraded",
                extracted_answer=None,
            )
        else:
            chosen = Rationale(
                steps=tuple(rescue_steps),
                conclusion=rescue_conclusion,
                producer="EXPLORER",
                label="correct",
                extracted_answer=extract_answer(pit.rescue, style_for(problem.style)),
            )
    return PairRecord(
        problem_id=problem.id,
        input=input_text,
        chosen=chosen,
        rejected=rejected,
        granularity=_GRANULARITY_FOR_VARIANT[variant],
        pit_index=w,
    )


def build_granular_pairs(
    problems: list[Problem],
    d_pair: list[PairRecord],
    explorer: ProviderHandle,
    cfg: ExploreConfig,
    variant: str = VARIANT_FULL,
) -> GranularBuild:
    """Explore each rejected rationale and re-pair around its first pit.

    Records with no pit through the final step are dropped (with a report
    entry): a rationale the explorer can rescue everywhere is not actually
    infeasible for it. Exploration errors are likewise collected per record.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant!r}")
    by_id = {p.id: p for p in problems}
    out = GranularBuild()
    for idx, record in enumerate(d_pair):
        if record.granularity != GRAN_OUTCOME:
            raise ValueError("build_granular_pairs expects outcome-granularity pairs")
        problem = by_id.get(record.problem_id)
        if problem is None:
            raise ValueError(f"record references unknown problem {record.problem_id!r}")
        if not record.rejected.steps:
            out.dropped.append(DropEntry(record.problem_id, idx, "empty-rejected"))
            continue
        try:
            pit = explore_first_pit(problem, record.rejected, explorer, cfg)
        except ExplorationError as e:
            out.failures.append(DropEntry(record.problem_id, idx, str(e)))
            continue
        if pit.pit_index is None:
            out.dropped.append(DropEntry(record.problem_id, idx, "no-pit"))
            continue
        try:
            out.records.append(_assemble_granular(problem, record, pit, variant))
        except (ValueError, EmptyRationaleError) as e:
            out.failures.append(DropEntry(record.problem_id, idx, f"assembly: {e}"))
    return out


def sweep_exploration_size(
    problems: list[Problem],
    d_pair: list[PairRecord],
    explorer: ProviderHandle,
    ks: list[int],
    cfg: ExploreConfig,
) -> list[SweepEntry]:
    """Granular datasets for each exploration size in `ks`.

    Requires nested sampling: each record is explored once at max(ks) and
    the smaller-k results are read off the shared rollout prefix, so a
    record's pit index can only move later (or vanish) as k grows.
    """
    if not ks:
        raise ValueError("ks must be non-empty")
    if any(k < 1 for k in ks):
        raise ValueError("every k must be >= 1")
    if not cfg.nested_sampling:
        raise ValueError("sweep_exploration_size requires cfg.nested_sampling")
    by_id = {p.id: p for p in problems}
    kmax = max(ks)

    tables: list[tuple[PairRecord, Problem, list[list[tuple[str, bool]]] | None, str | None]] = []
    for idx, record in enumerate(d_pair):
        if record.granularity != GRAN_OUTCOME:
            raise ValueError("sweep_exploration_size expects outcome-granularity pairs")
        problem = by_id.get(record.problem_id)
        if problem is None:
            raise ValueError(f"record references unknown problem {record.problem_id!r}")
        if not record.rejected.steps:
            tables.append((record, problem, None, "empty-rejected"))
            continue
        try:
            table = _explore_table(problem, record.rejected, explorer, kmax,
                                   cfg.temperature, cfg.seed)
        except ExplorationError as e:
            tables.append((record, problem, None, f"exploration: {e}"))
            continue
        tables.append((record, problem, table, None))

    entries: list[SweepEntry] = []
    for k in ks:
        build = GranularBuild()
        pits: list[int | None] = []
        for idx, (record, problem, table, fail) in enumerate(tables):
            if table is None:
                target = build.dropped if fail == "empty-rejected" else build.failures
                target.append(DropEntry(record.problem_id, idx, fail))
                pits.append(None)
                continue
            pit = _pit_from_table(table, k, len(record.rejected.steps), problem,
                                  cfg.seed)
            pits.append(pit.pit_index)
            if pit.pit_index is None:
                build.dropped.append(DropEntry(record.problem_id, idx, "no-pit"))
                continue
            try:
                build.records.append(
                    _assemble_granular(problem, record, pit, VARIANT_FULL)
                )
            except (ValueError, EmptyRationaleError) as e:
                build.failures.append(
                    DropEntry(record.problem_id, idx, f"assembly: {e}")
                )
        found = [p for p in pits if p is not None]
        entries.append(
            SweepEntry(
                k=k,
                build=build,
                mean_pit_index=fmean(found) if found else None,
                pits=pits,
            )
        )
    return entries
