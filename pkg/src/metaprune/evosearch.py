"""Constrained evolutionary search over genes.

Each iteration keeps the top-K genes seen so far, breeds M mutants and S
uniform-crossover children from them, scores the new genes, and merges them
with the carried top-K. Every gene that is scored satisfies the constraint.
Ranking is by accuracy descending, then cost ascending, then the gene
itself lexicographically, so results do not depend on evaluation order.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cost import Constraint, satisfies
from .netdef import Gene, NetworkTemplate, format_gene, gene_grids, min_gene, sample_gene

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 10_000
NOVELTY_TRIES = 10


class InfeasibleConstraint(RuntimeError):
    pass


class EvaluationFailed(RuntimeError):
    def __init__(self, gene, cause):
        super().__init__(f"evaluator failed on gene {format_gene(gene)}: {cause!r}")
        self.gene = gene


@dataclass(frozen=True)
class SearchConfig:
    population: int = 128
    topk: int = 32
    mutations: int = 64
    crossovers: int = 64
    iterations: int = 20
    p_mut: float = 0.1
    max_attempts: int = MAX_ATTEMPTS
    seed: int = 0

    def __post_init__(self):
        for name in ("population", "topk", "mutations", "crossovers", "max_attempts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.topk > self.population:
            raise ValueError(f"topk ({self.topk}) cannot exceed population ({self.population})")
        if not 0 < self.p_mut <= 1:
            raise ValueError(f"p_mut must lie in (0, 1], got {self.p_mut}")


@dataclass(frozen=True)
class Candidate:
    gene: Gene
    fitness: float
    cost: float

    def rank_key(self):
        return (-self.fitness, self.cost, self.gene)


@dataclass
class SearchResult:
    best: Candidate
    history: list = field(default_factory=list)  # (iteration, best Candidate)
    evaluated: dict = field(default_factory=dict)  # gene -> Candidate


def _constrained_random(template, constraint, rng, attempts) -> Gene | None:
    for _ in range(attempts):
        gene = sample_gene(template, rng)
        if satisfies(template, gene, constraint):
            return gene
    return None


def random_population(template: NetworkTemplate, constraint: Constraint | None, size: int, rng, max_attempts: int = MAX_ATTEMPTS) -> list[Gene]:
    """``size`` independently sampled genes, each resampled until it meets the constraint."""
    if constraint is not None:
        floor = min_gene(template)
        floor_cost = constraint.cost(template, floor)
        if constraint.kind == "flops" and floor_cost >= constraint.budget:
            raise InfeasibleConstraint(
                f"minimum-width gene costs {floor_cost:g} flops, budget is {constraint.budget:g}"
            )
    out = []
    for slot in range(size):
        gene = _constrained_random(template, constraint, rng, max_attempts)
        if gene is None:
            raise InfeasibleConstraint(
                f"no gene met {constraint} in {max_attempts} draws (slot {slot}); "
                f"minimum-width gene costs {floor_cost:g}"
            )
        out.append(gene)
    return out


def mutate(template: NetworkTemplate, gene, p_mut: float, rng, constraint: Constraint | None = None, max_attempts: int = MAX_ATTEMPTS) -> Gene:
    """Resample each axis to a different grid value with probability ``p_mut``.

    Rejected offspring are redrawn; after ``max_attempts`` a fresh constrained
    random gene is returned instead.
    """
    grids = gene_grids(template)
    parent = tuple(gene)
    for _ in range(max_attempts):
        child = list(parent)
        for i, grid in enumerate(grids):
            if len(grid) > 1 and rng.random() < p_mut:
                choices = [v for v in grid if v != parent[i]]
                child[i] = int(choices[rng.integers(len(choices))])
        child = tuple(child)
        if satisfies(template, child, constraint):
            return child
    return _fallback(template, constraint, rng, max_attempts)


def crossover(template: NetworkTemplate, parent_a, parent_b, rng, constraint: Constraint | None = None, max_attempts: int = MAX_ATTEMPTS) -> Gene:
    """Uniform crossover: each axis from either parent with probability 1/2."""
    a, b = tuple(parent_a), tuple(parent_b)
    if len(a) != len(b):
        raise ValueError(f"parents differ in length: {len(a)} vs {len(b)}")
    for _ in range(max_attempts):
        pick = rng.random(len(a)) < 0.5
        child = tuple(int(x if p else y) for x, y, p in zip(a, b, pick))
        if satisfies(template, child, constraint):
            return child
    return _fallback(template, constraint, rng, max_attempts)


def _fallback(template, constraint, rng, attempts) -> Gene:
    gene = _constrained_random(template, constraint, rng, attempts)
    if gene is None:
        raise InfeasibleConstraint(f"no gene met {constraint} in {attempts} draws")
    return gene


def _top(candidates, k):
    return sorted(candidates, key=Candidate.rank_key)[:k]


def search(
    template: NetworkTemplate,
    constraint: Constraint | None,
    evaluator,
    config: SearchConfig,
    workers: int = 1,
) -> SearchResult:
    """Return the best gene ever scored plus the per-iteration best."""
    rng = np.random.default_rng(config.seed)
    result = SearchResult(best=None)
    evaluated = result.evaluated

    def cost_of(gene):
        return 0.0 if constraint is None else float(constraint.cost(template, gene))

    def score(genes):
        fresh = list(dict.fromkeys(g for g in genes if g not in evaluated))
        for g in fresh:
            if not satisfies(template, g, constraint):
                raise AssertionError(f"gene {format_gene(g)} violates {constraint}")

        def run(g):
            try:
                return float(evaluator(g))
            except Exception as exc:  # noqa: BLE001
                raise EvaluationFailed(g, exc) from exc

        if workers > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                fits = list(pool.map(run, fresh))
        else:
            fits = [run(g) for g in fresh]
        for g, fit in zip(fresh, fits):
            evaluated[g] = Candidate(g, fit, cost_of(g))
        return [evaluated[g] for g in dict.fromkeys(genes)]

    population = random_population(template, constraint, config.population, rng, config.max_attempts)
    top = _top(score(population), config.topk)
    result.history.append((0, top[0]))
    logger.info("iter 0: best %.4f cost %g", top[0].fitness, top[0].cost)

    for it in range(1, config.iterations + 1):
        parents = [c.gene for c in top]

        def breed(count, make):
            # offspring already scored (or duplicated) are rejected like unqualified genes
            out, seen = [], set(evaluated)
            for _ in range(NOVELTY_TRIES * count):
                if len(out) == count:
                    break
                child = make()
                if child not in seen:
                    seen.add(child)
                    out.append(child)
            return out

        def one_mutant():
            parent = parents[rng.integers(len(parents))]
            return mutate(template, parent, config.p_mut, rng, constraint, config.max_attempts)

        def one_child():
            i, j = rng.integers(len(parents), size=2)
            return crossover(template, parents[i], parents[j], rng, constraint, config.max_attempts)

        mutants = breed(config.mutations, one_mutant)
        children = breed(config.crossovers, one_child)
        pool = {c.gene: c for c in top}
        pool.update({c.gene: c for c in score(mutants + children)})
        top = _top(pool.values(), config.topk)
        result.history.append((it, top[0]))
        logger.info("iter %d: best %.4f cost %g", it, top[0].fitness, top[0].cost)

    result.best = top[0]
    return result


def write_history_csv(result: SearchResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "best_acc", "best_cost", "gene"])
        for it, cand in result.history:
            w.writerow([it, repr(cand.fitness), repr(cand.cost), format_gene(cand.gene)])
