"""Intent-aware search-result diversification over run lists.

Both algorithms greedily rebuild the top of a ranked list from a candidate
pool (default: top 50 of the original run).  Scoring loops are written out
explicitly so that a step-wise re-computation of the argmax reproduces the
selection bit-for-bit; ties always fall back to the original rank order.
Queries are independent and may be processed in parallel; the greedy loop
within a query is sequential.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .errors import EmptyCandidates, InvariantViolation
from .ingest import IntentJudgments, QueryJudgments, RunList


@dataclass
class DiversifyContext:
    """Inputs for result diversification.

    Attributes:
        run: initial ranked candidate lists.
        judgments: per-query intents, priors, and binary relevance (the
            oracle diversification signal).
        intent_relevance: optional predicted relevance overriding the binary
            judgments, as ``qid -> (doc, intent) -> [0, 1]``.
        lam: mixing weight between relevance and diversification.
        k: output depth.
        pool_size: candidate pool truncation depth.
    """

    run: RunList
    judgments: IntentJudgments
    intent_relevance: dict[str, dict[tuple[str, str], float]] | None = None
    lam: float = 0.5
    k: int = 20
    pool_size: int = 50

    def __post_init__(self) -> None:
        if not (0.0 <= self.lam <= 1.0):
            raise InvariantViolation("lam must lie in [0, 1]")
        if self.k < 1 or self.pool_size < 1:
            raise InvariantViolation("k and pool_size must be positive")
        if self.intent_relevance is not None:
            for qid, table in self.intent_relevance.items():
                for key, value in table.items():
                    if not (0.0 <= value <= 1.0):
                        raise InvariantViolation(f"intent relevance {value} outside [0, 1] for {key}")

    def relevance_fn(self, qid: str, judg: QueryJudgments):
        if self.intent_relevance is not None and qid in self.intent_relevance:
            table = self.intent_relevance[qid]
            return lambda doc, intent: table.get((doc, intent), 0.0)
        return judg.relevance


def _normalized_pool(run: RunList, qid: str, pool_size: int) -> tuple[list[str], dict[str, float]]:
    entries = run.queries.get(qid, [])[:pool_size]
    if not entries:
        raise EmptyCandidates(f"query {qid!r} has no candidates")
    docs = [doc for doc, _ in entries]
    raw = [score for _, score in entries]
    lo, hi = min(raw), max(raw)
    if hi > lo:
        norm = {doc: (score - lo) / (hi - lo) for (doc, _), score in zip(entries, raw)}
    else:
        norm = {doc: 0.5 for doc in docs}
    return docs, norm


def xquad_query(
    docs: list[str],
    norm_scores: Mapping[str, float],
    judg: QueryJudgments,
    rel,
    lam: float,
    k: int,
) -> list[str]:
    """Greedy explicit-intent diversification of one query's pool."""
    intents = judg.intents
    priors = judg.priors
    not_covered = {i: 1.0 for i in intents}
    selected: list[str] = []
    remaining = list(docs)
    for _ in range(min(k, len(docs))):
        best_doc = None
        best_score = -float("inf")
        for doc in remaining:  # original rank order; strict > keeps the earlier doc on ties
            div = 0.0
            for intent in intents:
                div += priors[intent] * rel(doc, intent) * not_covered[intent]
            score = (1.0 - lam) * norm_scores[doc] + lam * div
            if score > best_score:
                best_score = score
                best_doc = doc
        selected.append(best_doc)
        remaining.remove(best_doc)
        for intent in intents:
            not_covered[intent] *= 1.0 - rel(best_doc, intent)
    return selected


def pm2_query(
    docs: list[str],
    judg: QueryJudgments,
    rel,
    lam: float,
    k: int,
) -> list[str]:
    """Proportional (Sainte-Lague) seat allocation over intents for one query."""
    intents = judg.intents
    votes = dict(judg.priors)
    seats = {i: 0.0 for i in intents}
    selected: list[str] = []
    remaining = list(docs)
    for _ in range(min(k, len(docs))):
        target = None
        best_qt = -float("inf")
        for intent in intents:  # ascending id; strict > keeps the smaller id on ties
            qt = votes[intent] / (2.0 * seats[intent] + 1.0)
            if qt > best_qt:
                best_qt = qt
                target = intent
        best_doc = None
        best_score = -float("inf")
        for doc in remaining:
            score = lam * best_qt * rel(doc, target)
            for intent in intents:
                if intent != target:
                    score += (1.0 - lam) * (votes[intent] / (2.0 * seats[intent] + 1.0)) * rel(doc, intent)
            if score > best_score:
                best_score = score
                best_doc = doc
        selected.append(best_doc)
        remaining.remove(best_doc)
        coverage = sum(rel(best_doc, intent) for intent in intents)
        if coverage > 0.0:
            for intent in intents:
                seats[intent] += rel(best_doc, intent) / coverage
    return selected


def xquad(ctx: DiversifyContext) -> dict[str, list[str]]:
    """Diversify every query of the run with the explicit-intent greedy."""
    out: dict[str, list[str]] = {}
    for qid in sorted(ctx.run.queries):
        judg = ctx.judgments.query(qid)
        docs, norm = _normalized_pool(ctx.run, qid, ctx.pool_size)
        out[qid] = xquad_query(docs, norm, judg, ctx.relevance_fn(qid, judg), ctx.lam, ctx.k)
    return out


def pm2(ctx: DiversifyContext) -> dict[str, list[str]]:
    """Diversify every query of the run with proportional seat allocation."""
    out: dict[str, list[str]] = {}
    for qid in sorted(ctx.run.queries):
        judg = ctx.judgments.query(qid)
        docs, _ = _normalized_pool(ctx.run, qid, ctx.pool_size)
        out[qid] = pm2_query(docs, judg, ctx.relevance_fn(qid, judg), ctx.lam, ctx.k)
    return out
