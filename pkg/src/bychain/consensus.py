"""Delay-driven committee election and round-robin block production."""
from __future__ import annotations

import csv
import io
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_THETA = 5.0
DEFAULT_TAU_FINAL = 3.0
DEFAULT_COMMITTEE_SIZE = 3
TALLY_SCHEMA = "committee-tally/1"


@dataclass(frozen=True)
class DelayObservation:
    observer: int
    candidate: int
    tau_tx: float
    tau_compute: float
    tau_final: float = DEFAULT_TAU_FINAL

    def __post_init__(self):
        if min(self.tau_tx, self.tau_compute, self.tau_final) < 0:
            raise ValueError("delay components must be non-negative")

    @property
    def total(self) -> float:
        return total_delay(self)


def total_delay(obs: DelayObservation) -> float:
    return obs.tau_tx + obs.tau_compute + obs.tau_final


def utility(tau: float, theta: float) -> float:
    """``ln(1 + max(theta - tau, 0))``; exactly zero once ``tau >= theta``."""
    if tau < 0 or theta < 0:
        log.warning("negative delay input clamped to 0 (tau=%s, theta=%s)", tau, theta)
        tau, theta = max(tau, 0.0), max(theta, 0.0)
    slack = theta - tau
    if slack <= 0:
        return 0.0
    return math.log1p(slack)


def vote_probabilities(utilities: Mapping[int, float]) -> dict[int, float]:
    """Normalise utilities into a voting distribution, uniform when all are zero."""
    if not utilities:
        return {}
    total = math.fsum(utilities.values())
    if total <= 0:
        share = 1.0 / len(utilities)
        return {c: share for c in utilities}
    return {c: u / total for c, u in utilities.items()}


@dataclass(frozen=True)
class CommitteeConfig:
    theta: float = DEFAULT_THETA
    size: int = DEFAULT_COMMITTEE_SIZE
    vote_budget: Mapping[int, float] = field(default_factory=dict)
    sampled: bool = False

    def budget(self, node: int) -> float:
        return float(self.vote_budget.get(node, 1.0))


@dataclass
class Committee:
    members: list[int]
    votes: dict[int, float] = field(default_factory=dict)
    round_robin_cursor: int = 0

    @property
    def size(self) -> int:
        return len(self.members)

    def producer(self, slot: int) -> int:
        return scheduled_producer(self, slot)

    def advance(self) -> int:
        member = self.members[self.round_robin_cursor]
        self.round_robin_cursor = (self.round_robin_cursor + 1) % len(self.members)
        return member

    def finality_depth(self) -> int:
        """Successor blocks needed before a block counts as final."""
        return len(self.members)


def scheduled_producer(committee: Committee, height: int) -> int:
    return committee.members[height % len(committee.members)]


def tally_votes(observations: Iterable[DelayObservation], config: CommitteeConfig,
                rng: random.Random | None = None, candidates: Iterable[int] | None = None) -> dict[int, float]:
    """Votes received by every candidate.

    Each observer spreads its budget over the candidates it observed in
    proportion to its vote probabilities: as the expected value, or as a
    multinomial draw of ``round(budget)`` whole votes when sampling.
    """
    per_observer: dict[int, dict[int, float]] = {}
    for obs in observations:
        per_observer.setdefault(obs.observer, {})[obs.candidate] = utility(obs.total, config.theta)
    votes: dict[int, float] = {c: 0.0 for c in (candidates or ())}
    for observer in sorted(per_observer):
        probs = vote_probabilities(per_observer[observer])
        budget = config.budget(observer)
        if budget < 0:
            raise ValueError(f"negative vote budget for node {observer}")
        cands = sorted(probs)
        for c in cands:
            votes.setdefault(c, 0.0)
        if config.sampled:
            if rng is None:
                raise ValueError("sampled election needs an rng")
            draws = np.random.default_rng(rng.getrandbits(64)).multinomial(
                int(round(budget)), [probs[c] for c in cands])
            for c, k in zip(cands, draws):
                votes[c] += float(k)
        else:
            for c in cands:
                votes[c] += budget * probs[c]
    return votes


def elect(observations: Iterable[DelayObservation], config: CommitteeConfig,
          rng: random.Random | None = None, candidates: Iterable[int] | None = None) -> Committee:
    """Top ``config.size`` vote recipients, ties broken toward the lower id."""
    votes = tally_votes(observations, config, rng, candidates)
    ranked = sorted(votes, key=lambda c: (-votes[c], c))
    if len(ranked) < config.size:
        log.warning("only %d candidates for a committee of %d", len(ranked), config.size)
    if not ranked:
        raise ValueError("no candidates to elect")
    return Committee(members=ranked[:config.size], votes=votes)


def is_final(depth: int | None, committee: Committee) -> bool:
    return depth is not None and depth >= committee.finality_depth()


def tally_rows(epoch: int, committee: Committee) -> list[tuple[int, int, float, bool]]:
    elected = set(committee.members)
    return [(epoch, node, committee.votes[node], node in elected) for node in sorted(committee.votes)]


def write_tally_csv(rows: Sequence[tuple[int, int, float, bool]], out: io.TextIOBase | None = None) -> str:
    buf = out if out is not None else io.StringIO()
    buf.write(f"#schema={TALLY_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "node", "votes", "elected"])
    for epoch, node, votes, elected in rows:
        w.writerow([epoch, node, f"{votes:.9f}", str(elected).lower()])
    return buf.getvalue() if out is None else ""
