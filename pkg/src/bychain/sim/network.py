"""Seeded message delivery between simulated nodes.

Latency is sampled per message in simulated seconds and floored to whole
rounds, so anything faster than one block interval lands in the round it was
sent.  Messages across an active partition are dropped and recorded.
"""
from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Any

from .scenario import LatencyModel, NetworkSpec, Partition


@dataclass(frozen=True)
class Message:
    kind: str
    src: int
    dst: int
    payload: Any
    sent_round: int


@dataclass(frozen=True)
class Drop:
    round: int
    src: int
    dst: int
    kind: str
    reason: str = "partition"


def sample_latency(model: LatencyModel, rng: random.Random) -> float:
    if model.kind == "zero":
        return 0.0
    if model.kind == "fixed":
        return model.value
    if model.kind == "uniform":
        return rng.uniform(model.low, model.high)
    return rng.expovariate(1.0 / model.mean) if model.mean > 0 else 0.0


def expected_latency(model: LatencyModel) -> float:
    return {"zero": 0.0, "fixed": model.value, "uniform": (model.low + model.high) / 2,
            "exponential": model.mean}[model.kind]


def partitioned(partitions: tuple[Partition, ...], src: int, dst: int, rnd: int) -> bool:
    """True when an active partition puts ``src`` and ``dst`` in different groups."""
    for p in partitions:
        if not p.start <= rnd < p.end:
            continue
        gs = gd = None
        for gi, group in enumerate(p.groups):
            if src in group:
                gs = gi
            if dst in group:
                gd = gi
        if gs is not None and gd is not None and gs != gd:
            return True
    return False


def deliver(model: NetworkSpec, message: Message, src: int, dst: int, rnd: int,
            rng: random.Random, block_interval: float) -> int | None:
    """Round in which ``message`` arrives, or None when it is dropped."""
    if src != dst and partitioned(model.partitions, src, dst, rnd):
        return None
    latency = sample_latency(model.latency, rng)
    return rnd + int(math.floor(latency / block_interval))


@dataclass
class Network:
    spec: NetworkSpec
    block_interval: float
    rng: random.Random
    drops: list[Drop] = field(default_factory=list)
    sent: int = 0
    _queue: list = field(default_factory=list)

    def send(self, kind: str, src: int, dst: int, payload: Any, rnd: int) -> int | None:
        msg = Message(kind, src, dst, payload, rnd)
        due = deliver(self.spec, msg, src, dst, rnd, self.rng, self.block_interval)
        if due is None:
            self.drops.append(Drop(rnd, src, dst, kind))
            return None
        heapq.heappush(self._queue, (due, self.sent, msg))
        self.sent += 1
        return due

    def broadcast(self, kind: str, src: int, peers, payload: Any, rnd: int):
        for dst in peers:
            if dst != src:
                self.send(kind, src, dst, payload, rnd)

    def pop_due(self, rnd: int) -> Message | None:
        if self._queue and self._queue[0][0] <= rnd:
            return heapq.heappop(self._queue)[2]
        return None

    def pending(self) -> int:
        return len(self._queue)

    def link_delay(self, src: int, dst: int, rnd: int) -> float:
        """Expected one-way delay as seen by the election; infinite across a partition."""
        if src != dst and partitioned(self.spec.partitions, src, dst, rnd):
            return math.inf
        return expected_latency(self.spec.latency)
