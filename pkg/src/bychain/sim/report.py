"""Run outputs: stable-schema CSV tables, a text summary and the chain export."""
from __future__ import annotations

import csv
import hashlib
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

TABLES = {
    "trace": ("round-trace/1", ["round", "node", "x", "y", "force", "coverage"]),
    "epochs": ("epoch-allocation/1", ["epoch", "node", "u"]),
    "committee": ("committee-tally/1", ["epoch", "node", "votes", "elected"]),
    "metrics": ("round-metrics/1", ["round", "node", "height", "tip", "mempool"]),
    "claims": ("pol-claims/1", ["round", "prover", "commitment", "trust", "status"]),
    "verifications": ("pol-verifications/1",
                      ["round", "prover", "commitment", "verified", "trust", "expected", "signed",
                       "corroborated", "lat_e7", "lon_e7", "reason"]),
    "attacks": ("attack-outcomes/1", ["action", "attempts", "detected", "succeeded", "expected_met", "evidence"]),
}
CHAIN_FILE = "chain.bin"
SUMMARY_FILE = "summary.txt"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6f}"
    if value is None:
        return ""
    return str(value)


def write_csv(name: str, rows: Sequence[Sequence]) -> str:
    schema, header = TABLES[name]
    buf = io.StringIO()
    buf.write(f"#schema={schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path: Path) -> tuple[str, list[dict]]:
    """Parse a table written by :func:`write_csv`; returns ``(schema, rows)``."""
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#schema="):
        raise ValueError(f"{path} has no schema line")
    schema = lines[0].removeprefix("#schema=")
    return schema, list(csv.DictReader(lines[1:]))


@dataclass(frozen=True)
class Claim:
    round: int
    prover: int
    commitment: str
    trust: int
    status: str


@dataclass(frozen=True)
class VerificationRecord:
    round: int
    prover: int
    commitment: str
    verified: bool
    trust: int
    expected: int = 0
    signed: int = 0
    corroborated: bool | None = None
    lat_e7: int | None = None
    lon_e7: int | None = None
    reason: str = ""


@dataclass(frozen=True)
class AttackOutcome:
    action: str
    attempts: int
    detected: int
    succeeded: int
    expected_met: bool
    evidence: str = ""

    @property
    def verdict(self) -> str:
        return "detected" if self.succeeded == 0 else "succeeded"


@dataclass
class RunReport:
    scenario: str
    seed: int
    rounds: int
    height: int
    tip: str
    tips_agree: bool
    chain: bytes = field(repr=False)
    claims: list[Claim] = field(default_factory=list)
    verifications: list[VerificationRecord] = field(default_factory=list)
    coverage: list[float] = field(default_factory=list)
    converged_round: int | None = None
    trace: list[tuple] = field(default_factory=list, repr=False)
    allocations: list[tuple] = field(default_factory=list)
    tallies: list[tuple] = field(default_factory=list)
    metrics: list[tuple] = field(default_factory=list, repr=False)
    drops: int = 0
    tx_status: Counter = field(default_factory=Counter)
    blocks_rejected: int = 0
    attacks: list[AttackOutcome] = field(default_factory=list)

    @property
    def committed(self) -> list[Claim]:
        return [c for c in self.claims if c.status == "committed"]

    @property
    def verified(self) -> list[VerificationRecord]:
        return [v for v in self.verifications if v.verified]

    def tables(self) -> dict[str, str]:
        return {
            "trace": write_csv("trace", self.trace),
            "epochs": write_csv("epochs", self.allocations),
            "committee": write_csv("committee", self.tallies),
            "metrics": write_csv("metrics", self.metrics),
            "claims": write_csv("claims", [(c.round, c.prover, c.commitment, c.trust, c.status)
                                           for c in self.claims]),
            "verifications": write_csv("verifications", [
                (v.round, v.prover, v.commitment, v.verified, v.trust, v.expected, v.signed,
                 v.corroborated, v.lat_e7, v.lon_e7, v.reason) for v in self.verifications]),
            "attacks": write_csv("attacks", [(a.action, a.attempts, a.detected, a.succeeded,
                                              a.expected_met, a.evidence) for a in self.attacks]),
        }

    def summary_text(self) -> str:
        cov0 = self.coverage[0] if self.coverage else 0.0
        cov1 = self.coverage[-1] if self.coverage else 0.0
        status = ", ".join(f"{k}={v}" for k, v in sorted(self.tx_status.items()))
        lines = [
            f"scenario: {self.scenario}",
            f"seed: {self.seed}",
            f"rounds: {self.rounds}",
            f"chain height: {self.height}",
            f"tip: {self.tip}",
            f"tips agree: {str(self.tips_agree).lower()}",
            f"chain export sha256: {hashlib.sha256(self.chain).hexdigest()}",
            f"claims: {len(self.claims)} ({len(self.committed)} committed)",
            f"verifications: {len(self.verifications)} ({len(self.verified)} verified)",
            f"coverage: {cov0:.4f} -> {cov1:.4f}",
            f"field converged at round: {self.converged_round if self.converged_round is not None else 'never'}",
            f"dropped messages: {self.drops}",
            f"rejected blocks: {self.blocks_rejected}",
            f"tx status: {status or 'none'}",
        ]
        for a in self.attacks:
            lines.append(f"attack {a.action}: {a.detected}/{a.attempts} detected, "
                         f"{a.succeeded} succeeded, expectation {'met' if a.expected_met else 'MISSED'}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in self.tables().items():
            path = out_dir / f"{name}.csv"
            path.write_text(text)
            written.append(path)
        (out_dir / SUMMARY_FILE).write_text(self.summary_text())
        (out_dir / CHAIN_FILE).write_bytes(self.chain)
        return written + [out_dir / SUMMARY_FILE, out_dir / CHAIN_FILE]

    def digest(self) -> str:
        h = hashlib.sha256(self.chain)
        for name, text in sorted(self.tables().items()):
            h.update(name.encode())
            h.update(text.encode())
        h.update(self.summary_text().encode())
        return h.hexdigest()
