"""Artificial potential field, witness motion and coverage incentive allocation.

Every witness is treated as a charged particle.  Inside the repulsive cutoff
``R_r`` neighbours push each other apart with an inverse-square force; outside
it they pull each other back with a force that decays with the distance past
the cutoff.  The per-epoch coverage budget is then split so that nodes carrying
a large residual force (i.e. far from equilibrium) earn less.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

DEFAULT_LAMBDA = 1.5
DEFAULT_EPS_SING = 1e-3
JITTER_M = 1e-3


def attraction_strength(k_rep: float, lam: float) -> float:
    """Solve ``lam**2 * k_att == (lam - 1)**2 * k_rep`` for ``k_att``."""
    if lam <= 1.0:
        raise ValueError("lambda must be greater than 1")
    return (lam - 1.0) ** 2 * k_rep / lam**2


@dataclass(frozen=True)
class FieldParams:
    k_rep: float
    R_r: float
    k_att: float | None = None
    lam: float = DEFAULT_LAMBDA
    epsilon_sing: float = DEFAULT_EPS_SING
    alpha: float = 0.5
    dt: float = 1.0
    jitter_seed: int = 0

    def __post_init__(self):
        if self.k_rep <= 0 or self.R_r <= 0:
            raise ValueError("k_rep and R_r must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("viscosity alpha must lie in (0, 1)")
        if self.epsilon_sing <= 0:
            raise ValueError("epsilon_sing must be positive")
        if self.k_att is None:
            object.__setattr__(self, "k_att", attraction_strength(self.k_rep, self.lam))
        elif self.k_att <= 0:
            raise ValueError("k_att must be positive")


@dataclass
class WitnessState:
    id: int
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    net_force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    mass: float = 1.0
    comm_radius: float = 50.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(2)
        self.net_force = np.asarray(self.net_force, dtype=float).reshape(2)
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.comm_radius <= 0:
            raise ValueError("comm_radius must be positive")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("state coordinates must be finite")


def _pair_jitter(i: int, j: int, seed: int) -> np.ndarray:
    # Oriented by index order so that the jitter for (j, i) is the negation of (i, j).
    lo, hi = (i, j) if i < j else (j, i)
    digest = hashlib.sha256(struct.pack(">qqq", seed, lo, hi)).digest()
    angle = int.from_bytes(digest[:8], "big") / 2**64 * 2 * math.pi
    vec = JITTER_M * np.array([math.cos(angle), math.sin(angle)])
    return vec if i < j else -vec


def _separation(xi, xj, jitter):
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    diff = xj - xi
    r = float(math.hypot(diff[0], diff[1]))
    if r == 0.0:
        if jitter is None:
            jitter = np.array([JITTER_M, 0.0])
        diff = -np.asarray(jitter, dtype=float)
        r = float(math.hypot(diff[0], diff[1]))
    return diff, r


def repulsive_force(xi, xj, params: FieldParams, jitter=None) -> np.ndarray:
    """Force on node ``i`` pushing it away from ``j``; zero beyond ``R_r``.

    Coincident nodes are separated by ``jitter`` (a displacement applied to
    ``xi``) before the force is evaluated.
    """
    diff, r = _separation(xi, xj, jitter)
    if r > params.R_r:
        return np.zeros(2)
    return -params.k_rep / r**2 * diff / r


def attractive_force(xi, xj, params: FieldParams, jitter=None) -> np.ndarray:
    """Force on node ``i`` pulling it toward ``j``; zero inside ``R_r``.

    The denominator ``(r - R_r)**2`` is clamped at ``epsilon_sing``.
    """
    diff, r = _separation(xi, xj, jitter)
    if r < params.R_r:
        return np.zeros(2)
    gap2 = max((r - params.R_r) ** 2, params.epsilon_sing)
    return params.k_att / gap2 * diff / r


def net_force(i: int, states: Sequence[WitnessState], params: FieldParams) -> np.ndarray:
    total = np.zeros(2)
    xi = states[i].position
    for j, other in enumerate(states):
        if j == i:
            continue
        jitter = None
        if np.array_equal(xi, other.position):
            jitter = _pair_jitter(i, j, params.jitter_seed)
        total += attractive_force(xi, other.position, params, jitter)
        total += repulsive_force(xi, other.position, params, jitter)
    return total


def net_forces(positions: np.ndarray, params: FieldParams) -> np.ndarray:
    """Vectorised net force for every node; row ``i`` equals ``net_force(i, ...)``."""
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    if n < 2:
        return np.zeros((n, 2))
    diff = pos[None, :, :] - pos[:, None, :]  # diff[i, j] = x_j - x_i
    r = np.hypot(diff[..., 0], diff[..., 1])
    coincident = (r == 0.0) & ~np.eye(n, dtype=bool)
    if coincident.any():
        for i, j in zip(*np.nonzero(coincident)):
            diff[i, j] = -_pair_jitter(int(i), int(j), params.jitter_seed)
        r = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(r, np.inf)
    unit = diff / r[..., None]
    rep = np.where(r <= params.R_r, -params.k_rep / r**2, 0.0)
    gap2 = np.maximum((r - params.R_r) ** 2, params.epsilon_sing)
    att = np.where((r >= params.R_r) & np.isfinite(r), params.k_att / gap2, 0.0)
    return ((rep + att)[..., None] * unit).sum(axis=1)


def step_motion(state: WitnessState, force, params: FieldParams) -> WitnessState:
    """One viscous update ``v' = v + (F - alpha v) / m`` then ``x' = x + v' dt``."""
    force = np.asarray(force, dtype=float)
    velocity = state.velocity + (force - params.alpha * state.velocity) / state.mass
    position = state.position + velocity * params.dt
    return replace(state, position=position, velocity=velocity, net_force=force)


@dataclass(frozen=True)
class EpochBudget:
    total: float
    epoch_blocks: int = 28800
    epsilon: float | None = None

    @property
    def eps(self) -> float:
        return self.epsilon if self.epsilon is not None else 1e-9 * self.total


def allocate_incentive(forces: Sequence[float], budget: EpochBudget) -> list[float]:
    """Split the epoch budget across nodes given their net force magnitudes.

    u_i = (sum_{n != i} |F_n| + eps) / (sum_n |F_n| + n eps) * U / (n - 1)

    A lone node receives the whole budget.
    """
    mags = [float(f) for f in forces]
    if any(m < 0 or not math.isfinite(m) for m in mags):
        raise ValueError("force magnitudes must be finite and non-negative")
    n = len(mags)
    if n == 0:
        return []
    if n == 1:
        return [float(budget.total)]
    eps = budget.eps
    total = math.fsum(mags)
    if total == 0.0:
        # Every ratio is eps / (n eps) = 1/n; skip the rounding of that quotient.
        return [budget.total / (n * (n - 1))] * n
    denom = total + n * eps
    share = budget.total / (n - 1)
    return [(total - m + eps) / denom * share for m in mags]


@dataclass(frozen=True)
class Region:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("region must have positive extent")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def clamp(self, xy: np.ndarray) -> np.ndarray:
        return np.clip(xy, [self.x0, self.y0], [self.x1, self.y1])


def estimate_coverage(positions, radii, region: Region, resolution: int = 100,
                      method: str = "grid", seed: int = 0) -> float:
    """Fraction of ``region`` within ``radii[i]`` of some node ``i``.

    ``method="grid"`` samples the centres of a ``resolution x resolution``
    lattice; ``method="mc"`` draws ``resolution**2`` seeded uniform points.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(pos) == 0:
        return 0.0
    rad = np.broadcast_to(np.asarray(radii, dtype=float), (len(pos),))
    if method == "grid":
        xs = region.x0 + (np.arange(resolution) + 0.5) * (region.x1 - region.x0) / resolution
        ys = region.y0 + (np.arange(resolution) + 0.5) * (region.y1 - region.y0) / resolution
        gx, gy = np.meshgrid(xs, ys)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
    elif method == "mc":
        rng = np.random.default_rng(seed)
        pts = rng.uniform([region.x0, region.y0], [region.x1, region.y1], size=(resolution**2, 2))
    else:
        raise ValueError(f"unknown coverage method {method!r}")
    covered = np.zeros(len(pts), dtype=bool)
    for p, rr in zip(pos, rad):
        d2 = (pts[:, 0] - p[0]) ** 2 + (pts[:, 1] - p[1]) ** 2
        covered |= d2 <= rr * rr
    return float(covered.mean())
