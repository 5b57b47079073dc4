"""Attribute/semantic consistency objectives and self-critical advantages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateBatchError
from .types import JointEmbedding

DEGENERATE_EPS = 1e-6
DEFAULT_BETA = 0.5


def _vec(x):
    return np.asarray(x.vec if isinstance(x, JointEmbedding) else x, dtype=np.float64).ravel()


def _unit(x):
    v = _vec(x)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise ContractError("zero-norm embedding")
    return v / n


def cosine(a, b):
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine of a zero-norm vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


reward = cosine


@dataclass(frozen=True)
class DeltaPair:
    dV: np.ndarray
    dS: np.ndarray

    @property
    def degenerate(self):
        return bool(np.linalg.norm(self.dV) < DEGENERATE_EPS or np.linalg.norm(self.dS) < DEGENERATE_EPS)


def delta_pair(v, v_prime, s, s_prime):
    """Change directions between an original/transferred pair in the joint space."""
    dims = {_vec(e).shape for e in (v, v_prime, s, s_prime)}
    if len(dims) != 1:
        raise ContractError(f"joint embeddings disagree in dimension: {sorted(dims)}")
    return DeltaPair(_unit(v) - _unit(v_prime), _unit(s) - _unit(s_prime))


def attribute_reward(dp):
    """cos(dV, dS); a degenerate pair has no direction to agree with and scores 0."""
    return 0.0 if dp.degenerate else cosine(dp.dV, dp.dS)


def attribute_loss(pairs):
    """Mean of ``1 - cos(dV, dS)`` over the non-degenerate pairs."""
    live = [p for p in pairs if not p.degenerate]
    if not live:
        raise DegenerateBatchError(f"all {len(pairs)} pairs are degenerate")
    return float(np.mean([1.0 - cosine(p.dV, p.dS) for p in live]))


def count_degenerate(pairs):
    return sum(p.degenerate for p in pairs)


def semantic_loss(v_bars, s_bars):
    if len(v_bars) != len(s_bars) or not v_bars:
        raise ContractError("semantic loss needs equal, non-empty image and caption lists")
    return float(np.mean([1.0 - cosine(v, s) for v, s in zip(v_bars, s_bars)]))


def total_loss(L_a, L_s, beta=DEFAULT_BETA):
    if beta < 0:
        raise ContractError("beta must be non-negative")
    return L_a + beta * L_s


@dataclass(frozen=True)
class RewardReport:
    r_attr: float
    r_sem: float
    beta: float = DEFAULT_BETA
    attr_degenerate: bool = False

    @property
    def combined(self):
        return self.r_attr + self.beta * self.r_sem

    def to_dict(self):
        return {"r_attr": self.r_attr, "r_sem": self.r_sem, "combined": self.combined,
                "attr_degenerate": self.attr_degenerate}


def reward_report(v, v_prime, s, s_prime, beta=DEFAULT_BETA):
    """Rewards for one (image, transferred image, caption, transferred caption) quadruple."""
    dp = delta_pair(v, v_prime, s, s_prime)
    return RewardReport(attribute_reward(dp), cosine(v, s), beta, dp.degenerate)


@dataclass(frozen=True)
class LossReport:
    L_a: float | None
    L_s: float
    beta: float
    n: int
    n_degenerate: int = 0

    @property
    def L(self):
        return None if self.L_a is None else total_loss(self.L_a, self.L_s, self.beta)

    def to_dict(self):
        return {"L_a": self.L_a, "L_s": self.L_s, "L": self.L, "beta": self.beta,
                "n": self.n, "n_degenerate": self.n_degenerate}


def loss_report(reports, beta=DEFAULT_BETA):
    """Batch losses from per-pair rewards; L_a is None when every pair is degenerate."""
    live = [r for r in reports if not r.attr_degenerate]
    L_a = float(np.mean([1.0 - r.r_attr for r in live])) if live else None
    L_s = float(np.mean([1.0 - r.r_sem for r in reports]))
    return LossReport(L_a, L_s, beta, len(reports), len(reports) - len(live))


@dataclass(frozen=True)
class AdvantageBatch:
    advantages: np.ndarray
    sampled: tuple[RewardReport, ...]
    greedy: tuple[RewardReport, ...]
    beta: float
    # indices of pairs that contribute to the gradient (all of them unless set)
    live: tuple[int, ...] | None = None

    def __len__(self):
        return len(self.advantages)


def scst_advantages(sampled, greedy, beta=DEFAULT_BETA):
    """Per-pair ``(r_attr^s - r_attr^g) + beta * (r_sem^s - r_sem^g)``."""
    if len(sampled) != len(greedy):
        raise ContractError("sampled and greedy reward lists differ in length")
    adv = np.array(
        [(s.r_attr - g.r_attr) + beta * (s.r_sem - g.r_sem) for s, g in zip(sampled, greedy)],
        dtype=np.float64,
    )
    return AdvantageBatch(adv, tuple(sampled), tuple(greedy), beta)
