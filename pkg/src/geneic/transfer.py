"""Attribute transfer by swapping main-object feature-map channels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import ae_decode, ae_encode
from .errors import ContractError
from .types import FeatureMapSet

SCORE_EPS = 1e-8
DEFAULT_FRACTION = 0.25


@dataclass(frozen=True)
class ChannelScores:
    scores: np.ndarray
    ranking: tuple[int, ...]


@dataclass(frozen=True)
class TransferPlan:
    channels: tuple[int, ...]
    fraction: float

    @property
    def c_r(self):
        return len(self.channels)


def center_weights(l, w, sigma=None):
    """Centred 2-D Gaussian over the l x w lattice, sigma = l / 4 by default."""
    sigma = l / 4.0 if sigma is None else sigma
    u = np.arange(l) - (l - 1) / 2.0
    v = np.arange(w) - (w - 1) / 2.0
    return np.exp(-(u[:, None] ** 2 + v[None, :] ** 2) / (2.0 * sigma ** 2))


def score_channels(fmap: FeatureMapSet) -> ChannelScores:
    """Centre-weighted share of each channel's absolute activation.

    Channels whose energy sits near the middle of the lattice (where the main
    object usually is) score high; background-dominated channels score low.
    """
    l, w, _ = fmap.shape
    g = center_weights(l, w)
    energy = np.abs(fmap.grid)
    scores = np.einsum("uv,uvk->k", g, energy) / (energy.sum(axis=(0, 1)) + SCORE_EPS)
    # stable sort on -score keeps lower channel index first on ties
    ranking = tuple(int(k) for k in np.argsort(-scores, kind="stable"))
    return ChannelScores(scores, ranking)


def plan_transfer(scores: ChannelScores, fraction=DEFAULT_FRACTION) -> TransferPlan:
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must be within [0, 1], got {fraction}")
    c_r = int(round(fraction * len(scores.ranking)))
    return TransferPlan(tuple(sorted(scores.ranking[:c_r])), float(fraction))


def apply_transfer(f_i: FeatureMapSet, f_j: FeatureMapSet, plan: TransferPlan) -> FeatureMapSet:
    if f_i.shape != f_j.shape:
        raise ContractError(f"feature map shapes differ: {f_i.shape} vs {f_j.shape}")
    out = np.array(f_i.grid)
    idx = list(plan.channels)
    out[:, :, idx] = f_j.grid[:, :, idx]
    return FeatureMapSet(out)


def transfer_grids(x_i, x_j, bundle, fraction=DEFAULT_FRACTION):
    """Return ``(f_i, f_j, plan, f_i')`` for inspection."""
    f_i = ae_encode(x_i, bundle)
    f_j = ae_encode(x_j, bundle)
    plan = plan_transfer(score_channels(f_i), fraction)
    return f_i, f_j, plan, apply_transfer(f_i, f_j, plan)


def make_transferred_image(x_i, x_j, bundle, fraction=DEFAULT_FRACTION):
    *_, swapped = transfer_grids(x_i, x_j, bundle, fraction)
    return ae_decode(swapped, bundle, id=f"{x_i.id}~{x_j.id}")
