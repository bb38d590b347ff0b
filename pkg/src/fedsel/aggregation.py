"""Combining client models into the next global model.

Sums run sequentially in ascending client id (then occurrence) order, so
aggregates are bit-reproducible regardless of the order updates arrive in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .models import ClientUpdate
from .selection import SelectionPlan


@dataclass(eq=False)
class AggregateResult:
    new_params: np.ndarray
    effective_weight_sum: float


def _params_of(update) -> np.ndarray:
    if isinstance(update, ClientUpdate):
        return update.new_params
    return np.asarray(update, dtype=np.float64)


def aggregate(plan: SelectionPlan, updates: Mapping[int, ClientUpdate], base=None) -> AggregateResult:
    """Weighted sum of the chosen clients' parameters.

    Each occurrence in ``plan.chosen`` contributes ``agg_weight * params``.  With
    ``base`` given, the sum is taken over deltas instead:
    ``base + sum(agg_weight * (params - base))``; both forms have the same
    expectation but the delta form does not rescale ``base`` when the weights
    of a particular draw do not sum to one.
    """
    missing = sorted({int(k) for k in plan.chosen if int(k) not in updates})
    if missing:
        raise ValueError(f"no update for chosen clients {missing}")
    order = np.argsort(plan.chosen, kind="stable")
    base = None if base is None else np.asarray(base, dtype=np.float64)
    acc = None
    for j in order:
        params = _params_of(updates[int(plan.chosen[j])])
        term = params if base is None else params - base
        contrib = plan.agg_weight[j] * term
        acc = contrib if acc is None else acc + contrib
    if acc is None:
        acc = np.zeros_like(base) if base is not None else np.zeros(0)
    new = acc if base is None else base + acc
    if not np.all(np.isfinite(new)):
        raise ValueError("aggregate is not finite")
    return AggregateResult(new, float(np.sum(plan.agg_weight)))


def full_aggregate(updates, weights, base=None) -> np.ndarray:
    """``sum_k omega_k w_k`` over all clients, summed in client-id order."""
    if isinstance(updates, Mapping):
        items = sorted(updates.items())
    else:
        items = sorted(((u.client_id, u) for u in updates), key=lambda kv: kv[0])
    weights = np.asarray(weights, dtype=np.float64)
    if len(items) != weights.shape[0]:
        raise ValueError(f"{len(items)} updates but {weights.shape[0]} weights")
    base = None if base is None else np.asarray(base, dtype=np.float64)
    acc = None
    for k, update in items:
        params = _params_of(update)
        term = params if base is None else params - base
        contrib = weights[k] * term
        acc = contrib if acc is None else acc + contrib
    return acc if base is None else base + acc
