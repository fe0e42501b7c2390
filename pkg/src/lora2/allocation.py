"""Sensitivity-driven rank allocation across adapters.

Each step the per-scalar sensitivity ``|w * g|`` of the tracked factors is
smoothed by two exponential moving averages (value and local variation);
their product is the smoothed score ``s``.  Scores are aggregated into one
importance per singular value and a global top-``budget`` selection decides
which singular values stay active.

Only ``lam`` and the two inner factors need tracking: the outer factors add
the same amount to every index of an adapter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .adapters import INNER_FACTORS, LORA2_FACTORS, OUTER_FACTORS, Lora2Config, param_count


class TrackingError(KeyError):
    pass


class BudgetError(ValueError):
    pass


def raw_sensitivity(w, g):
    return np.abs(np.multiply(w, g))


def tracked_factors(full: bool = False) -> tuple[str, ...]:
    return LORA2_FACTORS if full else ("lam",) + INNER_FACTORS


@dataclass
class SensitivityState:
    """EMA sensitivity and uncertainty per tracked scalar, keyed ``"<site>.<factor>"``."""

    ema_sens: dict[str, np.ndarray]
    ema_unc: dict[str, np.ndarray]
    beta1: float = 0.85
    beta2: float = 0.85
    step: int = 0

    def __post_init__(self):
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"EMA decay must lie in [0, 1), got {b}")
        if set(self.ema_sens) != set(self.ema_unc):
            raise TrackingError("sensitivity and uncertainty track different entries")

    @classmethod
    def for_adapters(cls, adapters: Mapping[str, object], full: bool = False, beta1=0.85, beta2=0.85):
        sens = {}
        for site, ad in adapters.items():
            params = ad.params()
            for f in tracked_factors(full):
                sens[f"{site}.{f}"] = np.zeros(params[f].shape)
        return cls(sens, {k: v.copy() for k, v in sens.items()}, beta1, beta2)

    @property
    def tracked(self) -> set[str]:
        return set(self.ema_sens)

    def score(self, key: str) -> np.ndarray:
        return self.ema_sens[key] * self.ema_unc[key]

    def scores(self, site: str) -> dict[str, np.ndarray]:
        prefix = site + "."
        return {k[len(prefix):]: self.score(k) for k in self.ema_sens if k.startswith(prefix)}

    def n_tracked_scalars(self) -> int:
        return sum(v.size for v in self.ema_sens.values())


def ema_update(state: SensitivityState, raw: Mapping[str, np.ndarray]) -> SensitivityState:
    """One smoothing step; returns a new state."""
    if set(raw) != state.tracked:
        missing = sorted(state.tracked - set(raw))
        extra = sorted(set(raw) - state.tracked)
        raise TrackingError(f"raw sensitivities do not match the tracked set (missing={missing}, extra={extra})")
    b1, b2 = state.beta1, state.beta2
    sens, unc = {}, {}
    for key, prev in state.ema_sens.items():
        cur = np.asarray(raw[key], dtype=np.float64).reshape(prev.shape)
        sens[key] = b1 * prev + (1.0 - b1) * cur
        unc[key] = b2 * state.ema_unc[key] + (1.0 - b2) * np.abs(cur - sens[key])
    return SensitivityState(sens, unc, b1, b2, state.step + 1)


def _need(scores: Mapping[str, np.ndarray], names: Iterable[str]):
    missing = [n for n in names if n not in scores]
    if missing:
        raise TrackingError(f"scores missing for {missing}")


def _site_scores(state_or_scores, site):
    if isinstance(state_or_scores, SensitivityState):
        return state_or_scores.scores(site)
    return state_or_scores


def importance_full(ad, scores, site: str = "") -> np.ndarray:
    """Importance per singular value using all five factors.

    ``scores`` is either a :class:`SensitivityState` (with ``site``) or a
    mapping from factor name to smoothed-score array.
    """
    s = _site_scores(scores, site)
    _need(s, LORA2_FACTORS)
    k = ad.k
    left = (s["u_in"].sum(axis=0) + s["u_out"].sum()) / k
    right = (s["v_in"].sum(axis=1) + s["v_out"].sum()) / k
    return s["lam"].reshape(-1) + left + right


def importance_simplified(ad, scores, site: str = "") -> np.ndarray:
    """Importance per singular value from ``lam`` and the inner factors only."""
    s = _site_scores(scores, site)
    _need(s, ("lam",) + INNER_FACTORS)
    k = ad.k
    return s["lam"].reshape(-1) + s["u_in"].sum(axis=0) / k + s["v_in"].sum(axis=1) / k


def stable_argsort(x) -> np.ndarray:
    """Descending order, ties broken by lower index."""
    return np.argsort(-np.asarray(x), kind="stable")


def skipped_fraction(cfgs: Sequence[Lora2Config]) -> float:
    """Share of trainable scalars whose sensitivity is never computed."""
    if not cfgs:
        raise ValueError("need at least one adapter config")
    outer = sum(c.din * c.k + c.k * c.dout for c in cfgs)
    return outer / sum(param_count(c) for c in cfgs)


def transformer_site_configs(n_layers=12, d_model=768, d_ffn=3072, k=8, r=8) -> list[Lora2Config]:
    """Adapter configs for four square attention sites and two FFN sites per layer."""
    per_layer = [(d_model, d_model)] * 4 + [(d_model, d_ffn), (d_ffn, d_model)]
    return [Lora2Config(din, dout, k, r) for _ in range(n_layers) for din, dout in per_layer]


@dataclass(frozen=True)
class BudgetSchedule:
    b_init: int
    b_target: int
    t_warmup: int
    t_final: int
    prune_every: int = 10

    def __post_init__(self):
        if self.b_target < 1 or self.b_target > self.b_init:
            raise ValueError(f"need 1 <= b_target <= b_init, got {self.b_target}, {self.b_init}")
        if self.t_warmup < 0 or self.t_warmup >= self.t_final:
            raise ValueError(f"need 0 <= t_warmup < t_final, got {self.t_warmup}, {self.t_final}")
        if self.prune_every < 1:
            raise ValueError("prune_every must be >= 1")

    def is_prune_step(self, t: int) -> bool:
        if t <= self.t_warmup or t > self.t_final:
            return False
        return t == self.t_final or (t - self.t_warmup) % self.prune_every == 0


def budget_at(sched: BudgetSchedule, t: int) -> int:
    """Cubic decay from ``b_init`` to ``b_target`` between warmup and final step."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t <= sched.t_warmup:
        return sched.b_init
    if t >= sched.t_final:
        return sched.b_target
    frac = 1.0 - (t - sched.t_warmup) / (sched.t_final - sched.t_warmup)
    # round half up, independent of the platform's tie rule
    return sched.b_target + int(math.floor((sched.b_init - sched.b_target) * frac**3 + 0.5))


@dataclass
class MaskUpdate:
    threshold: float
    ranks: list[int]
    retained: list[tuple[int, int]] = field(repr=False)


def select_top(scores: Sequence[np.ndarray], budget: int) -> list[tuple[int, int]]:
    """The ``budget`` best (adapter, index) pairs; ties go to earlier adapter, then lower index."""
    total = sum(len(s) for s in scores)
    if budget < 1:
        raise BudgetError(f"budget must be >= 1, got {budget}")
    if budget > total:
        raise BudgetError(f"budget {budget} exceeds the {total} available singular values")
    flat = [(-float(v), a, i) for a, s in enumerate(scores) for i, v in enumerate(np.asarray(s).reshape(-1))]
    flat.sort()
    return [(a, i) for _, a, i in flat[:budget]]


def global_mask_update(adapters: Sequence, scores: Sequence[np.ndarray], budget: int) -> MaskUpdate:
    """Keep the globally top-``budget`` singular values, mask and zero the rest.

    Previously masked indices that make the cut are unmasked with ``lam``
    still zero.  Adapters are updated in place.
    """
    if len(adapters) != len(scores):
        raise ValueError("one score vector per adapter required")
    for ad, s in zip(adapters, scores):
        if len(s) != ad.r:
            raise ValueError(f"score vector of length {len(s)} for an adapter with r={ad.r}")
    keep = select_top(scores, budget)
    threshold = min(float(scores[a][i]) for a, i in keep)
    for a, ad in enumerate(adapters):
        mask = np.zeros(ad.r, dtype=bool)
        mask[[i for b, i in keep if b == a]] = True
        ad.mask = mask
        ad.lam = np.where(mask, ad.lam, 0.0)
    return MaskUpdate(threshold, [int(ad.mask.sum()) for ad in adapters], keep)
