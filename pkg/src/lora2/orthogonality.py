"""Soft orthogonality penalties for the five-factor adapter."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tensor, constant, sq_frobenius


class OrthMode(str, enum.Enum):
    INNER_LEFT = "uv"  # u_out, u_in
    INNER_RIGHT = "UV"  # v_in, v_out
    BOTH_PAIRS = "uv&UV"
    COMPOSITE = "P&Q"  # u_out @ u_in, v_in @ v_out
    ALL = "all"

    @classmethod
    def parse(cls, value) -> "OrthMode":
        if isinstance(value, cls):
            return value
        for m in cls:
            if value in (m.value, m.name, m.name.lower()):
                return m
        raise ValueError(f"unknown orthogonality mode {value!r}")


@dataclass(frozen=True)
class OrthConfig:
    mode: OrthMode = OrthMode.ALL
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "mode", OrthMode.parse(self.mode))
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


def gram_penalty(m):
    """``||G^T G - I||_F^2`` where ``G`` is ``m`` or ``m.T``, whichever is tall.

    Works on tensors (returns a 1x1 tensor) and on arrays (returns a float).
    """
    if not isinstance(m, Tensor):
        return gram_penalty(constant(m)).item()
    g = m if m.shape[0] >= m.shape[1] else m.T
    n = g.shape[1]
    return sq_frobenius(g.T @ g - constant(np.eye(n)))


def operands(leaves: Mapping[str, Tensor], mode: OrthMode) -> dict[str, Tensor]:
    """The matrices penalized under ``mode``, keyed by a short label."""
    mode = OrthMode.parse(mode)
    ops: dict[str, Tensor] = {}
    if mode in (OrthMode.INNER_LEFT, OrthMode.BOTH_PAIRS, OrthMode.ALL):
        ops["u_out"] = leaves["u_out"]
        ops["u_in"] = leaves["u_in"]
    if mode in (OrthMode.INNER_RIGHT, OrthMode.BOTH_PAIRS, OrthMode.ALL):
        ops["v_in"] = leaves["v_in"]
        ops["v_out"] = leaves["v_out"]
    if mode in (OrthMode.COMPOSITE, OrthMode.ALL):
        ops["P"] = leaves["u_out"] @ leaves["u_in"]
        ops["Q"] = leaves["v_in"] @ leaves["v_out"]
    return ops


def orth_loss(ad, mode=OrthMode.ALL, gamma: float = 0.1, leaves: Mapping[str, Tensor] | None = None):
    """``gamma`` times the summed Gram penalties of the mode's operands.

    With ``leaves`` given the result is a tensor on their tape; otherwise the
    adapter's current values are used and a float is returned.
    """
    as_float = leaves is None
    if as_float:
        leaves = {n: constant(v) for n, v in ad.params().items()}
    terms = [gram_penalty(m) for m in operands(leaves, mode).values()]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    out = float(gamma) * out
    return out.item() if as_float else out


def penalty_terms(ad, mode=OrthMode.ALL) -> dict[str, float]:
    """Each operand's Gram penalty, unweighted."""
    leaves = {n: constant(v) for n, v in ad.params().items()}
    return {name: gram_penalty(m).item() for name, m in operands(leaves, mode).items()}
