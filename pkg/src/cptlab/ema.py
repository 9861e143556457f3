"""Exponential moving average of model parameters, applied in place.

Every ``eta`` steps the live parameters are replaced by a decay-weighted
average of their current value and the value at the previous application:

    theta_t = current                                  if t <= 0 or t mod eta != 0
    theta_t = alpha * anchor + (1 - alpha) * current   otherwise

The averaged theta_t becomes both the live training parameters and the new
anchor. Optimizer moments are never touched by the averaging.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, SequencingError
from .tensor_store import ParameterSet

DEFAULT_ALPHA = 0.92
DEFAULT_ETA = 1


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = DEFAULT_ALPHA
    eta: int = DEFAULT_ETA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("ema.alpha must be in [0, 1]")
        if self.eta < 1:
            raise ConfigError("ema.eta must be a positive integer")


@dataclass(frozen=True)
class EmaState:
    """Anchor = parameters at the last application step, post-averaging."""

    anchor: ParameterSet
    last_applied_step: int = 0


def ema_apply(
    state: EmaState, current: ParameterSet, t: int, cfg: EmaConfig
) -> tuple[ParameterSet, EmaState]:
    """Apply the averaging recurrence at step ``t``.

    Off-schedule steps return ``current`` and ``state`` unchanged (the very
    same objects, so parameters stay bit-identical). On-schedule steps return
    the averaged set and a state anchored on it.
    """
    if t <= state.last_applied_step:
        raise SequencingError(
            f"ema_apply at step {t} after step {state.last_applied_step}"
        )
    if t <= 0 or t % cfg.eta != 0:
        return current, state
    state.anchor.check_congruent(current)
    one_minus = 1.0 - cfg.alpha
    # anchor + (1-alpha)*(current-anchor) == alpha*anchor + (1-alpha)*current,
    # arranged so the movement away from the anchor is an exact scaling
    averaged = {}
    for name, anchor_arr in state.anchor.items():
        averaged[name] = anchor_arr + one_minus * (current[name] - anchor_arr)
    theta = state.anchor.replace(averaged)
    return theta, EmaState(anchor=theta, last_applied_step=t)


def ema_unroll_reference(
    anchor: ParameterSet, history: Sequence[ParameterSet], alpha: float
) -> ParameterSet:
    """Closed-form unroll of the recurrence; test oracle only.

    ``history`` holds the pre-averaging parameters at successive application
    steps (multiples of eta). The result is

        alpha^n * anchor + sum_k (1 - alpha) * alpha^(n-k) * history[k-1]

    computed as a direct weighted sum in float64.
    """
    if not history:
        raise ValueError("history must be non-empty")
    for entry in history:
        anchor.check_congruent(entry)
    n = len(history)
    out = {}
    for name, anchor_arr in anchor.items():
        acc = alpha**n * anchor_arr.astype(np.float64)
        for k, entry in enumerate(history, start=1):
            acc = acc + (1.0 - alpha) * alpha ** (n - k) * entry[name].astype(np.float64)
        out[name] = acc.astype(anchor_arr.dtype)
    return anchor.replace(out)
