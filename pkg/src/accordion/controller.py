"""Critical-regime detection and communication-level switching.

The coordinator sums the applied gradient of every unit (a layer when
switching compression levels, the whole flattened model when switching batch
size) over each epoch. Every ``period`` epochs the norm of that sum is compared
with the one recorded at the previous check; a relative change of at least
``eta`` marks a critical regime and selects the high-communication level.
A learning-rate decay forces the high-communication level immediately.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .compressor import Level
from .errors import ConfigError, ShapeError
from .linalg import norm2

MODES = ("compression", "batchsize")


@dataclass(frozen=True)
class AccordionConfig:
    level_low: Level
    level_high: Level
    eta: float = 0.5
    period_epochs: int = 10
    mode: str = "compression"
    batch_monotone_increase: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.period_epochs < 1:
            raise ConfigError("period_epochs must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown accordion mode {self.mode!r}")
        if (self.mode == "batchsize") != (self.level_low.scheme == "batchsize"):
            raise ConfigError("batchsize mode requires batchsize levels and vice versa")
        if not self.level_low.communicates_more_than(self.level_high):
            raise ConfigError(f"level_low {self.level_low} must communicate more than level_high {self.level_high}")


@dataclass(frozen=True)
class AccordionState:
    levels: dict  # unit -> Level
    delta: dict = field(default_factory=dict)  # unit -> summed gradient this epoch
    iters: dict = field(default_factory=dict)  # unit -> accumulations this epoch
    prev: dict = field(default_factory=dict)  # unit -> (norm, iters) at the last check
    epochs_since_check: int = 0


def initial_level(config: AccordionConfig) -> Level:
    """Training opens in a critical regime, so both modes start at the low level."""
    return config.level_low


def init_state(config: AccordionConfig, units) -> AccordionState:
    return AccordionState(levels={u: initial_level(config) for u in units})


def accumulate(state: AccordionState, unit_id, grad: np.ndarray) -> AccordionState:
    grad = np.asarray(grad, dtype=np.float64)
    cur = state.delta.get(unit_id)
    if cur is not None and cur.shape != grad.shape:
        raise ShapeError(f"unit {unit_id!r}: accumulated {cur.shape}, got {grad.shape}")
    new = grad.copy() if cur is None else cur + grad
    return replace(
        state,
        delta={**state.delta, unit_id: new},
        iters={**state.iters, unit_id: state.iters.get(unit_id, 0) + 1},
    )


def is_critical(delta_prev_norm: float, delta_curr_norm: float, gamma_curr: float, gamma_next: float, eta: float) -> bool:
    if gamma_next < gamma_curr:
        return True
    if delta_prev_norm == 0.0:
        # any movement out of a zero reference is an unbounded relative change
        return delta_curr_norm > 0.0
    return abs(delta_prev_norm - delta_curr_norm) / delta_prev_norm >= eta


def decide(
    delta_prev_norm: float,
    delta_curr_norm: float,
    gamma_curr: float,
    gamma_next: float,
    eta: float,
    level_low: Level,
    level_high: Level,
) -> Level:
    if is_critical(delta_prev_norm, delta_curr_norm, gamma_curr, gamma_next, eta):
        return level_low
    return level_high


def _suppressed(config: AccordionConfig, current: Level, proposed: Level) -> Level:
    if (
        config.mode == "batchsize"
        and config.batch_monotone_increase
        and current == config.level_high
        and proposed == config.level_low
    ):
        return current
    return proposed


def end_of_epoch(state: AccordionState, config: AccordionConfig, lr_curr: float, lr_next: float, epoch: int):
    """Close the epoch's accumulation and pick each unit's level for the next epoch.

    Returns ``(new_state, decisions)`` where ``decisions`` maps unit to Level.
    """
    units = list(state.levels)
    curr = {}
    for u in units:
        d = state.delta.get(u)
        curr[u] = (0.0 if d is None else norm2(d), state.iters.get(u, 0))

    levels = dict(state.levels)
    decay = lr_next < lr_curr
    since = state.epochs_since_check + 1
    if not state.prev:
        # nothing to compare against yet; keep the opening level unless the lr drops
        if decay:
            levels = {u: _suppressed(config, levels[u], config.level_low) for u in units}
        prev, since = curr, 0
    elif decay or since >= config.period_epochs:
        for u in units:
            prev_norm, prev_iters = state.prev[u]
            norm, iters = curr[u]
            if prev_iters and iters and prev_iters != iters:
                # compare per-iteration sums when the batch size changed the round count
                prev_norm = prev_norm * iters / prev_iters
            proposed = decide(prev_norm, norm, lr_curr, lr_next, config.eta, config.level_low, config.level_high)
            levels[u] = _suppressed(config, levels[u], proposed)
        prev, since = curr, 0
    else:
        prev = state.prev

    new_state = AccordionState(levels=levels, prev=prev, epochs_since_check=since)
    return new_state, dict(levels)
