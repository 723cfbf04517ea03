"""Nadam (Adam with Nesterov momentum) and piecewise-constant learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class NadamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.004
    t: int = 0
    m_schedule: float = 1.0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def momentum_cache(self, step: int) -> float:
        return self.beta1 * (1.0 - 0.5 * 0.96 ** (step * self.schedule_decay))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{name}/m"] = self.m[name]
            out[f"{name}/v"] = self.v[name]
        out["nadam/t"] = np.array(self.t, dtype=np.float32)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], params: list[Parameter]) -> None:
        self.t = int(np.asarray(state["nadam/t"]).reshape(-1)[0])
        # replay the momentum-cache product exactly instead of storing it as f32
        self.m_schedule = 1.0
        for step in range(1, self.t + 1):
            self.m_schedule *= self.momentum_cache(step)
        self.m, self.v = {}, {}
        for p in params:
            self.m[p.name] = np.asarray(state[f"{p.name}/m"], dtype=np.float32).reshape(p.shape).copy()
            self.v[p.name] = np.asarray(state[f"{p.name}/v"], dtype=np.float32).reshape(p.shape).copy()


def nadam_step(params: list[Parameter], state: NadamState, lr: float, grads: list[np.ndarray] | None = None) -> None:
    """Apply one Nadam update in place.

    ``grads`` defaults to each parameter's ``.grad`` (missing grads count as
    zero). A non-finite gradient aborts the step before anything is modified.
    """
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter is required")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {p.name}; step aborted")

    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    mu_t = state.momentum_cache(t)
    mu_next = state.momentum_cache(t + 1)
    m_schedule_new = state.m_schedule * mu_t
    m_schedule_next = m_schedule_new * mu_next
    v_correction = 1.0 - b2**t

    for p, g in zip(params, grads):
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ValueError(f"{p.name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        g_prime = g / (1.0 - m_schedule_new)
        m_prime = m / (1.0 - m_schedule_next)
        v_prime = v / v_correction
        m_bar = (1.0 - mu_t) * g_prime + mu_next * m_prime
        p.data -= (lr * m_bar / (np.sqrt(v_prime) + state.eps)).astype(p.dtype)

    state.t = t
    state.m_schedule = m_schedule_new


class ScheduleExhausted(IndexError):
    """Raised when asking for a learning rate past the last scheduled epoch."""


@dataclass(frozen=True)
class LrSchedule:
    phases: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("schedule needs at least one phase")
        for epochs, rate in self.phases:
            if epochs <= 0 or rate <= 0:
                raise ValueError(f"invalid phase ({epochs}, {rate})")

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.phases)


def lr_for_epoch(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    start = 0
    for epochs, rate in schedule.phases:
        if epoch < start + epochs:
            return rate
        start += epochs
    raise ScheduleExhausted(f"epoch {epoch} is past the {start}-epoch schedule")


PAPER_LEVEL0 = LrSchedule(((50, 1e-3), (50, 1e-4)))
PAPER_LEVEL1 = LrSchedule(((50, 1e-4),))
