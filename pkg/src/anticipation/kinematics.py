"""Ego measurement estimator: deterministic unicycle update.

Heading follows the velocity vector; ``tau`` acts as a heading rate and
``alpha`` as a longitudinal acceleration.  Speed is clamped at zero (no
reverse driving).  The vectorized helpers operate on stacked arrays so the
batched rollout and the world simulator share one implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DT = 0.1


@dataclass(frozen=True)
class Measurements:
    p: tuple[float, float]
    v: tuple[float, float]

    @property
    def speed(self) -> float:
        return math.hypot(*self.v)

    def as_array(self) -> np.ndarray:
        return np.array([*self.p, *self.v], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Measurements":
        a = [float(x) for x in a]
        return cls((a[0], a[1]), (a[2], a[3]))


@dataclass(frozen=True)
class ActionCmd:
    alpha: float
    tau: float

    def clamped(self, alpha_bounds=(-np.inf, np.inf), tau_bounds=(-np.inf, np.inf)) -> "ActionCmd":
        return ActionCmd(float(np.clip(self.alpha, *alpha_bounds)), float(np.clip(self.tau, *tau_bounds)))


@dataclass(frozen=True)
class PoseDelta:
    """Per-step ego displacement.

    ``dp`` is in the world frame; ``heading`` is the ego heading *before* the
    step, needed to express ``dp`` in the ego frame of the current OGM.
    """

    dp: tuple[float, float]
    dtheta: float
    heading: float = 0.0

    def local_dp(self) -> tuple[float, float]:
        """Displacement as (forward, left) metres in the pre-step ego frame."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = self.dp
        return (c * dx + s * dy, -s * dx + c * dy)

    @classmethod
    def zero(cls) -> "PoseDelta":
        return cls((0.0, 0.0), 0.0, 0.0)

    @property
    def is_zero(self) -> bool:
        return self.dp == (0.0, 0.0) and self.dtheta == 0.0


def heading_of(v, fallback: float = 0.0) -> float:
    vx, vy = float(v[0]), float(v[1])
    if vx == 0.0 and vy == 0.0:
        return fallback
    return math.atan2(vy, vx)


def _validate(dt: float, *values: float) -> None:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not all(math.isfinite(x) for x in values):
        raise ValueError(f"non-finite input: {values}")


def measurement_step(
    m: Measurements, a: ActionCmd, dt: float = DEFAULT_DT, prev_heading: float = 0.0
) -> tuple[Measurements, PoseDelta]:
    """Advance the ego one step.  ``prev_heading`` is used only when the ego is at rest."""
    _validate(dt, *m.p, *m.v, a.alpha, a.tau)
    theta = heading_of(m.v, prev_heading)
    s_next = max(0.0, m.speed + a.alpha * dt)
    dtheta = a.tau * dt
    theta_next = theta + dtheta
    c, s = math.cos(theta_next), math.sin(theta_next)
    dp = (s_next * dt * c, s_next * dt * s)
    p_next = (m.p[0] + dp[0], m.p[1] + dp[1])
    v_next = (s_next * c, s_next * s)
    return Measurements(p_next, v_next), PoseDelta(dp, dtheta, theta)


def step_arrays(meas: np.ndarray, actions: np.ndarray, dt: float, headings: np.ndarray | None = None):
    """Vectorized :func:`measurement_step`.

    meas: (N, 4) rows of (px, py, vx, vy); actions: (N, 2) rows of (alpha, tau);
    headings: fallback heading per row for stationary egos.
    Returns (next_meas (N, 4), dp (N, 2), dtheta (N,), heading (N,)).
    """
    meas = np.asarray(meas, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not (np.all(np.isfinite(meas)) and np.all(np.isfinite(actions))):
        raise ValueError("non-finite measurements or actions")
    vx, vy = meas[:, 2], meas[:, 3]
    speed = np.hypot(vx, vy)
    fallback = np.zeros(len(meas)) if headings is None else np.asarray(headings, dtype=np.float64)
    theta = np.where(speed > 0, np.arctan2(vy, vx), fallback)
    s_next = np.maximum(0.0, speed + actions[:, 0] * dt)
    dtheta = actions[:, 1] * dt
    theta_next = theta + dtheta
    c, s = np.cos(theta_next), np.sin(theta_next)
    dp = np.stack([s_next * dt * c, s_next * dt * s], axis=1)
    nxt = np.stack([meas[:, 0] + dp[:, 0], meas[:, 1] + dp[:, 1], s_next * c, s_next * s], axis=1)
    return nxt, dp, dtheta, theta


def replay(m0: Measurements, actions, dt: float = DEFAULT_DT, heading0: float = 0.0) -> list[Measurements]:
    out = [m0]
    heading = heading_of(m0.v, heading0)
    for a in actions:
        nxt, d = measurement_step(out[-1], a, dt, heading)
        heading = d.heading + d.dtheta
        out.append(nxt)
    return out


@dataclass
class InverseResult:
    actions: list[ActionCmd]
    flagged: bool


def inverse_actions(trajectory, dt: float = DEFAULT_DT, heading0: float | None = None) -> InverseResult:
    """Recover the action sequence that reproduces ``trajectory`` under :func:`measurement_step`.

    alpha comes from the speed change, tau from the heading change of the
    velocity vector.  A stationary sample carries the previous heading; a
    stationary first sample with no ``heading0`` starts at heading 0 and sets
    ``flagged``.
    """
    traj = list(trajectory)
    if len(traj) < 2:
        raise ValueError("trajectory needs at least two samples")
    _validate(dt)
    flagged = False
    if traj[0].speed == 0.0 and heading0 is None:
        flagged = True
    heading = heading_of(traj[0].v, 0.0 if heading0 is None else heading0)
    actions = []
    for prev, cur in zip(traj[:-1], traj[1:]):
        alpha = (cur.speed - prev.speed) / dt
        if cur.speed > 0.0:
            new_heading = heading_of(cur.v)
        else:
            # stopped: use the displacement direction if any, else keep heading
            dx, dy = cur.p[0] - prev.p[0], cur.p[1] - prev.p[1]
            new_heading = math.atan2(dy, dx) if (dx or dy) else heading
        dtheta = math.remainder(new_heading - heading, 2 * math.pi)
        actions.append(ActionCmd(alpha, dtheta / dt))
        heading = heading + dtheta
    return InverseResult(actions, flagged)
