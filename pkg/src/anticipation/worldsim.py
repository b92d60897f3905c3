"""Seedable synthetic traffic with agents that react to the ego vehicle.

Roads run along the world x axis.  Every non-ego agent is longitudinal only
and follows its lead vehicle in the same lane (the ego counts as a lead), so
an ego brake propagates backwards through the queue while vehicles ahead of
the ego are unaffected.  Two modes:

* highway: several same-direction lanes, fast ego, 3 real-valued channels
  (map with lane lines, occupancy, ego), antialiased rendering;
* urban: one lane each way plus parked obstacles, slow ego that drives
  straight (no steering), 2 binary channels (occupancy, ego).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gridops import Ogm, ego_footprint, render_rect
from .kinematics import ActionCmd, step_arrays


@dataclass
class FollowParams:
    k_v: float = 0.5
    k_g: float = 1.0
    headway: float = 1.5
    min_gap: float = 2.0
    a_max: float = 6.0

    def accel(self, v, v_des, gap):
        """Car-following acceleration; only a gap shortfall contributes."""
        gap_des = self.headway * v + self.min_gap
        a = self.k_v * (v_des - v) + self.k_g * np.minimum(0.0, gap - gap_des)
        return np.clip(a, -self.a_max, self.a_max)


@dataclass
class ScenarioSpec:
    mode: str = "highway"
    n_agents: int = 40
    length: int = 40
    policy: str = "recorded"          # recorded | scripted | rare-sample
    seed: int = 0
    h: int = 64
    w: int = 64
    meters_per_pixel: float = 0.5
    dt: float = 0.1
    scripted_actions: list | None = None
    rare_policy: str = "hard-brake"
    rare_start: int | None = None     # step at which scripted/rare actions take over
    train_actions: np.ndarray | None = None   # empirical actions for tail sampling
    follow: FollowParams = field(default_factory=FollowParams)

    def __post_init__(self):
        if self.mode not in ("highway", "urban"):
            raise ValueError(f"mode must be highway or urban, got {self.mode!r}")
        if self.policy not in ("recorded", "scripted", "rare-sample"):
            raise ValueError(f"unknown ego policy {self.policy!r}")
        if self.length < 2:
            raise ValueError("sequence length must be >= 2")
        if self.n_agents < 0:
            raise ValueError("n_agents must be non-negative")

    @property
    def channel_roles(self) -> tuple[str, ...]:
        return ("map", "occupancy", "ego") if self.mode == "highway" else ("occupancy", "ego")

    @property
    def value_mode(self) -> str:
        return "real" if self.mode == "highway" else "binary"

    @property
    def anchor(self) -> tuple[int, int]:
        return (self.h // 2, self.w // 2)


@dataclass
class ModeParams:
    n_lanes: int
    lane_width: float
    directions: tuple[int, ...]       # +1 along x, -1 oncoming
    ego_lane: int
    ego_speed: tuple[float, float]
    agent_speed: tuple[float, float]
    accel_noise: float
    alpha_bounds: tuple[float, float]
    steer: bool
    n_obstacles: int


MODES = {
    "highway": ModeParams(4, 3.5, (1, 1, 1, 1), 1, (12.0, 18.0), (12.0, 18.0), 0.8, (-6.0, 4.0), True, 0),
    "urban": ModeParams(2, 3.5, (1, -1), 0, (0.0, 6.0), (2.0, 7.0), 0.5, (-4.0, 3.0), False, 4),
}

EGO_LENGTH, EGO_WIDTH = 4.5, 2.0
LANE_LINE_WIDTH = 0.5


@dataclass
class WorldState:
    lanes: int
    lane_width: float
    directions: np.ndarray            # (lanes,)
    obstacles: np.ndarray             # (M, 4): x, y, length, width (static)
    pos: np.ndarray                   # (N, 2) agent centres
    speed: np.ndarray                 # (N,)
    lane: np.ndarray                  # (N,) lane index
    size: np.ndarray                  # (N, 2) length, width
    v_des: np.ndarray                 # (N,)
    ego: np.ndarray                   # (4,) px, py, vx, vy
    ego_heading: float
    time: float = 0.0
    dt: float = 0.1
    collided: bool = False
    follow: FollowParams = field(default_factory=FollowParams)

    def copy(self) -> "WorldState":
        return replace(self, pos=self.pos.copy(), speed=self.speed.copy(), lane=self.lane.copy(),
                       size=self.size.copy(), v_des=self.v_des.copy(), ego=self.ego.copy(),
                       obstacles=self.obstacles.copy(), directions=self.directions.copy())

    def lane_center(self, lane) -> np.ndarray:
        return (np.asarray(lane) + 0.5) * self.lane_width

    @property
    def ego_lane(self) -> int:
        return int(np.clip(np.floor(self.ego[1] / self.lane_width), 0, self.lanes - 1))

    @property
    def ego_speed(self) -> float:
        return float(math.hypot(self.ego[2], self.ego[3]))


def _lead_gaps(state: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """For every agent: bumper gap to its lead and the lead's speed (inf / own speed if none)."""
    n = len(state.speed)
    gaps = np.full(n, np.inf)
    lead_v = state.speed.copy()
    ego_len = EGO_LENGTH
    for ln in range(state.lanes):
        d = state.directions[ln]
        idx = np.flatnonzero(state.lane == ln)
        # longitudinal coordinate in the driving direction
        s = d * state.pos[idx, 0]
        lengths = state.size[idx, 0]
        speeds = state.speed[idx]
        cand_s, cand_len, cand_v = [s], [lengths], [speeds]
        if d > 0 and state.ego_lane == ln:
            cand_s.append(np.array([state.ego[0]]))
            cand_len.append(np.array([ego_len]))
            cand_v.append(np.array([state.ego_speed]))
        obs = state.obstacles
        if len(obs):
            in_lane = np.floor(obs[:, 1] / state.lane_width).astype(int) == ln
            cand_s.append(d * obs[in_lane, 0])
            cand_len.append(obs[in_lane, 2])
            cand_v.append(np.zeros(in_lane.sum()))
        all_s = np.concatenate(cand_s)
        all_len = np.concatenate(cand_len)
        all_v = np.concatenate(cand_v)
        for k, i in enumerate(idx):
            ahead = all_s - s[k]
            ahead[k] = np.inf  # self
            ahead[ahead <= 0] = np.inf
            j = int(np.argmin(ahead))
            if np.isfinite(ahead[j]):
                gaps[i] = ahead[j] - 0.5 * (all_len[j] + lengths[k])
                lead_v[i] = all_v[j]
    return gaps, lead_v


def world_step(state: WorldState, action: ActionCmd) -> WorldState:
    """Advance the ego by the measurement estimator and every agent by car-following."""
    new = state.copy()
    gaps, _ = _lead_gaps(state)
    acc = state.follow.accel(state.speed, state.v_des, gaps)
    new.speed = np.maximum(0.0, state.speed + acc * state.dt)
    dirs = state.directions[state.lane]
    new.pos[:, 0] = state.pos[:, 0] + dirs * new.speed * state.dt
    nxt, dp, dtheta, theta = step_arrays(state.ego[None], np.array([[action.alpha, action.tau]]), state.dt,
                                         np.array([state.ego_heading]))
    new.ego = nxt[0]
    new.ego_heading = float(theta[0] + dtheta[0])
    new.time = state.time + state.dt
    new.collided = state.collided or _collision(new)
    return new


def _collision(state: WorldState) -> bool:
    """Axis-aligned overlap test between the ego / agents in each lane."""
    gaps, _ = _lead_gaps(state)
    if np.any(gaps < 0):
        return True
    ex, ey = state.ego[0], state.ego[1]
    if len(state.speed):
        dx = np.abs(state.pos[:, 0] - ex) - 0.5 * (state.size[:, 0] + EGO_LENGTH)
        dy = np.abs(state.pos[:, 1] - ey) - 0.5 * (state.size[:, 1] + EGO_WIDTH)
        if np.any((dx < 0) & (dy < 0)):
            return True
    return False


# ---------------------------------------------------------------- rendering

def _to_pixels(spec: ScenarioSpec, state: WorldState, xy: np.ndarray) -> np.ndarray:
    """World points (N, 2) to ego-frame (row, col) pixel coordinates."""
    c, s = math.cos(state.ego_heading), math.sin(state.ego_heading)
    rel = xy - state.ego[None, :2]
    fwd = c * rel[:, 0] + s * rel[:, 1]
    left = -s * rel[:, 0] + c * rel[:, 1]
    ar, ac = spec.anchor
    return np.stack([ar - fwd / spec.meters_per_pixel, ac - left / spec.meters_per_pixel], axis=1)


def _rel_angle(world_angle: float, ego_heading: float) -> float:
    # rectangles are symmetric under a half turn
    a = math.remainder(world_angle - ego_heading, math.pi)
    return 0.0 if abs(a) < 1e-12 else a


def rasterize(spec: ScenarioSpec, state: WorldState) -> Ogm:
    h, w, mpp = spec.h, spec.w, spec.meters_per_pixel
    binary = spec.value_mode == "binary"
    roles = spec.channel_roles
    data = np.zeros((h, w, len(roles)))
    ang = _rel_angle(0.0, state.ego_heading)
    reach = math.hypot(h, w) * mpp / 2 + 6.0

    occ = roles.index("occupancy")
    boxes = [(state.pos, state.size)]
    if len(state.obstacles):
        boxes.append((state.obstacles[:, :2], state.obstacles[:, 2:4]))
    for pos, size in boxes:
        if not len(pos):
            continue
        near = np.hypot(pos[:, 0] - state.ego[0], pos[:, 1] - state.ego[1]) < reach
        if not near.any():
            continue
        pix = _to_pixels(spec, state, pos[near])
        for (r, c), (ln, wd) in zip(pix, size[near]):
            rect = render_rect(h, w, (r, c), ln / mpp, wd / mpp, ang, binary)
            data[..., occ] = np.maximum(data[..., occ], rect)

    if "map" in roles:
        k = roles.index("map")
        ys = np.arange(state.lanes + 1) * state.lane_width
        pts = np.stack([np.full_like(ys, state.ego[0]), ys], axis=1)
        for r, c in _to_pixels(spec, state, pts):
            line = render_rect(h, w, (r, c), 4.0 * max(h, w), LANE_LINE_WIDTH / mpp, ang, binary)
            data[..., k] = np.maximum(data[..., k], line)

    e = roles.index("ego")
    data[..., e] = ego_footprint(h, w, spec.anchor, EGO_LENGTH / mpp, EGO_WIDTH / mpp, binary)
    data = np.clip(data, 0.0, 1.0)
    if not binary:
        data = np.round(data * 255.0) / 255.0
    return Ogm(data, spec.anchor, mpp, roles, spec.value_mode)


# ---------------------------------------------------------------- scenarios

def initial_state(spec: ScenarioSpec, rng: np.random.Generator) -> WorldState:
    mp = MODES[spec.mode]
    dirs = np.array(mp.directions, dtype=np.float64)
    ego_v = rng.uniform(*mp.ego_speed)
    ego_y = (mp.ego_lane + 0.5) * mp.lane_width
    heading = 0.0
    ego = np.array([0.0, ego_y, ego_v, 0.0])

    # spread agents over a long stretch, at least a minimum gap apart
    pos, lane, size, vdes, speed = [], [], [], [], []
    per_lane = max(1, spec.n_agents // mp.n_lanes) if spec.n_agents else 0
    span = (-120.0, 160.0)
    for ln in range(mp.n_lanes):
        occupied = [0.0] if ln == mp.ego_lane else []
        x = span[0] + rng.uniform(0, 10)
        placed = 0
        while placed < per_lane and x < span[1]:
            length = rng.uniform(4.0, 5.0)
            if all(abs(x - o) > 9.0 for o in occupied):
                pos.append((x, (ln + 0.5) * mp.lane_width))
                lane.append(ln)
                size.append((length, rng.uniform(1.8, 2.1)))
                v = rng.uniform(*mp.agent_speed)
                vdes.append(v)
                speed.append(v)
                occupied.append(x)
                placed += 1
            x += rng.uniform(10.0, 22.0)

    obstacles = []
    if mp.n_obstacles:
        # parked cars just outside the ego lane, on the right road edge
        for _ in range(mp.n_obstacles):
            ox = rng.uniform(-20.0, 60.0)
            obstacles.append((ox, -1.4, rng.uniform(4.0, 5.0), 2.0))
    state = WorldState(
        lanes=mp.n_lanes, lane_width=mp.lane_width, directions=dirs,
        obstacles=np.array(obstacles, dtype=np.float64).reshape(-1, 4),
        pos=np.array(pos, dtype=np.float64).reshape(-1, 2), speed=np.array(speed, dtype=np.float64),
        lane=np.array(lane, dtype=np.int64), size=np.array(size, dtype=np.float64).reshape(-1, 2),
        v_des=np.array(vdes, dtype=np.float64), ego=ego, ego_heading=heading, dt=spec.dt, follow=spec.follow,
    )
    # settle speeds so no agent starts inside its desired gap
    gaps, lead_v = _lead_gaps(state)
    state.speed = np.minimum(state.speed, np.maximum(0.0, (gaps - state.follow.min_gap) / state.follow.headway))
    return state


class EgoDriver:
    """Recorded-data ego policy: noisy car-following plus lane keeping."""

    def __init__(self, spec: ScenarioSpec, rng: np.random.Generator, v_des: float):
        self.mp = MODES[spec.mode]
        self.rng = rng
        self.v_des = v_des
        self.follow = spec.follow

    def act(self, state: WorldState) -> ActionCmd:
        mp = self.mp
        if mp.n_obstacles and self.rng.random() < 0.03:
            # urban: occasionally change the desired speed, including stops
            self.v_des = float(self.rng.choice([0.0, self.rng.uniform(*mp.ego_speed)]))
        gap = _ego_gap(state)
        a = float(self.follow.accel(state.ego_speed, self.v_des, gap))
        a += self.rng.normal(0.0, mp.accel_noise)
        a = float(np.clip(a, *mp.alpha_bounds))
        tau = 0.0
        if mp.steer:
            lateral = state.ego[1] - (state.ego_lane + 0.5) * state.lane_width
            tau = -1.0 * state.ego_heading - 0.05 * lateral + self.rng.normal(0.0, 0.005)
            tau = float(np.clip(tau, -0.3, 0.3))
        return ActionCmd(a, tau)


def _ego_gap(state: WorldState) -> float:
    ln = state.ego_lane
    sel = (state.lane == ln) & (state.directions[state.lane] > 0)
    xs = state.pos[sel, 0]
    ahead = xs - state.ego[0]
    gaps = ahead[ahead > 0] - 0.5 * (state.size[sel, 0][ahead > 0] + EGO_LENGTH)
    obs = state.obstacles
    if len(obs):
        in_lane = np.floor(obs[:, 1] / state.lane_width).astype(int) == ln
        oa = obs[in_lane, 0] - state.ego[0]
        gaps = np.concatenate([gaps, oa[oa > 0] - 0.5 * (obs[in_lane, 2][oa > 0] + EGO_LENGTH)])
    return float(gaps.min()) if gaps.size else math.inf


HARD_BRAKE = ActionCmd(-25.0, 0.0)
RARE_STEPS = 20


def sample_rare_actions(rng: np.random.Generator, policy: str, train_actions: np.ndarray | None = None,
                        n: int = RARE_STEPS) -> list[ActionCmd]:
    """Actions rarely seen in training.

    hard-brake: a constant (-25, 0).  hard-steer: a constant heading rate of
    alternating sign per call.  tail-sample: per step, alpha (and tau when the
    training tau has spread) drawn beyond two standard deviations of
    ``train_actions``.
    """
    if policy == "hard-brake":
        return [HARD_BRAKE] * n
    if policy == "hard-steer":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return [ActionCmd(0.0, sign * 0.8)] * n
    if policy != "tail-sample":
        raise ValueError(f"unknown rare-action policy {policy!r}")
    if train_actions is None or len(train_actions) < 2:
        raise ValueError("tail-sample needs the empirical training actions")
    acts = np.asarray(train_actions, dtype=np.float64)
    mu, sd = acts.mean(axis=0), acts.std(axis=0)
    out = []
    for _ in range(n):
        vals = []
        for k in range(2):
            if sd[k] == 0:
                vals.append(float(mu[k]))
                continue
            sign = 1.0 if rng.random() < 0.5 else -1.0
            vals.append(float(mu[k] + sign * (2.0 * sd[k] + abs(rng.normal(0.0, sd[k])) + 1e-9)))
        out.append(ActionCmd(*vals))
    return out


@dataclass
class GeneratedSequence:
    frames: np.ndarray          # (T, h, w, c)
    measurements: np.ndarray    # (T, 4)
    actions: np.ndarray         # (T-1, 2)
    heading0: float
    collided: bool
    states: list[WorldState]
    start: int | None = None    # first step driven by scripted or rare actions


def simulate(spec: ScenarioSpec, keep_states: bool = False) -> GeneratedSequence:
    rng = np.random.default_rng(spec.seed)
    state = initial_state(spec, rng)
    driver = EgoDriver(spec, rng, v_des=state.ego_speed)
    override = None
    if spec.policy == "scripted":
        override = [a if isinstance(a, ActionCmd) else ActionCmd(*a) for a in (spec.scripted_actions or [])]
    elif spec.policy == "rare-sample":
        override = sample_rare_actions(rng, spec.rare_policy, spec.train_actions)
    start = spec.rare_start if spec.rare_start is not None else (0 if spec.policy == "scripted" else spec.length - 1 - RARE_STEPS)
    start = max(0, start)

    frames, meas, acts, states = [], [], [], []
    heading0 = state.ego_heading
    for t in range(spec.length):
        frames.append(rasterize(spec, state).data)
        meas.append(state.ego.copy())
        if keep_states:
            states.append(state.copy())
        if t == spec.length - 1:
            break
        k = t - start
        if override is not None and 0 <= k < len(override):
            a = override[k]
            driver.act(state)  # keep the driver's RNG stream aligned across policies
        else:
            a = driver.act(state)
        acts.append((a.alpha, a.tau))
        state = world_step(state, a)
    return GeneratedSequence(np.stack(frames), np.stack(meas), np.array(acts, dtype=np.float64).reshape(-1, 2),
                             heading0, state.collided, states, start if override is not None else None)


def generate(spec: ScenarioSpec):
    """Run the scenario and wrap it as a :class:`SequenceRecord`."""
    from .records import SequenceRecord

    seq = simulate(spec)
    flags = {"collision": int(seq.collided), "mode": spec.mode, "seed": spec.seed, "policy": spec.policy}
    if seq.start is not None:
        flags["start"] = seq.start
    return SequenceRecord(
        frames=seq.frames, measurements=seq.measurements, actions=seq.actions,
        meters_per_pixel=spec.meters_per_pixel, dt=spec.dt, ego_anchor=spec.anchor,
        value_mode=spec.value_mode, channel_roles=spec.channel_roles, heading0=seq.heading0,
        flags=flags,
    )
