"""Two-dimensional zonal flocking simulator with a binary intervention.

Each agent reacts to three concentric zones: repulsion inside r_r (highest
priority), alignment with headings inside (r_r, r_o], and attraction toward
agents inside (r_o, r_a].  The intervention widens the orientation radius,
which changes collective motion; per-step turns are limited to ``max_turn``
degrees and speed is constant.  The outcome signal is the group's mean
angular momentum about its centroid.

Everything here is plain float64 numpy; the same step is re-implemented
naively in the tests as an independent oracle.
"""

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .rng import Rng, derive_seed

_TINY = 1e-12


@dataclass
class SimConfig:
    n_agents: int = 20
    speed: float = 1.0
    repulsion_radius: float = 0.5
    orientation_radius: float = 1.0
    orientation_radius_treated: float = 4.0
    attraction_radius: float = 7.5
    max_turn_deg: float = 30.0
    box_half: float = 20.0
    dt: float = 0.15
    n_steps: int = 14
    burn_in: int = 9
    t_i_start: int = 9
    t_i_end: int = 13
    seed: int = 0

    def validate(self) -> "SimConfig":
        if self.n_agents < 1:
            raise ConfigError("n_agents must be at least 1")
        if not (0.0 < self.repulsion_radius < self.orientation_radius
                < self.attraction_radius):
            raise ConfigError("zone radii must satisfy 0 < r_r < r_o < r_a")
        if not (self.repulsion_radius < self.orientation_radius_treated
                < self.attraction_radius):
            raise ConfigError("treated orientation radius must stay inside (r_r, r_a)")
        if not (0.0 < self.max_turn_deg <= 180.0):
            raise ConfigError("max_turn_deg must lie in (0, 180]")
        if self.speed <= 0.0 or self.dt <= 0.0 or self.box_half <= 0.0:
            raise ConfigError("speed, dt and box_half must be positive")
        if not (0 < self.burn_in < self.n_steps):
            raise ConfigError("burn_in must lie strictly inside the episode")
        if not (self.burn_in <= self.t_i_start <= self.t_i_end < self.n_steps):
            raise ConfigError("intervention window must lie in [burn_in, n_steps)")
        return self

    @property
    def max_turn_rad(self) -> float:
        return float(np.deg2rad(self.max_turn_deg))

    @property
    def intervention_steps(self) -> list[int]:
        return list(range(self.t_i_start, self.t_i_end + 1))

    def echo(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}


@dataclass
class BoidState:
    positions: np.ndarray  # (K, 2)
    headings: np.ndarray   # (K, 2), unit rows

    def validate(self, cfg: SimConfig) -> "BoidState":
        k = cfg.n_agents
        if self.positions.shape != (k, 2) or self.headings.shape != (k, 2):
            raise DimensionError("state arrays must be (K, 2)")
        if np.any(np.abs(self.positions) > cfg.box_half + 1e-9):
            raise ContractError("positions outside the boundary box")
        norms = np.sqrt(np.sum(self.headings ** 2, axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ContractError("headings must be unit vectors")
        return self


def _pairwise(positions: np.ndarray):
    """diff[k, j] = r_j - r_k and the matching distances (inf on diagonal)."""
    diff = positions[None, :, :] - positions[:, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(dist, np.inf)
    return diff, dist


def zone_neighbors(state: BoidState, k: int, r_o: float, cfg: SimConfig):
    """Counts (n_r, n_o, n_a) of neighbors of agent k in each zone."""
    _, dist = _pairwise(state.positions)
    d = dist[k]
    n_r = int(np.sum(d < cfg.repulsion_radius))
    n_o = int(np.sum((d > cfg.repulsion_radius) & (d <= r_o)))
    n_a = int(np.sum((d > r_o) & (d <= cfg.attraction_radius)))
    return n_r, n_o, n_a


def _unit_rows(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Normalize rows; rows with ~zero norm fall back to the given direction."""
    norms = np.sqrt(np.sum(v * v, axis=1))
    ok = norms > _TINY
    out = np.where(ok[:, None], v / np.where(ok, norms, 1.0)[:, None], fallback)
    return out


def _desired_directions(positions, headings, r_o, cfg: SimConfig) -> np.ndarray:
    """Zone rule for every agent at once. Rows are unit vectors."""
    diff, dist = _pairwise(positions)
    with np.errstate(invalid="ignore"):
        unit = diff / dist[:, :, None]
    unit = np.where(np.isfinite(unit), unit, 0.0)

    rep = dist < cfg.repulsion_radius
    orient = (dist > cfg.repulsion_radius) & (dist <= r_o)
    attract = (dist > r_o) & (dist <= cfg.attraction_radius)

    n_r = rep.sum(axis=1)
    n_o = orient.sum(axis=1)
    n_a = attract.sum(axis=1)

    rep_vec = (unit * rep[:, :, None]).sum(axis=1)
    rep_dir = _unit_rows(-rep_vec, headings)

    o_counts = np.where(n_o > 0, n_o, 1)[:, None]
    o_term = (headings[None, :, :] * orient[:, :, None]).sum(axis=1) / o_counts
    o_hat = _unit_rows(o_term, headings)

    a_counts = np.where(n_a > 0, n_a, 1)[:, None]
    a_term = (unit * attract[:, :, None]).sum(axis=1) / a_counts
    a_hat = _unit_rows(a_term, headings)

    both = (n_o > 0) & (n_a > 0)
    blend = _unit_rows(0.5 * (o_hat + a_hat), headings)
    social = np.where(both[:, None], blend,
                      np.where((n_o > 0)[:, None], o_hat,
                               np.where((n_a > 0)[:, None], a_hat, headings)))
    return np.where((n_r > 0)[:, None], rep_dir, social)


def desired_direction(state: BoidState, k: int, r_o: float, cfg: SimConfig) -> np.ndarray:
    """Preferred unit direction for one agent before the turn limit."""
    return _desired_directions(state.positions, state.headings, r_o, cfg)[k]


def clamp_turn(d_old: np.ndarray, d_desired: np.ndarray, max_turn_deg: float) -> np.ndarray:
    """Limit the turn from d_old toward d_desired to max_turn_deg.

    Within the limit the desired direction is returned unchanged; beyond it,
    d_old is rotated by exactly the limit toward the desired side (ties at
    180 degrees rotate positively).
    """
    beta = float(np.deg2rad(max_turn_deg))
    cross = d_old[0] * d_desired[1] - d_old[1] * d_desired[0]
    dot = d_old[0] * d_desired[0] + d_old[1] * d_desired[1]
    theta = np.arctan2(cross, dot)
    if abs(theta) <= beta:
        return d_desired.copy()
    ang = beta if theta > 0 else -beta
    c, s = np.cos(ang), np.sin(ang)
    return np.array([c * d_old[0] - s * d_old[1], s * d_old[0] + c * d_old[1]])


def _clamp_turns(headings: np.ndarray, desired: np.ndarray, beta: float) -> np.ndarray:
    cross = headings[:, 0] * desired[:, 1] - headings[:, 1] * desired[:, 0]
    dot = headings[:, 0] * desired[:, 0] + headings[:, 1] * desired[:, 1]
    theta = np.arctan2(cross, dot)
    within = np.abs(theta) <= beta
    ang = np.where(theta > 0, beta, -beta)
    c, s = np.cos(ang), np.sin(ang)
    rotated = np.stack([c * headings[:, 0] - s * headings[:, 1],
                        s * headings[:, 0] + c * headings[:, 1]], axis=1)
    return np.where(within[:, None], desired, rotated)


def mean_angular_momentum(state: BoidState) -> float:
    """|sum_k rhat_k x d_k| / K about the group centroid, in [0, 1].

    Agents sitting exactly on the centroid contribute zero.
    """
    centroid = state.positions.mean(axis=0)
    rel = state.positions - centroid
    norms = np.sqrt(np.sum(rel * rel, axis=1))
    ok = norms > 0.0
    rhat = np.where(ok[:, None], rel / np.where(ok, norms, 1.0)[:, None], 0.0)
    cross = rhat[:, 0] * state.headings[:, 1] - rhat[:, 1] * state.headings[:, 0]
    return float(np.abs(cross.sum()) / state.positions.shape[0])


def step(state: BoidState, r_o: float, cfg: SimConfig) -> BoidState:
    """Advance every agent one time step of length cfg.dt.

    Processing order per agent: zone rule, boundary override, turn limit,
    renormalize, integrate, and finally a hard clip into the box (the
    lookahead override steers agents away from walls but cannot bound the
    position by itself at grazing incidence).
    """
    pos, d_old = state.positions, state.headings
    desired = _desired_directions(pos, d_old, r_o, cfg)

    # an agent whose straight continuation leaves the box within two steps
    # heads for the center instead
    lookahead = pos + (2.0 * cfg.speed * cfg.dt) * d_old
    exiting = np.any(np.abs(lookahead) > cfg.box_half, axis=1)
    center_dir = _unit_rows(-pos, desired)
    desired = np.where(exiting[:, None], center_dir, desired)

    new_d = _clamp_turns(d_old, desired, cfg.max_turn_rad)
    norms = np.sqrt(np.sum(new_d * new_d, axis=1))
    new_d = new_d / norms[:, None]
    new_pos = np.clip(pos + (cfg.speed * cfg.dt) * new_d,
                      -cfg.box_half, cfg.box_half)
    return BoidState(new_pos, new_d)


def initial_state(cfg: SimConfig, rng: Rng) -> BoidState:
    """Positions uniform in the central half-width square, headings uniform."""
    k = cfg.n_agents
    pos = (rng.uniform_array((k, 2)) - 0.5) * cfg.box_half
    angles = rng.uniform_array((k,)) * (2.0 * np.pi)
    headings = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return BoidState(pos, headings)


def _signed_turns(d_prev: np.ndarray, d_new: np.ndarray) -> np.ndarray:
    cross = d_prev[:, 0] * d_new[:, 1] - d_prev[:, 1] * d_new[:, 0]
    dot = d_prev[:, 0] * d_new[:, 0] + d_prev[:, 1] * d_new[:, 1]
    return np.arctan2(cross, dot)


@dataclass
class TrajectorySample:
    """One simulated episode.

    x_local[t] holds per-agent (position xy, velocity xy, signed heading
    change) at step t; x_global[t] is the group's mean angular momentum;
    outcome[t] is that momentum one step later.  treatment[t] flips to 1 at
    the intervention step and stays on.
    """

    x_local: np.ndarray        # (T, K, 5)
    x_global: np.ndarray       # (T, 1)
    treatment: np.ndarray      # (T,) uint8
    outcome: np.ndarray        # (T,)
    intervention_step: int | None = None
    seed: int = 0

    def validate(self, cfg: SimConfig | None = None) -> "TrajectorySample":
        t, k, f = self.x_local.shape
        if f != 5:
            raise DimensionError("x_local must have 5 features per agent")
        if self.x_global.shape != (t, 1) or self.outcome.shape != (t,):
            raise DimensionError("inconsistent trajectory lengths")
        if self.treatment.shape != (t,):
            raise DimensionError("treatment must have one flag per step")
        if np.any(np.diff(self.treatment.astype(np.int64)) < 0):
            raise ContractError("treatment must be nondecreasing over time")
        if cfg is not None and (t != cfg.n_steps or k != cfg.n_agents):
            raise DimensionError("trajectory does not match the configuration")
        return self


def simulate(cfg: SimConfig, seed: int, intervention: int | None = None) -> TrajectorySample:
    """Roll one episode; `intervention` is the absorbing treatment step or None.

    Identical (cfg, seed, intervention) invocations are bitwise identical, and
    two runs differing only in `intervention` coincide on every step before
    the earlier treatment start.
    """
    cfg.validate()
    if intervention is not None and intervention not in cfg.intervention_steps:
        raise ConfigError(f"intervention step {intervention} outside the window")
    rng = Rng(derive_seed(seed, "boid-init"))
    state = initial_state(cfg, rng)

    t_total = cfg.n_steps
    k = cfg.n_agents
    x_local = np.zeros((t_total, k, 5))
    x_global = np.zeros((t_total, 1))
    outcome = np.zeros(t_total)
    treatment = np.zeros(t_total, dtype=np.uint8)
    dtheta = np.zeros(k)

    for t in range(t_total):
        treated = intervention is not None and t >= intervention
        treatment[t] = 1 if treated else 0
        x_local[t, :, 0:2] = state.positions
        x_local[t, :, 2:4] = cfg.speed * state.headings
        x_local[t, :, 4] = dtheta
        x_global[t, 0] = mean_angular_momentum(state)
        r_o = cfg.orientation_radius_treated if treated else cfg.orientation_radius
        nxt = step(state, r_o, cfg)
        dtheta = _signed_turns(state.headings, nxt.headings)
        outcome[t] = mean_angular_momentum(nxt)
        state = nxt

    return TrajectorySample(x_local, x_global, treatment, outcome,
                            intervention_step=intervention, seed=seed).validate(cfg)
