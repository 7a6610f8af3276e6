"""Toy heterogeneous family of planar hopper-carts, stepped as one vectorized batch.

Each slot holds an inverted leg of length L on a cart of mass M.  Torque on the
leg joint tilts the leg; the tilt produces forward thrust; an unobserved damping
coefficient resists both motions.  The knee configuration flips the torque
direction, so a shared policy has to know which family it is driving.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import morphfeat
from .robodesc import build_quadruped

G0 = morphfeat.G0
OBS_NAMES = ("xdot", "zdot", "theta", "thetadot", "v_cmd", "a_prev", "sin_theta", "cos_theta")
OBS_DIM = len(OBS_NAMES)
ACT_DIM = 1
# Per-dimension half-width of the uniform observation noise at noise_scale = 1.
NOISE_WIDTHS = np.array([0.1, 0.1, 0.05, 0.2, 0.0, 0.0, 0.05, 0.05])


class EmptyCohort(ValueError):
    pass


@dataclass(frozen=True)
class ToyMorphology:
    name: str
    mass: float
    leg_length: float
    torque_limit: float
    stance_width: float
    knee_config: int
    w_track: float = 1.0
    w_torque: float = 0.0
    w_rate: float = 0.1
    w_orient: float = 0.5
    reward_scale: float = 1.0

    def __post_init__(self):
        for name in ("mass", "leg_length", "torque_limit", "stance_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{self.name}: {name} must be positive")
        if self.knee_config not in (0, 1):
            raise ValueError(f"{self.name}: knee_config must be 0 or 1")
        for name in ("w_track", "w_torque", "w_rate", "w_orient", "reward_scale"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{self.name}: {name} must be finite")

    def description(self):
        """Quadruped tree with this toy's mass, size and actuation, for feature extraction."""
        L = self.leg_length
        return build_quadruped(
            self.name, stance_length=1.5 * L, stance_width=self.stance_width,
            hip_offset=0.25 * L, thigh=0.5 * L, shank=0.5 * L, total_mass=self.mass,
            trunk_ratio=0.5, effort=self.torque_limit, knee_config=self.knee_config)

    def raw_mu(self) -> morphfeat.MorphologyVector:
        return morphfeat.extract_morphology(self.description())


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.02
    horizon: int = 150
    theta_fall: float = 0.5
    damping_range: tuple[float, float] = (0.3, 1.0)
    instability: float = 0.08
    thrust: float = 1.0
    track_sigma2: float = 0.25
    noise_scale: float = 0.1
    command_range: tuple[float, float] = (-1.0, 1.0)


@dataclass
class Cohort:
    training: list[ToyMorphology]
    held_out: dict[str, ToyMorphology] = field(default_factory=dict)

    @property
    def all(self) -> list[ToyMorphology]:
        return self.training + list(self.held_out.values())

    def index(self, role: str) -> int:
        names = list(self.held_out)
        return len(self.training) + names.index(role)

    def stats(self) -> morphfeat.CohortStats:
        return cohort_stats(self.training)


def cohort_stats(spec: Sequence[ToyMorphology]) -> morphfeat.CohortStats:
    vectors = [m.raw_mu() for m in spec]
    if len(vectors) == 1:
        x = vectors[0].as_array()
        return morphfeat.CohortStats(x, x.copy(), x.copy(), np.zeros_like(x), 1)
    return morphfeat.fit_cohort(vectors)


DEFAULT_COHORT = Cohort(
    training=[
        ToyMorphology("pup", 1.0, 0.20, 0.40, 0.08, 0, 1.0, 0.05 / 0.40**2, 0.1, 0.5, 1.0),
        ToyMorphology("scout", 3.0, 0.28, 2.6, 0.10, 0, 1.0, 0.05 / 2.6**2, 0.1, 0.5, 3.0),
        ToyMorphology("ranger", 8.0, 0.35, 9.0, 0.16, 1, 1.0, 0.05 / 9.0**2, 0.1, 0.5, 10.0),
        ToyMorphology("hauler", 15.0, 0.45, 32.0, 0.20, 1, 1.0, 0.05 / 32.0**2, 0.1, 0.5, 30.0),
        ToyMorphology("strider", 22.0, 0.52, 55.0, 0.13, 0, 1.0, 0.05 / 55.0**2, 0.1, 0.5, 1.0),
        ToyMorphology("titan", 30.0, 0.60, 100.0, 0.24, 1, 1.0, 0.05 / 100.0**2, 0.1, 0.5, 3.0),
    ],
    held_out={
        "interpolated": ToyMorphology("wanderer", 11.0, 0.40, 17.0, 0.18, 1,
                                      1.0, 0.05 / 17.0**2, 0.1, 0.5, 10.0),
        "extrapolated": ToyMorphology("colossus", 90.0, 0.60, 32.0, 0.30, 0,
                                      1.0, 0.05 / 32.0**2, 0.1, 0.5, 3.0),
    },
)


# cohort files ---------------------------------------------------------------------


def save_cohort(path, cohort: Cohort) -> None:
    rows = [{"role": "train", **asdict(m)} for m in cohort.training]
    rows += [{"role": role, **asdict(m)} for role, m in cohort.held_out.items()]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def load_cohort(path) -> Cohort:
    rows = json.loads(Path(path).read_text())
    names = {f.name for f in fields(ToyMorphology)}
    out = Cohort([], {})
    for row in rows:
        role = row.get("role", "train")
        unknown = set(row) - names - {"role"}
        if unknown:
            raise ValueError(f"unknown cohort fields {sorted(unknown)}")
        morph = ToyMorphology(**{k: v for k, v in row.items() if k in names})
        if role == "train":
            out.training.append(morph)
        else:
            out.held_out[role] = morph
    if not out.training:
        raise EmptyCohort(f"{path}: no training morphologies")
    return out


# batched environment ---------------------------------------------------------------


class BatchedEnv:
    """Vectorized slots; slot i runs ``spec[i % len(spec)]`` with id ``ids[i]``."""

    def __init__(self, spec: Sequence[ToyMorphology], n_slots_per_morph: int,
                 config: EnvConfig = EnvConfig(), stats: morphfeat.CohortStats | None = None,
                 ids: Sequence[int] | None = None, seed: int = 0):
        if not spec or n_slots_per_morph < 1:
            raise EmptyCohort("a cohort needs at least one morphology and one slot")
        self.spec = list(spec)
        self.config = config
        self.stats = stats if stats is not None else cohort_stats(self.spec)
        n = len(self.spec) * n_slots_per_morph
        self.n_slots = n
        local = np.arange(n) % len(self.spec)
        base_ids = np.arange(len(self.spec)) if ids is None else np.asarray(ids, dtype=int)
        self.slot_morph = local
        self.slot_ids = base_ids[local]
        self.mu_table = np.array([morphfeat.normalize(m.raw_mu(), self.stats).mu
                                  for m in self.spec])
        self.mu = self.mu_table[local]

        def col(name):
            return np.array([getattr(self.spec[i], name) for i in local], dtype=np.float64)

        self.M, self.L, self.tau_max = col("mass"), col("leg_length"), col("torque_limit")
        self.sign = np.where(col("knee_config") == 0, 1.0, -1.0)
        self.scale = col("reward_scale")
        self.w = {k: col(k) for k in ("w_track", "w_torque", "w_rate", "w_orient")}

        self.rng = np.random.default_rng(seed)
        self.x = np.zeros(n)
        self.z = self.L.copy()
        self.xdot = np.zeros(n)
        self.zdot = np.zeros(n)
        self.theta = np.zeros(n)
        self.thetadot = np.zeros(n)
        self.damping = np.ones(n)
        self.v_cmd = np.zeros(n)
        self.a_prev = np.zeros(n)
        self.t = np.zeros(n, dtype=int)
        self.nan_terminations = 0

    def reset(self, slot_mask=None, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = self.rng if rng is None else rng
        mask = np.ones(self.n_slots, bool) if slot_mask is None else np.asarray(slot_mask, bool)
        k = int(mask.sum())
        if k:
            c = self.config
            self.x[mask] = 0.0
            self.xdot[mask] = rng.uniform(-0.5, 0.5, k)
            self.thetadot[mask] = rng.uniform(-0.5, 0.5, k)
            self.theta[mask] = rng.uniform(-0.1, 0.1, k)
            self.damping[mask] = rng.uniform(*c.damping_range, k)
            self.v_cmd[mask] = rng.uniform(*c.command_range, k)
            self.a_prev[mask] = 0.0
            self.t[mask] = 0
            self.z[mask] = self.L[mask] * np.cos(self.theta[mask])
            self.zdot[mask] = -self.L[mask] * np.sin(self.theta[mask]) * self.thetadot[mask]
        return self.observations(rng)

    def clean_observations(self) -> np.ndarray:
        return np.stack([self.xdot, self.zdot, self.theta, self.thetadot, self.v_cmd,
                         self.a_prev, np.sin(self.theta), np.cos(self.theta)], axis=1)

    def observations(self, rng: np.random.Generator | None = None) -> np.ndarray:
        obs = self.clean_observations()
        width = NOISE_WIDTHS * self.config.noise_scale
        if self.config.noise_scale > 0:
            rng = self.rng if rng is None else rng
            obs = obs + rng.uniform(-1.0, 1.0, obs.shape) * width
        return obs

    def observe(self, slot: int) -> np.ndarray:
        return self.observations()[slot]

    def reward(self, applied_torque, action, prev_action) -> np.ndarray:
        c = self.config
        track = np.exp(-((self.xdot - self.v_cmd) ** 2) / c.track_sigma2)
        r = (self.w["w_track"] * track
             - self.w["w_torque"] * applied_torque ** 2
             - self.w["w_rate"] * (action - prev_action) ** 2
             - self.w["w_orient"] * self.theta ** 2)
        return self.scale * r

    def step(self, actions):
        """Advance one control step.

        Returns ``(observations, r_raw, terminated, truncated)``; ``terminated`` marks
        falls (and non-finite states), ``truncated`` marks the horizon.
        """
        c = self.config
        a = np.clip(np.asarray(actions, dtype=np.float64).reshape(self.n_slots), -1.0, 1.0)
        tau = a * self.tau_max
        d = self.damping
        theta_acc = (c.instability * G0 / self.L * np.sin(self.theta)
                     + self.sign * tau / (self.M * self.L ** 2) - d * self.thetadot)
        self.thetadot = self.thetadot + c.dt * theta_acc
        self.theta = self.theta + c.dt * self.thetadot
        x_acc = c.thrust * G0 * np.sin(self.theta) - d * self.xdot
        self.xdot = self.xdot + c.dt * x_acc
        self.x = self.x + c.dt * self.xdot
        self.z = self.L * np.cos(self.theta)
        self.zdot = -self.L * np.sin(self.theta) * self.thetadot

        reward = self.reward(tau, a, self.a_prev)
        self.a_prev = a
        self.t += 1
        bad = ~(np.isfinite(self.theta) & np.isfinite(self.thetadot) & np.isfinite(self.xdot))
        if bad.any():
            self.nan_terminations += int(bad.sum())
            reward = np.where(bad, 0.0, reward)
            for arr in (self.theta, self.thetadot, self.xdot, self.zdot, self.x):
                arr[bad] = 0.0
            self.z[bad] = self.L[bad]
        terminated = (np.abs(self.theta) > c.theta_fall) | bad
        truncated = (self.t >= c.horizon) & ~terminated
        return self.observations(), reward, terminated, truncated


def make_cohort(spec: Sequence[ToyMorphology], n_slots_per_morph: int,
                config: EnvConfig = EnvConfig(), stats=None, ids=None, seed: int = 0) -> BatchedEnv:
    return BatchedEnv(spec, n_slots_per_morph, config, stats, ids, seed)


def reset(env: BatchedEnv, rng, slot_mask=None) -> np.ndarray:
    return env.reset(slot_mask, rng)


def step(env: BatchedEnv, actions):
    return env.step(actions)


def observe(env: BatchedEnv, slot: int) -> np.ndarray:
    return env.observe(slot)


def kinetic_energy(env: BatchedEnv) -> np.ndarray:
    """Cart plus leg-tip kinetic energy per slot."""
    return 0.5 * env.M * (env.xdot ** 2 + (env.L * env.thetadot) ** 2)


def write_trajectory_csv(path, rows: Sequence[dict]) -> None:
    """Rows are dicts with keys step, slot, morphology_id, the observation names, action,
    reward, terminated."""
    cols = ["step", "slot", "morphology_id", *OBS_NAMES, "action", "reward", "terminated"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in cols})
