"""Explicit morphology features extracted from a robot description.

The raw vector has ten components in a fixed order (kinematics, geometry,
dynamics, actuation).  ``normalize`` maps it to [-1, 1] by cohort min-max;
``zscore_distance_matrix`` compares robots after z-scoring.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

from .robodesc import LEGS, RobotDescription

G0 = 9.81
MASS_FILTER_KG = 0.005

FEATURE_NAMES = (
    "l_hip", "l_thigh", "l_shank", "k_cfg",
    "l_stance", "w_stance", "aspect_ratio",
    "log_mass", "trunk_ratio", "torque_density",
)


class MorphologyError(ValueError):
    pass


class MissingChain(MorphologyError):
    pass


class DegenerateStance(MorphologyError):
    pass


class EmptyMass(MorphologyError):
    pass


class NoActuators(MorphologyError):
    pass


class TooFewRobots(MorphologyError):
    pass


@dataclass(frozen=True)
class MorphologyVector:
    l_hip: float
    l_thigh: float
    l_shank: float
    k_cfg: float
    l_stance: float
    w_stance: float
    aspect_ratio: float
    log_mass: float
    trunk_ratio: float
    torque_density: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "MorphologyVector":
        values = [float(v) for v in values]
        if len(values) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} values, got {len(values)}")
        return cls(*values)


@dataclass(frozen=True)
class CohortStats:
    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    cohort_size: int


@dataclass(frozen=True)
class NormalizedMorphology:
    mu: np.ndarray


def _norm(v) -> float:
    return math.sqrt(sum(c * c for c in v))


def extract_kinematics(desc: RobotDescription) -> tuple[float, float, float, int]:
    """(hip offset, thigh length, shank length, knee config) from the FL chain."""
    hfe = desc.leg_joint("FL", "hfe")
    kfe = desc.leg_joint("FL", "kfe")
    if hfe is None or kfe is None:
        raise MissingChain(f"{desc.name}: FL leg lacks a unique hfe/kfe joint")
    feet = desc.child_joints(kfe.child)
    if len(feet) != 1:
        raise MissingChain(f"{desc.name}: FL shank {kfe.child!r} needs exactly one foot joint, "
                           f"found {len(feet)}")
    l_hip = _norm(desc.link(hfe.child).parent_offset)
    l_thigh = _norm(desc.link(kfe.child).parent_offset)
    l_shank = _norm(desc.link(feet[0].child).parent_offset)
    return l_hip, l_thigh, l_shank, desc.knee_config


def hip_positions(desc: RobotDescription) -> np.ndarray:
    """Base-frame positions of each leg's HAA child link, rows in FL, FR, RL, RR order."""
    rows = []
    for leg in LEGS:
        haa = desc.leg_joint(leg, "haa")
        if haa is None:
            raise MissingChain(f"{desc.name}: leg {leg} lacks a unique haa joint")
        rows.append(desc.base_position(haa.child))
    return np.array(rows)


def extract_geometry(desc: RobotDescription) -> tuple[float, float, float]:
    pos = hip_positions(desc)
    length = float(pos[:, 0].max() - pos[:, 0].min())
    width = float(pos[:, 1].max() - pos[:, 1].min())
    if not width > 0.0:
        raise DegenerateStance(f"{desc.name}: stance width is {width}")
    return length, width, length / width


def total_mass(desc: RobotDescription) -> float:
    """Sum of link masses above the sensor-dummy filter."""
    masses = [l.mass for l in desc.links if l.mass > MASS_FILTER_KG]
    if not masses:
        raise EmptyMass(f"{desc.name}: no link heavier than {MASS_FILTER_KG} kg")
    return float(sum(masses))


def extract_dynamics(desc: RobotDescription) -> tuple[float, float]:
    m = total_mass(desc)
    heaviest = max(l.mass for l in desc.links if l.mass > MASS_FILTER_KG)
    return math.log1p(m), heaviest / m


def extract_actuation(desc: RobotDescription) -> float:
    """Mean effort limit over actuated joints per newton of robot weight."""
    joints = desc.actuated_joints
    if not joints:
        raise NoActuators(f"{desc.name}: no actuated joints")
    mean_effort = sum(j.effort_limit for j in joints) / len(joints)
    return mean_effort / (total_mass(desc) * G0)


def extract_morphology(desc: RobotDescription) -> MorphologyVector:
    kin = extract_kinematics(desc)
    geo = extract_geometry(desc)
    dyn = extract_dynamics(desc)
    act = extract_actuation(desc)
    return MorphologyVector(*kin, *geo, *dyn, act)


def _stack(vectors: Sequence) -> np.ndarray:
    return np.array([v.as_array() if isinstance(v, MorphologyVector) else np.asarray(v, float)
                     for v in vectors])


def fit_cohort(vectors: Sequence[MorphologyVector]) -> CohortStats:
    """Per-feature min/max/mean and population std over the cohort."""
    if len(vectors) < 2:
        raise TooFewRobots(f"cohort statistics need at least 2 robots, got {len(vectors)}")
    X = _stack(vectors)
    return CohortStats(X.min(axis=0), X.max(axis=0), X.mean(axis=0), X.std(axis=0), len(X))


def normalize(mu: MorphologyVector, stats: CohortStats) -> NormalizedMorphology:
    """Min-max map to [-1, 1]; constant features map to 0, out-of-cohort values clamp."""
    x = mu.as_array() if isinstance(mu, MorphologyVector) else np.asarray(mu, float)
    span = stats.max - stats.min
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, 2.0 * (x - stats.min) / safe - 1.0, 0.0)
    return NormalizedMorphology(np.clip(out, -1.0, 1.0))


def denormalize(norm: NormalizedMorphology, stats: CohortStats) -> np.ndarray:
    """Inverse of ``normalize`` on non-degenerate features (degenerate ones return the min)."""
    return stats.min + (np.asarray(norm.mu) + 1.0) * 0.5 * (stats.max - stats.min)


def zscores(vectors: Sequence[MorphologyVector], stats: CohortStats) -> np.ndarray:
    X = _stack(vectors)
    safe = np.where(stats.std > 0, stats.std, 1.0)
    return np.where(stats.std > 0, (X - stats.mean) / safe, 0.0)


def zscore_distance_matrix(vectors: Sequence[MorphologyVector], stats: CohortStats) -> np.ndarray:
    Z = zscores(vectors, stats)
    diff = Z[:, None, :] - Z[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


# CSV export --------------------------------------------------------------------


def write_features_csv(path, names: Sequence[str], rows: Sequence) -> None:
    """One row per robot, one column per feature, full double precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["robot", *FEATURE_NAMES])
        for name, row in zip(names, _stack(rows)):
            w.writerow([name, *(repr(float(v)) for v in row)])


def write_distance_csv(path, names: Sequence[str], D: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["robot", *names])
        for name, row in zip(names, D):
            w.writerow([name, *(repr(float(v)) for v in row)])


def feature_dict(mu: MorphologyVector) -> dict[str, float]:
    return {f.name: getattr(mu, f.name) for f in fields(mu)}
