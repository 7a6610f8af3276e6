"""Evaluation metrics: open-loop NMSE, PCA, silhouette, variance decomposition, probing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T


class DegenerateVariance(ValueError):
    pass


class TooFewRows(ValueError):
    pass


class DegenerateClasses(ValueError):
    pass


VARIANCE_FLOOR = 1e-8


# NMSE ---------------------------------------------------------------------------------


def nmse_curve(true_obs: np.ndarray, pred_obs: np.ndarray, per_robot_variance: np.ndarray,
               per_trajectory: bool = False):
    """Squared error per step divided by per-dimension variance, averaged over dims and
    trajectories.  Inputs are (N, T, D); dimensions whose variance is below 1e-8 are
    dropped.  With ``per_trajectory`` the (N, T) matrix is returned instead."""
    true_obs = np.asarray(true_obs, dtype=np.float64)
    pred_obs = np.asarray(pred_obs, dtype=np.float64)
    if true_obs.shape != pred_obs.shape or true_obs.ndim != 3:
        raise ValueError(f"shapes {true_obs.shape} and {pred_obs.shape} must match as (N, T, D)")
    var = np.asarray(per_robot_variance, dtype=np.float64)
    keep = var >= VARIANCE_FLOOR
    if not keep.any():
        raise DegenerateVariance("every dimension has variance below the floor")
    err = (pred_obs[..., keep] - true_obs[..., keep]) ** 2 / var[keep]
    per_traj = err.mean(axis=-1)
    return per_traj if per_trajectory else per_traj.mean(axis=0)


# eigen-decomposition and PCA -------------------------------------------------------------


def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigenvalues (descending) and column eigenvectors of a symmetric matrix by cyclic
    Jacobi rotations."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    V = np.eye(n)
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300 or abs(apq) < tol * 1e-3 * scale:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = A[p].copy(), A[q].copy()
                A[p], A[q] = c * rp - s * rq, s * rp + c * rq
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * cp - s * cq, s * cp + c * cq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], V[:, order]


@dataclass
class PCAResult:
    projections: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def pca_project(X: np.ndarray, n_components: int = 2) -> PCAResult:
    """Principal axes of the mean-centred covariance; each axis is signed so its
    largest-magnitude loading is positive."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise TooFewRows("PCA needs at least two rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = jacobi_eigh(cov)
    vals = np.clip(vals, 0.0, None)
    k = min(n_components, X.shape[1])
    comps = vecs[:, :k].copy()
    for j in range(k):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] *= -1.0
    total = vals.sum()
    explained = vals[:k] / total if total > 0 else np.zeros(k)
    return PCAResult(Xc @ comps, explained, comps, mean)


# cluster metrics -------------------------------------------------------------------------


def _check_classes(labels: np.ndarray, min_members: int) -> np.ndarray:
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise DegenerateClasses("need at least two classes")
    if counts.min() < min_members:
        raise DegenerateClasses(f"every class needs at least {min_members} members")
    return classes


def silhouette(X: np.ndarray, labels, chunk: int = 512) -> float:
    """Mean silhouette with Euclidean distances."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = _check_classes(labels, 2)
    onehot = (labels[:, None] == classes[None, :]).astype(np.float64)
    counts = onehot.sum(axis=0)
    sq = np.sum(X * X, axis=1)
    scores = np.empty(len(X))
    own = np.searchsorted(classes, labels)
    for start in range(0, len(X), chunk):
        stop = min(start + chunk, len(X))
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * X[start:stop] @ X.T
        d = np.sqrt(np.clip(d2, 0.0, None))
        d[np.arange(stop - start), np.arange(start, stop)] = 0.0
        sums = d @ onehot
        rows = np.arange(stop - start)
        mine = own[start:stop]
        a = sums[rows, mine] / (counts[mine] - 1)
        others = sums / counts
        others[rows, mine] = np.inf
        b = others.min(axis=1)
        denom = np.maximum(a, b)
        scores[start:stop] = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(scores.mean())


def variance_decomposition(X: np.ndarray, labels) -> tuple[float, float]:
    """(between-class, within-class) fractions of the total sum of squares."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = _check_classes(labels, 1)
    mean = X.mean(axis=0)
    total = float(np.sum((X - mean) ** 2))
    if total <= 0:
        raise DegenerateClasses("all vectors are identical")
    between = 0.0
    for c in classes:
        rows = X[labels == c]
        between += len(rows) * float(np.sum((rows.mean(axis=0) - mean) ** 2))
    frac = between / total
    return frac, 1.0 - frac


# data collection -------------------------------------------------------------------------


@dataclass
class LatentDataset:
    h: np.ndarray
    z: np.ndarray
    labels: np.ndarray
    annotations: dict = field(default_factory=dict)


def collect_trajectories(wm, actor, env, steps: int, rng, deterministic: bool = True) -> dict:
    """Roll every slot of ``env`` for ``steps`` steps with posterior filtering.

    Returns obs (N, steps, O), actions (N, steps, A) in the EpisodeBatch convention,
    latent h / z per step, a per-slot survival mask and the clean states.
    """
    n = env.n_slots
    obs = env.reset()
    latent = wm.initial_state(n)
    prev = np.zeros((n, 1))
    first = np.ones(n, bool)
    alive = np.ones(n, bool)
    rec = {k: [] for k in ("obs", "act", "h", "z", "clean")}
    with T.no_grad():
        for _ in range(steps):
            rec["obs"].append(obs)
            rec["act"].append(prev)
            rec["clean"].append(env.clean_observations())
            latent, _ = wm.filter_step(latent, prev, obs, env.mu, rng, first)
            rec["h"].append(latent.h.data)
            rec["z"].append(latent.z.data)
            a, _ = actor.sample(latent.feat, rng, deterministic)
            a = a.data
            obs, _, term, trunc = env.step(a[:, 0])
            alive &= ~(term | trunc)
            prev = a
            first = np.zeros(n, bool)
    out = {k: np.stack(v, axis=1) for k, v in rec.items()}
    out["alive"] = alive
    return out


def rollout_nmse(wm, actor, env, context: int, horizon: int, n_traj: int, rng,
                 max_rounds: int = 8) -> dict:
    """Open-loop NMSE per morphology id: filter ``context`` steps, then predict
    ``horizon`` steps from actions only.  Returns {id: (N, horizon) per-trajectory NMSE}."""
    total = context + horizon
    pools: dict[int, dict] = {}
    for _ in range(max_rounds):
        data = collect_trajectories(wm, actor, env, total, rng)
        for i in np.unique(env.slot_ids):
            sel = (env.slot_ids == i) & data["alive"]
            pool = pools.setdefault(int(i), {"obs": [], "act": []})
            pool["obs"].extend(data["obs"][sel])
            pool["act"].extend(data["act"][sel])
        if all(len(p["obs"]) >= n_traj for p in pools.values()):
            break
    out = {}
    for i, pool in pools.items():
        if not pool["obs"]:
            continue
        obs = np.stack(pool["obs"][:n_traj])
        act = np.stack(pool["act"][:n_traj])
        mu = env.mu[np.flatnonzero(env.slot_ids == i)[0]]
        preds = wm.open_loop_rollout(obs, act, np.tile(mu, (len(obs), 1)), context, rng)
        var = obs.reshape(-1, obs.shape[-1]).var(axis=0)
        out[i] = nmse_curve(obs[:, context:], preds[:, context:], var, per_trajectory=True)
    return out


def write_nmse_csv(path, curves: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["morphology_id", "t", "mean", "std"])
        for i, per_traj in sorted(curves.items()):
            for t in range(per_traj.shape[1]):
                w.writerow([i, t + 1, repr(float(per_traj[:, t].mean())),
                            repr(float(per_traj[:, t].std()))])


def collect_latents(wm, actor, env, trajectories: int, steps: int, rng) -> LatentDataset:
    """Latent pairs from the frozen model; ``env`` must hold ``trajectories`` slots per id."""
    data = collect_trajectories(wm, actor, env, steps, rng)
    del trajectories
    n, t = data["h"].shape[:2]
    clean = data["clean"].reshape(n * t, -1)
    ann = {
        "forward_speed": clean[:, 0],
        "speed_norm": np.hypot(clean[:, 0], clean[:, 1]),
        "angular_speed": np.abs(clean[:, 3]),
        "mean_abs_joint": np.abs(clean[:, 2]),
    }
    return LatentDataset(data["h"].reshape(n * t, -1), data["z"].reshape(n * t, -1),
                         np.repeat(env.slot_ids, t), ann)


def probe_report(ds: LatentDataset) -> dict:
    """Silhouette and variance fractions of h and z against morphology labels."""
    sil_h = silhouette(ds.h, ds.labels)
    sil_z = silhouette(ds.z, ds.labels)
    bh, wh = variance_decomposition(ds.h, ds.labels)
    bz, wz = variance_decomposition(ds.z, ds.labels)
    pca_h = pca_project(ds.h, 2)
    pca_z = pca_project(ds.z, 2)
    return {
        "silhouette_h": sil_h, "silhouette_z": sil_z,
        "between_h": bh, "within_h": wh, "between": bz, "within": wz,
        "explained_variance_h": pca_h.explained.tolist(),
        "explained_variance": pca_z.explained.tolist(),
        "h_more_separated": bool(sil_h > sil_z),
        "_pca": {"h": pca_h, "z": pca_z},
    }


def probe_h_vs_z(wm, actor, env, trajectories: int, steps: int, rng) -> dict:
    return probe_report(collect_latents(wm, actor, env, trajectories, steps, rng))


def write_probe_outputs(out_dir, ds: LatentDataset, report: dict) -> None:
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {k: v for k, v in report.items() if not k.startswith("_")}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    names = list(ds.annotations)
    for key in ("z", "h"):
        proj = report["_pca"][key].projections
        fname = "pca_points.csv" if key == "z" else "pca_points_h.csv"
        with open(out / fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pc1", "pc2", "label", *names])
            for r in range(len(proj)):
                w.writerow([repr(float(proj[r, 0])), repr(float(proj[r, 1])), int(ds.labels[r]),
                            *(repr(float(ds.annotations[n][r])) for n in names)])


def synthetic_dataset(n_per_class: int, n_classes: int, dim: int, rng,
                      noise: float = 0.1) -> LatentDataset:
    """h = class one-hot plus noise, z = pure noise."""
    labels = np.repeat(np.arange(n_classes), n_per_class)
    h = np.zeros((len(labels), dim))
    h[np.arange(len(labels)), labels % dim] = 1.0
    h += noise * rng.standard_normal(h.shape)
    z = rng.standard_normal((len(labels), dim))
    return LatentDataset(h, z, labels, {})


def summarize(curves: dict, horizon_index: Sequence[int] = (0, -1)) -> dict:
    return {i: [float(c[:, k].mean()) for k in horizon_index] for i, c in curves.items()}
