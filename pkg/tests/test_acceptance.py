"""Acceptance suite: one or more tests per numbered criterion.

The trained-model criteria (5–9) share a session fixture that trains three seeds of
the full model and two ablations at desk scale.  Set ``QWM_ACCEPTANCE_CACHE`` to a
directory to keep those checkpoints between sessions.
"""

import csv
import os
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

import test_arn
import test_morphfeat
import test_nets
import test_tensor
import test_wm
from qwm import analysis, cli, morphfeat
from qwm import env as E
from qwm.train import RunConfig, Trainer

SEEDS = (0, 1, 2)
CONFIGS = ("full", "no_arn", "no_pme_arn")
ENV_STEPS = 48_000
BUDGET_STEPS, BUDGET_CPU_S = 200_000, 1800.0
COHORT_DIR = resources.files("qwm") / "data" / "cohort"
ROBOTS = test_morphfeat.ROBOTS
IDX = {n: i for i, n in enumerate(ROBOTS)}


def report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


# 1-2: morphology table and distances --------------------------------------------------------


@pytest.mark.criterion(1)
def test_criterion_1_table_reproduction(tmp_path):
    start = time.perf_counter()
    paths = [str(COHORT_DIR / f"{n}.robot") for n in ROBOTS]
    assert cli.main(["extract", *paths, "--out", str(tmp_path)]) == 0
    elapsed = time.perf_counter() - start
    with open(tmp_path / "features.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    worst = 0.0
    for row in rows[1:]:
        for got, printed in zip(map(float, row[1:]), test_morphfeat.TABLE[row[0]]):
            worst = max(worst, abs(got - printed))
    ok = report(1, worst <= 0.01 + 1e-9 and elapsed < 1.0,
                f"worst cell deviation {worst:.4f}, {elapsed:.2f}s")
    assert ok


@pytest.fixture(scope="module")
def distances():
    vecs = [morphfeat.extract_morphology(test_morphfeat.load(n)) for n in ROBOTS]
    # normalization statistics exclude the held-out B2
    stats = morphfeat.fit_cohort([v for n, v in zip(ROBOTS, vecs) if n != "unitree_b2"])
    return morphfeat.zscore_distance_matrix(vecs, stats)


def _nearest(D, name, exclude=()):
    row = D[IDX[name]].copy()
    row[IDX[name]] = np.inf
    for other in exclude:
        row[IDX[other]] = np.inf
    return ROBOTS[int(np.argmin(row))], float(np.min(row))


@pytest.mark.criterion(2)
def test_criterion_2a_go1_near_small_dogs(distances):
    d = min(distances[IDX["unitree_go1"], IDX["unitree_a1"]],
            distances[IDX["unitree_go1"], IDX["unitree_go2"]])
    assert report("2a", d <= 1.0, f"Go1 nearest of A1/Go2 at {d:.3f}")


@pytest.mark.criterion(2)
def test_criterion_2b_anymal_c_d_close(distances):
    d = distances[IDX["anymal_c"], IDX["anymal_d"]]
    assert report("2b", d < 0.8, f"ANYmal-C to D {d:.3f}")


@pytest.mark.criterion(2)
def test_criterion_2c_b2_far_from_small_dogs(distances):
    ds = [distances[IDX["unitree_b2"], IDX[n]] for n in ("unitree_a1", "unitree_go1",
                                                          "unitree_go2")]
    assert report("2c", min(ds) > 7.0, "B2 to A1/Go1/Go2 " + ", ".join(f"{d:.3f}" for d in ds))


@pytest.mark.criterion(2)
def test_criterion_2d_nearest_neighbours(distances):
    spot, d_spot = _nearest(distances, "spot")
    b2, d_b2 = _nearest(distances, "unitree_b2")
    ok = report("2d", spot == "unitree_go2" and b2 == "spot",
                f"Spot nearest {spot} ({d_spot:.3f}), B2 nearest {b2} ({d_b2:.3f})")
    assert ok


# 3-4: gradients and structural identities
# These re-run the module suites' own checks through one entry point each.


@pytest.mark.criterion(3)
def test_criterion_3_gradient_suite():
    start = time.perf_counter()
    for name in sorted(test_tensor.UNARY):
        test_tensor.test_unary_gradients(name)
    for op in ("add", "sub", "mul", "div"):
        test_tensor.test_binary_gradients(op)
    for check in (test_tensor.test_log_gradient, test_tensor.test_constant_operands_broadcast,
                  test_tensor.test_linear_algebra_gradients,
                  test_tensor.test_layer_norm_gradients, test_tensor.test_structural_gradients,
                  test_tensor.test_straight_through_routes_gradient_to_probs,
                  test_tensor.test_three_layer_network_matches_finite_differences,
                  test_tensor.test_sum_and_square_grads, test_nets.test_gru_gradients,
                  test_nets.test_kl_gradients, test_nets.test_twohot_nll_and_expected_gradients):
        check()
    with pytest.MonkeyPatch.context() as mp:
        test_wm.test_gradient_check_every_parameter_block(mp)
    elapsed = time.perf_counter() - start
    assert report(3, elapsed < 120, f"all blocks below 1e-4 relative error, {elapsed:.1f}s")


@pytest.mark.criterion(4)
def test_criterion_4_structural_identities():
    start = time.perf_counter()
    test_tensor.test_symexp_inverts_symlog()
    test_tensor.test_softmax_rows_sum_to_one()
    test_nets.test_twohot_round_trip()
    test_nets.test_twohot_weights_valid()
    test_nets.test_kl_non_negative()
    test_nets.test_kl_examples()
    test_arn.test_never_amplifies_and_preserves_sign()
    for dist in ("uniform", "normal", "exponential"):
        test_arn.test_equalizes_ten_times_scaled_streams(dist)
    elapsed = time.perf_counter() - start
    assert report(4, elapsed < 60, f"property suites passed, {elapsed:.1f}s")


# 5-9: trained models ----------------------------------------------------------------------


def desk_config(ablation, seed):
    return RunConfig(seed=seed, wm=dict(hidden=64, width=64, groups=8, classes=8),
                     agent=dict(width=64), env_steps=ENV_STEPS, slots_per_morph=4,
                     train_every=4, eval_every=0, eval_episodes=8,
                     imagine_starts=128).with_ablation(ablation)


@pytest.fixture(scope="session")
def runs():
    cache = os.environ.get("QWM_ACCEPTANCE_CACHE")
    out, cpu = {}, {}
    for seed in SEEDS:
        for name in CONFIGS:
            cfg = desk_config(name, seed)
            tr = Trainer(cfg)
            path = Path(cache) / f"{name}_{seed}_{ENV_STEPS}.qwm" if cache else None
            if path is not None and path.exists():
                tr.load(path)
            else:
                start = time.process_time()
                tr.run()
                cpu[(name, seed)] = time.process_time() - start
                if path is not None:
                    tr.save(path)
            out[(name, seed)] = tr
    return out, cpu


@pytest.fixture(scope="session")
def evaluations(runs):
    trainers, _ = runs
    result = {}
    for key, tr in trainers.items():
        train_eval = tr.evaluate_training()
        row = {"train": train_eval, "shares": tr.reward_loss_shares()}
        if key[0] == "full":
            for role in ("interpolated", "extrapolated"):
                row[role] = tr.evaluate_morphology(tr.cohort.index(role), episodes=16)
        result[key] = row
    return result


@pytest.mark.criterion(5)
def test_criterion_5_budget(runs):
    trainers, cpu = runs
    steps = {k: tr.env_steps for k, tr in trainers.items()}
    per_seed = {s: sum(cpu.get((n, s), 0.0) for n in CONFIGS) for s in SEEDS}
    ok = max(steps.values()) <= BUDGET_STEPS and all(v < BUDGET_CPU_S for v in per_seed.values())
    assert report(5, ok, f"env steps {max(steps.values())}, CPU seconds per seed "
                  + ", ".join(f"{v:.0f}" for v in per_seed.values())
                  + (" (cached runs not timed)" if not cpu else ""))


@pytest.mark.criterion(5)
def test_criterion_5a_full_beats_baseline(evaluations):
    full = [evaluations[("full", s)]["train"]["mean_normalized_return"] for s in SEEDS]
    base = [evaluations[("no_pme_arn", s)]["train"]["mean_normalized_return"] for s in SEEDS]
    wins = sum(f > b for f, b in zip(full, base))
    assert report("5a", wins >= 2, f"full {np.round(full, 3).tolist()} vs baseline "
                  f"{np.round(base, 3).tolist()}, wins {wins}/3")


@pytest.mark.criterion(5)
def test_criterion_5b_reward_loss_dominance(runs, evaluations):
    trainers, _ = runs
    tr = trainers[("full", SEEDS[0])]
    scales = {i: m.reward_scale for i, m in zip(tr.ids, tr.cohort.training)}
    largest = max(scales, key=scales.get)
    no_arn = [evaluations[("no_arn", s)]["shares"][largest] for s in SEEDS]
    full = [max(evaluations[("full", s)]["shares"].values()) for s in SEEDS]
    ok = all(v > 0.6 for v in no_arn) and all(v < 0.4 for v in full)
    assert report("5b", ok, f"w/o ARN share of id {largest}: {np.round(no_arn, 3).tolist()}; "
                  f"full max share {np.round(full, 3).tolist()}")


@pytest.mark.criterion(6)
def test_criterion_6_interpolation_beats_extrapolation(runs, evaluations):
    trainers, _ = runs
    good, parts = 0, []
    for s in SEEDS:
        ev = evaluations[("full", s)]
        tr = trainers[("full", s)]
        best = max(ev["train"][f"length_{i}"] for i in tr.ids)
        inter, extra = ev["interpolated"]["length"], ev["extrapolated"]["length"]
        good += inter >= 0.7 * best and extra < inter
        parts.append(f"seed {s}: best {best:.0f}, interp {inter:.1f}, extrap {extra:.1f}")
    assert report(6, good >= 2, "; ".join(parts) + f" ({good}/3)")


@pytest.mark.criterion(7)
def test_criterion_7_open_loop_nmse(runs):
    trainers, _ = runs
    tr = trainers[("full", SEEDS[0])]
    start = time.perf_counter()
    env = E.make_cohort(tr.cohort.training, 32, tr.env_cfg, tr.stats, ids=tr.ids,
                        seed=tr.eval_seed + 11)
    curves = analysis.rollout_nmse(tr.wm, tr.agent.actor, env, 5, 45, 32,
                                   np.random.default_rng(tr.eval_seed + 12))
    elapsed = time.perf_counter() - start
    at45 = {i: float(c[:, 44].mean()) for i, c in curves.items()}
    at1 = float(np.mean([c[:, 0].mean() for c in curves.values()]))
    mean45 = float(np.mean(list(at45.values())))
    ok = (set(curves) == set(tr.ids) and all(v < 1.0 for v in at45.values())
          and mean45 >= at1 and elapsed < 120)
    assert report(7, ok, f"NMSE@45 per id {[round(v, 3) for v in at45.values()]}, "
                  f"mean NMSE@1 {at1:.3f} vs @45 {mean45:.3f}, {elapsed:.1f}s")


@pytest.mark.criterion(8)
def test_criterion_8_disentanglement_ordering(runs):
    trainers, _ = runs
    tr = trainers[("full", SEEDS[0])]
    start = time.perf_counter()
    env = E.make_cohort(tr.cohort.training, 32, tr.env_cfg, tr.stats, ids=tr.ids,
                        seed=tr.eval_seed + 21)
    rep = analysis.probe_h_vs_z(tr.wm, tr.agent.actor, env, 32, 32,
                                np.random.default_rng(tr.eval_seed + 22))
    elapsed = time.perf_counter() - start
    ok = (rep["silhouette_h"] > rep["silhouette_z"] and rep["within"] > 0.7
          and abs(rep["between"] + rep["within"] - 1) <= 1e-9
          and abs(rep["between_h"] + rep["within_h"] - 1) <= 1e-9 and elapsed < 120)
    assert report(8, ok, f"silhouette h {rep['silhouette_h']:.3f} > z {rep['silhouette_z']:.3f}, "
                  f"within(z) {rep['within']:.3f}, {elapsed:.1f}s")


@pytest.mark.criterion(9)
def test_criterion_9_frozen_deployment(runs):
    trainers, _ = runs
    tr = trainers[("full", SEEDS[0])]
    start = time.perf_counter()
    before = {k: v.copy() for k, v in tr.wm.state_arrays().items()}
    spec, ids = [tr.cohort.training[0]], [tr.ids[0]]
    other_mu = E.make_cohort([tr.cohort.training[3]], 1, tr.env_cfg, tr.stats).mu[0]
    results = {}
    for deterministic in (True, False):
        run = [tr.policy_rollout(spec, ids, 4, seed=123, deterministic=deterministic,
                                 policy_seed=7, record=True)["actions"] for _ in range(2)]
        swapped = tr.policy_rollout(spec, ids, 4, seed=123, deterministic=deterministic,
                                    policy_seed=7, mu_override=other_mu,
                                    record=True)["actions"]
        n = min(len(swapped), len(run[0]))
        results[deterministic] = (run[0].tobytes() == run[1].tobytes(),
                                  np.abs(swapped[:n] - run[0][:n]).max() > 0)
    unchanged = all(before[k].tobytes() == v.tobytes() for k, v in tr.wm.state_arrays().items())
    elapsed = time.perf_counter() - start
    ok = all(a and b for a, b in results.values()) and unchanged and elapsed < 10
    assert report(9, ok, f"repeat bit-exact / swap changes actions: {results}, "
                  f"parameters untouched {unchanged}, {elapsed:.1f}s")

