import csv
import json
from importlib import resources

import numpy as np
import pytest

from qwm import cli
from qwm.train import RunConfig

COHORT_DIR = resources.files("qwm") / "data" / "cohort"
ROBOTS = ["anymal_b", "anymal_c", "anymal_d", "spot", "unitree_a1", "unitree_go1",
          "unitree_go2", "unitree_b2"]

TINY = {"wm": {"hidden": 16, "width": 16, "groups": 4, "classes": 4},
        "agent": {"width": 16, "layers": 1}, "env_steps": 2400, "slots_per_morph": 2,
        "eval_every": 1200, "eval_episodes": 2, "imagine_starts": 32, "seq_len": 16,
        "nmse_trajectories": 4, "probe_trajectories": 4, "probe_steps": 8}


def write_config(path, **overrides):
    path.write_text(json.dumps({**TINY, **overrides}))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    config = write_config(root / "config.json")
    assert cli.main(["train", "--config", config, "--out", str(root / "run")]) == 0
    return root, config


# extract --------------------------------------------------------------------------------


def test_extract_cohort(tmp_path):
    paths = [str(COHORT_DIR / f"{n}.robot") for n in ROBOTS]
    assert cli.main(["extract", *paths, "--out", str(tmp_path), "--held-out", "unitree_b2"]) == 0
    rows = read_csv(tmp_path / "features.csv")
    assert [r[0] for r in rows[1:]] == ROBOTS
    go2 = dict(zip(rows[0][1:], map(float, rows[ROBOTS.index("unitree_go2") + 1][1:])))
    assert abs(go2["aspect_ratio"] - 4.16) <= 0.01 and go2["k_cfg"] == 0.0
    dist = read_csv(tmp_path / "distances.csv")
    assert len(dist) == 9 and all(len(r) == 9 for r in dist)
    assert (tmp_path / "normalized.csv").exists()


def test_extract_single_file_writes_features_only(tmp_path):
    assert cli.main(["extract", str(COHORT_DIR / "spot.robot"), "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["features.csv"]


def test_extract_malformed_file_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.robot"
    bad.write_text('<robot name="x">\n<meta knee_config="0" base="a"/>\n<widget/>\n</robot>')
    assert cli.main(["extract", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_extract_missing_file(tmp_path):
    assert cli.main(["extract", str(tmp_path / "nope.robot"), "--out", str(tmp_path)]) == 2


# train ----------------------------------------------------------------------------------


def test_zero_step_budget_writes_initial_checkpoint(tmp_path):
    config = write_config(tmp_path / "c.json", env_steps=0)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", config, "--out", str(out)]) == 0
    assert (out / "checkpoint.qwm").exists() and (out / "config.json").exists()
    assert read_csv(out / "wm_loss.csv") == [["step", "dec", "rew", "cont", "kl_dyn", "kl_rep",
                                              "total"]]


def test_train_outputs(trained):
    root, _ = trained
    out = root / "run"
    for name in ("checkpoint.qwm", "checkpoint.json", "wm_loss.csv", "agent_metrics.csv",
                 "eval.csv", "config.json"):
        assert (out / name).exists(), name
    cfg = RunConfig.load(out / "config.json")
    assert cfg.env_steps == 2400 and cfg.out == str(out)


def test_resume_continues_loss_log(tmp_path):
    short = write_config(tmp_path / "short.json", env_steps=1200)
    long = write_config(tmp_path / "long.json", env_steps=2400)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", short, "--out", str(out)]) == 0
    first = len(read_csv(out / "wm_loss.csv"))
    assert cli.main(["train", "--config", long, "--out", str(out),
                     "--checkpoint", str(out / "checkpoint.qwm")]) == 0
    rows = read_csv(out / "wm_loss.csv")
    steps = [int(r[0]) for r in rows[1:]]
    assert len(rows) > first
    assert steps == sorted(steps) and steps[-1] >= 2400
    assert rows.count(rows[0]) == 1


def test_same_seed_gives_identical_logs(tmp_path, trained):
    root, config = trained
    out = tmp_path / "again"
    assert cli.main(["train", "--config", config, "--out", str(out)]) == 0
    for name in ("wm_loss.csv", "agent_metrics.csv", "eval.csv"):
        assert (out / name).read_bytes() == (root / "run" / name).read_bytes(), name


def test_flags_round_trip_through_saved_config(tmp_path):
    config = write_config(tmp_path / "c.json", env_steps=0)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", config, "--out", str(out), "--ablation", "no_arn",
                     "--seed", "7"]) == 0
    cfg = RunConfig.load(out / "config.json")
    assert cfg.seed == 7 and not cfg.flags.arn and cfg.flags.pme
    assert RunConfig.from_dict(json.loads(cfg.dumps())) == cfg
    for name in ("full", "no_pme", "no_arn", "no_rssm_cond", "no_encoder_cond",
                 "no_arn_rssm_cond", "no_arn_encoder_cond", "no_pme_arn"):
        c = RunConfig().with_ablation(name)
        assert RunConfig.from_dict(json.loads(c.dumps())).flags == c.flags


# eval / analysis ------------------------------------------------------------------------


def test_eval_training_and_held_out(trained, tmp_path):
    root, config = trained
    ckpt = str(root / "run" / "checkpoint.qwm")
    assert cli.main(["eval", "--config", config, "--checkpoint", ckpt, "--out",
                     str(tmp_path / "a"), "--morphology-id", "6"]) == 0
    result = json.loads((tmp_path / "a" / "eval.json").read_text())
    assert result["morphology_id"] == 6 and 1 <= result["length"] <= 150
    assert cli.main(["eval", "--config", config, "--checkpoint", ckpt, "--out",
                     str(tmp_path / "b"), "--morphology-id", "6"]) == 0
    assert json.loads((tmp_path / "b" / "eval.json").read_text()) == result


def test_deterministic_eval_ignores_policy_seed(trained):
    from qwm.train import Trainer

    root, config = trained
    tr = Trainer(RunConfig.load(config))
    tr.load(root / "run" / "checkpoint.qwm")
    spec, ids = tr.cohort.training, tr.ids
    a = tr.policy_rollout(spec, ids, 2, seed=5, policy_seed=1, record=True)
    b = tr.policy_rollout(spec, ids, 2, seed=5, policy_seed=2, record=True)
    assert a["actions"].tobytes() == b["actions"].tobytes()
    c = tr.policy_rollout(spec, ids, 2, seed=5, deterministic=False, policy_seed=1, record=True)
    d = tr.policy_rollout(spec, ids, 2, seed=5, deterministic=False, policy_seed=2, record=True)
    assert c["actions"].shape != d["actions"].shape or np.abs(
        c["actions"] - d["actions"]).max() > 0


def test_eval_matches_last_training_eval(trained, tmp_path):
    root, config = trained
    assert cli.main(["eval", "--config", config, "--checkpoint",
                     str(root / "run" / "checkpoint.qwm"), "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "eval.json").read_text())
    rows = read_csv(root / "run" / "eval.csv")
    last = dict(zip(rows[0], rows[-1]))
    assert result["mean_normalized_return"] == pytest.approx(
        float(last["mean_normalized_return"]), abs=1e-9)


def test_eval_unknown_id(trained, tmp_path, capsys):
    root, config = trained
    code = cli.main(["eval", "--config", config, "--checkpoint",
                     str(root / "run" / "checkpoint.qwm"), "--out", str(tmp_path),
                     "--morphology-id", "42"])
    assert code == 2 and "42" in capsys.readouterr().err


def test_eval_requires_checkpoint(tmp_path):
    assert cli.main(["eval", "--out", str(tmp_path)]) == 1
    assert cli.main(["eval", "--out", str(tmp_path), "--checkpoint",
                     str(tmp_path / "missing.qwm")]) == 2


def test_rollout_nmse_rows(trained, tmp_path):
    root, config = trained
    ckpt = str(root / "run" / "checkpoint.qwm")
    assert cli.main(["rollout-nmse", "--config", config, "--checkpoint", ckpt, "--out",
                     str(tmp_path / "a")]) == 0
    rows = read_csv(tmp_path / "a" / "nmse_curve.csv")[1:]
    ids = sorted({int(r[0]) for r in rows})
    assert set(ids) <= set(range(6)) and ids
    for i in ids:
        assert [int(r[1]) for r in rows if int(r[0]) == i] == list(range(1, 46))
    assert cli.main(["rollout-nmse", "--config", config, "--checkpoint", ckpt, "--out",
                     str(tmp_path / "b"), "--include-held-out"]) == 0
    assert cli.main(["rollout-nmse", "--config", config, "--checkpoint", ckpt, "--out",
                     str(tmp_path / "c"), "--include-held-out"]) == 0
    with_held = read_csv(tmp_path / "b" / "nmse_curve.csv")[1:]
    assert {int(r[0]) for r in with_held} - set(range(6))
    assert ((tmp_path / "b" / "nmse_curve.csv").read_bytes()
            == (tmp_path / "c" / "nmse_curve.csv").read_bytes())


def test_probe_outputs(trained, tmp_path):
    root, config = trained
    assert cli.main(["probe", "--config", config, "--checkpoint",
                     str(root / "run" / "checkpoint.qwm"), "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert abs(metrics["between"] + metrics["within"] - 1) <= 1e-9
    assert len(read_csv(tmp_path / "pca_points.csv")) == 1 + 6 * 4 * 8


def test_ablate_report(tmp_path):
    config = write_config(tmp_path / "c.json", env_steps=1000, eval_every=0)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", config, "--out", str(out),
                     "--ablation", "full,no_arn"]) == 0
    rows = read_csv(out / "ablation.csv")
    assert tuple(rows[0]) == cli.ABLATION_COLUMNS
    assert [r[0] for r in rows[1:]] == ["full", "no_arn"]
    assert (out / "full" / "checkpoint.qwm").exists()
    assert not RunConfig.load(out / "no_arn" / "config.json").flags.arn


def test_outputs_stay_in_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = write_config(tmp_path / "c.json", env_steps=0)
    before = set(tmp_path.iterdir())
    assert cli.main(["train", "--config", config, "--out", str(tmp_path / "run")]) == 0
    assert set(tmp_path.iterdir()) - before == {tmp_path / "run"}


def test_usage_errors(tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["bogus"]) == 1
    assert cli.main(["train", "--ablation", "nonsense"]) == 1
    assert cli.main(["ablate", "--out", str(tmp_path), "--ablation", "nonsense"]) == 1


def test_bad_config_is_input_error(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"not_a_key": 1}))
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--out",
                     str(tmp_path / "o")]) == 2
