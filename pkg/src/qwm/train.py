"""Run configuration, replay buffer and the collect/train/evaluate loop."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .agent import Agent, AgentConfig, write_metrics_csv
from .arn import RewardNormalizer
from .env import DEFAULT_COHORT, Cohort, EnvConfig, load_cohort, make_cohort
from .wm import EpisodeBatch, LatentState, WorldModel, WorldModelConfig, write_loss_csv

ABLATIONS = {
    "full": dict(pme=True, arn=True, rssm_conditioning=True, encoder_conditioning=True),
    "no_pme": dict(pme=False, arn=True, rssm_conditioning=True, encoder_conditioning=True),
    "no_arn": dict(pme=True, arn=False, rssm_conditioning=True, encoder_conditioning=True),
    "no_rssm_cond": dict(pme=True, arn=True, rssm_conditioning=False, encoder_conditioning=True),
    "no_encoder_cond": dict(pme=True, arn=True, rssm_conditioning=True,
                            encoder_conditioning=False),
    "no_arn_rssm_cond": dict(pme=True, arn=False, rssm_conditioning=False,
                             encoder_conditioning=True),
    "no_arn_encoder_cond": dict(pme=True, arn=False, rssm_conditioning=True,
                                encoder_conditioning=False),
    "no_pme_arn": dict(pme=False, arn=False, rssm_conditioning=True, encoder_conditioning=True),
}


@dataclass
class Flags:
    pme: bool = True
    arn: bool = True
    rssm_conditioning: bool = True
    encoder_conditioning: bool = True

    @property
    def uses_rssm_mu(self) -> bool:
        return self.pme and self.rssm_conditioning

    @property
    def uses_encoder_mu(self) -> bool:
        return self.pme and self.encoder_conditioning


@dataclass
class RunConfig:
    seed: int = 0
    cohort: str | None = None
    held_out: list[str] = field(default_factory=lambda: ["interpolated", "extrapolated"])
    flags: Flags = field(default_factory=Flags)
    wm: dict = field(default_factory=dict)
    agent: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    wm_lr: float = 3e-4
    wm_eps: float = 1e-8
    clip: float = 100.0
    env_steps: int = 100_000
    slots_per_morph: int = 4
    batch_per_id: int = 2
    seq_len: int = 32
    train_every: int = 4
    prefill: int = 64
    replay_capacity: int = 20_000
    imagine_starts: int = 256
    eval_every: int = 20_000
    eval_episodes: int = 8
    nmse_context: int = 5
    nmse_horizon: int = 45
    nmse_trajectories: int = 32
    probe_trajectories: int = 32
    probe_steps: int = 32
    out: str = "runs/default"

    # serialization ---------------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        data = dict(data)
        if "flags" in data:
            flag_data = data["flags"]
            bad = set(flag_data) - {f.name for f in fields(Flags)}
            if bad:
                raise ValueError(f"unknown flags {sorted(bad)}")
            data["flags"] = Flags(**flag_data)
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_ablation(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise KeyError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return replace(self, flags=Flags(**ABLATIONS[name]))

    # derived -----------------------------------------------------------------------

    def load_cohort(self) -> Cohort:
        return load_cohort(self.cohort) if self.cohort else DEFAULT_COHORT

    def env_config(self) -> EnvConfig:
        data = dict(self.env)
        for key in ("damping_range", "command_range"):
            if key in data:
                data[key] = tuple(data[key])
        return EnvConfig(**data)

    def wm_config(self, obs_dim: int, act_dim: int, mu_dim: int) -> WorldModelConfig:
        return WorldModelConfig(obs_dim=obs_dim, act_dim=act_dim, mu_dim=mu_dim,
                                encoder_conditioning=self.flags.uses_encoder_mu,
                                rssm_conditioning=self.flags.uses_rssm_mu, **self.wm)

    def agent_config(self) -> AgentConfig:
        return AgentConfig(**self.agent)


# replay --------------------------------------------------------------------------------


class Replay:
    """Per-slot rings of (obs, prev action, reward, continuation, is_first)."""

    def __init__(self, n_slots: int, obs_dim: int, act_dim: int, capacity: int):
        self.capacity = capacity
        self.obs = np.zeros((n_slots, capacity, obs_dim))
        self.act = np.zeros((n_slots, capacity, act_dim))
        self.rew = np.zeros((n_slots, capacity))
        self.cont = np.ones((n_slots, capacity))
        self.first = np.zeros((n_slots, capacity), dtype=bool)
        self.count = np.zeros(n_slots, dtype=int)

    def add(self, slots, obs, act, rew, cont, first) -> None:
        slots = np.asarray(slots)
        pos = self.count[slots] % self.capacity
        self.obs[slots, pos] = obs
        self.act[slots, pos] = act
        self.rew[slots, pos] = rew
        self.cont[slots, pos] = cont
        self.first[slots, pos] = first
        self.count[slots] += 1

    def sample(self, slot: int, length: int, rng) -> tuple:
        n = min(self.count[slot], self.capacity)
        if n < length:
            raise ValueError(f"slot {slot} holds {n} steps, fewer than {length}")
        oldest = self.count[slot] - n
        start = oldest + int(rng.integers(0, n - length + 1))
        idx = np.arange(start, start + length) % self.capacity
        first = self.first[slot, idx].copy()
        first[0] = True
        return (self.obs[slot, idx], self.act[slot, idx], self.rew[slot, idx],
                self.cont[slot, idx], first)


# trainer -------------------------------------------------------------------------------


class Trainer:
    def __init__(self, config: RunConfig):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(5)
        self.rng = np.random.default_rng(seeds[0])
        init_rng = np.random.default_rng(seeds[1])
        self.eval_seed = int(seeds[2].generate_state(1)[0])
        self.cohort = config.load_cohort()
        self.stats = self.cohort.stats()
        self.env_cfg = config.env_config()
        self.env = make_cohort(self.cohort.training, config.slots_per_morph, self.env_cfg,
                               self.stats, seed=int(seeds[3].generate_state(1)[0]))
        obs_dim = self.env.clean_observations().shape[1]
        self.wm = WorldModel(config.wm_config(obs_dim, 1, self.env.mu.shape[1]), init_rng)
        self.wm_opt = T.Adam(self.wm.parameters(), lr=config.wm_lr, eps=config.wm_eps,
                             clip=config.clip)
        wc = self.wm.config
        self.agent = Agent(wc.feat_dim, wc.act_dim, wc.head, config.agent_config(), init_rng)
        self.normalizer = RewardNormalizer() if config.flags.arn else None
        self.ids = sorted(set(self.env.slot_ids.tolist()))
        if self.normalizer is not None:
            for i in self.ids:
                self.normalizer.register(i)
        self.replay = Replay(self.env.n_slots, obs_dim, wc.act_dim, config.replay_capacity)
        self.env_steps = 0
        self.updates = 0
        self.loss_rows: list[dict] = []
        self.metric_rows: list[dict] = []
        self.eval_rows: list[dict] = []
        self.reward_loss_mass = {i: 0.0 for i in self.ids}
        self._start_episodes()

    # collection ------------------------------------------------------------------------

    def _start_episodes(self) -> None:
        n = self.env.n_slots
        self.obs = self.env.reset()
        self.first = np.ones(n, bool)
        self.reward_in = np.zeros(n)
        self.cont_in = np.ones(n)
        self.prev_action = np.zeros((n, 1))
        self.latent = self.wm.initial_state(n)
        self.ep_return = np.zeros(n)
        self.ep_length = np.zeros(n, dtype=int)

    def collect(self, ticks: int, random_policy: bool = False) -> None:
        env, slots = self.env, np.arange(self.env.n_slots)
        mu = env.mu
        for _ in range(ticks):
            with T.no_grad():
                self.latent, _ = self.wm.filter_step(self.latent, self.prev_action, self.obs,
                                                     mu, self.rng, self.first)
                if random_policy:
                    action = self.rng.uniform(-1, 1, (env.n_slots, 1))
                else:
                    action, _ = self.agent.actor.sample(self.latent.feat, self.rng)
                    action = action.data
            self.replay.add(slots, self.obs, self.prev_action, self.reward_in, self.cont_in,
                            self.first)
            obs, reward, term, trunc = env.step(action[:, 0])
            self.env_steps += env.n_slots
            if self.normalizer is not None:
                for i in self.ids:
                    self.normalizer.observe(i, reward[env.slot_ids == i])
            self.ep_return += reward
            self.ep_length += 1
            done = term | trunc
            self.obs = obs
            self.reward_in = reward
            self.cont_in = 1.0 - term.astype(np.float64)
            self.first = np.zeros(env.n_slots, bool)
            self.prev_action = action
            if done.any():
                d = slots[done]
                self.replay.add(d, obs[d], action[d], reward[d], self.cont_in[d], False)
                fresh = env.reset(done)
                self.obs[d] = fresh[d]
                self.first[d] = True
                self.reward_in[d] = 0.0
                self.cont_in[d] = 1.0
                self.prev_action[d] = 0.0
                self.ep_return[d] = 0.0
                self.ep_length[d] = 0

    # updates --------------------------------------------------------------------------

    def sample_batch(self) -> EpisodeBatch:
        env, cfg = self.env, self.config
        parts = {k: [] for k in ("obs", "act", "rew", "cont", "first")}
        ids, mus = [], []
        for i in self.ids:
            candidates = np.flatnonzero(env.slot_ids == i)
            for _ in range(cfg.batch_per_id):
                slot = int(candidates[self.rng.integers(len(candidates))])
                for key, arr in zip(parts, self.replay.sample(slot, cfg.seq_len, self.rng)):
                    parts[key].append(arr)
                ids.append(i)
                mus.append(env.mu[slot])
        ids = np.array(ids)
        raw = np.stack(parts["rew"])
        if self.normalizer is not None:
            div = np.array([self.normalizer.divisor(i) for i in ids])[:, None]
            rewards = raw / div
        else:
            rewards = raw
        return EpisodeBatch(np.stack(parts["obs"]), np.stack(parts["act"]), rewards,
                            np.stack(parts["cont"]), np.stack(parts["first"]), np.stack(mus),
                            ids, raw)

    def train_step(self) -> dict:
        batch = self.sample_batch()
        with T.Tape() as tape:
            states, terms = self.wm.observe_sequence(batch, self.rng)
        self.wm_opt.zero_grad()
        tape.backward(terms["total"])
        self.wm_opt.step()
        self.updates += 1
        for i in self.ids:
            self.reward_loss_mass[i] += float(terms["reward_sq_err"][batch.ids == i].sum())
        row = {"step": self.env_steps, **{k: terms[k] for k in
                                          ("dec", "rew", "cont", "kl_dyn", "kl_rep")},
               "total": terms["total"].item()}
        self.loss_rows.append(row)

        B, Tn = batch.shape
        h = np.concatenate([s.h.data for s in states], axis=0)
        z = np.concatenate([s.z.data for s in states], axis=0)
        ids = np.tile(batch.ids, Tn)
        mu = np.tile(batch.mu, (Tn, 1))
        n_starts = min(self.config.imagine_starts, len(h))
        pick = np.sort(self.rng.choice(len(h), n_starts, replace=False))
        start = LatentState(T.tensor(h[pick]), T.tensor(z[pick]), T.tensor(np.zeros_like(z[pick])))
        metrics = self.agent.train_step(self.wm, start, mu[pick], self.rng, ids[pick])
        metrics["step"] = self.env_steps
        self.metric_rows.append(metrics)
        return metrics

    def run(self, log=None) -> None:
        cfg = self.config
        if self.env_steps < cfg.env_steps and self.replay.count.min() < cfg.seq_len:
            # fresh run: random prefill; resumed run: refill the (unsaved) replay on-policy
            fresh = self.env_steps == 0
            prefill = max(cfg.prefill, cfg.seq_len) if fresh else cfg.seq_len
            self.collect(prefill, random_policy=fresh)
        next_eval = (self.env_steps // cfg.eval_every + 1) * cfg.eval_every if cfg.eval_every else None
        while self.env_steps < cfg.env_steps:
            self.collect(cfg.train_every)
            self.train_step()
            if next_eval is not None and self.env_steps >= next_eval:
                self.eval_rows.append({"step": self.env_steps, **self.evaluate_training()})
                next_eval += cfg.eval_every
                if log:
                    log(self.eval_rows[-1])

    # evaluation -------------------------------------------------------------------------

    def policy_rollout(self, spec, ids, episodes: int, seed: int, deterministic: bool = True,
                       mu_override: np.ndarray | None = None, record: bool = False,
                       policy_seed: int | None = None) -> dict:
        """One episode per slot with the frozen model; returns per-id statistics.

        A deterministic rollout filters with posterior modes and acts with the policy
        mean, so it depends on ``seed`` (the environment) alone.
        """
        env = make_cohort(spec, episodes, self.env_cfg, self.stats, ids=ids, seed=seed)
        rng = None if deterministic else np.random.default_rng(
            seed + 1 if policy_seed is None else policy_seed)
        mu = env.mu if mu_override is None else np.broadcast_to(mu_override, env.mu.shape)
        obs = env.reset()
        n = env.n_slots
        latent = self.wm.initial_state(n)
        prev = np.zeros((n, 1))
        first = np.ones(n, bool)
        alive = np.ones(n, bool)
        ret = np.zeros(n)
        length = np.zeros(n, dtype=int)
        actions = []
        with T.no_grad():
            while alive.any():
                latent, _ = self.wm.filter_step(latent, prev, obs, mu, rng, first)
                a, _ = self.agent.actor.sample(latent.feat, rng, deterministic)
                a = a.data
                actions.append(a[:, 0].copy())
                obs, r, term, trunc = env.step(a[:, 0])
                ret += r * alive
                length += alive
                alive &= ~(term | trunc)
                prev = a
                first = np.zeros(n, bool)
        out = {}
        for i, m in zip(ids, spec):
            sel = env.slot_ids == i
            peak = m.reward_scale * m.w_track * self.env_cfg.horizon
            out[int(i)] = {"return": float(ret[sel].mean()), "length": float(length[sel].mean()),
                           "normalized_return": float(ret[sel].mean() / peak)}
        if record:
            out["actions"] = np.array(actions)
        return out

    def evaluate_training(self, episodes: int | None = None) -> dict:
        episodes = episodes or self.config.eval_episodes
        stats = self.policy_rollout(self.cohort.training, self.ids, episodes, self.eval_seed)
        flat = {}
        for i in self.ids:
            for k, v in stats[i].items():
                flat[f"{k}_{i}"] = v
        flat["mean_normalized_return"] = float(np.mean([stats[i]["normalized_return"]
                                                        for i in self.ids]))
        return flat

    def evaluate_morphology(self, morph_id: int, episodes: int | None = None,
                            seed: int | None = None) -> dict:
        from .arn import UnknownId
        everything = self.cohort.all
        if not 0 <= morph_id < len(everything):
            raise UnknownId(morph_id)
        episodes = episodes or self.config.eval_episodes
        seed = self.eval_seed if seed is None else seed
        return self.policy_rollout([everything[morph_id]], [morph_id], episodes, seed)[morph_id]

    def reward_loss_shares(self) -> dict[int, float]:
        total = sum(self.reward_loss_mass.values())
        return {i: (v / total if total > 0 else 0.0) for i, v in self.reward_loss_mass.items()}

    # persistence -----------------------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blocks = {"wm." + k: v for k, v in self.wm.state_arrays().items()}
        blocks.update({"wm_opt." + k: v for k, v in self.wm_opt.state_arrays().items()})
        blocks.update({"agent." + k: v for k, v in self.agent.state_arrays().items()})
        T.save_checkpoint(path, blocks)
        side = {"env_steps": self.env_steps, "updates": self.updates,
                "normalizer": self.normalizer.state_dict() if self.normalizer else None,
                "return_scale": self.agent.return_scale.state_dict(),
                "reward_loss_mass": {str(k): v for k, v in self.reward_loss_mass.items()},
                "rng": self.rng.bit_generator.state}
        path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True))

    def load(self, path) -> None:
        path = Path(path)
        blocks = T.load_checkpoint(path)
        self.wm.load_state_arrays(blocks, "wm.")
        self.wm_opt.load_state_arrays({k[7:]: v for k, v in blocks.items()
                                       if k.startswith("wm_opt.")})
        self.agent.load_state_arrays({k[6:]: v for k, v in blocks.items()
                                      if k.startswith("agent.")})
        side_path = path.with_suffix(".json")
        if side_path.exists():
            side = json.loads(side_path.read_text())
            self.env_steps = int(side["env_steps"])
            self.updates = int(side["updates"])
            if self.normalizer is not None and side["normalizer"] is not None:
                self.normalizer.load_state_dict(side["normalizer"])
            self.agent.return_scale.load_state_dict(side["return_scale"])
            self.reward_loss_mass = {int(k): v for k, v in side["reward_loss_mass"].items()}
            self.rng.bit_generator.state = side["rng"]

    def write_logs(self, out_dir, append: bool = False) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_loss_csv(out / "wm_loss.csv", self.loss_rows, append=append)
        write_metrics_csv(out / "agent_metrics.csv", self.metric_rows, self.ids)
        if self.eval_rows:
            cols = list(self.eval_rows[0])
            with open(out / "eval.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                w.writerows(self.eval_rows)
