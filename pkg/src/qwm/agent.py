"""Actor-critic trained on imagined latent rollouts."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nets
from . import tensor as T
from .arn import RewardNormalizer
from .nets import Linear, Module, TwoHotHead, build_dense_stack
from .tensor import Tensor
from .wm import LatentState, NaNLoss, WorldModel

STD_MIN, STD_MAX = 0.1, 2.0


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    width: int = 256
    layers: int = 3
    gamma: float = 0.99
    lam: float = 0.95
    horizon: int = 15
    entropy: float = 3e-4
    slow_rate: float = 0.02
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    clip: float = 100.0
    return_alpha: float = 0.99
    return_capacity: int = 4096


class Actor(Module):
    def __init__(self, feat_dim: int, act_dim: int, width: int, layers: int, rng):
        self.act_dim = act_dim
        self.body = build_dense_stack(feat_dim, [width] * layers, None, rng)
        self.head = Linear(width, 2 * act_dim, rng)

    def dist(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        """(mean, std) of the pre-squash Gaussian."""
        mean, raw = T.split(self.head(self.body(feat)), [self.act_dim, self.act_dim])
        std = T.clamp(T.softplus(raw) + STD_MIN, STD_MIN, STD_MAX)
        return mean, std

    def sample(self, feat: Tensor, rng, deterministic: bool = False) -> tuple[Tensor, Tensor]:
        """Reparameterized tanh-squashed action and the Gaussian std."""
        mean, std = self.dist(feat)
        if deterministic or rng is None:
            return T.tanh(mean), std
        eps = rng.standard_normal(mean.shape)
        return T.tanh(mean + std * eps), std


class Critic(Module):
    def __init__(self, feat_dim: int, width: int, layers: int, head: TwoHotHead, rng):
        self.twohot = head
        self.body = build_dense_stack(feat_dim, [width] * layers, head.n_bins, rng, zero_head=True)

    def logits(self, feat: Tensor) -> Tensor:
        return self.body(feat)

    def value(self, feat: Tensor) -> Tensor:
        return nets.twohot_expected(self.logits(feat), self.twohot)


def act(actor: Actor, state: LatentState, rng, deterministic: bool = False) -> np.ndarray:
    with T.no_grad():
        a, _ = actor.sample(state.feat, rng, deterministic)
    return a.data


def lambda_returns(rewards: Sequence, continuations: Sequence, values: Sequence,
                   gamma: float = 0.99, lam: float = 0.95) -> list:
    """R_t = r_t + gamma * c_t * ((1 - lam) * v_{t+1} + lam * R_{t+1}), R_H = v_H.

    ``values`` has one more entry than ``rewards``.  Entries may be arrays or Tensors;
    the result is a list with one entry per reward step.
    """
    H = len(rewards)
    if len(continuations) != H or len(values) != H + 1:
        raise LengthMismatch(f"{H} rewards, {len(continuations)} continuations, "
                             f"{len(values)} values (need {H + 1})")
    out = [None] * H
    nxt = values[H]
    for t in reversed(range(H)):
        nxt = rewards[t] + gamma * continuations[t] * ((1.0 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return out


class ReturnScale:
    """Percentile-range EMA over imagined returns; divisor max(1, scale)."""

    def __init__(self, alpha: float = 0.99, capacity: int = 4096):
        self._norm = RewardNormalizer(alpha=alpha, capacity=capacity)
        self._norm.register(0)

    def update(self, returns: np.ndarray) -> float:
        self._norm.observe(0, returns)
        return self.divisor

    @property
    def divisor(self) -> float:
        return self._norm.divisor(0)

    def state_dict(self) -> dict:
        return self._norm.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self._norm.load_state_dict(state)


class Agent:
    def __init__(self, feat_dim: int, act_dim: int, head: TwoHotHead, config: AgentConfig,
                 rng: np.random.Generator):
        self.config = config
        self.actor = Actor(feat_dim, act_dim, config.width, config.layers, rng)
        self.critic = Critic(feat_dim, config.width, config.layers, head, rng)
        self.slow_critic = Critic(feat_dim, config.width, config.layers, head, None)
        self.slow_critic.load_state_arrays(self.critic.state_arrays())
        for p in self.slow_critic.parameters():
            p.requires_grad = False
        self.actor_opt = T.Adam(self.actor.parameters(), lr=config.actor_lr, clip=config.clip)
        self.critic_opt = T.Adam(self.critic.parameters(), lr=config.critic_lr, clip=config.clip)
        self.return_scale = ReturnScale(config.return_alpha, config.return_capacity)

    def update_slow(self) -> None:
        r = self.config.slow_rate
        for fast, slow in zip(self.critic.parameters(), self.slow_critic.parameters()):
            slow.data[...] = (1.0 - r) * slow.data + r * fast.data

    def train_step(self, wm: WorldModel, start: LatentState, mu: np.ndarray, rng,
                   ids: np.ndarray | None = None) -> dict:
        """One actor and one critic update from imagined rollouts starting at ``start``."""
        c = self.config
        start = start.detach()
        n = len(start)
        stds = []

        def policy(feat):
            a, std = self.actor.sample(feat, rng)
            stds.append(std)
            return a

        with T.Tape() as tape, wm.frozen():
            traj = wm.imagine(start, policy, c.horizon, rng, mu)
            feats = traj.feats
            with self.slow_critic.frozen():
                values = [self.slow_critic.value(f) for f in feats]
            conts = traj.conts
            returns = lambda_returns(traj.rewards, conts, values, c.gamma, c.lam)
            disc = np.ones(n)
            weights = []
            for t in range(c.horizon):
                weights.append(disc.copy())
                disc = disc * c.gamma * conts[t].data
            if c.horizon:
                ret_np = np.stack([r.data for r in returns])
                scale = self.return_scale.update(ret_np)
                objective = None
                entropy_total = 0.0
                for t in range(c.horizon):
                    ent = T.sum(T.log(stds[t]), axis=-1)
                    entropy_total += float(ent.data.mean())
                    term = T.sum((returns[t] * (1.0 / scale) + ent * c.entropy) * weights[t])
                    objective = term if objective is None else objective + term
                actor_loss = -objective * (1.0 / (n * c.horizon))
            else:
                actor_loss = None
        if actor_loss is not None:
            if not np.isfinite(actor_loss.data).all():
                raise NaNLoss("actor loss is not finite")
            self.actor_opt.zero_grad()
            tape.backward(actor_loss)
            self.actor_opt.step()

        metrics = {"actor_loss": actor_loss.item() if actor_loss is not None else 0.0,
                   "critic_loss": 0.0, "entropy": 0.0, "imagined_return": 0.0}
        if not c.horizon:
            return metrics
        metrics["entropy"] = entropy_total / c.horizon + 0.5 * np.log(2 * np.pi * np.e)

        with T.Tape() as tape:
            crit_feats = T.concat([f.detach() for f in feats[:-1]], axis=0)
            targets = ret_np.reshape(-1)
            w = np.stack(weights).reshape(-1)
            nll = nets.twohot_nll(self.critic.logits(crit_feats), targets, self.critic.twohot)
            critic_loss = T.sum(nll * w) * (1.0 / w.size)
        if not np.isfinite(critic_loss.data).all():
            raise NaNLoss("critic loss is not finite")
        self.critic_opt.zero_grad()
        tape.backward(critic_loss)
        self.critic_opt.step()
        self.update_slow()

        metrics["critic_loss"] = critic_loss.item()
        metrics["imagined_return"] = float(ret_np[0].mean())
        if ids is not None:
            metrics["imagined_return_by_id"] = {int(i): float(ret_np[0][ids == i].mean())
                                                for i in np.unique(ids)}
        return metrics

    # persistence -------------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in (("actor.", self.actor), ("critic.", self.critic),
                            ("slow_critic.", self.slow_critic)):
            out.update({prefix + k: v for k, v in mod.state_arrays().items()})
        for prefix, opt in (("actor_opt.", self.actor_opt), ("critic_opt.", self.critic_opt)):
            out.update({prefix + k: v for k, v in opt.state_arrays().items()})
        return out

    def load_state_arrays(self, arrays) -> None:
        self.actor.load_state_arrays(arrays, "actor.")
        self.critic.load_state_arrays(arrays, "critic.")
        self.slow_critic.load_state_arrays(arrays, "slow_critic.")
        for prefix, opt in (("actor_opt.", self.actor_opt), ("critic_opt.", self.critic_opt)):
            opt.load_state_arrays({k[len(prefix):]: v for k, v in arrays.items()
                                   if k.startswith(prefix)})


METRIC_COLUMNS = ("step", "actor_loss", "critic_loss", "entropy", "mean_imagined_return")


def write_metrics_csv(path, rows: Sequence[dict], ids: Sequence[int]) -> None:
    cols = list(METRIC_COLUMNS) + [f"imagined_return_{i}" for i in ids]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            by_id = row.get("imagined_return_by_id", {})
            w.writerow([int(row["step"]), *(repr(float(row[k])) for k in
                                            ("actor_loss", "critic_loss", "entropy",
                                             "imagined_return")),
                        *(repr(float(by_id.get(i, float("nan")))) for i in ids)])
