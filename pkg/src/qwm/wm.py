"""Morphology-conditioned recurrent state-space world model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nets
from . import tensor as T
from .nets import CategoricalLatent, Module, NormLayer, TwoHotHead, build_dense_stack
from .tensor import ShapeMismatch, Tensor

LOSS_COLUMNS = ("step", "dec", "rew", "cont", "kl_dyn", "kl_rep", "total")


class NaNLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class WorldModelConfig:
    obs_dim: int = 8
    act_dim: int = 1
    mu_dim: int = 10
    hidden: int = 128
    groups: int = 16
    classes: int = 16
    unimix: float = 0.01
    width: int = 256
    encoder_layers: int = 2
    decoder_layers: int = 2
    reward_layers: int = 4
    cont_layers: int = 2
    latent_layers: int = 1
    reward_bins: int = 63
    bin_range: float = 20.0
    beta_dyn: float = 0.5
    beta_rep: float = 0.1
    free_bits: float = 1.0
    w_dec: float = 1.0
    w_rew: float = 1.0
    w_cont: float = 1.0
    encoder_conditioning: bool = True
    rssm_conditioning: bool = True

    def __post_init__(self):
        for name in ("obs_dim", "act_dim", "mu_dim", "hidden", "groups", "classes", "width",
                     "reward_bins"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.beta_dyn < 0 or self.beta_rep < 0 or self.beta_dyn + self.beta_rep <= 0:
            raise ValueError("KL balancing weights must be non-negative with a positive sum")

    @property
    def latent(self) -> CategoricalLatent:
        return CategoricalLatent(self.groups, self.classes, self.unimix)

    @property
    def z_dim(self) -> int:
        return self.groups * self.classes

    @property
    def feat_dim(self) -> int:
        return self.hidden + self.z_dim

    @property
    def head(self) -> TwoHotHead:
        return TwoHotHead(self.reward_bins, -self.bin_range, self.bin_range)


@dataclass
class LatentState:
    h: Tensor
    z: Tensor
    logits: Tensor

    @property
    def feat(self) -> Tensor:
        return T.concat([self.h, self.z], axis=-1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.z.detach(), self.logits.detach())

    def __len__(self) -> int:
        return self.h.shape[0]


@dataclass
class EpisodeBatch:
    """Aligned (B, T, ...) sequences.

    ``actions[:, t]`` is the action that led to ``obs[:, t]``; ``rewards[:, t]`` and
    ``cont[:, t]`` belong to arriving at ``obs[:, t]``; ``is_first`` marks episode
    starts where the recurrent state is reset.
    """
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    cont: np.ndarray
    is_first: np.ndarray
    mu: np.ndarray
    ids: np.ndarray
    raw_rewards: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.obs.shape[:2]


@dataclass
class Imagined:
    states: list[LatentState]
    actions: list[Tensor]
    rewards: list[Tensor] = field(default_factory=list)
    conts: list[Tensor] = field(default_factory=list)

    @property
    def feats(self) -> list[Tensor]:
        return [s.feat for s in self.states]


class WorldModel(Module):
    def __init__(self, config: WorldModelConfig, rng: np.random.Generator | None):
        c = self.config = config
        W, Z = c.width, c.z_dim
        half = max(1, W // 2)
        self.dyn_tower = build_dense_stack(c.obs_dim, [W] * c.encoder_layers, None, rng)
        fuse_in = W
        if c.encoder_conditioning:
            self.static_tower = build_dense_stack(c.mu_dim, [half] * c.encoder_layers, None, rng)
            fuse_in += half
        self.fusion = NormLayer(fuse_in, W, rng)
        pre_in = Z + c.act_dim + (c.mu_dim if c.rssm_conditioning else 0)
        self.pre_net = NormLayer(pre_in, W, rng)
        self.cell = nets.GRUCell(W, c.hidden, rng)
        self.prior_net = build_dense_stack(c.hidden, [W] * c.latent_layers, Z, rng)
        self.post_net = build_dense_stack(c.hidden + W, [W] * c.latent_layers, Z, rng)
        self.decoder = build_dense_stack(c.feat_dim, [W] * c.decoder_layers, c.obs_dim, rng)
        self.reward_net = build_dense_stack(c.feat_dim, [W] * c.reward_layers, c.reward_bins,
                                            rng, zero_head=True)
        self.cont_net = build_dense_stack(c.feat_dim, [W] * c.cont_layers, 1, rng)

    # components -------------------------------------------------------------------

    def _check(self, x, dim: int, what: str):
        if x.shape[-1] != dim:
            raise ShapeMismatch(f"{what}: expected last extent {dim}, got {x.shape}")

    def encode(self, obs, mu) -> Tensor:
        """Embedding of symlog observations fused with the static morphology path."""
        c = self.config
        obs = T.tensor(obs) if not isinstance(obs, Tensor) else obs
        self._check(obs, c.obs_dim, "observation")
        dyn = self.dyn_tower(T.symlog(obs))
        if not c.encoder_conditioning:
            return self.fusion(dyn)
        mu = T.tensor(mu) if not isinstance(mu, Tensor) else mu
        self._check(mu, c.mu_dim, "morphology")
        return self.fusion(T.concat([dyn, self.static_tower(mu)], axis=-1))

    def initial_state(self, n: int) -> LatentState:
        c = self.config
        return LatentState(Tensor(np.zeros((n, c.hidden))), Tensor(np.zeros((n, c.z_dim))),
                           Tensor(np.zeros((n, c.z_dim))))

    def recurrent_step(self, prev: LatentState, a_prev, mu) -> Tensor:
        c = self.config
        a_prev = T.tensor(a_prev) if not isinstance(a_prev, Tensor) else a_prev
        self._check(a_prev, c.act_dim, "action")
        parts = [prev.z, a_prev]
        if c.rssm_conditioning:
            mu = T.tensor(mu) if not isinstance(mu, Tensor) else mu
            self._check(mu, c.mu_dim, "morphology")
            parts.append(mu)
        return self.cell(self.pre_net(T.concat(parts, axis=-1)), prev.h)

    def prior(self, h: Tensor, rng) -> tuple[Tensor, Tensor]:
        logits = self.prior_net(h)
        z, _ = nets.sample_categorical(logits, self.config.latent, rng)
        return z, logits

    def posterior(self, h: Tensor, e: Tensor, rng) -> tuple[Tensor, Tensor]:
        logits = self.post_net(T.concat([h, e], axis=-1))
        z, _ = nets.sample_categorical(logits, self.config.latent, rng)
        return z, logits

    def decode(self, h: Tensor, z: Tensor) -> Tensor:
        """Predicted observation in symlog space."""
        return self.decoder(T.concat([h, z], axis=-1))

    def reward_logits(self, feat: Tensor) -> Tensor:
        return self.reward_net(feat)

    def predict_reward(self, h: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
        """(bin probabilities, expected reward)."""
        logits = self.reward_logits(T.concat([h, z], axis=-1))
        probs = T.softmax(logits, axis=-1)
        return probs, nets.twohot_decode(probs, self.config.head)

    def predict_continuation(self, h: Tensor, z: Tensor) -> Tensor:
        logit = self.cont_net(T.concat([h, z], axis=-1))
        return T.reshape(T.sigmoid(logit), (logit.shape[0],))

    # filtering and training -------------------------------------------------------------

    def filter_step(self, prev: LatentState, a_prev, obs, mu, rng,
                    is_first=None) -> tuple[LatentState, Tensor]:
        """One posterior update; returns the new state and the prior logits."""
        if is_first is not None:
            keep = (1.0 - np.asarray(is_first, dtype=np.float64))[:, None]
            prev = LatentState(prev.h * keep, prev.z * keep, prev.logits * keep)
            a_prev = _as_np(a_prev) * keep
        h = self.recurrent_step(prev, a_prev, mu)
        _, prior_logits = self.prior(h, None)
        z, post_logits = self.posterior(h, self.encode(obs, mu), rng)
        return LatentState(h, z, post_logits), prior_logits

    def observe_sequence(self, batch: EpisodeBatch, rng, start: LatentState | None = None):
        """Posterior unroll over a batch; returns (states per step, loss dict).

        The loss dict holds Tensor ``total`` plus float per-term values and the
        per-row squared error of the expected reward (``reward_sq_err``, shape (B, T)).
        """
        c = self.config
        B, Tn = batch.shape
        if batch.actions.shape[:2] != (B, Tn) or batch.rewards.shape != (B, Tn):
            raise ShapeMismatch("batch sequences are not aligned")
        mu = Tensor(batch.mu)
        obs_flat = batch.obs.transpose(1, 0, 2).reshape(Tn * B, c.obs_dim)
        mu_rep = np.tile(batch.mu, (Tn, 1))
        embed = self.encode(Tensor(obs_flat), Tensor(mu_rep))

        state = start if start is not None else self.initial_state(B)
        states, post_l, prior_l = [], [], []
        for t in range(Tn):
            first = batch.is_first[:, t]
            keep = (1.0 - first.astype(np.float64))[:, None]
            prev = LatentState(state.h * keep, state.z * keep, state.logits)
            h = self.recurrent_step(prev, batch.actions[:, t] * keep, mu)
            pri = self.prior_net(h)
            e_t = T.slice_axis(embed, t * B, (t + 1) * B, axis=0)
            z, post = self.posterior(h, e_t, rng)
            state = LatentState(h, z, post)
            states.append(state)
            post_l.append(post)
            prior_l.append(pri)

        h_all = T.concat([s.h for s in states], axis=0)
        z_all = T.concat([s.z for s in states], axis=0)
        feat = T.concat([h_all, z_all], axis=-1)
        posts = T.concat(post_l, axis=0)
        priors = T.concat(prior_l, axis=0)
        terms = self._losses(feat, posts, priors,
                             obs_flat,
                             batch.rewards.T.reshape(-1),
                             batch.cont.T.reshape(-1).astype(np.float64))
        terms["reward_sq_err"] = terms["reward_sq_err"].reshape(Tn, B).T
        return states, terms

    def _losses(self, feat, posts, priors, obs, rewards, cont) -> dict:
        c = self.config
        n = feat.shape[0]
        lat = c.latent
        target = np.sign(obs) * np.log1p(np.abs(obs))
        err = self.decoder(feat) - target
        dec = T.sum(err * err) * (1.0 / n)

        r_logits = self.reward_logits(feat)
        rew = T.mean(nets.twohot_nll(r_logits, rewards, c.head))
        expected = nets.twohot_decode(T.softmax(r_logits.detach(), axis=-1).data, c.head)

        logit = T.reshape(self.cont_net(feat), (n,))
        # Bernoulli NLL from logits: softplus(x) - y * x
        cont_loss = T.mean(T.softplus(logit) - logit * cont)

        kl_dyn = T.mean(T.maximum(nets.kl_categorical(T.stop_gradient(posts), priors, lat),
                                  c.free_bits))
        kl_rep = T.mean(T.maximum(nets.kl_categorical(posts, T.stop_gradient(priors), lat),
                                  c.free_bits))
        total = (dec * c.w_dec + rew * c.w_rew + cont_loss * c.w_cont
                 + kl_dyn * c.beta_dyn + kl_rep * c.beta_rep)
        if not np.isfinite(total.data).all():
            raise NaNLoss(f"world-model loss is {total.item()}")
        return {"total": total, "dec": dec.item(), "rew": rew.item(), "cont": cont_loss.item(),
                "kl_dyn": kl_dyn.item(), "kl_rep": kl_rep.item(),
                "reward_sq_err": (expected - rewards) ** 2}

    # imagination ------------------------------------------------------------------------

    def imagine(self, start: LatentState, policy: Callable[[Tensor], Tensor], horizon: int,
                rng, mu) -> Imagined:
        """Prior-only rollout from ``start``; rewards and continuations from the heads.

        ``policy`` maps features to actions.  Parameters stay as they are; callers
        that train the policy wrap this in ``frozen()``.
        """
        mu = Tensor(np.asarray(mu, dtype=np.float64)) if not isinstance(mu, Tensor) else mu
        out = Imagined([start], [])
        state = start
        for _ in range(horizon):
            a = policy(state.feat)
            h = self.recurrent_step(state, a, mu)
            z, logits = self.prior(h, rng)
            state = LatentState(h, z, logits)
            out.states.append(state)
            out.actions.append(a)
            _, r = self.predict_reward(h, z)
            out.rewards.append(r)
            out.conts.append(self.predict_continuation(h, z))
        return out

    def open_loop_rollout(self, obs: np.ndarray, actions: np.ndarray, mu: np.ndarray,
                          context: int, rng=None, is_first=None) -> np.ndarray:
        """Filter on the first ``context`` observations, then predict from actions alone.

        ``obs`` (N, T_ctx or more, O) and ``actions`` (N, T_total, A) follow the
        EpisodeBatch convention.  Returns decoded observations (N, T_total, O) in the
        original units; the first ``context`` rows are reconstructions.
        """
        c = self.config
        if context < 1:
            raise ShapeMismatch("context length must be at least 1")
        N, total = actions.shape[:2]
        if obs.shape[1] < context or obs.shape[-1] != c.obs_dim:
            raise ShapeMismatch(f"need {context} context observations of extent {c.obs_dim}")
        mu_t = Tensor(np.asarray(mu, dtype=np.float64))
        preds = np.zeros((N, total, c.obs_dim))
        with T.no_grad():
            state = self.initial_state(N)
            for t in range(total):
                if t < context:
                    first = None if is_first is None else is_first[:, t]
                    state, _ = self.filter_step(state, actions[:, t], obs[:, t], mu_t, rng, first)
                else:
                    h = self.recurrent_step(state, actions[:, t], mu_t)
                    z, logits = self.prior(h, rng)
                    state = LatentState(h, z, logits)
                pred = self.decode(state.h, state.z).data
                preds[:, t] = np.sign(pred) * np.expm1(np.abs(pred))
        return preds


def _as_np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def write_loss_csv(path, rows: Sequence[dict], append: bool = False) -> None:
    new = not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOSS_COLUMNS)
        for row in rows:
            w.writerow([int(row["step"])] + [repr(float(row[k])) for k in LOSS_COLUMNS[1:]])
