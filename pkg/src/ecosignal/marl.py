"""Multi-agent soft actor-critic with a value-decomposition global critic.

One actor and one critic serve every intersection (shared parameters);
the global action-value is the sum of the shared critic applied to each
agent's (state, action) pair.  Training is centralized: workers collect
per-cycle transitions, a single learner samples a shared replay buffer.
The TD target is r_global + gamma * Q_target(s', a') with a' drawn from
the current policy; by default two critics are kept and the target takes
their minimum (`single_critic` reproduces the plain one-critic form).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

STATE_DIM = 144
ACTION_DIM = nn.ACTION_DIM


@dataclass(frozen=True)
class MarlConfig:
    hidden: tuple = (256, 256)
    activation: str = "relu"
    lr: float = 3e-4
    gamma: float = 0.99
    batch_size: int = 32
    buffer_capacity: int = 100_000
    alpha: float = 0.2
    auto_alpha: bool = False
    target_entropy: float = -float(ACTION_DIM)
    rho: float = 0.005  # soft target update weight on the online net
    single_critic: bool = False
    updates_per_transition: float = 1.0
    workers: int = 8
    epochs: int = 150
    reward_normalize_by_agents: bool = False  # divide the agent sum by N
    reward_scale: float = 1.0  # value-target conditioning only; 1.0 = raw


@dataclass
class Transition:
    """One per-cycle joint experience across all intersections."""

    states: np.ndarray  # (n_agents, STATE_DIM)
    actions: np.ndarray  # (n_agents, ACTION_DIM), squashed
    log_probs: np.ndarray  # (n_agents,) cached behavior log-densities
    reward: float  # global reward (or per-agent local rewards, see IRL)
    next_states: np.ndarray
    done: bool
    local_rewards: np.ndarray | None = None  # per-agent terms of the global sum

    def __post_init__(self):
        n = self.states.shape[0]
        if not (self.actions.shape[0] == self.next_states.shape[0]
                == self.log_probs.shape[0] == n):
            raise ValueError("agent count inconsistent across transition fields")


class ReplayBuffer:
    """FIFO ring buffer with uniform sampling."""

    def __init__(self, capacity: int = 100_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._storage: list[Transition] = []
        self._write = 0

    def __len__(self) -> int:
        return len(self._storage)

    def push(self, transition: Transition) -> None:
        if len(self._storage) < self.capacity:
            self._storage.append(transition)
        else:
            self._storage[self._write] = transition
            self._write = (self._write + 1) % self.capacity

    def sample(self, batch_size: int, rng) -> list[Transition]:
        if not self._storage:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self._storage), size=batch_size)
        return [self._storage[i] for i in idx]

    def contents(self) -> list[Transition]:
        return list(self._storage)


def _stack_batch(batch: list[Transition]):
    s = np.stack([tr.states for tr in batch]).astype(float)
    a = np.stack([tr.actions for tr in batch]).astype(float)
    r = np.array([tr.reward for tr in batch], dtype=float)
    s2 = np.stack([tr.next_states for tr in batch]).astype(float)
    done = np.array([tr.done for tr in batch], dtype=float)
    return s, a, r, s2, done


def vdn_global_q(states, actions, critic: nn.MLP) -> float:
    """Global Q for one joint sample: sum of per-agent critic values."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    x = np.concatenate([states, actions], axis=1)
    q, _ = critic.forward(x)
    return float(q[:, 0].sum())


class SharedAgent:
    """Shared actor/critic pair serving all intersections."""

    def __init__(self, cfg: MarlConfig, n_agents: int, seed: int = 0):
        self.cfg = cfg
        self.n_agents = n_agents
        rng = np.random.default_rng([seed, 11])
        acts = [cfg.activation] * len(cfg.hidden) + ["linear"]
        actor_sizes = [STATE_DIM, *cfg.hidden, 2 * ACTION_DIM]
        critic_sizes = [STATE_DIM + ACTION_DIM, *cfg.hidden, 1]
        self.actor = nn.MLP(actor_sizes, acts, rng=rng)
        n_critics = 1 if cfg.single_critic else 2
        self.critics = [nn.MLP(critic_sizes, acts, rng=rng)
                        for _ in range(n_critics)]
        self.targets = [c.copy() for c in self.critics]
        self.actor_opt = nn.Adam(self.actor.params, lr=cfg.lr)
        self.critic_opts = [nn.Adam(c.params, lr=cfg.lr) for c in self.critics]
        self.log_alpha = float(np.log(cfg.alpha))
        self._alpha_m = 0.0
        self._alpha_v = 0.0
        self._alpha_steps = 0
        self.train_step = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    # -- acting ------------------------------------------------------------
    def act(self, states: np.ndarray, rng=None, deterministic: bool = False):
        """Per-agent actions for stacked states (n, STATE_DIM).

        Returns (actions (n, ACTION_DIM), log_probs (n,)); deterministic
        mode squashes the mean and reports no density.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        out, _ = self.actor.forward(states)
        mean, log_std_raw = nn.split_policy_output(out)
        if deterministic:
            actions = nn.deterministic_action(mean)
            return actions, np.zeros(len(actions))
        xi = rng.standard_normal(mean.shape)
        actions, log_p, _ = nn.squash_sample(mean, log_std_raw, xi)
        return actions, log_p.sum(axis=1)

    # -- critic ------------------------------------------------------------
    def _global_q(self, critic, flat_x, b, n):
        q, cache = critic.forward(flat_x)
        return q[:, 0].reshape(b, n).sum(axis=1), cache

    def critic_loss(self, batch: list[Transition], rng):
        """Mean squared TD error against the target critics; returns grads.

        Terminal transitions drop the bootstrap term.  Gradients cover
        every critic; targets are left untouched.
        """
        cfg = self.cfg
        s, a, r, s2, done = _stack_batch(batch)
        b, n = s.shape[0], s.shape[1]
        flat_x = np.concatenate([s.reshape(b * n, -1), a.reshape(b * n, -1)], axis=1)

        out2, _ = self.actor.forward(s2.reshape(b * n, -1))
        mean2, lsr2 = nn.split_policy_output(out2)
        xi2 = rng.standard_normal(mean2.shape)
        a2, _, _ = nn.squash_sample(mean2, lsr2, xi2)
        flat_x2 = np.concatenate([s2.reshape(b * n, -1), a2], axis=1)
        q_next = None
        for tgt in self.targets:
            qn, _ = self._global_q(tgt, flat_x2, b, n)
            q_next = qn if q_next is None else np.minimum(q_next, qn)
        # reward_scale conditions the value targets only; stored and logged
        # rewards stay raw
        y = cfg.reward_scale * r + cfg.gamma * (1.0 - done) * q_next

        losses = []
        grads = []
        for critic in self.critics:
            qg, cache = self._global_q(critic, flat_x, b, n)
            err = qg - y
            losses.append(float((err * err).mean()))
            dq = np.repeat(2.0 * err / b, n)[:, None]
            g, _ = critic.backward(cache, dq)
            grads.append(g)
        return float(sum(losses)), grads, y

    # -- actor -------------------------------------------------------------
    def actor_loss(self, batch: list[Transition], rng, frozen_xi=None):
        """Entropy-regularized policy loss through fresh sampled actions.

        loss = mean_b [ alpha * sum_i log pi(a_i|s_i) - Q_global(s, a) ],
        Q_global the (min-of-critics) VDN sum.  Gradients flow through the
        sampled actions into the actor only.  `frozen_xi` pins the noise
        for finite-difference verification.
        """
        s = np.stack([tr.states for tr in batch]).astype(float)
        b, n = s.shape[0], s.shape[1]
        flat_s = s.reshape(b * n, -1)
        out, cache_a = self.actor.forward(flat_s)
        mean, lsr = nn.split_policy_output(out)
        xi = frozen_xi if frozen_xi is not None else rng.standard_normal(mean.shape)
        actions, log_p_dims, cache_h = nn.squash_sample(mean, lsr, xi)
        log_p = log_p_dims.sum(axis=1)

        flat_x = np.concatenate([flat_s, actions], axis=1)
        qs = []
        caches = []
        for critic in self.critics:
            qg, cache = self._global_q(critic, flat_x, b, n)
            qs.append(qg)
            caches.append(cache)
        if len(qs) == 1:
            q_min = qs[0]
            branch = np.zeros(b, dtype=int)
        else:
            branch = (qs[1] < qs[0]).astype(int)
            q_min = np.where(branch, qs[1], qs[0])

        alpha = self.alpha
        joint_logp = log_p.reshape(b, n).sum(axis=1)
        loss = float((alpha * joint_logp - q_min).mean())

        # gradient of -Q_min through the branch critic's action input
        d_action = np.zeros_like(actions)
        for k, (critic, cache) in enumerate(zip(self.critics, caches)):
            sel = (branch == k).astype(float)
            if not sel.any():
                continue
            dq = np.repeat(-sel / b, n)[:, None]
            _, dx = critic.backward(cache, dq)
            d_action += dx[:, STATE_DIM:]
        d_log_p = np.full(log_p_dims.shape, alpha / b)
        d_mean, d_lsr = nn.squash_backward(cache_h, d_action, d_log_p)
        dout = np.concatenate([d_mean, d_lsr], axis=1)
        actor_grads, _ = self.actor.backward(cache_a, dout)
        entropy = float(-log_p.mean())
        return loss, actor_grads, entropy, log_p

    # -- updates -----------------------------------------------------------
    def _tune_alpha(self, log_p):
        # one Adam step on log_alpha toward the target entropy
        g = float(-(log_p + self.cfg.target_entropy).mean())
        self._alpha_steps += 1
        self._alpha_m = 0.9 * self._alpha_m + 0.1 * g
        self._alpha_v = 0.999 * self._alpha_v + 0.001 * g * g
        m_hat = self._alpha_m / (1.0 - 0.9 ** self._alpha_steps)
        v_hat = self._alpha_v / (1.0 - 0.999 ** self._alpha_steps)
        self.log_alpha -= self.cfg.lr * m_hat / (np.sqrt(v_hat) + 1e-8)

    def update(self, batch: list[Transition], rng) -> dict:
        """One gradient step on critics then actor, plus soft target updates."""
        c_loss, c_grads, _ = self.critic_loss(batch, rng)
        for critic, opt, grads in zip(self.critics, self.critic_opts, c_grads):
            opt.update(critic.params, grads)
        a_loss, a_grads, entropy, log_p = self.actor_loss(batch, rng)
        self.actor_opt.update(self.actor.params, a_grads)
        if self.cfg.auto_alpha:
            self._tune_alpha(log_p)
        for tgt, critic in zip(self.targets, self.critics):
            nn.soft_update(tgt, critic, self.cfg.rho)
        self.train_step += 1
        return {"critic_loss": c_loss, "actor_loss": a_loss,
                "entropy": entropy, "alpha": self.alpha}

    # -- persistence ---------------------------------------------------------
    def snapshot_actor(self) -> dict:
        """Copy of the actor parameters for read-only workers."""
        return {k: v.copy() for k, v in self.actor.flat_arrays("actor").items()}

    def checkpoint_arrays(self):
        arrays = self.actor.flat_arrays("actor")
        arrays.update(self.actor_opt.flat_arrays("opt.actor"))
        for i, (c, t, o) in enumerate(zip(self.critics, self.targets,
                                          self.critic_opts)):
            arrays.update(c.flat_arrays(f"critic{i}"))
            arrays.update(t.flat_arrays(f"target{i}"))
            arrays.update(o.flat_arrays(f"opt.critic{i}"))
        arrays["log_alpha"] = np.array([self.log_alpha])
        arrays["train_step"] = np.array([self.train_step], dtype=np.int64)
        meta = {
            "kind": "shared-agent",
            "n_agents": self.n_agents,
            "gamma": self.cfg.gamma,
            "alpha": self.alpha,
            "single_critic": self.cfg.single_critic,
            "hidden": list(self.cfg.hidden),
            "activation": self.cfg.activation,
            "actor_spec": self.actor.spec(),
            "critic_spec": self.critics[0].spec(),
        }
        return arrays, meta

    def save(self, path) -> None:
        arrays, meta = self.checkpoint_arrays()
        nn.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, cfg: MarlConfig | None = None) -> "SharedAgent":
        arrays, meta = nn.load_checkpoint(path)
        if cfg is None:
            cfg = MarlConfig(hidden=tuple(meta["hidden"]),
                             activation=meta["activation"],
                             single_critic=meta["single_critic"],
                             alpha=meta["alpha"])
        agent = cls(cfg, n_agents=meta["n_agents"], seed=0)
        agent.actor.load_flat(arrays, "actor")
        agent.actor_opt.load_flat(arrays, "opt.actor")
        for i, (c, t, o) in enumerate(zip(agent.critics, agent.targets,
                                          agent.critic_opts)):
            c.load_flat(arrays, f"critic{i}")
            t.load_flat(arrays, f"target{i}")
            o.load_flat(arrays, f"opt.critic{i}")
        agent.log_alpha = float(arrays["log_alpha"][0])
        agent.train_step = int(arrays["train_step"][0])
        return agent


class ActorOnly:
    """Read-only policy reconstructed from a snapshot or checkpoint."""

    def __init__(self, actor: nn.MLP):
        self.actor = actor

    @classmethod
    def from_snapshot(cls, arrays: dict, spec: dict) -> "ActorOnly":
        actor = nn.MLP(spec["sizes"], spec["activations"],
                       params=[[np.array(arrays[f"actor.w{l}"]),
                                np.array(arrays[f"actor.b{l}"])]
                               for l in range(len(spec["sizes"]) - 1)])
        return cls(actor)

    @classmethod
    def from_checkpoint(cls, path) -> "ActorOnly":
        arrays, meta = nn.load_checkpoint(path)
        return cls.from_snapshot(arrays, meta["actor_spec"])

    def act(self, states, rng=None, deterministic: bool = False):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        out, _ = self.actor.forward(states)
        mean, log_std_raw = nn.split_policy_output(out)
        if deterministic:
            return nn.deterministic_action(mean), np.zeros(len(mean))
        xi = rng.standard_normal(mean.shape)
        actions, log_p, _ = nn.squash_sample(mean, log_std_raw, xi)
        return actions, log_p.sum(axis=1)
