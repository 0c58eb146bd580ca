"""Off-policy WPPG training with replay, twin critics and direction matching.

``algo="wppg"`` trains the tanh-Gaussian actor and ``algo="wppg-i"`` the
noise-conditioned implicit actor. Both share the same critic and update code;
only the actor's noise (``eps`` or latent ``z``) differs.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .entropy_est import EntropyConfig, actor_sampler, estimate_entropy
from .envs import Env
from .nn import AdamState, MlpNet, adam_step, polyak
from .numeric import Rng
from .policy import ActionBox, ExplicitActor, ImplicitActor

ALGOS = ("wppg", "wppg-i")
CSV_HEADER = ("step", "mean_return", "std_return", "critic_loss", "actor_loss", "entropy_estimate")


class ConfigFieldError(ValueError):
    def __init__(self, name: str, value):
        super().__init__(f"{name}: invalid value {value!r}")
        self.field = name


@dataclass
class TrainConfig:
    tau: float = 1e-4
    eta: float = 0.1
    K: int = 32
    gamma: float = 0.99
    polyak: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    batch_size: int = 256
    buffer_size: int = 1_000_000
    learning_starts: int = 10_000
    total_steps: int = 1_000_000
    eval_interval: int = 2_000
    eval_episodes: int = 10
    sigma_ent: float = 0.1
    M: int = 32
    L: int = 32
    latent_dim: int = 0  # 0 selects ceil(state_dim / 3)
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    log_std_min: float = -10.0
    log_std_max: float = 4.0
    target_return: float = math.inf  # stop after an evaluation above this

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            ("tau", self.tau >= 0),
            ("eta", self.eta > 0),
            ("K", self.K >= 1),
            ("gamma", 0 < self.gamma < 1),
            ("polyak", 0 <= self.polyak <= 1),
            ("lr_actor", self.lr_actor > 0),
            ("lr_critic", self.lr_critic > 0),
            ("batch_size", self.batch_size >= 1),
            ("buffer_size", self.buffer_size >= self.batch_size),
            ("learning_starts", self.learning_starts >= 0),
            ("total_steps", self.total_steps >= 0),
            ("eval_interval", self.eval_interval >= 1),
            ("eval_episodes", self.eval_episodes >= 1),
            ("sigma_ent", self.sigma_ent > 0),
            ("M", self.M >= 1),
            ("L", self.L >= 1),
            ("latent_dim", self.latent_dim >= 0),
            ("hidden", len(self.hidden) >= 1 and min(self.hidden) >= 1),
            ("activation", self.activation in ("tanh", "relu")),
            ("log_std_max", self.log_std_min < self.log_std_max),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigFieldError(name, getattr(self, name))

    @property
    def update_start(self) -> int:
        return max(self.learning_starts, self.batch_size)


# --- replay ------------------------------------------------------------------

@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r_ent: float
    s_next: np.ndarray
    done: bool


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, box: ActionBox | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.box = box
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, tr: Transition) -> None:
        if not math.isfinite(tr.r_ent):
            raise ValueError("entropy-regularized reward must be finite")
        if self.box is not None and not self.box.contains(tr.a, closed=True):
            raise ValueError(f"stored action {tr.a} lies outside the action box")
        i = self._next
        self.s[i] = tr.s
        self.a[i] = tr.a
        self.r[i] = tr.r_ent
        self.s_next[i] = tr.s_next
        self.done[i] = float(tr.done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: Rng) -> Batch:
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} transitions")
        idx = rng.integers(self._size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


# --- critics -----------------------------------------------------------------

@dataclass
class CriticPair:
    q1: MlpNet
    q2: MlpNet
    t1: MlpNet
    t2: MlpNet

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden, activation: str, rng: Rng) -> "CriticPair":
        widths = (state_dim + action_dim, *hidden, 1)
        q1 = MlpNet(widths, activation, rng.child("q1"))
        q2 = MlpNet(widths, activation, rng.child("q2"))
        return cls(q1, q2, q1.copy(), q2.copy())


def _sa(s, a) -> np.ndarray:
    return np.hstack([s, a])


def td_targets(batch: Batch, critics: CriticPair, target_actor, cfg: TrainConfig, rng: Rng,
               combine: str = "min") -> np.ndarray:
    """``y = r_ent + gamma (1 - d) mean_k min(Q1bar, Q2bar)(s', a'_k)`` with ``a'_k`` from the target actor.

    ``combine`` may be ``"q1"`` or ``"q2"`` to bootstrap from a single critic
    (used to check the min property with identical noise).
    """
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    s2 = np.repeat(batch.s_next, cfg.K, axis=0)
    noise = rng.normal((B * cfg.K, target_actor.noise_dim))
    a2 = target_actor.action(s2, noise)
    x = _sa(s2, a2)
    if combine == "min":
        q = np.minimum(critics.t1.forward(x)[:, 0], critics.t2.forward(x)[:, 0])
    elif combine == "q1":
        q = critics.t1.forward(x)[:, 0]
    elif combine == "q2":
        q = critics.t2.forward(x)[:, 0]
    else:
        raise ValueError(f"unknown combine rule {combine!r}")
    boot = q.reshape(B, cfg.K).mean(axis=1)
    return batch.r + cfg.gamma * (1.0 - batch.done) * boot


def critic_loss_grad(net: MlpNet, s, a, y):
    """Mean squared TD error and its parameter gradient."""
    out = net.forward(_sa(s, a))[:, 0]
    diff = out - y
    grad, _ = net.backward((2.0 / diff.shape[0]) * diff[:, None], need_params=True, need_input=False)
    return float(np.mean(diff * diff)), grad


def critic_update(batch: Batch, critics: CriticPair, y, opts: tuple[AdamState, AdamState]) -> tuple[float, float]:
    """One Adam step on each critic's squared TD error; returns the pre-step losses."""
    y = np.asarray(y, dtype=np.float64)
    losses = []
    for net, opt in ((critics.q1, opts[0]), (critics.q2, opts[1])):
        loss, grad = critic_loss_grad(net, batch.s, batch.a, y)
        net.set_params(adam_step(net.params, grad, opt))
        losses.append(loss)
    return losses[0], losses[1]


def min_q_action_grad(critics: CriticPair, s, a) -> np.ndarray:
    """``grad_a min(Q1, Q2)`` row by row; ties go to ``Q1``."""
    x = _sa(s, a)
    A = a.shape[1]
    q1 = critics.q1.forward(x)[:, 0]
    _, g1 = critics.q1.backward(np.ones((x.shape[0], 1)), need_params=False, need_input=True)
    q2 = critics.q2.forward(x)[:, 0]
    _, g2 = critics.q2.backward(np.ones((x.shape[0], 1)), need_params=False, need_input=True)
    pick1 = (q1 <= q2)[:, None]
    return np.where(pick1, g1[:, -A:], g2[:, -A:])


def direction_noise(rng: Rng, shape, tau: float, eta: float) -> np.ndarray:
    """``xi ~ N(0, 2 tau eta I)``; exactly zero when ``tau = 0``."""
    if tau == 0:
        return np.zeros(shape)
    return math.sqrt(2.0 * tau * eta) * rng.normal(shape)


@dataclass
class ActorStepInfo:
    loss: float
    grad_norm: float


def actor_update(states, actor, critics: CriticPair, opt: AdamState, cfg: TrainConfig, rng: Rng) -> ActorStepInfo:
    """Direction-matching step toward ``eta * grad_a min Q + xi`` under shared noise.

    Before the step the reforwarded increment is zero, so the gradient of
    ``mean ||Delta - Delta*||^2`` is ``-2 Delta* / (B K)`` pushed through the
    actor at ``a^(0)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    BK = states.shape[0] * cfg.K
    s = np.repeat(states, cfg.K, axis=0)
    noise = rng.normal((BK, actor.noise_dim))
    a0 = actor.action(s, noise)
    G = min_q_action_grad(critics, s, a0)
    target = cfg.eta * G + direction_noise(rng, G.shape, cfg.tau, cfg.eta)
    delta = np.zeros_like(target)
    resid = delta - target
    loss = float(np.sum(resid * resid) / BK)
    grad = actor.backward((2.0 / BK) * resid)
    actor.net.set_params(adam_step(actor.params, grad, opt))
    return ActorStepInfo(loss, float(np.linalg.norm(grad)))


# --- agent -------------------------------------------------------------------

def make_actor(algo: str, state_dim: int, box: ActionBox, cfg: TrainConfig, rng: Rng):
    if algo == "wppg":
        return ExplicitActor(state_dim, box, cfg.hidden, cfg.activation, rng,
                             log_std_bounds=(cfg.log_std_min, cfg.log_std_max))
    if algo == "wppg-i":
        return ImplicitActor(state_dim, box, cfg.latent_dim or None, cfg.hidden, cfg.activation, rng)
    raise ValueError(f"unknown algo {algo!r}; expected one of {ALGOS}")


class Agent:
    def __init__(self, algo: str, state_dim: int, box: ActionBox, cfg: TrainConfig, seed: int):
        self.algo = algo
        self.cfg = cfg
        self.box = box
        self.state_dim = state_dim
        root = Rng(seed)
        init = root.child("init")
        self.actor = make_actor(algo, state_dim, box, cfg, init.child("actor"))
        self.target_actor = self.actor.copy()
        self.critics = CriticPair.create(state_dim, box.dim, cfg.hidden, cfg.activation, init.child("critics"))
        self.opt_actor = AdamState(self.actor.net.n_params, lr=cfg.lr_actor)
        self.opt_q = (AdamState(self.critics.q1.n_params, lr=cfg.lr_critic),
                      AdamState(self.critics.q2.n_params, lr=cfg.lr_critic))
        self.buffer = ReplayBuffer(cfg.buffer_size, state_dim, box.dim, box)
        self.ent_cfg = EntropyConfig(cfg.sigma_ent, cfg.M, cfg.L)
        self.rng_replay = root.child("replay")
        self.rng_td = root.child("td")
        self.rng_actor = root.child("actor-update")
        self.n_updates = 0

    def update(self) -> tuple[float, float]:
        batch = self.buffer.sample(self.cfg.batch_size, self.rng_replay)
        y = td_targets(batch, self.critics, self.target_actor, self.cfg, self.rng_td)
        l1, l2 = critic_update(batch, self.critics, y, self.opt_q)
        info = actor_update(batch.s, self.actor, self.critics, self.opt_actor, self.cfg, self.rng_actor)
        c, sig = self.critics, self.cfg.polyak
        c.t1.set_params(polyak(c.t1.params, c.q1.params, sig))
        c.t2.set_params(polyak(c.t2.params, c.q2.params, sig))
        self.target_actor.net.set_params(polyak(self.target_actor.params, self.actor.params, sig))
        self.n_updates += 1
        return 0.5 * (l1 + l2), info.loss


def eval_action(actor, s, rng: Rng) -> np.ndarray:
    """Explicit actor: squashed mean. Implicit actor: a latent drawn from the evaluation stream."""
    if isinstance(actor, ExplicitActor):
        return actor.mean_action(s)
    return actor.action(s, rng.normal(actor.noise_dim))


def evaluate(actor, env: Env, episodes: int, seed: int) -> np.ndarray:
    """Undiscounted environment returns of ``episodes`` evaluation rollouts.

    The streams depend only on ``seed``, never on training state.
    """
    root = Rng(seed, ("eval",))
    out = np.empty(episodes)
    for ep in range(episodes):
        rng = root.child(f"ep{ep}")
        s = env.reset(rng.child("reset"))
        act_rng = rng.child("act")
        total, t = 0.0, 0
        while True:
            res = env.step(s, eval_action(actor, s, act_rng), t)
            total += res.reward
            s = res.state
            t += 1
            if res.terminated or res.truncated:
                break
        out[ep] = total
    return out


def random_policy_returns(env: Env, episodes: int, seed: int) -> np.ndarray:
    """Returns of the uniform-random policy over the action box."""
    root = Rng(seed, ("random-policy",))
    box = env.spec.box
    out = np.empty(episodes)
    for ep in range(episodes):
        rng = root.child(f"ep{ep}")
        s = env.reset(rng.child("reset"))
        total, t = 0.0, 0
        while True:
            a = rng.uniform(box.low, box.high)
            res = env.step(s, a, t)
            total += res.reward
            s = res.state
            t += 1
            if res.terminated or res.truncated:
                break
        out[ep] = total
    return out


@dataclass
class CurveRow:
    step: int
    mean_return: float
    std_return: float
    critic_loss: float
    actor_loss: float
    entropy_estimate: float

    def csv(self) -> str:
        return ",".join([str(self.step)] + [repr(float(getattr(self, f))) for f in CSV_HEADER[1:]])


@dataclass
class TrainResult:
    agent: Agent
    curve: list = field(default_factory=list)
    steps: int = 0


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def train(env: Env, algo: str, cfg: TrainConfig, seed: int, on_row=None) -> TrainResult:
    """Run the Algorithm 2 / 3 loop for ``cfg.total_steps`` environment steps.

    Executed actions are ``clip(a + sigma_ent * xi)`` and are stored as
    executed. Time-limit truncation is stored with ``done = 0``.
    """
    spec = env.spec
    agent = Agent(algo, spec.state_dim, spec.box, cfg, seed)
    root = Rng(seed)
    rng_env = root.child("env")
    rng_roll = root.child("rollout")
    rng_ent = root.child("entropy")
    sampler = actor_sampler(agent.actor)
    result = TrainResult(agent)
    closs, aloss, ents = [], [], []
    episode = 0
    s = env.reset(rng_env.child(f"ep{episode}"))
    t = 0
    for step in range(1, cfg.total_steps + 1):
        a_pol, _ = agent.actor.sample(s, rng_roll)
        a = spec.box.clip(a_pol + cfg.sigma_ent * rng_roll.normal(spec.action_dim))
        try:
            res = env.step(s, a, t)
        except ValueError as exc:
            raise RuntimeError(f"environment step failed at training step {step}: {exc}") from exc
        h = estimate_entropy(s, sampler, agent.ent_cfg, rng_ent.child(f"s{step}"))
        ents.append(h)
        agent.buffer.add(Transition(s, a, res.reward + cfg.tau * h, res.state, res.terminated))
        if len(agent.buffer) >= cfg.update_start:
            c, al = agent.update()
            closs.append(c)
            aloss.append(al)
        s, t = res.state, t + 1
        if res.terminated or res.truncated:
            episode += 1
            s = env.reset(rng_env.child(f"ep{episode}"))
            t = 0
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            rets = evaluate(agent.actor, env, cfg.eval_episodes, seed)
            row = CurveRow(step, float(rets.mean()), float(rets.std()), _mean(closs), _mean(aloss), _mean(ents))
            result.curve.append(row)
            if on_row is not None:
                on_row(row)
            closs, aloss, ents = [], [], []
            if row.mean_return > cfg.target_return:
                result.steps = step
                return result
    result.steps = cfg.total_steps
    return result


def write_curve(path, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")


# --- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = b"WPCK"
_CKPT_VERSION = 1


def save_checkpoint(path, agent: Agent, env_name: str) -> None:
    """Actor-only checkpoint: a JSON header followed by the network snapshot."""
    actor = agent.actor
    header = {
        "algo": agent.algo,
        "env": env_name,
        "state_dim": agent.state_dim,
        "low": agent.box.low.tolist(),
        "high": agent.box.high.tolist(),
        "latent_dim": getattr(actor, "latent_dim", 0),
        "log_std_bounds": list(getattr(actor, "log_std_bounds", (0.0, 0.0))),
        "config": {f.name: getattr(agent.cfg, f.name) for f in fields(agent.cfg)
                   if f.name != "target_return"},
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = actor.net.to_bytes()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(head)) + head + blob)


def load_checkpoint(path):
    """Returns ``(actor, header)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<II", data[4:12])
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + n].decode())
    net = MlpNet.from_bytes(data[12 + n:])
    box = ActionBox(np.array(header["low"]), np.array(header["high"]))
    if header["algo"] == "wppg":
        actor = ExplicitActor(header["state_dim"], box, log_std_bounds=tuple(header["log_std_bounds"]), net=net)
    elif header["algo"] == "wppg-i":
        actor = ImplicitActor(header["state_dim"], box, header["latent_dim"], net=net)
    else:
        raise ValueError(f"{path}: unknown algo {header['algo']!r}")
    return actor, header


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
