"""Bit-flip adversary: environment, GAT policy, REINFORCE, greedy and exhaustive attacks.

The environment wraps a frozen decoder.  An episode starts from a syndrome
the decoder correctly calls negative and flips one bit per step until
``P_L > 0.5`` or the step budget runs out.  The reward for a step is the
change in ``P_L``.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Adam, ParamStore, Tensor
from .codesim import Dataset
from .errors import BudgetError, ConfigError, ContractError, DimensionError
from .graphrep import SyndromeGraph, decode_action
from .layers import add_gat_layer, add_linear, encode_nodes, linear
from .report import AttackReport

log = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 5
SUCCESS_THRESHOLD = 0.5
TIE_RTOL = 1e-9
DEFAULT_ORACLE_BUDGET = 100_000


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _as_bits(state) -> np.ndarray:
    if isinstance(state, SyndromeGraph):
        return state.bits()
    return np.asarray(state, dtype=np.uint8).ravel()


class Environment:
    """A frozen decoder seen through ``P_L(s) = sigmoid(logit(s))``.

    ``P_L`` is memoised per syndrome.  Each new syndrome is scored on its own
    so that the cached value never depends on what else was in a batch.
    """

    def __init__(self, decoder, n_s: int, t: int, max_steps: int = DEFAULT_MAX_STEPS, threshold: float = SUCCESS_THRESHOLD):
        if max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {max_steps}")
        self.decoder = decoder
        self.n_s = n_s
        self.t = t
        self.max_steps = max_steps
        self.threshold = threshold
        self._cache: dict[bytes, float] = {}

    @property
    def n_actions(self) -> int:
        return self.n_s * self.t

    def p_error(self, state) -> float:
        bits = _as_bits(state)
        if bits.shape[0] != self.n_actions:
            raise DimensionError(f"state has {bits.shape[0]} bits, expected {self.n_actions}")
        key = bits.tobytes()
        value = self._cache.get(key)
        if value is None:
            value = _sigmoid(float(self.decoder.logits(bits[None], self.n_s)[0]))
            self._cache[key] = value
        return value

    def is_success(self, state) -> bool:
        return self.p_error(state) > self.threshold

    def decoder_digest(self) -> str:
        params = getattr(self.decoder, "params", None)
        return params.digest() if params is not None else repr(self.decoder)

    def negative_pool(self, ds: Dataset) -> np.ndarray:
        """Indices of records with label 0 that the decoder classifies negative."""
        if ds.n_s * ds.t != self.n_actions:
            raise DimensionError("dataset shape does not match the environment")
        return np.array(
            [i for i in range(len(ds)) if ds.labels[i] == 0 and not self.is_success(ds.bits[i])],
            dtype=np.intp,
        )


def reward(env: Environment, s_t, s_t1) -> float:
    return env.p_error(s_t1) - env.p_error(s_t)


# ---------------------------------------------------------------------------
# reference decoders used as planted-trigger and null environments


@dataclass(frozen=True)
class PlantedTriggerDecoder:
    """Logit ``high`` iff ``bit`` is set, else ``low``."""

    bit: int
    high: float = 10.0
    low: float = -10.0

    def logits(self, bits: np.ndarray, n_s: int) -> np.ndarray:
        bits = np.asarray(bits)
        return np.where(bits[:, self.bit] == 1, self.high, self.low).astype(np.float64)


@dataclass(frozen=True)
class ConstantDecoder:
    logit: float = -50.0

    def logits(self, bits: np.ndarray, n_s: int) -> np.ndarray:
        return np.full(len(bits), self.logit, dtype=np.float64)


# ---------------------------------------------------------------------------
# actor


@dataclass(frozen=True)
class ActorConfig:
    t: int = 2
    hidden_dim: int = 32
    # feed each node's own input bits to the head next to its GAT embedding
    feature_skip: bool = False


class ActorModel:
    """GATv2 node encoder plus a per-node head giving ``t`` action logits per node.

    Logits are flattened node-major so that action ``a`` is (node a // t, time a % t).

    By default the head sees only the second GAT layer's output, and that layer often
    gives every target the same attention row (the LeakyReLU stays on one
    side of its kink for all pairs, so the score splits as f(i) + g(j)).  All
    nodes then share one embedding and the policy cannot tell a lit node
    from an unlit one.  With ``feature_skip`` the head reads
    ``[embedding, own bits]`` instead, which restores that distinction.
    """

    def __init__(self, config: ActorConfig, params: ParamStore, seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed

    @classmethod
    def init(cls, config: ActorConfig, seed: int) -> ActorModel:
        rng = np.random.default_rng([seed, 0xAC7])
        params = ParamStore()
        add_gat_layer(params, "gat0", config.t, config.hidden_dim, rng)
        add_gat_layer(params, "gat1", config.hidden_dim, config.hidden_dim, rng)
        head_in = config.hidden_dim + (config.t if config.feature_skip else 0)
        add_linear(params, "head", head_in, config.t, rng)
        return cls(config, params, seed)

    def copy(self) -> ActorModel:
        return ActorModel(self.config, self.params.copy(), self.seed)

    def action_logits(self, features: np.ndarray) -> Tensor:
        """Flat logits (B * n_s * t,) for a (B, n_s, t) batch."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 3 or features.shape[2] != self.config.t:
            raise DimensionError(f"expected (B, n_s, {self.config.t}) features, got {features.shape}")
        h, _ = encode_nodes(self.params, features)
        if self.config.feature_skip:
            h = ad.concat([h, Tensor(features.reshape(-1, self.config.t))], axis=1)
        per_node = linear(self.params, "head", h)
        return ad.reshape(per_node, (per_node.shape[0] * per_node.shape[1],))

    def policy(self, features: np.ndarray) -> Tensor:
        """Action probabilities, normalised separately within each graph."""
        n_graphs, n_nodes, t = np.shape(features)
        groups = np.repeat(np.arange(n_graphs), n_nodes * t)
        return ad.segment_softmax(self.action_logits(features), groups, n_graphs)

    def probs(self, state, n_s: int) -> np.ndarray:
        feats = _as_bits(state).reshape(1, n_s, self.config.t).astype(np.float64)
        with ad.no_grad():
            return self.policy(feats).data.copy()

    def log_probs(self, features: np.ndarray, actions) -> Tensor:
        """log pi(a_b | s_b) for each graph b in the batch."""
        n_graphs, n_nodes, t = np.shape(features)
        actions = np.asarray(actions, dtype=np.intp)
        flat = np.arange(n_graphs) * (n_nodes * t) + actions
        return ad.log(ad.gather_rows(self.policy(features), flat))

    def save(self, path: str | Path, provenance: dict | None = None) -> None:
        checkpoint.save(path, "actor", dataclasses.asdict(self.config), self.seed, self.params, provenance)

    @classmethod
    def load(cls, path: str | Path) -> ActorModel:
        payload = checkpoint.load(path, kind="actor")
        return cls(ActorConfig(**payload["config"]), payload["params"], payload["seed"])


def greedy_action(probs: np.ndarray) -> int:
    """Argmax with lowest-index tie-break; near-equal values count as ties."""
    peak = probs.max()
    return int(np.flatnonzero(probs >= peak - TIE_RTOL * peak)[0])


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(a, len(probs) - 1)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeTrace:
    states: list[np.ndarray]
    actions: list[int]
    rewards: list[float]
    success: bool
    p_initial: float
    p_terminal: float
    terminal: np.ndarray = field(repr=False, default=None)

    @property
    def flips(self) -> int:
        return len(self.actions)


def run_episode(env: Environment, actor: ActorModel, start, mode: str = "sample", rng: np.random.Generator | None = None, label: int | None = None) -> EpisodeTrace:
    if mode not in ("sample", "greedy"):
        raise ConfigError(f"unknown episode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ContractError("sample mode needs an rng")
    state = _as_bits(start).copy()
    if label is not None and label != 0:
        raise ContractError("episodes must start from a sample whose true label is 0")
    p0 = env.p_error(state)
    if p0 > env.threshold:
        raise ContractError(f"start state already classified positive (P_L={p0:.6g})")
    states, actions, rewards = [], [], []
    p_now = p0
    success = False
    for _ in range(env.max_steps):
        probs = actor.probs(state, env.n_s)
        a = greedy_action(probs) if mode == "greedy" else sample_action(probs, rng)
        nxt = state.copy()
        nxt[a] ^= 1
        p_next = env.p_error(nxt)
        states.append(state)
        actions.append(a)
        rewards.append(p_next - p_now)
        state, p_now = nxt, p_next
        if p_now > env.threshold:
            success = True
            break
    return EpisodeTrace(states, actions, rewards, success, p0, p_now, state)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """G_t = sum_k gamma^k r_{t+k}, accumulated from the end of the trace."""
    out = np.zeros(len(rewards))
    running = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        running = rewards[i] + gamma * running
        out[i] = running
    return out


def policy_loss(actor: ActorModel, trace: EpisodeTrace, returns: np.ndarray, n_s: int) -> Tensor:
    """-sum_t log pi(a_t|s_t) G_t over one episode."""
    feats = np.stack(trace.states).reshape(len(trace.states), n_s, actor.config.t).astype(np.float64)
    logp = actor.log_probs(feats, trace.actions)
    return ad.scale(ad.tsum(ad.mul(logp, Tensor(returns))), -1.0)


@dataclass
class TrainingLog:
    returns: list[float] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)
    flips: list[int] = field(default_factory=list)


def reinforce_train(
    env: Environment,
    pool: np.ndarray,
    episodes: int = 4000,
    gamma: float = 0.95,
    lr: float = 1e-3,
    seed: int = 0,
    actor: ActorModel | None = None,
    config: ActorConfig | None = None,
) -> tuple[ActorModel, TrainingLog]:
    """Plain REINFORCE: one Adam step per sampled episode, no baseline.

    ``pool`` is an array of start syndromes (rows of bits) that the decoder
    classifies negative.
    """
    pool = np.asarray(pool, dtype=np.uint8).reshape(-1, env.n_actions)
    if len(pool) == 0:
        raise ContractError("empty start pool: decoder classifies nothing correctly negative")
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if actor is None:
        actor = ActorModel.init(config or ActorConfig(t=env.t), seed)
    rng = np.random.default_rng([seed, 0x4E1])
    opt = Adam(actor.params, lr=lr)
    history = TrainingLog()
    for episode in range(episodes):
        start = pool[rng.integers(len(pool))]
        trace = run_episode(env, actor, start, "sample", rng)
        returns = discounted_returns(trace.rewards, gamma)
        actor.params.zero_grad()
        ad.backward(policy_loss(actor, trace, returns, env.n_s))
        opt.step()
        history.returns.append(float(returns[0]))
        history.successes.append(trace.success)
        history.flips.append(trace.flips)
        if (episode + 1) % 500 == 0:
            recent = history.successes[-500:]
            log.info("episode %d success rate %.3f", episode + 1, sum(recent) / len(recent))
    return actor, history


# ---------------------------------------------------------------------------
# evaluation


def _map_unique(fn, rows: np.ndarray, workers: int) -> list:
    """Apply ``fn`` once per distinct row, in row order, possibly in threads."""
    keys = [row.tobytes() for row in rows]
    first: dict[bytes, int] = {}
    for i, key in enumerate(keys):
        first.setdefault(key, i)
    order = list(first.values())
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, (rows[i] for i in order)))
    else:
        results = [fn(rows[i]) for i in order]
    by_key = dict(zip((keys[i] for i in order), results))
    return [by_key[key] for key in keys]


def greedy_episodes(env: Environment, actor: ActorModel, pool: np.ndarray, workers: int = 1) -> list[EpisodeTrace]:
    """One greedy episode per pool row (identical rows share one deterministic trace)."""
    pool = np.asarray(pool, dtype=np.uint8).reshape(-1, env.n_actions)
    return _map_unique(lambda row: run_episode(env, actor, row, "greedy"), pool, workers)


def report_from_traces(traces: list[EpisodeTrace], n_s: int, t: int, max_steps: int) -> AttackReport:
    if not traces:
        raise ContractError("attack pool is empty")
    heatmap = np.zeros((n_s, t), dtype=np.int64)
    histogram: dict[int, int] = {}
    successes = 0
    for trace in traces:
        if not trace.success:
            continue
        successes += 1
        histogram[trace.flips] = histogram.get(trace.flips, 0) + 1
        for a in trace.actions:
            node, time = decode_action(a, t)
            heatmap[node, time] += 1
    return AttackReport(len(traces), successes, heatmap, max_steps, histogram)


def attack_eval(env: Environment, actor: ActorModel, pool: np.ndarray, workers: int = 1) -> AttackReport:
    pool = np.asarray(pool, dtype=np.uint8).reshape(-1, env.n_actions)
    if len(pool) == 0:
        raise ContractError("attack pool is empty")
    traces = greedy_episodes(env, actor, pool, workers)
    return report_from_traces(traces, env.n_s, env.t, env.max_steps)


@dataclass
class OracleResult:
    report: AttackReport
    solutions: list[tuple[int, ...] | None]


def subset_count(n_bits: int, k: int) -> int:
    return sum(math.comb(n_bits, i) for i in range(1, k + 1))


def minimal_flip_set(env: Environment, start: np.ndarray, k: int) -> tuple[int, ...] | None:
    """Smallest set of distinct bits whose flip makes P_L > 0.5; lexicographic among equals."""
    for size in range(1, k + 1):
        for subset in itertools.combinations(range(env.n_actions), size):
            cand = start.copy()
            cand[list(subset)] ^= 1
            if env.is_success(cand):
                return subset
    return None


def brute_force_attack(env: Environment, pool: np.ndarray, k: int, budget: int = DEFAULT_ORACLE_BUDGET, workers: int = 1) -> OracleResult:
    """Exact best-possible attack with at most ``k`` flips per sample."""
    pool = np.asarray(pool, dtype=np.uint8).reshape(-1, env.n_actions)
    if len(pool) == 0:
        raise ContractError("attack pool is empty")
    if k < 1:
        raise ConfigError(f"flip budget k must be >= 1, got {k}")
    needed = subset_count(env.n_actions, k)
    if needed > budget:
        raise BudgetError(f"{needed} flip subsets per sample exceed the oracle budget {budget}")
    for row in pool:
        if env.is_success(row):
            raise ContractError("pool contains a sample already classified positive")
    solutions = _map_unique(lambda row: minimal_flip_set(env, row, k), pool, workers)
    heatmap = np.zeros((env.n_s, env.t), dtype=np.int64)
    histogram: dict[int, int] = {}
    for sol in solutions:
        if sol is None:
            continue
        histogram[len(sol)] = histogram.get(len(sol), 0) + 1
        for a in sol:
            node, time = decode_action(a, env.t)
            heatmap[node, time] += 1
    successes = sum(sol is not None for sol in solutions)
    return OracleResult(AttackReport(len(pool), successes, heatmap, k, histogram), solutions)
