"""Synthetic syndrome data: generation, exact posterior by enumeration, file formats.

The source is a distance-5 repetition code under phenomenological noise.
Five data bits start at 0; in every round each data bit flips with
probability ``p`` and each of the four parity checks is read out wrongly with
probability ``q``.  A detection event at ``(node i, time r-1)`` is the change
of check ``i`` between rounds ``r-1`` and ``r`` (with an implicit all-zero
round 0).  The label is the final value of data bit 0.

Two generator sets for the same stabilizer group are available:

* ``chain``: check ``i`` is ``q_i xor q_{i+1}`` (nearest neighbours).
* ``star``: check ``i`` is ``q_0 xor q_{i+1}``.  Every check touches the
  labelled bit, so the four detectors are exchangeable and the exact
  posterior depends only on the multiset of node features.  A decoder with
  no node identity can only reach the Bayes ceiling on this layout, which is
  why it is the default.

Bits are stored node-major: bit ``b = node * t + time``.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BudgetError, ConfigError, ContractError, ParseError

MODES = ("rep-code", "teacher")
LAYOUTS = ("star", "chain")
TEACHER_POSITIVE_RATE = 0.08
TEACHER_HIDDEN = 16
DEFAULT_ENUM_BUDGET = 1 << 22
FORMAT_TAG = "synd"
FORMAT_VERSION = "v1"


@dataclass(frozen=True)
class NoiseModel:
    mode: str = "rep-code"
    p: float = 0.05
    q: float = 0.05
    teacher_seed: int = 0
    n_s: int = 4
    t: int = 2
    layout: str = "star"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown noise mode {self.mode!r}; expected one of {MODES}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"unknown check layout {self.layout!r}; expected one of {LAYOUTS}")
        for name in ("p", "q"):
            value = getattr(self, name)
            if not (0.0 <= value <= 0.5) or math.isnan(value):
                raise ConfigError(f"{name}={value} outside [0, 0.5]")
        if self.n_s < 1 or self.t < 1:
            raise ConfigError(f"need n_s >= 1 and t >= 1, got n_s={self.n_s} t={self.t}")

    @property
    def n_data(self) -> int:
        return self.n_s + 1

    @property
    def n_bits(self) -> int:
        return self.n_s * self.t

    @property
    def n_faults(self) -> int:
        """Independent fault locations: data flips then readout flips, per round."""
        return self.t * (self.n_data + self.n_s)


@dataclass(frozen=True)
class SyndromeRecord:
    bits: tuple[int, ...]
    label: int


@dataclass
class Dataset:
    n_s: int
    t: int
    bits: np.ndarray  # (n, n_s * t) uint8, node-major
    labels: np.ndarray  # (n,) uint8
    split_seed: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1, self.n_s * self.t)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.bits.shape[0] != self.labels.shape[0]:
            raise ContractError(f"{self.bits.shape[0]} bit rows but {self.labels.shape[0]} labels")
        if self.bits.size and self.bits.max() > 1 or self.labels.size and self.labels.max() > 1:
            raise ContractError("dataset values must be 0/1")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> SyndromeRecord:
        return SyndromeRecord(tuple(int(b) for b in self.bits[i]), int(self.labels[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_s == other.n_s
            and self.t == other.t
            and self.split_seed == other.split_seed
            and np.array_equal(self.bits, other.bits)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def records(self) -> list[SyndromeRecord]:
        return [self[i] for i in range(len(self))]

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.intp)
        return Dataset(self.n_s, self.t, self.bits[index], self.labels[index], self.split_seed)

    def split_indices(self, test_percent: int = 20) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic train/test split by hashing (split_seed, record index)."""
        is_test = np.fromiter(
            (_hash_bucket(self.split_seed, i) < test_percent for i in range(len(self))),
            dtype=bool,
            count=len(self),
        )
        return np.flatnonzero(~is_test), np.flatnonzero(is_test)

    def split(self, test_percent: int = 20) -> tuple[Dataset, Dataset]:
        train, test = self.split_indices(test_percent)
        return self.subset(train), self.subset(test)


def _hash_bucket(seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % 100


# ---------------------------------------------------------------------------
# physics


def simulate(data_flips: np.ndarray, meas_flips: np.ndarray, layout: str = "star") -> tuple[np.ndarray, np.ndarray]:
    """Map fault configurations to (detection bits, label).

    ``data_flips`` has shape (..., t, n_data) and ``meas_flips`` (..., t, n_s).
    Returns node-major bits of shape (..., n_s * t) and labels of shape (...).
    """
    data_flips = np.asarray(data_flips, dtype=np.uint8)
    meas_flips = np.asarray(meas_flips, dtype=np.uint8)
    state = np.bitwise_xor.accumulate(data_flips, axis=-2)
    if layout == "star":
        checks = state[..., :1] ^ state[..., 1:] ^ meas_flips
    elif layout == "chain":
        checks = state[..., :-1] ^ state[..., 1:] ^ meas_flips
    else:
        raise ConfigError(f"unknown check layout {layout!r}")
    previous = np.concatenate([np.zeros_like(checks[..., :1, :]), checks[..., :-1, :]], axis=-2)
    events = checks ^ previous  # (..., t, n_s)
    bits = np.swapaxes(events, -1, -2).reshape(events.shape[:-2] + (-1,))
    return bits, state[..., -1, 0]


def fault_configuration(model: NoiseModel, seed: int, index: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Fault pattern for one record, drawn from its own (seed, index) stream.

    Returns (data_flips, meas_flips, u) where ``u`` is the uniform used for the
    teacher-mode label draw.
    """
    rng = np.random.default_rng([seed, index])
    u = rng.random(model.n_faults + 1)
    n_data = model.t * model.n_data
    data = (u[:n_data] < model.p).astype(np.uint8).reshape(model.t, model.n_data)
    meas = (u[n_data:-1] < model.q).astype(np.uint8).reshape(model.t, model.n_s)
    return data, meas, float(u[-1])


def generate(model: NoiseModel, n: int, seed: int, split_seed: int = 0) -> Dataset:
    if n < 1:
        raise ConfigError(f"need n >= 1 records, got {n}")
    data = np.empty((n, model.t, model.n_data), dtype=np.uint8)
    meas = np.empty((n, model.t, model.n_s), dtype=np.uint8)
    u_label = np.empty(n)
    for i in range(n):
        data[i], meas[i], u_label[i] = fault_configuration(model, seed, i)
    bits, labels = simulate(data, meas, model.layout)
    if model.mode == "teacher":
        labels = (u_label < teacher_posterior(model, bits)).astype(np.uint8)
    return Dataset(model.n_s, model.t, bits, labels, split_seed)


# ---------------------------------------------------------------------------
# exact enumeration


def syndrome_index(bits: np.ndarray) -> np.ndarray:
    """Integer code of node-major bit rows: bit ``b`` contributes ``2**b``."""
    bits = np.asarray(bits, dtype=np.int64)
    return bits @ (np.int64(1) << np.arange(bits.shape[-1], dtype=np.int64))


def index_to_bits(index, n_bits: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    return ((index[..., None] >> np.arange(n_bits)) & 1).astype(np.uint8)


@functools.lru_cache(maxsize=32)
def _joint_table(model: NoiseModel, budget: int) -> np.ndarray:
    n_faults = model.n_faults
    if (1 << n_faults) > budget:
        raise BudgetError(f"enumeration needs 2^{n_faults} configurations, budget is {budget}")
    configs = np.arange(1 << n_faults, dtype=np.int64)
    flips = ((configs[:, None] >> np.arange(n_faults)) & 1).astype(np.uint8)
    n_data = model.t * model.n_data
    data = flips[:, :n_data].reshape(-1, model.t, model.n_data)
    meas = flips[:, n_data:].reshape(-1, model.t, model.n_s)
    bits, labels = simulate(data, meas, model.layout)
    k_data = data.reshape(len(configs), -1).sum(axis=1)
    k_meas = meas.reshape(len(configs), -1).sum(axis=1)
    n_meas = n_faults - n_data
    weight = _power(model.p, k_data) * _power(1 - model.p, n_data - k_data)
    weight *= _power(model.q, k_meas) * _power(1 - model.q, n_meas - k_meas)
    table = np.zeros((1 << model.n_bits, 2))
    np.add.at(table, (syndrome_index(bits), labels.astype(np.intp)), weight)
    table.setflags(write=False)
    return table


def _power(base: float, exponent: np.ndarray) -> np.ndarray:
    # 0**0 == 1 is what the p=0 / q=0 limits need
    return np.power(float(base), exponent.astype(np.float64))


def joint_table(model: NoiseModel, budget: int = DEFAULT_ENUM_BUDGET) -> np.ndarray:
    """P(syndrome, label) for the rep-code process, shape (2**n_bits, 2)."""
    return _joint_table(model, budget)


def bayes_oracle(model: NoiseModel, bits, budget: int = DEFAULT_ENUM_BUDGET) -> np.ndarray | float:
    """Exact P(label = 1 | syndrome) for one bit vector or a batch of rows."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape[-1] != model.n_bits:
        raise ContractError(f"syndrome length {bits.shape[-1]} != n_s*t = {model.n_bits}")
    if model.mode == "teacher":
        post = teacher_posterior(model, bits)
    else:
        table = joint_table(model, budget)[syndrome_index(bits)]
        total = table.sum(axis=-1)
        # unreachable syndromes get posterior 0
        post = np.divide(table[..., 1], total, out=np.zeros_like(total), where=total > 0)
    return float(post) if np.ndim(post) == 0 else post


def bayes_accuracy(model: NoiseModel, ds: Dataset, budget: int = DEFAULT_ENUM_BUDGET) -> float:
    """Accuracy of thresholding the exact posterior at > 0.5 on ``ds``."""
    if len(ds) == 0:
        raise ContractError("empty dataset")
    pred = np.asarray(bayes_oracle(model, ds.bits, budget)) > 0.5
    return float(np.mean(pred == ds.labels.astype(bool)))


def positive_rate(model: NoiseModel, budget: int = DEFAULT_ENUM_BUDGET) -> float:
    if model.mode == "teacher":
        marginal = joint_table(_physics(model), budget).sum(axis=1)
        all_bits = index_to_bits(np.arange(len(marginal)), model.n_bits)
        return float(marginal @ teacher_posterior(model, all_bits))
    return float(joint_table(model, budget)[:, 1].sum())


# ---------------------------------------------------------------------------
# teacher mode


def _physics(model: NoiseModel) -> NoiseModel:
    return NoiseModel("rep-code", model.p, model.q, 0, model.n_s, model.t, model.layout)


@functools.lru_cache(maxsize=32)
def _teacher(model: NoiseModel) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    rng = np.random.default_rng([model.teacher_seed, 0x7EAC])
    n = model.n_bits
    w1 = rng.normal(0.0, 2.0 / math.sqrt(n), size=(n, TEACHER_HIDDEN))
    b1 = rng.normal(0.0, 0.5, size=TEACHER_HIDDEN)
    w2 = rng.normal(0.0, 2.0 / math.sqrt(TEACHER_HIDDEN), size=TEACHER_HIDDEN)
    marginal = joint_table(_physics(model)).sum(axis=1)
    raw = np.tanh(index_to_bits(np.arange(len(marginal)), n) @ w1 + b1) @ w2

    def rate(bias: float) -> float:
        return float(marginal @ (1.0 / (1.0 + np.exp(-(raw + bias)))))

    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) < TEACHER_POSITIVE_RATE:
            lo = mid
        else:
            hi = mid
    return w1, b1, w2, 0.5 * (lo + hi)


def teacher_posterior(model: NoiseModel, bits) -> np.ndarray:
    """sigma(teacher(bits)): the label probability in teacher mode."""
    w1, b1, w2, bias = _teacher(model)
    z = np.tanh(np.asarray(bits, dtype=np.float64) @ w1 + b1) @ w2 + bias
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------------------
# file formats


def write_dataset(ds: Dataset, path: str | Path) -> None:
    header = f"{FORMAT_TAG} {FORMAT_VERSION} ns={ds.n_s} t={ds.t} split={ds.split_seed}\n"
    chars = np.where(ds.bits == 1, "1", "0")
    lines = ["".join(row) + (" 1\n" if y else " 0\n") for row, y in zip(chars, ds.labels)]
    Path(path).write_text(header + "".join(lines), encoding="utf-8")


def read_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("missing header", line=1)
    n_s, t, split_seed = _parse_header(lines[0])
    width = n_s * t
    bits = np.zeros((len(lines) - 1, width), dtype=np.uint8)
    labels = np.zeros(len(lines) - 1, dtype=np.uint8)
    for k, line in enumerate(lines[1:]):
        lineno = k + 2
        if len(line) != width + 2 or line[width] != " ":
            raise ParseError(f"expected {width} bits, a space and a label, got {line!r}", line=lineno)
        row, label = line[:width], line[width + 1]
        if set(row) - {"0", "1"} or label not in "01":
            raise ParseError(f"non-binary character in {line!r}", line=lineno)
        bits[k] = np.frombuffer(row.encode(), dtype=np.uint8) - ord("0")
        labels[k] = int(label)
    return Dataset(n_s, t, bits, labels, split_seed)


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split()
    if len(parts) < 4 or parts[0] != FORMAT_TAG or parts[1] != FORMAT_VERSION:
        raise ParseError(f"bad header {line!r}; expected '{FORMAT_TAG} {FORMAT_VERSION} ns=<N_s> t=<T>'", line=1)
    fields: dict[str, int] = {}
    for token in parts[2:]:
        key, sep, value = token.partition("=")
        if not sep or key not in ("ns", "t", "split"):
            raise ParseError(f"bad header field {token!r}", line=1)
        try:
            fields[key] = int(value)
        except ValueError:
            raise ParseError(f"non-integer header field {token!r}", line=1) from None
    if "ns" not in fields or "t" not in fields or fields["ns"] < 1 or fields["t"] < 1:
        raise ParseError("header must give positive ns and t", line=1)
    return fields["ns"], fields["t"], fields.get("split", 0)


def default_detector_order(n_s: int, t: int) -> list[int]:
    """Round-major detector d -> node-major bit (d mod n_s) * t + (d div n_s)."""
    return [(d % n_s) * t + d // n_s for d in range(n_s * t)]


def _check_order(order: Sequence[int], n_bits: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.intp)
    if order.shape != (n_bits,) or sorted(order.tolist()) != list(range(n_bits)):
        raise ConfigError(f"detector_order must be a permutation of range({n_bits})")
    return order


def import_01(
    dets_path: str | Path,
    obs_path: str | Path,
    n_s: int,
    t: int,
    detector_order: Sequence[int] | None = None,
) -> Dataset:
    """Read paired '01'-format detection-event and observable-flip files."""
    width = n_s * t
    order = _check_order(detector_order if detector_order is not None else default_detector_order(n_s, t), width)
    dets = Path(dets_path).read_text(encoding="utf-8").splitlines()
    obs = Path(obs_path).read_text(encoding="utf-8").splitlines()
    if len(dets) != len(obs):
        raise ParseError(f"{len(dets)} detection lines but {len(obs)} observable lines")
    bits = np.zeros((len(dets), width), dtype=np.uint8)
    labels = np.zeros(len(dets), dtype=np.uint8)
    for k, (d_line, o_line) in enumerate(zip(dets, obs)):
        if len(d_line) != width or set(d_line) - {"0", "1"}:
            raise ParseError(f"{dets_path}: expected {width} characters of 0/1, got {d_line!r}", line=k + 1)
        if len(o_line) != 1 or o_line not in "01":
            raise ParseError(f"{obs_path}: expected a single 0/1, got {o_line!r}", line=k + 1)
        bits[k, order] = np.frombuffer(d_line.encode(), dtype=np.uint8) - ord("0")
        labels[k] = int(o_line)
    return Dataset(n_s, t, bits, labels)


def export_01(
    ds: Dataset,
    dets_path: str | Path,
    obs_path: str | Path,
    detector_order: Sequence[int] | None = None,
) -> None:
    order = _check_order(
        detector_order if detector_order is not None else default_detector_order(ds.n_s, ds.t), ds.n_s * ds.t
    )
    chars = np.where(ds.bits[:, order] == 1, "1", "0")
    Path(dets_path).write_text("".join("".join(row) + "\n" for row in chars), encoding="utf-8")
    Path(obs_path).write_text("".join(f"{y}\n" for y in ds.labels), encoding="utf-8")
