"""GATv2 graph classifier predicting the logical-flip probability."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Adam, ParamStore, Tensor
from .codesim import Dataset
from .errors import ConfigError, ContractError, DimensionError
from .graphrep import SyndromeGraph
from .layers import add_gat_layer, add_linear, encode_nodes, linear

log = logging.getLogger(__name__)

EVAL_CHUNK = 4096


@dataclass(frozen=True)
class DecoderConfig:
    in_dim: int = 2
    hidden_dim: int = 32
    heads: int = 1
    mlp_hidden: int = 32
    lr: float = 1e-3
    epochs: int = 20
    batch: int = 64

    def __post_init__(self):
        for name in ("in_dim", "hidden_dim", "heads", "mlp_hidden", "epochs", "batch"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"decoder {name} must be a positive integer, got {value!r}")
        if self.heads != 1:
            raise ConfigError("only single-head attention is implemented")
        if not self.lr > 0:
            raise ConfigError(f"decoder lr must be > 0, got {self.lr}")


class CurveRow(NamedTuple):
    epoch: int
    loss: float
    test_accuracy: float


class DecoderModel:
    """Two GATv2 layers, mean pooling over nodes, then a two-layer MLP to one logit."""

    def __init__(self, config: DecoderConfig, params: ParamStore, seed: int = 0, provenance: dict | None = None):
        self.config = config
        self.params = params
        self.seed = seed
        self.provenance = provenance or {}

    @classmethod
    def init(cls, config: DecoderConfig, seed: int) -> DecoderModel:
        rng = np.random.default_rng([seed, 0xDEC])
        params = ParamStore()
        add_gat_layer(params, "gat0", config.in_dim, config.hidden_dim, rng)
        add_gat_layer(params, "gat1", config.hidden_dim, config.hidden_dim, rng)
        add_linear(params, "mlp0", config.hidden_dim, config.mlp_hidden, rng)
        add_linear(params, "mlp1", config.mlp_hidden, 1, rng)
        return cls(config, params, seed)

    def copy(self) -> DecoderModel:
        return DecoderModel(self.config, self.params.copy(), self.seed, dict(self.provenance))

    def forward(self, features: np.ndarray, attention: list | None = None) -> Tensor:
        """Logits, shape (B,), for a (B, n_s, t) batch of node features."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 3 or features.shape[2] != self.config.in_dim:
            raise DimensionError(f"expected (B, n_s, {self.config.in_dim}) features, got {features.shape}")
        h, graph_of = encode_nodes(self.params, features, attention=attention)
        pooled = ad.segment_mean(h, graph_of, features.shape[0])
        hidden = ad.relu(linear(self.params, "mlp0", pooled))
        return ad.reshape(linear(self.params, "mlp1", hidden), (features.shape[0],))

    def predict_logit(self, g: SyndromeGraph) -> float:
        with ad.no_grad():
            return float(self.forward(g.features[None]).data[0])

    def logits(self, bits: np.ndarray, n_s: int) -> np.ndarray:
        """Logits for rows of node-major bits; duplicates are evaluated once."""
        bits = np.asarray(bits, dtype=np.uint8)
        if len(bits) == 0:
            return np.zeros(0)
        unique, inverse = np.unique(bits, axis=0, return_inverse=True)
        feats = unique.reshape(len(unique), n_s, -1).astype(np.float64)
        out = np.empty(len(unique))
        with ad.no_grad():
            for start in range(0, len(unique), EVAL_CHUNK):
                out[start : start + EVAL_CHUNK] = self.forward(feats[start : start + EVAL_CHUNK]).data
        return out[inverse.reshape(-1)]

    def save(self, path: str | Path, provenance: dict | None = None) -> None:
        prov = self.provenance if provenance is None else provenance
        checkpoint.save(path, "decoder", dataclasses.asdict(self.config), self.seed, self.params, prov)

    @classmethod
    def load(cls, path: str | Path) -> DecoderModel:
        payload = checkpoint.load(path, kind="decoder")
        return cls(DecoderConfig(**payload["config"]), payload["params"], payload["seed"], payload["provenance"])


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def weighted_bce(logit, y, w_p: float):
    """Class-weighted binary cross-entropy on logits.

    ``-[w_p * y * log sigma(z) + (1 - y) * log(1 - sigma(z))]``, evaluated via
    log-sigmoid.  Works on plain floats/arrays or on a ``Tensor`` of logits
    (returning a per-sample loss tensor).
    """
    if not w_p > 0:
        raise ConfigError(f"pos_weight must be > 0, got {w_p}")
    y = np.asarray(y, dtype=np.float64)
    if isinstance(logit, Tensor):
        pos = ad.log_sigmoid(logit)
        neg = ad.log_sigmoid(ad.scale(logit, -1.0))
        return ad.scale(
            ad.add(ad.mul(pos, Tensor(w_p * y.reshape(logit.shape))), ad.mul(neg, Tensor((1.0 - y).reshape(logit.shape)))),
            -1.0,
        )
    z = np.asarray(logit, dtype=np.float64)
    log_sig = lambda v: np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))  # noqa: E731
    out = -(w_p * y * log_sig(z) + (1.0 - y) * log_sig(-z))
    return float(out) if out.ndim == 0 else out


def pos_weight(labels: np.ndarray) -> float:
    n_pos = int(np.sum(labels))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError(
            f"training split has a single class (n_pos={n_pos}, n_neg={n_neg}); pos_weight is undefined"
        )
    return n_neg / n_pos


def batch_loss(model: DecoderModel, bits: np.ndarray, labels: np.ndarray, w_p: float, n_s: int) -> Tensor:
    feats = bits.reshape(len(bits), n_s, -1).astype(np.float64)
    return ad.tmean(weighted_bce(model.forward(feats), labels, w_p))


@dataclass
class EvalMetrics:
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def recall_pos(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def recall_neg(self) -> float | None:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else None

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.update(n=self.n, recall_pos=self.recall_pos, recall_neg=self.recall_neg)
        return out


def metrics_from_predictions(pred: np.ndarray, labels: np.ndarray) -> EvalMetrics:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(labels, dtype=bool)
    if len(truth) == 0:
        raise ContractError("cannot evaluate on an empty split")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return EvalMetrics((tp + tn) / len(truth), tp, fp, tn, fn)


def predict_proba(model, ds: Dataset) -> np.ndarray:
    return sigmoid(model.logits(ds.bits, ds.n_s))


def evaluate(model, ds: Dataset) -> EvalMetrics:
    """Accuracy and confusion counts with positive iff P_L > 0.5."""
    if len(ds) == 0:
        raise ContractError("cannot evaluate on an empty split")
    return metrics_from_predictions(predict_proba(model, ds) > 0.5, ds.labels)


def fit(
    model: DecoderModel,
    train: Dataset,
    test: Dataset | None,
    epochs: int,
    seed: int,
    loss_fn=None,
) -> list[CurveRow]:
    """Mini-batch Adam on the weighted BCE; mutates ``model`` in place.

    ``loss_fn(model, idx, step, w_p)`` may replace the clean batch loss, e.g.
    to add an adversarial term.  Batch order depends only on ``seed``.
    """
    cfg = model.config
    w_p = pos_weight(train.labels)
    if loss_fn is None:
        loss_fn = lambda m, idx, step, w: batch_loss(m, train.bits[idx], train.labels[idx], w, train.n_s)  # noqa: E731
    rng = np.random.default_rng([seed, 0xF17])
    opt = Adam(model.params, lr=cfg.lr)
    rows: list[CurveRow] = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            loss = loss_fn(model, idx, step, w_p)
            model.params.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            step += 1
        acc = evaluate(model, test).accuracy if test is not None and len(test) else float("nan")
        rows.append(CurveRow(epoch, total / len(train), acc))
        log.info("epoch %d loss %.5f test_acc %.4f", epoch, rows[-1].loss, acc)
    return rows


def train(ds: Dataset, cfg: DecoderConfig, seed: int) -> tuple[DecoderModel, list[CurveRow]]:
    if len(ds) == 0:
        raise ContractError("empty dataset")
    if cfg.in_dim != ds.t:
        cfg = dataclasses.replace(cfg, in_dim=ds.t)
    train_split, test_split = ds.split()
    pos_weight(train_split.labels)
    model = DecoderModel.init(cfg, seed)
    rows = fit(model, train_split, test_split, cfg.epochs, seed)
    return model, rows


def fine_tune(model: DecoderModel, ds: Dataset, epochs: int, seed: int) -> tuple[DecoderModel, list[CurveRow]]:
    """Continue plain clean-data training from a copy of ``model``."""
    tuned = model.copy()
    train_split, test_split = ds.split()
    rows = fit(tuned, train_split, test_split, epochs, seed)
    return tuned, rows
