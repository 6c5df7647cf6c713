"""Adversarial retraining: harvest successful attacks, then minimise L_clean + alpha * L_adv."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adversary import ActorModel, Environment, greedy_episodes
from .autodiff import Tensor
from .codesim import Dataset
from .decoder import CurveRow, DecoderModel, batch_loss, fit
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)


@dataclass
class AdversarialSet:
    """Perturbed syndromes that fooled the decoder, all carrying label 0."""

    n_s: int
    t: int
    bits: np.ndarray
    source_index: np.ndarray
    actions: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1, self.n_s * self.t)
        self.source_index = np.asarray(self.source_index, dtype=np.intp)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def labels(self) -> np.ndarray:
        return np.zeros(len(self), dtype=np.uint8)

    def as_dataset(self) -> Dataset:
        return Dataset(self.n_s, self.t, self.bits, self.labels)


def generate_adversarial(actor: ActorModel, env: Environment, train: Dataset, workers: int = 1) -> AdversarialSet:
    """One greedy attack per correctly classified negative; successes are kept."""
    pool = env.negative_pool(train)
    if len(pool) == 0:
        raise ContractError("empty start pool: decoder classifies nothing correctly negative")
    traces = greedy_episodes(env, actor, train.bits[pool], workers)
    keep = [i for i, tr in enumerate(traces) if tr.success]
    if not keep:
        log.warning("no successful attacks on %d samples; adversarial set is empty", len(pool))
    bits = np.array([traces[i].terminal for i in keep], dtype=np.uint8).reshape(-1, train.n_s * train.t)
    return AdversarialSet(train.n_s, train.t, bits, pool[keep], [tuple(traces[i].actions) for i in keep])


def robust_loss(
    model: DecoderModel,
    clean_bits: np.ndarray,
    clean_labels: np.ndarray,
    adv_bits: np.ndarray | None,
    w_p: float,
    alpha: float,
    n_s: int,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, clean, adv) batch losses with total = clean + alpha * adv."""
    clean = batch_loss(model, clean_bits, clean_labels, w_p, n_s)
    if adv_bits is None or len(adv_bits) == 0 or alpha == 0:
        return clean, clean, None
    adv = batch_loss(model, adv_bits, np.zeros(len(adv_bits)), w_p, n_s)
    return ad.add(clean, ad.scale(adv, alpha)), clean, adv


class _AdversarialBatches:
    """Cycles through a shuffled adversarial set, one clean-batch-sized slice per step."""

    def __init__(self, n: int, batch: int, seed: int):
        self.n = n
        self.batch = batch
        self.rng = np.random.default_rng([seed, 0xAD5])
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next(self, size: int) -> np.ndarray:
        out = []
        while size > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(size, self.n - self.pos)
            out.append(self.order[self.pos : self.pos + take])
            self.pos += take
            size -= take
        return np.concatenate(out)


def robust_train(
    decoder: DecoderModel,
    ds: Dataset,
    adv: AdversarialSet,
    alpha: float = 1.0,
    epochs: int = 10,
    seed: int = 0,
    fresh_init: bool = False,
) -> tuple[DecoderModel, list[CurveRow]]:
    """Retrain on clean data plus adversarial examples; returns a new model.

    Warm-starts from ``decoder`` unless ``fresh_init``.  With ``alpha == 0`` or
    an empty adversarial set this is exactly plain continued training.
    """
    if not alpha >= 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    model = DecoderModel.init(decoder.config, seed) if fresh_init else decoder.copy()
    train, test = ds.split()
    if len(adv) == 0 or alpha == 0:
        return model, fit(model, train, test, epochs, seed)
    batches = _AdversarialBatches(len(adv), decoder.config.batch, seed)

    def loss_fn(m, idx, step, w_p):
        adv_idx = batches.next(len(idx))
        total, _, _ = robust_loss(m, train.bits[idx], train.labels[idx], adv.bits[adv_idx], w_p, alpha, ds.n_s)
        return total

    return model, fit(model, train, test, epochs, seed, loss_fn)
