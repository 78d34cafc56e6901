"""Momentum-contrast pretraining.

The query network (encoder + head) learns by back-propagation; the key
network trails it as an exponential moving average and fills a FIFO queue
of unit-norm keys that serve as negatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from protomoco import rng as rngmod
from protomoco.augment import AugmentationSpec, augment_batch
from protomoco.autodiff import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    ParameterSet,
    SgdConfig,
    Tape,
    Tensor,
    as_tensor,
    backward,
    concat,
    l2_normalize,
    logsumexp,
    lr_at_epoch,
    matmul,
    mean,
    mul,
    reshape,
    sgd_step,
    take,
    transpose,
    tsum,
)
from protomoco.models import EncoderConfig, forward, init_params

log = logging.getLogger(__name__)

EPS = 1e-12


def cosine_similarity(v, u) -> float:
    """vᵀu / (‖v‖‖u‖)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    u = np.asarray(u, dtype=np.float64).ravel()
    if v.shape != u.shape:
        raise DimensionError(f"cosine_similarity shapes {v.shape} and {u.shape} differ")
    nv, nu = np.linalg.norm(v), np.linalg.norm(u)
    if nv <= EPS or nu <= EPS:
        raise DegenerateVectorError("cosine similarity of a zero vector")
    return float(np.clip(v @ u / (nv * nu), -1.0, 1.0))


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")


def nt_xent_loss(z, pair_index: Sequence[int], tau: float) -> Tensor:
    """Mean NT-Xent over all 2N anchors.

    ``z`` holds 2N embeddings (rows); ``pair_index[i]`` is the positive
    partner of row ``i``. Each anchor's denominator spans the 2N-1 other rows.
    """
    _check_tau(tau)
    z = as_tensor(z)
    n2 = z.shape[0]
    pair = np.asarray(pair_index, dtype=int)
    if pair.shape != (n2,):
        raise ContractError(f"pair_index has {pair.size} entries for {n2} embeddings")
    if sorted(pair.tolist()) != list(range(n2)):
        raise ContractError("pair_index contains duplicate or out-of-range indices")
    if np.any(pair == np.arange(n2)) or np.any(pair[pair] != np.arange(n2)):
        raise ContractError("pair_index must be a perfect matching without fixed points")
    u = l2_normalize(z, axis=1)
    logits = mul(matmul(u, transpose(u)), 1.0 / tau)
    others = ~np.eye(n2, dtype=bool)
    lse = logsumexp(logits, axis=1, where=others)
    positive = take(logits, (np.arange(n2), pair))
    return mean(lse - positive)


class KeyQueue:
    """Fixed-capacity FIFO of unit-norm key vectors backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((self.capacity, self.dim), dtype=dtype)
        self._start = 0
        self._size = 0
        self.inserted = 0

    def __len__(self) -> int:
        return self._size

    def entries(self) -> np.ndarray:
        """Stored keys, oldest first."""
        idx = (self._start + np.arange(self._size)) % self.capacity
        return self._buf[idx].copy()

    def enqueue(self, keys) -> "KeyQueue":
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise DimensionError(f"queue holds {self.dim}-dim keys, got shape {keys.shape}")
        norms = np.linalg.norm(keys, axis=1, keepdims=True)
        if np.any(norms <= EPS):
            raise DegenerateVectorError("cannot enqueue a zero key")
        for row in (keys / norms).astype(self._buf.dtype):
            slot = (self._start + self._size) % self.capacity
            self._buf[slot] = row
            if self._size < self.capacity:
                self._size += 1
            else:
                self._start = (self._start + 1) % self.capacity
            self.inserted += 1
        return self


def enqueue_batch(queue: KeyQueue, keys) -> KeyQueue:
    """Append ``keys`` (normalized here) and evict the oldest beyond capacity."""
    return queue.enqueue(keys)


def info_nce_loss(q, k_pos, queue: KeyQueue | np.ndarray | None, tau: float) -> Tensor:
    """Queue-based InfoNCE, averaged over the query rows.

    Queries are normalized on the tape; positives and queue negatives are
    treated as constants. An empty queue gives a loss of exactly 0.
    """
    _check_tau(tau)
    q = as_tensor(q)
    single = q.ndim == 1
    if single:
        q = reshape(q, (1, -1))
    k = np.atleast_2d(np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=np.float64))
    if k.shape != q.shape:
        raise DimensionError(f"query shape {q.shape} and positive key shape {k.shape} differ")
    k_norm = np.linalg.norm(k, axis=1, keepdims=True)
    if np.any(k_norm <= EPS):
        raise DegenerateVectorError("positive key has zero norm")
    k = (k / k_norm).astype(q.data.dtype)
    if isinstance(queue, KeyQueue):
        negatives = queue.entries()
    elif queue is None:
        negatives = np.zeros((0, q.shape[1]))
    else:
        negatives = np.asarray(queue)
    negatives = negatives.astype(q.data.dtype)

    u = l2_normalize(q, axis=1)
    pos = reshape(tsum(mul(u, k), axis=1), (-1, 1))
    logits = pos if len(negatives) == 0 else concat([pos, matmul(u, Tensor(negatives.T))], axis=1)
    logits = mul(logits, 1.0 / tau)
    lse = logsumexp(logits, axis=1)
    return mean(lse - take(logits, (slice(None), 0)))


@dataclass
class MomentumPair:
    theta_q: ParameterSet
    theta_k: ParameterSet
    m: float = 0.999

    def __post_init__(self) -> None:
        if not 0 <= self.m <= 1:
            raise ContractError(f"momentum coefficient must lie in [0, 1], got {self.m}")
        if set(self.theta_q.names()) != set(self.theta_k.names()):
            raise DimensionError("query and key parameter sets have different names")
        for name in self.theta_q.names():
            if self.theta_q[name].shape != self.theta_k[name].shape:
                raise DimensionError(
                    f"{name}: query shape {self.theta_q[name].shape} != key shape {self.theta_k[name].shape}")

    @classmethod
    def from_query(cls, theta_q: ParameterSet, m: float) -> "MomentumPair":
        """Key network starts as an exact copy of the query network."""
        return cls(theta_q, ParameterSet.from_arrays(theta_q.arrays()), m)


def momentum_update(pair: MomentumPair) -> MomentumPair:
    """theta_k <- m*theta_k + (1-m)*theta_q, in place, outside any tape."""
    m = pair.m
    for name, wk in pair.theta_k.weights.items():
        wq = pair.theta_q[name]
        if wq.shape != wk.shape:
            raise DimensionError(f"{name}: query shape {wq.shape} != key shape {wk.shape}")
        if m == 1:
            continue
        dt = wk.data.dtype
        wk.data[...] = dt.type(m) * wk.data + dt.type(1 - m) * wq.data
    return pair


@dataclass(frozen=True)
class PretrainConfig:
    tau: float = 0.07
    batch_size: int = 16
    epochs: int = 30
    queue_k: int = 1024
    m: float = 0.999
    sgd: SgdConfig = field(default_factory=SgdConfig)

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 1 or self.queue_k < 1:
            raise ValueError("batch_size and queue_k must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 <= self.m <= 1:
            raise ValueError(f"m must lie in [0, 1], got {self.m}")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    pos_sim: float
    neg_sim: float

    @property
    def gap(self) -> float:
        return self.pos_sim - self.neg_sim


def _encode_numpy(weights: ParameterSet, x: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    z = forward(weights.weights, Tensor(x), cfg).data
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def seed_queue(images: np.ndarray, pair: MomentumPair, queue: KeyQueue, spec: AugmentationSpec,
               cfg: PretrainConfig, model: EncoderConfig, seed: int) -> KeyQueue:
    """Fill the queue with keys from one warmup batch encoded by the key network."""
    count = min(cfg.batch_size, len(images))
    ids = np.arange(count)
    _, keys_view = augment_batch(images[:count], ids, spec, seed, epoch="warmup")
    return queue.enqueue(_encode_numpy(pair.theta_k, keys_view, model))


def pretrain_epoch(images: np.ndarray, pair: MomentumPair, queue: KeyQueue, spec: AugmentationSpec,
                   cfg: PretrainConfig, model: EncoderConfig, seed: int, epoch: int
                   ) -> tuple[MomentumPair, KeyQueue, EpochMetrics]:
    """One pass over ``images`` (N×C×H×W) in shuffled mini-batches.

    Per batch: view pairs, queries from the query network on the first
    views, detached keys from the key network on the second views, InfoNCE
    against the queue, an SGD step on the query parameters, the momentum
    update of the key parameters, and finally enqueueing the batch keys.
    """
    if len(images) == 0:
        raise ContractError("pretraining needs a non-empty dataset")
    order = rngmod.stream(seed, "shuffle", epoch).permutation(len(images))
    lr = lr_at_epoch(cfg.sgd, epoch)
    losses, pos_sims, neg_sims, weights = [], [], [], []
    for start in range(0, len(order), cfg.batch_size):
        ids = order[start:start + cfg.batch_size]
        view_q, view_k = augment_batch(images[ids], ids, spec, seed, epoch)
        keys = _encode_numpy(pair.theta_k, view_k, model)
        negatives = queue.entries()
        with Tape() as tape:
            z = forward(pair.theta_q.weights, Tensor(view_q), model)
            loss = info_nce_loss(z, keys, negatives, cfg.tau)
        backward(tape, loss, pair.theta_q)
        sgd_step(pair.theta_q, cfg.sgd, lr)
        momentum_update(pair)
        queue.enqueue(keys)

        qn = z.data / np.linalg.norm(z.data, axis=1, keepdims=True)
        losses.append(loss.item())
        pos_sims.append(float(np.mean(np.sum(qn * keys, axis=1))))
        neg_sims.append(float(np.mean(qn @ negatives.T)) if len(negatives) else 0.0)
        weights.append(len(ids))
    w = np.asarray(weights, dtype=np.float64)
    metrics = EpochMetrics(
        epoch=epoch,
        lr=lr,
        loss=float(np.average(losses, weights=w)),
        pos_sim=float(np.average(pos_sims, weights=w)),
        neg_sim=float(np.average(neg_sims, weights=w)),
    )
    log.info("epoch %d lr %.5g loss %.4f gap %.4f", epoch, lr, metrics.loss, metrics.gap)
    return pair, queue, metrics


def pretrain(images: np.ndarray, model: EncoderConfig, cfg: PretrainConfig, spec: AugmentationSpec,
             seed: int, theta_q: ParameterSet | None = None,
             on_epoch: Callable[[EpochMetrics], None] | None = None,
             ) -> tuple[MomentumPair, KeyQueue, list[EpochMetrics]]:
    """Run ``cfg.epochs`` epochs from He-initialized (or given) query weights.

    ``on_epoch`` is called with each epoch's metrics as soon as it finishes.
    """
    theta_q = init_params(model, seed) if theta_q is None else theta_q
    pair = MomentumPair.from_query(theta_q, cfg.m)
    queue = KeyQueue(cfg.queue_k, model.dim_z)
    history: list[EpochMetrics] = []
    if cfg.epochs == 0:
        return pair, queue, history
    seed_queue(images, pair, queue, spec, cfg, model, seed)
    for epoch in range(cfg.epochs):
        pair, queue, metrics = pretrain_epoch(images, pair, queue, spec, cfg, model, seed, epoch)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return pair, queue, history


def similarity_gap(images: np.ndarray, pair: MomentumPair, spec: AugmentationSpec, model: EncoderConfig,
                   seed: int, use_key_encoder: bool = False) -> tuple[float, float]:
    """Mean positive and mean negative cosine similarity on one augmented batch.

    Both views go through the query network by default, so the gap measures
    one mapping; ``use_key_encoder=True`` encodes the second view with the
    key network instead. Positives pair each image's two views; every other
    image's second view is a negative.
    """
    ids = np.arange(len(images))
    view_q, view_k = augment_batch(images, ids, spec, seed, epoch=0)
    q = _encode_numpy(pair.theta_q, view_q, model)
    k = _encode_numpy(pair.theta_k if use_key_encoder else pair.theta_q, view_k, model)
    sims = q @ k.T
    off = ~np.eye(len(images), dtype=bool)
    return float(np.mean(np.diag(sims))), float(np.mean(sims[off]))
