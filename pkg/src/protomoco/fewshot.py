"""Prototypical-network episodes, losses and fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from protomoco.autodiff import (
    ParameterSet,
    SgdConfig,
    Tape,
    Tensor,
    as_tensor,
    backward,
    clamp_min,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    norm,
    reshape,
    sgd_step,
    sub,
    take,
    tsum,
)
from protomoco.models import EncoderConfig, embed

logger = logging.getLogger(__name__)

DISTANCES = ("euclidean", "squared-euclidean")
LOSSES = ("softmax-nll", "paper-eq10")
LOG_FLOOR = 1e-8


class EpisodeInfeasibleError(ValueError):
    pass


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    group_id: str
    sample_id: int


@dataclass
class Episode:
    ways: int
    shots: int
    support: dict[int, list[LabeledSample]]
    queries: list[tuple[LabeledSample, int]]

    @property
    def classes(self) -> list[int]:
        return sorted(self.support)

    def support_images(self) -> np.ndarray:
        return np.stack([s.image for c in self.classes for s in self.support[c]])

    def query_images(self) -> np.ndarray:
        return np.stack([s.image for s, _ in self.queries])

    def query_targets(self) -> np.ndarray:
        """Column of each query's true class within ``classes``."""
        col = {c: i for i, c in enumerate(self.classes)}
        return np.array([col[c] for _, c in self.queries])


@dataclass
class PrototypeSet:
    prototypes: dict[int, np.ndarray]

    @property
    def dim(self) -> int:
        return len(next(iter(self.prototypes.values())))

    @property
    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def matrix(self) -> np.ndarray:
        return np.stack([self.prototypes[c] for c in self.classes])


@dataclass(frozen=True)
class MetaConfig:
    distance: str = "euclidean"
    loss: str = "softmax-nll"
    episodes: int = 200
    ways: int = 2
    shots: int = 1
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=5e-5, schedule=()))

    def __post_init__(self) -> None:
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.ways < 2 or self.shots < 1 or self.episodes < 0:
            raise ValueError("need ways >= 2, shots >= 1 and episodes >= 0")


# -- episode construction ------------------------------------------------------


def _by_class(data: Iterable[LabeledSample]) -> dict[int, list[LabeledSample]]:
    pools: dict[int, list[LabeledSample]] = {}
    for s in data:
        if s.label >= 0:
            pools.setdefault(s.label, []).append(s)
    return pools


def sample_episode(data: Sequence[LabeledSample], ways: int, shots: int, rng: np.random.Generator,
                   max_tries: int = 100) -> Episode:
    """Draw an M-way C-shot episode with one query per class.

    Classes are drawn without replacement; each class contributes C+1
    samples of which one (chosen uniformly) is the query. Query and support
    never share a group id; conflicting draws are resampled.
    """
    pools = _by_class(data)
    for c, items in sorted(pools.items()):
        if len(items) < shots + 1 or len({s.group_id for s in items}) < 2:
            raise EpisodeInfeasibleError(
                f"class {c} needs at least {shots + 1} samples over 2 groups, "
                f"has {len(items)} samples over {len({s.group_id for s in items})} groups")
    if len(pools) < ways:
        raise EpisodeInfeasibleError(f"{ways}-way episode needs {ways} classes, dataset has {len(pools)}")
    classes = sorted(pools)
    chosen = [classes[i] for i in rng.choice(len(classes), size=ways, replace=False)]
    for _ in range(max_tries):
        draws = {}
        for c in chosen:
            idx = rng.choice(len(pools[c]), size=shots + 1, replace=False)
            picked = [pools[c][i] for i in idx]
            q = int(rng.integers(shots + 1))
            draws[c] = (picked[q], [s for j, s in enumerate(picked) if j != q])
        query_groups = {q.group_id for q, _ in draws.values()}
        support_groups = {s.group_id for _, sup in draws.values() for s in sup}
        if not query_groups & support_groups:
            return Episode(ways, shots, {c: sup for c, (_, sup) in draws.items()},
                           [(q, c) for c, (q, _) in draws.items()])
    raise EpisodeInfeasibleError(
        f"no group-disjoint episode found for classes {chosen} after {max_tries} draws")


def sample_eval_episode(support_pool: Sequence[LabeledSample], query_pool: Sequence[LabeledSample],
                        ways: int, shots: int, rng: np.random.Generator) -> Episode:
    """Episode whose queries come from ``query_pool`` and supports from ``support_pool``.

    Used for held-out evaluation: the two pools hold disjoint groups, so the
    support/query group separation holds by construction.
    """
    sup_pools, qry_pools = _by_class(support_pool), _by_class(query_pool)
    classes = sorted(set(sup_pools) & set(qry_pools))
    if len(classes) < ways:
        raise EpisodeInfeasibleError(
            f"{ways}-way evaluation needs {ways} classes present in both pools, found {classes}")
    for c in classes:
        if len(sup_pools[c]) < shots:
            raise EpisodeInfeasibleError(f"class {c} has {len(sup_pools[c])} support candidates, need {shots}")
    chosen = [classes[i] for i in rng.choice(len(classes), size=ways, replace=False)]
    support, queries = {}, []
    for c in chosen:
        idx = rng.choice(len(sup_pools[c]), size=shots, replace=False)
        support[c] = [sup_pools[c][i] for i in idx]
        queries.append((qry_pools[c][int(rng.integers(len(qry_pools[c])))], c))
    return Episode(ways, shots, support, queries)


# -- prototypes and posteriors (plain arrays) ----------------------------------


Embedder = Callable[[np.ndarray], np.ndarray]


def make_embedder(weights: ParameterSet | Mapping[str, Tensor], model: EncoderConfig) -> Embedder:
    """Frozen psi: images N×C×H×W -> embeddings N×dim_h (no projection head)."""
    w = weights.weights if isinstance(weights, ParameterSet) else weights

    def psi(images: np.ndarray) -> np.ndarray:
        return embed(w, Tensor(images), model).data.astype(np.float64)

    return psi


def compute_prototypes(episode: Episode, psi: Embedder) -> PrototypeSet:
    """Per-class mean of the support embeddings."""
    return PrototypeSet({c: psi(np.stack([s.image for s in episode.support[c]])).mean(axis=0)
                         for c in episode.classes})


def distance_to(points: np.ndarray, prototypes: np.ndarray, kind: str = "euclidean") -> np.ndarray:
    """Distances between rows of ``points`` (Q×d) and ``prototypes`` (M×d)."""
    diff = np.asarray(points, dtype=np.float64)[:, None, :] - np.asarray(prototypes, dtype=np.float64)[None]
    sq = np.sum(diff * diff, axis=-1)
    if kind == "squared-euclidean":
        return sq
    if kind == "euclidean":
        return np.sqrt(sq)
    raise ValueError(f"unknown distance {kind!r}")


def _softmax_neg(d: np.ndarray) -> np.ndarray:
    logits = -d - np.max(-d, axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def class_posterior(query_embedding, protos: PrototypeSet, distance: str = "euclidean") -> dict[int, float]:
    """Softmax over negative distances to each prototype."""
    if not protos.prototypes:
        raise ValueError("no prototypes")
    d = distance_to(np.atleast_2d(query_embedding), protos.matrix(), distance)[0]
    return dict(zip(protos.classes, _softmax_neg(d).tolist()))


def predict(query: np.ndarray, support: Mapping[int, Sequence[LabeledSample]], psi: Embedder,
            distance: str = "euclidean") -> int:
    """Class of the nearest prototype for one query image (ties -> lowest class id)."""
    protos = PrototypeSet({c: psi(np.stack([s.image for s in support[c]])).mean(axis=0)
                           for c in sorted(support)})
    post = class_posterior(psi(query[None])[0], protos, distance)
    return max(sorted(post), key=lambda c: (post[c], -c))


def predict_episode(episode: Episode, psi: Embedder, distance: str = "euclidean"
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class ids and posterior rows (columns in ``episode.classes`` order)."""
    protos = compute_prototypes(episode, psi)
    d = distance_to(psi(episode.query_images()), protos.matrix(), distance)
    post = _softmax_neg(d)
    classes = np.array(protos.classes)
    return classes[np.argmax(post, axis=1)], post


# -- differentiable losses ---------------------------------------------------------


def distance_matrix(queries: Tensor, prototypes: Tensor, kind: str = "euclidean") -> Tensor:
    """Q×M distances on the tape."""
    q, p = queries.shape[0], prototypes.shape[0]
    diff = sub(reshape(queries, (q, 1, -1)), reshape(prototypes, (1, p, -1)))
    if kind == "euclidean":
        return norm(diff, axis=-1)
    if kind == "squared-euclidean":
        return tsum(mul(diff, diff), axis=-1)
    raise ValueError(f"unknown distance {kind!r}")


def nearest_wrong(d: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Column of the closest incorrect prototype per row; ties go to the lowest column."""
    masked = np.array(d, dtype=np.float64)
    masked[np.arange(len(targets)), targets] = np.inf
    return np.argmin(masked, axis=1)


def loss_from_distances(d: Tensor, targets: np.ndarray, loss: str = "softmax-nll") -> Tensor:
    """Mean meta loss over query rows of a Q×M distance matrix."""
    rows = np.arange(d.shape[0])
    true_d = take(d, (rows, targets))
    if loss == "softmax-nll":
        return mean(true_d + logsumexp(mul(d, -1.0), axis=1))
    if loss == "paper-eq10":
        wrong = nearest_wrong(d.data, targets)
        wrong_d = take(d, (rows, wrong))
        if np.any(wrong_d.data < LOG_FLOOR):
            logger.warning("distance to nearest wrong prototype is below %g; clamping before log", LOG_FLOOR)
        return mean(true_d + log(clamp_min(wrong_d, LOG_FLOOR)))
    raise ValueError(f"unknown loss {loss!r}")


def meta_loss(query_embedding, protos: PrototypeSet | Tensor, true_class: int, cfg: MetaConfig,
              classes: Sequence[int] | None = None) -> Tensor:
    """Loss for one query embedding against a prototype set.

    ``protos`` may be a PrototypeSet or an M×d tensor whose rows follow
    ``classes`` (sorted ids by default).
    """
    if isinstance(protos, PrototypeSet):
        classes = protos.classes
        protos = Tensor(protos.matrix())
    classes = list(range(protos.shape[0])) if classes is None else list(classes)
    if true_class not in classes or len(classes) < 2:
        raise ValueError(f"class {true_class} must be among at least two prototypes {classes}")
    q = reshape(as_tensor(query_embedding), (1, -1))
    d = distance_matrix(q, protos, cfg.distance)
    return loss_from_distances(d, np.array([classes.index(true_class)]), cfg.loss)


def episode_loss(weights: Mapping[str, Tensor], episode: Episode, model: EncoderConfig, cfg: MetaConfig
                 ) -> tuple[Tensor, Tensor]:
    """Mean meta loss of an episode, differentiable through the encoder.

    Returns the loss and the Q×M distance matrix.
    """
    classes = episode.classes
    n_sup = sum(len(episode.support[c]) for c in classes)
    images = np.concatenate([episode.support_images(), episode.query_images()])
    emb = embed(weights, Tensor(images), model)
    averaging = np.zeros((len(classes), n_sup))
    row = 0
    for i, c in enumerate(classes):
        k = len(episode.support[c])
        averaging[i, row:row + k] = 1.0 / k
        row += k
    protos = matmul(Tensor(averaging), take(emb, slice(0, n_sup)))
    d = distance_matrix(take(emb, slice(n_sup, None)), protos, cfg.distance)
    return loss_from_distances(d, episode.query_targets(), cfg.loss), d


@dataclass
class EpisodeRecord:
    episode: int
    loss: float
    correct: list[bool]

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.correct))


def finetune(params: ParameterSet, model: EncoderConfig, episodes: Iterable[Episode], cfg: MetaConfig
             ) -> tuple[ParameterSet, list[EpisodeRecord]]:
    """One SGD step per episode on the encoder weights in ``params`` (updated in place)."""
    records = []
    for i, episode in enumerate(episodes):
        with Tape() as tape:
            loss, d = episode_loss(params.weights, episode, model, cfg)
        backward(tape, loss, params)
        sgd_step(params, cfg.sgd)
        correct = (np.argmin(d.data, axis=1) == episode.query_targets()).tolist()
        records.append(EpisodeRecord(i, loss.item(), correct))
        logger.debug("episode %d loss %.4f", i, loss.item())
    return params, records
