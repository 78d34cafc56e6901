"""Finite-difference verification of every differentiable operation.

Each case builds random inputs, reduces the op's output to a scalar with a
fixed random projection and compares the tape gradient against central
differences. The error of one instance is

    max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, 1e-3)

taken over every entry of every differentiated input. The analytic side
runs in the precision under test; the differences are evaluated in 64-bit
at the same (storage-precision) inputs so that round-off in the oracle
does not mask or fake a failure. Coordinates whose
perturbation flips a ReLU gate, a clamp or a nearest-prototype choice are
skipped, since the function is not differentiable across that kink.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from protomoco import autodiff as ad
from protomoco import rng as rngmod
from protomoco.autodiff import Tape, Tensor
from protomoco.contrastive import info_nce_loss, nt_xent_loss
from protomoco.fewshot import MetaConfig, distance_matrix, loss_from_distances, nearest_wrong
from protomoco.models import EncoderConfig, ProjectionHead, embed, forward, project

TOLERANCE = 1e-3
STEP = {np.float32: 1e-3, np.float64: 1e-5}
# Instance-level rejection margin: inputs this close to a kink are resampled.
KINK_MARGIN = 0.05
MAX_RESAMPLES = 100
# Gradients below this magnitude are compared in absolute terms; saturated or
# collapsed instances otherwise turn float32 cancellation into huge ratios.
SCALE_FLOOR = 1e-3


@dataclass
class Case:
    """A differentiable function of some arrays plus a sampler for instances.

    ``sample(rng)`` returns the input arrays; ``fn(*tensors)`` returns the
    output tensor; ``wrt`` lists which inputs are differentiated.
    ``signature(*arrays)`` (optional) returns the discrete choices made by
    the forward pass, used to skip coordinates that cross a kink.
    ``accept(*arrays)`` (optional) rejects degenerate instances.
    """

    name: str
    sample: Callable[[np.random.Generator], list[np.ndarray]]
    fn: Callable[..., Tensor]
    wrt: tuple[int, ...] = (0,)
    signature: Callable[..., np.ndarray] | None = None
    accept: Callable[..., bool] | None = None


@dataclass(frozen=True)
class OpResult:
    name: str
    instances: int
    max_error: float
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _normal(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.standard_normal(shape)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> np.ndarray:
    x = rng.standard_normal(shape)
    while np.any(np.abs(x) < KINK_MARGIN):
        bad = np.abs(x) < KINK_MARGIN
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x


def _gates(tape: Tape) -> np.ndarray:
    """Which entries pass through unchanged, for every relu and clamp on ``tape``."""
    parts = []
    for entry in tape.entries:
        if entry.op in ("relu", "clamp_min"):
            parts.append((tape.tensors[entry.inputs[0]].data == tape.tensors[entry.output].data).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def _small_encoder() -> EncoderConfig:
    return EncoderConfig(image_size=10, filters=(2, 3), kernels=(3, 3), pool=2, global_pool=True,
                         input_norm="center", dim_h=4, head_hidden=6, dim_z=3)


def _encoder_inputs(rng: np.random.Generator, cfg: EncoderConfig, batch: int) -> list[np.ndarray]:
    arrays = [rng.uniform(0, 1, (batch, cfg.channels, cfg.image_size, cfg.image_size))]
    for shape, fan_in in cfg.param_shapes().values():
        arrays.append(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
    return arrays


def _encoder_weights(cfg: EncoderConfig, tensors: Sequence[Tensor]) -> dict[str, Tensor]:
    return dict(zip(cfg.param_shapes(), tensors))


def _embeddings_not_tiny(cfg: EncoderConfig, floor: float = 0.25) -> Callable[..., bool]:
    """Reject encoder instances whose outputs sit near the zero vector.

    Normalizing such a vector amplifies float32 cancellation in the layers
    below, which says nothing about the correctness of the backward pass.
    """
    def accept(x, *params):
        with ad.precision(np.float64):
            z = forward(_encoder_weights(cfg, [Tensor(p) for p in params]), Tensor(x), cfg).data
        return bool(np.linalg.norm(z, axis=1).min() > floor)
    return accept


def _rows_not_tiny(floor: float = 0.5) -> Callable[..., bool]:
    """Reject instances whose first input has a row shorter than ``floor``."""
    return lambda z, *rest: bool(np.linalg.norm(z, axis=1).min() > floor)


def _pairs(n: int) -> np.ndarray:
    return np.r_[np.arange(n, 2 * n), np.arange(n)]


def _meta_case(name: str, loss: str, distance: str) -> Case:
    def sample(rng):
        queries = rng.standard_normal((4, 3))
        protos = rng.standard_normal((3, 3)) * 2
        return [queries, protos, rng.integers(0, 3, size=4).astype(float)]

    def fn(queries, protos, targets):
        d = distance_matrix(queries, protos, distance)
        return loss_from_distances(d, targets.data.astype(int), loss)

    def signature(queries, protos, targets):
        diff = queries[:, None, :] - protos[None, :, :]
        d = np.sqrt((diff ** 2).sum(-1))
        return nearest_wrong(d, targets.astype(int))

    return Case(name, sample, fn, wrt=(0, 1), signature=signature)


def _episode_case(loss: str) -> Case:
    cfg = _small_encoder()
    n_params = len(cfg.param_shapes())
    averaging = np.array([[1.0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0]])
    targets = np.array([0, 1, 1])

    def distances(images, *params):
        weights = _encoder_weights(cfg, params)
        emb = embed(weights, images, cfg)
        protos = ad.matmul(Tensor(averaging), emb)
        return distance_matrix(ad.take(emb, slice(2, None)), protos, "euclidean")

    def fn(images, *params):
        return loss_from_distances(distances(images, *params), targets, loss)

    def accept(*arrays):
        with ad.precision(np.float64):
            d = distances(*[Tensor(a) for a in arrays]).data
        # distinct prototypes and no query sitting on one
        return bool(d.min() > 0.25)

    return Case(f"episode_loss[{loss}]", lambda rng: _encoder_inputs(rng, cfg, 5), fn,
                wrt=tuple(range(1, n_params - 1)), accept=accept)


def default_cases() -> list[Case]:
    enc = _small_encoder()
    n_params = len(enc.param_shapes())
    lse_mask = np.array([[1, 1, 0, 1], [0, 1, 1, 1], [1, 0, 1, 1]], dtype=bool)
    take_index = (np.array([0, 2, 2, 1]), np.array([1, 3, 3, 0]))
    cases = [
        Case("add", lambda r: [_normal(r, 3, 4), _normal(r, 4)], ad.add, (0, 1)),
        Case("sub", lambda r: [_normal(r, 3, 1), _normal(r, 3, 4)], ad.sub, (0, 1)),
        Case("mul", lambda r: [_normal(r, 3, 4), _normal(r, 1, 4)], ad.mul, (0, 1)),
        Case("relu", lambda r: [_away_from_zero(r, 4, 5)], ad.relu),
        Case("log", lambda r: [r.uniform(0.5, 2.0, (3, 4))], ad.log),
        Case("clamp_min", lambda r: [_away_from_zero(r, 4, 5)], lambda x: ad.clamp_min(x, 0.0)),
        Case("sum", lambda r: [_normal(r, 3, 4)], lambda x: ad.tsum(x, axis=1)),
        Case("mean", lambda r: [_normal(r, 3, 4)], ad.mean),
        Case("reshape", lambda r: [_normal(r, 3, 4)], lambda x: ad.reshape(x, (2, 6))),
        Case("transpose", lambda r: [_normal(r, 3, 4)], ad.transpose),
        Case("take", lambda r: [_normal(r, 3, 4)], lambda x: ad.take(x, take_index)),
        Case("concat", lambda r: [_normal(r, 2, 3), _normal(r, 4, 3)],
             lambda a, b: ad.concat([a, b], axis=0), (0, 1)),
        Case("logsumexp", lambda r: [_normal(r, 3, 4) * 3], lambda x: ad.logsumexp(x, axis=1, where=lse_mask)),
        Case("norm", lambda r: [_normal(r, 3, 4)], lambda x: ad.norm(x, axis=1)),
        Case("l2_normalize", lambda r: [_normal(r, 3, 4)], lambda x: ad.l2_normalize(x, axis=1)),
        Case("matmul", lambda r: [_normal(r, 3, 4), _normal(r, 4, 2)], ad.matmul, (0, 1)),
        Case("conv2d", lambda r: [_normal(r, 2, 5, 5), _normal(r, 3, 2, 3, 3)], ad.conv2d, (0, 1)),
        Case("conv2d[batch,stride2]", lambda r: [_normal(r, 2, 2, 7, 7), _normal(r, 3, 2, 3, 3)],
             lambda x, k: ad.conv2d(x, k, stride=2), (0, 1)),
        Case("avgpool2d", lambda r: [_normal(r, 2, 4, 6)], lambda x: ad.avgpool2d(x, 2)),
        Case("projection_head", lambda r: [_normal(r, 5, 4), _normal(r, 4, 6) * 0.7, _normal(r, 6, 3) * 0.5],
             lambda h, w1, w2: project(h, ProjectionHead(w1, w2)), (0, 1, 2)),
        Case("nt_xent", lambda r: [_normal(r, 6, 3)], lambda z: nt_xent_loss(z, _pairs(3), 0.5),
             accept=_rows_not_tiny()),
        Case("nt_xent[tau=0.07]", lambda r: [_normal(r, 4, 3)], lambda z: nt_xent_loss(z, _pairs(2), 0.07),
             accept=_rows_not_tiny()),
        Case("info_nce", lambda r: [_normal(r, 3, 4), _normal(r, 3, 4), _normal(r, 5, 4)],
             lambda q, k, neg: info_nce_loss(q, k, neg.data / np.linalg.norm(neg.data, axis=1, keepdims=True), 0.2),
             accept=_rows_not_tiny()),
        Case("encoder_nt_xent",
             lambda r: _encoder_inputs(r, enc, 4),
             lambda x, *p: nt_xent_loss(forward(_encoder_weights(enc, p), x, enc), _pairs(2), 0.5),
             tuple(range(1, n_params + 1)), accept=_embeddings_not_tiny(enc)),
        _meta_case("meta_loss[softmax-nll]", "softmax-nll", "euclidean"),
        _meta_case("meta_loss[softmax-nll,squared]", "softmax-nll", "squared-euclidean"),
        _meta_case("meta_loss[paper-eq10]", "paper-eq10", "euclidean"),
        _episode_case("softmax-nll"),
        _episode_case("paper-eq10"),
    ]
    return cases


def _evaluate(case: Case, arrays: list[np.ndarray], projection: np.ndarray) -> tuple[float, np.ndarray]:
    """Projected scalar and the discrete-choice signature, computed in 64-bit."""
    with ad.precision(np.float64), Tape() as tape:
        out = case.fn(*[Tensor(a, requires_grad=i in case.wrt) for i, a in enumerate(arrays)])
    sig = [_gates(tape)]
    if case.signature is not None:
        sig.append(np.asarray(case.signature(*arrays), dtype=float).ravel())
    value = float(np.sum(out.data.astype(np.float64) * projection))
    return value, np.concatenate([s.astype(float) for s in sig])


def check_instance(case: Case, arrays: list[np.ndarray], rng: np.random.Generator,
                   dtype=np.float32) -> tuple[float, int]:
    """Max scale-relative error and number of skipped coordinates for one instance."""
    h = STEP[np.dtype(dtype).type]
    with ad.precision(dtype):
        arrays = [np.asarray(a, dtype=dtype) for a in arrays]
        tensors = [Tensor(a, requires_grad=i in case.wrt) for i, a in enumerate(arrays)]
        with Tape() as tape:
            out = case.fn(*tensors)
            # Round the projection to storage precision so both sides use the same weights.
            projection = rng.standard_normal(out.shape).astype(dtype).astype(np.float64)
            loss = ad.tsum(ad.mul(out, Tensor(projection)))
        grads = tape.gradients(loss)
        _, base_sig = _evaluate(case, arrays, projection)

        worst_diff, worst_scale, skipped = 0.0, 0.0, 0
        for i in case.wrt:
            analytic = grads.get(tensors[i].node, np.zeros_like(arrays[i])).astype(np.float64)
            numeric = np.zeros_like(analytic)
            valid = np.ones(analytic.shape, dtype=bool)
            for idx in np.ndindex(arrays[i].shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[i][idx] += h
                minus[i][idx] -= h
                step = float(plus[i][idx]) - float(minus[i][idx])
                f_plus, sig_plus = _evaluate(case, plus, projection)
                f_minus, sig_minus = _evaluate(case, minus, projection)
                if not (np.array_equal(sig_plus, base_sig) and np.array_equal(sig_minus, base_sig)):
                    valid[idx] = False
                    skipped += 1
                    continue
                numeric[idx] = (f_plus - f_minus) / step
            worst_diff = max(worst_diff, float(np.max(np.abs(analytic - numeric)[valid], initial=0.0)))
            worst_scale = max(worst_scale, float(np.max(np.abs(analytic)[valid], initial=0.0)),
                              float(np.max(np.abs(numeric)[valid], initial=0.0)))
    return worst_diff / max(worst_scale, SCALE_FLOOR), skipped


def check_case(case: Case, instances: int, seed: int, dtype=np.float32) -> OpResult:
    start = time.perf_counter()
    worst, skipped = 0.0, 0
    for n in range(instances):
        rng = rngmod.stream(seed, "gradcheck", case.name, n)
        for _ in range(MAX_RESAMPLES):
            arrays = case.sample(rng)
            try:
                if case.accept is not None and not case.accept(*arrays):
                    continue
                with ad.precision(dtype):
                    case.fn(*[Tensor(a) for a in arrays])
                break
            except ad.DegenerateVectorError:
                # e.g. a tiny random encoder that maps a view to the zero vector
                continue
        else:
            raise RuntimeError(f"{case.name}: no usable instance in {MAX_RESAMPLES} draws")
        err, skip = check_instance(case, arrays, rng, dtype)
        worst, skipped = max(worst, err), skipped + skip
    return OpResult(case.name, instances, worst, skipped, time.perf_counter() - start)


@contextmanager
def corrupt(op: str, factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale the backward pass of every ``op`` node by ``factor``."""
    original = ad._record

    def record(name, inputs, out, backward):
        if name == op:
            inner = backward

            def backward(g):
                return [None if ig is None else ig * factor for ig in inner(g)]
        return original(name, inputs, out, backward)

    ad._record = record
    try:
        yield
    finally:
        ad._record = original


def run_suite(instances: int = 20, seed: int = 0, dtype=np.float32, cases: Sequence[Case] | None = None,
              corrupt_op: str | None = None) -> list[OpResult]:
    cases = default_cases() if cases is None else list(cases)
    if corrupt_op is None:
        return [check_case(c, instances, seed, dtype) for c in cases]
    with corrupt(corrupt_op):
        return [check_case(c, instances, seed, dtype) for c in cases]


def format_table(results: Sequence[OpResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'operation':<{width}}  instances  max_rel_error  skipped  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.instances:>9}  {r.max_error:>13.3e}  {r.skipped:>7}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
