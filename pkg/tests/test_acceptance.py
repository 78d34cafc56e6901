"""Acceptance suite: one PASS/FAIL line per primary criterion.

The lines are printed in the "acceptance criteria" section at the end of the
pytest run. Thresholds and tolerances are pinned here and never adjusted to
fit an outcome; a criterion that is not met is marked ``xfail(strict=True)``
with the measured value, so it stays visible and turns the suite red the
moment it starts passing without the marker being removed.
"""

import collections
import hashlib
import math
import shutil
import time

import numpy as np
import pytest
from conftest import DESK, TINY, record

from protomoco import checkpoint, cli, contrastive, fewshot, gradcheck, pipeline
from protomoco.autodiff import ParameterSet, SgdConfig
from protomoco.config import dump, validate
from protomoco.data import synth_images, to_unit
from protomoco.metrics import ConfusionCounts, ScoredSample, accuracy, roc_auc
from protomoco.models import init_params
from protomoco.rng import stream

# pinned thresholds
GRAD_TOL, GRAD_SECONDS = 1e-3, 120.0
LOSS_TOL = 1e-5
POSTERIOR_TOL = 1e-6
E2E_ACCURACY, E2E_MARGIN, E2E_SECONDS = 0.85, 0.10, 15 * 60.0
GAP_THRESHOLD = 0.2
AUC_TOL = 1e-9
SHOT_SEEDS = range(10)


def test_gradient_suite(capsys):
    start = time.perf_counter()
    code = cli.main(["gradcheck", "--set", "gradcheck.instances=20"])
    seconds = time.perf_counter() - start
    table = capsys.readouterr().out
    rows = [line.split() for line in table.splitlines()[1:]]
    names = [r[0] for r in rows]
    worst = max(float(r[2]) for r in rows)
    expected = {c.name for c in gradcheck.default_cases()}
    ok = (code == 0 and set(names) == expected and all(r[-1] == "pass" for r in rows)
          and worst < GRAD_TOL and seconds < GRAD_SECONDS
          and {"meta_loss[softmax-nll]", "meta_loss[paper-eq10]"} <= set(names))
    record("gradient suite", ok, f"{len(rows)} ops x 20 instances, worst rel. err {worst:.2e} "
           f"(< {GRAD_TOL:g}), exit {code}, {seconds:.1f}s (< {GRAD_SECONDS:.0f}s)")
    assert ok


def _direct_nt_xent(z, pair, tau):
    u = [v / math.sqrt(sum(x * x for x in v)) for v in np.asarray(z, float)]
    total = 0.0
    for i in range(len(u)):
        den = sum(math.exp(float(u[i] @ u[k]) / tau) for k in range(len(u)) if k != i)
        total -= math.log(math.exp(float(u[i] @ u[pair[i]]) / tau) / den)
    return total / len(u)


def _direct_info_nce(q, k, negatives, tau):
    unit = [v / math.sqrt(sum(x * x for x in v)) for v in np.asarray([q, k, *negatives], float)]
    pos = math.exp(float(unit[0] @ unit[1]) / tau)
    den = pos + sum(math.exp(float(unit[0] @ n) / tau) for n in unit[2:])
    return -math.log(pos / den)


def test_loss_oracles():
    errors = {
        "nt_xent N=1": abs(contrastive.nt_xent_loss([[0.3, 1.0], [2.0, -1.0]], [1, 0], 0.07).item()),
        "nt_xent identical": abs(contrastive.nt_xent_loss(np.ones((4, 5)), [1, 0, 3, 2], 0.07).item()
                                 - math.log(3)),
    }
    # every similarity equals cos(45 deg)
    queue = contrastive.KeyQueue(3, 3).enqueue([[1.0, 1.0, 0], [1.0, 0, 1.0], [1.0, -1.0, 0]])
    errors["info_nce uniform K=3"] = abs(
        contrastive.info_nce_loss([1.0, 0, 0], [1.0, 0, -1.0], queue, 0.07).item() - math.log(4))
    fixed_z = [[1, 0, 0.5], [0.6, 0.5, 0.1], [-0.3, 1, 0], [0.4, 0.7, -0.6]]
    errors["nt_xent fixed"] = abs(contrastive.nt_xent_loss(fixed_z, [1, 0, 3, 2], 0.07).item()
                                  - 0.5649288664702067)
    gen = stream(0, "acceptance", "losses")
    worst_direct = 0.0
    for _ in range(50):
        n = int(gen.integers(1, 5))
        z = gen.standard_normal((2 * n, 6))
        pair = np.arange(2 * n) ^ 1
        tau = float(gen.uniform(0.05, 1.0))
        worst_direct = max(worst_direct, abs(contrastive.nt_xent_loss(z, pair, tau).item()
                                             - _direct_nt_xent(z, pair, tau)))
        q, k = gen.standard_normal((2, 6))
        negatives = gen.standard_normal((int(gen.integers(1, 12)), 6))
        queue = contrastive.KeyQueue(16, 6).enqueue(negatives)
        worst_direct = max(worst_direct, abs(contrastive.info_nce_loss(q, k, queue, tau).item()
                                             - _direct_info_nce(q, k, negatives, tau)))
    errors["direct summation (100 instances)"] = worst_direct
    ok = all(e <= LOSS_TOL for e in errors.values())
    record("loss oracles", ok, ", ".join(f"{k} err {v:.1e}" for k, v in errors.items()) + f" (tol {LOSS_TOL:g})")
    assert ok


def test_momentum_and_queue_laws(tmp_path):
    items = synth_images(100, seed=42)
    images = np.stack([to_unit(p) for p, *_ in items])
    cfg = validate({**DESK})
    model, spec = cfg.encoder(), cfg.augmentation()

    frozen = contrastive.MomentumPair.from_query(init_params(model, 42), 1.0)
    before = frozen.theta_k.arrays()
    pcfg = contrastive.PretrainConfig(batch_size=16, queue_k=256, m=1.0, sgd=SgdConfig(0.03, schedule=()))
    contrastive.pretrain_epoch(images, frozen, contrastive.KeyQueue(256, model.dim_z), spec, pcfg, model, 42, 0)
    freeze_ok = all(np.array_equal(frozen.theta_k[n].data, a) for n, a in before.items())
    moved = any(not np.array_equal(frozen.theta_q[n].data, a) for n, a in before.items())

    copy = contrastive.MomentumPair.from_query(init_params(model, 1), 0.0)
    copy.theta_k = init_params(model, 2)
    contrastive.pretrain_epoch(images[:32], copy, contrastive.KeyQueue(256, model.dim_z), spec,
                               contrastive.PretrainConfig(batch_size=16, m=0.0), model, 42, 0)
    copy_ok = all(np.array_equal(copy.theta_k[n].data, copy.theta_q[n].data) for n in copy.theta_q.names())

    gen = stream(0, "acceptance", "queue")
    capacity = 97
    queue = contrastive.KeyQueue(capacity, 4)
    reference = collections.deque(maxlen=capacity)
    inserted, fifo_ok = 0, True
    while inserted < 10_000:
        size = int(gen.integers(1, 40))
        batch = gen.standard_normal((size, 4))
        queue.enqueue(batch)
        reference.extend(batch / np.linalg.norm(batch, axis=1, keepdims=True))
        inserted += size
        entries = queue.entries()
        fifo_ok &= (len(queue) == min(capacity, inserted) and
                    np.allclose(entries, np.array(reference), atol=1e-6) and
                    np.allclose(np.linalg.norm(entries, axis=1), 1, atol=1e-5))
    ok = freeze_ok and moved and copy_ok and fifo_ok
    record("momentum/queue laws", ok, f"m=1 theta_k bit-identical over a 200-image epoch: {freeze_ok}; "
           f"m=0 copies theta_q: {copy_ok}; FIFO/capacity over {inserted} insertions: {fifo_ok}")
    assert ok


def test_prototypical_correctness():
    gen = stream(0, "acceptance", "proto")
    agree = 0
    worst_sum = 0.0
    invariant = True
    for _ in range(1000):
        ways = int(gen.integers(2, 6))
        shots = int(gen.integers(1, 5))
        dim = int(gen.integers(2, 9))
        support = {c: [fewshot.LabeledSample(gen.standard_normal((1, 1, dim)).astype(np.float32), c, f"s{c}", 0)
                       for _ in range(shots)] for c in gen.permutation(20)[:ways].tolist()}
        query = gen.standard_normal((1, 1, dim)).astype(np.float32)
        psi = lambda x: x.reshape(len(x), -1).astype(np.float64)  # noqa: E731
        predicted = fewshot.predict(query, support, psi)
        # brute force: nearest centroid by explicit loops, ties to the lowest class id
        best = None
        for c in sorted(support):
            center = [sum(float(s.image.ravel()[j]) for s in support[c]) / shots for j in range(dim)]
            dist = math.sqrt(sum((float(query.ravel()[j]) - center[j]) ** 2 for j in range(dim)))
            if best is None or dist < best[0]:
                best = (dist, c)
        agree += predicted == best[1]
        protos = fewshot.PrototypeSet({c: psi(np.stack([s.image for s in v])).mean(axis=0)
                                       for c, v in support.items()})
        post = fewshot.class_posterior(psi(query)[0], protos)
        worst_sum = max(worst_sum, abs(sum(post.values()) - 1))
        d = fewshot.distance_to(psi(query), protos.matrix())[0]
        for transform in (np.square, np.log1p, lambda x: np.exp(x) - 1, lambda x: 3 * x + 2):
            invariant &= int(np.argmin(transform(d))) == int(np.argmin(d))
        invariant &= protos.classes[int(np.argmax(list(post[c] for c in protos.classes)))] == best[1]
    ok = agree == 1000 and worst_sum <= POSTERIOR_TOL and invariant
    record("prototypical correctness", ok, f"{agree}/1000 agree with brute force, posterior sum err "
           f"{worst_sum:.1e} (tol {POSTERIOR_TOL:g}), monotone-transform argmax invariant: {invariant}")
    assert ok


def test_end_to_end_desk_run(desk_run):
    pre = desk_run["pretrained"].metric("accuracy")
    rand = desk_run["random"].metric("accuracy")
    seconds = desk_run["seconds"]
    ok = pre >= E2E_ACCURACY and pre - rand >= E2E_MARGIN and seconds < E2E_SECONDS
    record("end-to-end seed 42", ok, f"pretrained {pre:.4f} (>= {E2E_ACCURACY}), random init {rand:.4f}, "
           f"margin {pre - rand:+.4f} (>= {E2E_MARGIN}), {seconds:.0f}s (< {E2E_SECONDS:.0f}s)")
    assert ok


@pytest.mark.slow
def test_shot_scaling(tmp_path):
    one, four = [], []
    for seed in SHOT_SEEDS:
        cfg = validate({**DESK, "run.seed": seed, "data.root": str(tmp_path / f"data{seed}"),
                        "run.out": str(tmp_path / f"s{seed}")})
        pipeline.cmd_synth(cfg)
        ckpt = pipeline.cmd_pretrain(cfg).checkpoint
        one.append(pipeline.cmd_eval(cfg, ckpt).metric("accuracy"))
        four.append(pipeline.cmd_eval(cfg.replace(meta__shots=4, run__out=str(tmp_path / f"s{seed}-4")),
                                      ckpt).metric("accuracy"))
    ok = np.mean(four) >= np.mean(one)
    record("shot scaling", ok, f"mean accuracy over {len(one)} seeds: C=1 {np.mean(one):.4f}, "
           f"C=4 {np.mean(four):.4f}")
    assert ok


HELD_OUT_SEED = 1000


@pytest.mark.xfail(strict=True, reason="measured gap is below 0.2 for the validated configuration; "
                                       "see README, Known limitations")
def test_similarity_gap(desk_run):
    cfg = desk_run["cfg"]
    model = cfg.encoder()
    theta_q = ParameterSet.from_arrays(checkpoint.load(desk_run["pretrain"].checkpoint))
    pair = contrastive.MomentumPair.from_query(theta_q, cfg["pretrain.m"])
    held_out = np.stack([to_unit(p) for p, *_ in synth_images(16, groups_per_class=2, seed=HELD_OUT_SEED)])
    pos, neg = contrastive.similarity_gap(held_out, pair, cfg.augmentation(), model, seed=cfg["run.seed"])
    ok = pos - neg >= GAP_THRESHOLD
    record("similarity gap", ok, f"held-out batch of {len(held_out)}: positive {pos:.4f}, negative {neg:.4f}, "
           f"gap {pos - neg:.4f} (>= {GAP_THRESHOLD})")
    assert ok


def test_metrics_oracles():
    gen = stream(0, "acceptance", "auc")
    worst = 0.0
    for _ in range(100):
        n = int(gen.integers(2, 60))
        truth = gen.integers(0, 2, n).astype(bool)
        truth[0], truth[1] = True, False
        scores = np.round(gen.standard_normal(n), int(gen.integers(0, 3)))  # rounding forces ties
        samples = [ScoredSample(float(s), bool(t)) for s, t in zip(scores, truth)]
        pos, neg = scores[truth], scores[~truth]
        pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        worst = max(worst, abs(roc_auc(samples) - pairs / (len(pos) * len(neg))))
    truth = np.array([0, 1] * 50)
    degenerate = accuracy(ConfusionCounts.from_predictions(np.zeros(100, int), truth))
    ok = worst <= AUC_TOL and degenerate == 0.5
    record("metrics oracles", ok, f"roc_auc vs Mann-Whitney on 100 sets, worst err {worst:.1e} (tol {AUC_TOL:g}); "
           f"always-0 accuracy on balanced data {degenerate!r}")
    assert ok


def _digests(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timing.txt"}


def test_determinism(tmp_path, desk_run, capsys):
    small = {**TINY, "data.root": str(tmp_path / "run" / "data"), "run.out": str(tmp_path / "run" / "out"),
             "run.seed": 7, "meta.episodes": 10, "eval.episodes": 10}
    cfg_file = tmp_path / "small.cfg"
    cfg_file.write_text(dump(validate(small)))
    root = tmp_path / "run"
    out = root / "out"
    runs, tables = [], []
    for _ in range(2):
        shutil.rmtree(root, ignore_errors=True)
        codes = [cli.main(["synth-data", "--config", str(cfg_file), "--out", str(root / "data")]),
                 cli.main(["pretrain", "--config", str(cfg_file)]),
                 cli.main(["fewshot", "--config", str(cfg_file), "--checkpoint", str(out / "pretrain.ckpt")]),
                 cli.main(["eval", "--config", str(cfg_file), "--checkpoint", str(out / "fewshot.ckpt")])]
        capsys.readouterr()
        codes.append(cli.main(["gradcheck", "--config", str(cfg_file)]))
        tables.append(capsys.readouterr().out)
        assert codes == [0] * 5
        runs.append(_digests(root))
    same_small = runs[0] == runs[1] and tables[0] == tables[1]

    cfg = desk_run["cfg"].replace(run__out=str(tmp_path / "desk-rerun"))
    rerun = pipeline.cmd_pretrain(cfg)
    same_desk = (rerun.checkpoint.read_bytes() == desk_run["pretrain"].checkpoint.read_bytes()
                 and rerun.log.read_bytes() == desk_run["pretrain"].log.read_bytes())
    ok = same_small and same_desk
    record("determinism", ok, f"{len(runs[0])} files from synth-data/pretrain/fewshot/eval plus the gradcheck "
           f"table byte-identical on rerun: {same_small}; seed-42 pretrain checkpoint and log: {same_desk}")
    assert ok
