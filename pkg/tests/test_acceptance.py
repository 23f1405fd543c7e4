"""Acceptance criteria 1-10. Each test records one PASS/FAIL line, printed in
the pytest terminal summary (or to stdout with ``python tests/test_acceptance.py``)."""

import functools
import time

import numpy as np
import pytest

from fedafa import autodiff as ad
from fedafa.augmentation import AugmentationConfig, augment_client, balanced_feature_batches, perturb_batch
from fedafa.config import DESK_DEFAULTS
from fedafa.data import (PartitionSpec, apply_longtail, balanced_batches, generate_synthetic, partition_indices)
from fedafa.experiment import build_benchmark, run_experiment, save_run, sweep, train_global
from fedafa.federation import SGDConfig, afa_loss, aggregate, personalize_fedafa
from fedafa.model import classifier_logits
from gradcheck import check, primitive_cases, split_model_case

SEEDS = (0, 1, 2)
VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])
    assert ok, VERDICTS[n]


# -- 1 ----------------------------------------------------------------------------

def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst, fine, bad = {}, 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for name, (build, arrays) in primitive_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check(build, arrays))
        build, arrays = split_model_case(rng)
        err = check(build, arrays)
        worst["split_model"] = max(worst.get("split_model", 0.0), err)
        if err >= 1e-4:
            # diagnostic only: a smaller step separates truncation error from a wrong gradient
            bad += 1
            fine = max(fine, check(build, arrays, eps=1e-5))
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    note = f"; {bad} split-model instances over tolerance, same instances at eps=1e-5: {fine:.1e}" if bad else ""
    verdict(1, max(worst.values()) < 1e-4 and dt < 10,
            f"worst rel err {worst[top]:.2e} ({top}) at eps=1e-3 over 100 instances x {len(worst)} cases"
            f"{note}, {dt:.1f}s")


# -- 2 ----------------------------------------------------------------------------

def test_criterion_02_perturbation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    decreased, worst_unit = 0, 0.0
    for _ in range(100):
        d, C = int(rng.integers(2, 10)), int(rng.integers(2, 6))
        v = [rng.normal(size=(d, C)), rng.normal(size=C)]
        h = rng.normal(size=(1, d))
        t = np.array([rng.integers(C)])
        y = ad.one_hot(t, C)

        g = ad.Graph()
        ht = g.tensor(h, requires_grad=True)
        grad = ad.input_gradient(ad.softmax_cross_entropy(classifier_logits(ht, v), y), ht)
        delta = -grad / np.linalg.norm(grad)
        worst_unit = max(worst_unit, abs(np.linalg.norm(delta) - 1.0))

        h1, _, _, _ = perturb_batch(h, t, v, steps=10, step_size=0.01, check_unit=True)
        h1, _, _, _ = perturb_batch(h, t, v, steps=1, step_size=0.01, check_unit=True)
        before = float(ad.softmax_cross_entropy(h @ v[0] + v[1], y).value)
        after = float(ad.softmax_cross_entropy(h1 @ v[0] + v[1], y).value)
        decreased += after < before
    dt = time.perf_counter() - t0
    verdict(2, decreased >= 99 and worst_unit < 1e-6 and dt < 5,
            f"loss decreased in {decreased}/100 trials, max | ||delta|| - 1 | = {worst_unit:.1e}, {dt:.2f}s")


# -- shared trained state -------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def bench_and_global(seed: int):
    cfg = DESK_DEFAULTS.replace(seed=seed)
    bench = build_benchmark(cfg)
    model, _ = train_global(cfg, bench)
    return cfg, bench, model


# -- 3 ----------------------------------------------------------------------------

def test_criterion_03_filter():
    cfg, bench, model = bench_and_global(0)
    violations, non_monotone, total = 0, 0, 0
    for c in bench.clients:
        sizes = []
        for p_d in (0.1, 0.5, 0.9):
            gen = augment_client(c.train, model.extractor, model.classifier, AugmentationConfig(p_d=p_d),
                                 np.random.default_rng([0, c.client_id]))
            conf = gen.confidence[gen.generated_mask]
            violations += int(np.sum(conf <= p_d))
            sizes.append(len(conf))
            total += len(conf)
        non_monotone += not (sizes[0] >= sizes[1] >= sizes[2])
    verdict(3, violations == 0 and non_monotone == 0 and total > 0,
            f"{total} generated features, {violations} with confidence <= p_d, "
            f"{non_monotone}/{len(bench.clients)} clients non-monotone in p_d")


# -- 4 ----------------------------------------------------------------------------

def test_criterion_04_loss_composition():
    cfg, bench, model = bench_and_global(0)
    sgd = SGDConfig(cfg.personal_lr, cfg.momentum, cfg.weight_decay)
    identical, generated = True, 0
    for c in bench.clients:
        a, info = personalize_fedafa(c, model, AugmentationConfig(), 0.0, 2, cfg.batch_size, sgd, seed=3)
        b, _ = personalize_fedafa(c, model, AugmentationConfig(), 0.0, 2, cfg.batch_size, sgd, seed=3,
                                  augment=False)
        generated += sum(info.generated)
        identical &= all(p.tobytes() == q.tobytes() for p, q in zip(a.classifier, b.classifier))

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        v = [p + 0.1 * rng.normal(size=p.shape) for p in model.classifier]
        h = rng.normal(size=(64, model.feature_dim))
        gen = (np.abs(h[:32]), rng.integers(model.num_classes, size=32))
        ori = (np.abs(h[32:]), rng.integers(model.num_classes, size=32))

        def grads(loss_fn):
            g = ad.Graph()
            t = [g.tensor(p, requires_grad=True) for p in v]
            out = ad.backward(loss_fn(t))
            return [out[x] for x in t]

        full = grads(lambda t: afa_loss(t, gen, ori, 1.0))
        only = grads(lambda t: ad.softmax_cross_entropy(classifier_logits(ad.Tensor(gen[0]), t),
                                                        ad.one_hot(gen[1], model.num_classes)))
        worst = max(worst, max(float(np.max(np.abs(x - y))) for x, y in zip(full, only)))
    verdict(4, identical and generated > 0 and worst < 1e-7,
            f"lambda=0 bit-identical: {identical} ({generated} features generated and ignored); "
            f"lambda=1 max |grad diff| {worst:.1e}")


# -- 5 ----------------------------------------------------------------------------

def test_criterion_05_aggregation():
    hand = float(aggregate([([np.array(1.0)], 1), ([np.array(2.0)], 2), ([np.array(3.0)], 7)])[0])
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(1, 8))
        shapes = [(3, 4), (4,), (4, 2), (2,)]
        ups = [([rng.normal(size=s) for s in shapes], int(rng.integers(1, 500))) for _ in range(k)]
        got = aggregate(ups)
        total = sum(n for _, n in ups)
        for i, s in enumerate(shapes):
            brute = np.zeros(s)
            for idx in np.ndindex(*s):
                acc = 0.0
                for params, n in ups:
                    acc += n * params[i][idx]
                brute[idx] = acc / total
            worst = max(worst, float(np.max(np.abs(brute - got[i]))))
    verdict(5, abs(hand - 2.6) < 1e-7 and worst < 1e-7,
            f"[1,2,7] case -> {hand:.10f}; 20 random sets max abs diff {worst:.1e}")


# -- 6 ----------------------------------------------------------------------------

def test_criterion_06_data_protocol():
    lt = apply_longtail(generate_synthetic(10, 4, 500, 0.5, seed=0), 100, seed=0)
    counts = lt.class_counts().tolist()
    conserved = 0
    for seed in range(20):
        parts = partition_indices(lt.labels, 10, PartitionSpec(10, 0.2, 100, seed))
        conserved += np.array_equal(np.sort(np.concatenate(parts)), np.arange(len(lt)))
    shard = lt.subset(np.flatnonzero(np.isin(lt.labels, [0, 3, 7, 9])))
    _, y = next(balanced_batches(shard, 10_000, seed=0))
    freq = np.bincount(y, minlength=10)[[0, 3, 7, 9]] / len(y)
    cfg, bench, model = bench_and_global(0)
    gen = augment_client(bench.clients[1].train, model.extractor, model.classifier, AugmentationConfig(), np.random.default_rng(0))
    _, gy = next(balanced_feature_batches(gen, 10_000, np.random.default_rng(0)))
    present = np.unique(gen.labels)
    gfreq = np.bincount(gy, minlength=gen.num_classes)[present] / len(gy)
    dev = max(np.max(np.abs(freq - 0.25)), np.max(np.abs(gfreq - 1 / len(present))))
    ok = counts == [500, 300, 180, 108, 65, 39, 23, 14, 8, 5] and conserved == 20 and dev <= 0.02
    verdict(6, ok, f"counts {counts}; conservation {conserved}/20 seeds; sampler max deviation {dev:.4f}")


# -- 7 / 8 ------------------------------------------------------------------------

METHODS = ("local", "fedavg_ft", "fedavg_ros", "fedafa", "fedafa_loc")


@functools.lru_cache(maxsize=None)
def comparison():
    t0 = time.perf_counter()
    out = {m: [] for m in METHODS}
    for seed in SEEDS:
        cfg, bench, _ = bench_and_global(seed)
        for m in METHODS:
            out[m].append(run_experiment(cfg.replace(method=m), bench).metrics)
    return out, time.perf_counter() - t0


def _mean(table, method):
    return float(np.mean([m.mean_acc for m in table[method]]))


def _halves(table, method):
    return np.mean([m.half_means() for m in table[method]], axis=0)


def test_criterion_07_directional_replication():
    table, dt = comparison()
    acc = {m: _mean(table, m) for m in METHODS}
    head_afa, tail_afa = _halves(table, "fedafa")
    head_ft, tail_ft = _halves(table, "fedavg_ft")
    order = acc["fedafa"] > acc["fedavg_ros"] >= acc["fedavg_ft"] > acc["local"]
    gap = acc["fedafa"] - acc["fedavg_ft"]
    ok = order and gap >= 5 and tail_afa - tail_ft >= 8 and head_ft - head_afa <= 3 and dt < 900
    verdict(7, ok, "mean acc " + ", ".join(f"{m} {a:.2f}" for m, a in acc.items())
            + f"; ordering {'holds' if order else 'violated'}; fedafa - ft {gap:+.2f}; "
            f"tail {tail_afa - tail_ft:+.2f}, head {head_afa - head_ft:+.2f}; {dt:.0f}s")


def test_criterion_08_ablation():
    table, _ = comparison()
    afa, loc = _mean(table, "fedafa"), _mean(table, "fedafa_loc")
    verdict(8, afa >= loc - 1.0, f"fedafa {afa:.2f} vs fedafa_loc {loc:.2f} (diff {afa - loc:+.2f}, tie band 1)")


# -- 9 ----------------------------------------------------------------------------

def test_criterion_09_sweep_shape():
    t0 = time.perf_counter()
    lam_vals = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    pd_vals = [0.1, 0.3, 0.5, 0.7, 0.9]
    lam = [r.mean_acc for r in sweep(DESK_DEFAULTS, "lambda", lam_vals, SEEDS)]
    pd = [r.mean_acc for r in sweep(DESK_DEFAULTS, "p_d", pd_vals, SEEDS)]
    dt = time.perf_counter() - t0
    lam_peak = int(np.argmax(lam))
    pd_peak = int(np.argmax(pd))
    lam_ok = 0 < lam_peak < len(lam_vals) - 1 and lam[lam_peak] > max(lam[0], lam[-1])
    pd_ok = 0 < pd_peak < len(pd_vals) - 1 and pd[pd_peak] > max(pd[0], pd[-1])
    verdict(9, lam_ok and pd_ok and dt < 2700,
            "lambda " + " ".join(f"{v}:{a:.2f}" for v, a in zip(lam_vals, lam))
            + " | p_d " + " ".join(f"{v}:{a:.2f}" for v, a in zip(pd_vals, pd)) + f"; {dt:.0f}s")


# -- 10 ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    files = ("rounds.csv", "final.csv", "per_class.csv")
    blobs = []
    for i, workers in enumerate((1, 1, 4)):
        cfg = DESK_DEFAULTS.replace(seed=5, workers=workers)
        res = run_experiment(cfg, use_cache=False)
        save_run(tmp_path / str(i), res, build_benchmark(cfg))
        blobs.append([(tmp_path / str(i) / f).read_bytes() for f in files])
    same = blobs[0] == blobs[1] == blobs[2]
    verdict(10, same, f"{len(files)} metrics CSVs byte-identical across 2 serial runs and a 4-worker run: {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
