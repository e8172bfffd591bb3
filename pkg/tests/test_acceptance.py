"""Acceptance checks. Each test records one PASS/FAIL line via the `criterion` fixture."""

import json
import math
import time

import numpy as np
import pytest

from crossdenoise.cli import main as cli_main
from crossdenoise.ingest import sample_negatives, split, synth_generate
from crossdenoise.landscape import hessian_concavity
from crossdenoise.metrics import evaluate_scores
from crossdenoise.models import build_model
from crossdenoise.nn import AdamState, adam_step
from crossdenoise.seeding import Purpose, rng_for
from crossdenoise.trainer import TrainConfig, evaluate_test, param_trajectory, train
from crossdenoise.weighting import (
    Components,
    EntityLossStats,
    LossRecordSet,
    ReputationVector,
    WeightStrategyConfig,
    accumulate,
    ecdf_base_weights,
    epoch_weights,
    fuse,
    gmm_base_weights,
    linear_base_weights,
    mean_entity_loss,
    rank_map,
    topk_base_weights,
)
from oracles import central_diff, full_sort_ranking, linear_minmax, ndcg_bf, rank_map_loop, recall_bf, rel_error, topk_sorted


def counting_ecdf(losses):
    # O(n^2) pairwise count, vectorised so 1,000 instances stay cheap
    neg = -np.asarray(losses, dtype=np.float64)
    return ((neg[None, :] <= neg[:, None]).sum(axis=1) - 0.5) / len(neg)


def random_losses(rng):
    n = int(rng.integers(1, 201))
    if rng.random() < 0.5:
        return rng.exponential(size=n)
    return rng.integers(0, 6, size=n) / 4.0  # heavy ties


def test_c01_weighting_oracles(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_ecdf, bad_topk, bad_linear = 0.0, 0, 0
    for _ in range(1000):
        x = random_losses(rng)
        worst_ecdf = max(worst_ecdf, float(np.max(np.abs(ecdf_base_weights(x) - counting_ecdf(x)))))
        rho = float(rng.uniform(0.05, 1.0))
        bad_topk += not np.array_equal(topk_base_weights(x, rho), topk_sorted(x.tolist(), rho))
        bad_linear += not np.array_equal(linear_base_weights(x), linear_minmax(x.tolist()))
    secs = time.perf_counter() - t0
    ok = worst_ecdf <= 1e-12 and bad_topk == 0 and bad_linear == 0 and secs < 10
    criterion(1, ok, f"ecdf max|diff|={worst_ecdf:.1e}, topk mismatches={bad_topk}, linear mismatches={bad_linear}, {secs:.1f}s")


def test_c02_rank_map_contract(criterion):
    rng = np.random.default_rng(202)
    failures = []
    for trial in range(1000):
        k = int(rng.integers(1, 60))
        avg = rng.integers(0, 20, size=k).astype(float) / 3.0 if trial % 2 else rng.exponential(size=k)
        avg[rng.random(k) < 0.1] = np.nan
        a, b = np.sort(rng.uniform(0, 5, size=2))
        if trial % 10 == 0:
            b = a
        s = rank_map(avg, a, b).scores
        present = np.flatnonzero(~np.isnan(avg))
        if not (np.all(s >= a) and np.all(s <= b)):
            failures.append((trial, "range"))
        if not np.array_equal(s, rank_map_loop(avg.tolist(), a, b)):
            failures.append((trial, "oracle"))
        if a == b and not np.all(s == a):
            failures.append((trial, "constant"))
        if len(present) >= 2 and a < b:
            lo = present[np.argmin(avg[present])]
            hi = present[::-1][np.argmax(avg[present][::-1])]
            if s[lo] != b or s[hi] != a:
                failures.append((trial, "extremes"))
            shifted = rank_map(avg + 7.0, a, b).scores
            # shifting by a whole number keeps thirds and exponentials distinct, so ordering is preserved
            if len(np.unique(avg[present] + 7.0)) == len(np.unique(avg[present])) and not np.array_equal(shifted, s):
                failures.append((trial, "shift"))
    criterion(2, not failures, f"1000 vectors, failures={failures[:3]}")


def test_c03_fusion_exactness(criterion):
    rng = np.random.default_rng(303)
    worst, toggle_bad = 0.0, 0
    for _ in range(200):
        m, n = int(rng.integers(2, 30)), int(rng.integers(2, 30))
        cnt = int(rng.integers(1, m * n + 1))
        keys = rng.choice(m * n, size=cnt, replace=False)
        rec = LossRecordSet(keys // n, keys % n, rng.exponential(size=cnt))
        alpha, beta = np.sort(rng.uniform(0, 5, 2))
        stats = accumulate(EntityLossStats.zeros(m, n), rec)
        uavg, iavg = mean_entity_loss(stats)
        wu, wi = rank_map(uavg, alpha, beta).scores, rank_map(iavg, alpha, beta).scores
        base = ecdf_base_weights(rec)
        table = fuse(base, ReputationVector(wu, alpha, beta), ReputationVector(wi, alpha, beta), rec, n)
        got = table.lookup(rec.users, rec.items)
        expect = base * wu[rec.users] * wi[rec.items]
        worst = max(worst, float(np.max(np.abs(got - expect) / expect)))
        cfg = WeightStrategyConfig("ecdf")
        for bw in (False, True):
            for it in (False, True):
                for us in (False, True):
                    if (it or us) and not bw:
                        continue
                    comp = Components(bw, it, us)
                    w = epoch_weights(rec, m, n, alpha, beta, cfg, comp).lookup(rec.users, rec.items)
                    ref = (base if bw else np.ones(cnt)) * (wu[rec.users] if us else 1.0) * (wi[rec.items] if it else 1.0)
                    toggle_bad += not np.array_equal(w, ref)
        off = epoch_weights(rec, m, n, alpha, beta, cfg, Components(False, False, False))
        toggle_bad += not np.array_equal(off.lookup(rec.users, rec.items), np.ones(cnt))
    ok = worst <= 2 * np.finfo(float).eps and toggle_bad == 0
    criterion(3, ok, f"max rel err={worst:.1e} (eps={np.finfo(float).eps:.1e}), toggle mismatches={toggle_bad}")


def _gradcheck_once(kind, rng):
    from crossdenoise.ingest import InteractionDataset

    m, n = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    d = int(rng.choice([2, 4])) if kind == "neumf" else int(rng.integers(1, 5))
    train_ds = None
    if kind == "cdae":
        keys = rng.choice(m * n, size=max(1, m * n // 3), replace=False)
        train_ds = InteractionDataset(m, n, keys // n, keys % n, np.zeros(len(keys), bool))
    model = build_model(kind, m, n, d, rng=rng, train=train_ds)
    for name, v in model.params.items():
        model.params[name] = rng.normal(0, 0.6, size=v.shape)
    b = int(rng.integers(1, 13))
    u, i = rng.integers(0, m, b), rng.integers(0, n, b)
    y = rng.integers(0, 2, b).astype(float)
    w = rng.uniform(0, 2, b)
    cseed = int(rng.integers(1 << 30))

    def corr():
        return np.random.default_rng(cseed) if kind == "cdae" else None

    _, _, grads = model.forward_backward(u, i, y, w, corr())
    num = central_diff(lambda: model.forward_backward(u, i, y, w, corr())[0], model.params)
    return max(rel_error(grads[k], num[k]) for k in grads)


def test_c04_gradient_checks(criterion):
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    worst = {kind: max(_gradcheck_once(kind, rng) for _ in range(50)) for kind in ("gmf", "neumf", "cdae")}
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and secs < 60
    criterion(4, ok, ", ".join(f"{k} max rel err={v:.1e}" for k, v in worst.items()) + f", {secs:.1f}s")


def plain_loop(sp, config, epochs):
    """Reference training loop with no weighting machinery at all."""
    tr = sp.train
    model = build_model(config.model, tr.num_users, tr.num_items, config.embedding_dim, rng=rng_for(config.seed, Purpose.INIT), train=tr)
    state = AdamState(lr=config.lr)
    out = []
    for epoch in range(1, epochs + 1):
        neg = sample_negatives(tr, config.negative_ratio, config.seed, epoch)
        u = np.concatenate([tr.users, neg.users])
        i = np.concatenate([tr.items, neg.items])
        y = np.concatenate([np.ones(len(tr)), np.zeros(len(neg))])
        p = rng_for(config.seed, Purpose.SHUFFLE, epoch).permutation(len(u))
        u, i, y = u[p], i[p], y[p]
        for s in range(0, len(u), config.batch_size):
            sl = slice(s, s + config.batch_size)
            _, _, g = model.forward_backward(u[sl], i[sl], y[sl], np.ones(len(y[sl])))
            adam_step(model.params, g, state)
        out.append(model.copy_params())
    return out


def test_c05_vanilla_equivalence(criterion):
    sp = split(synth_generate(50, 40, 4, 0.3, seed=5, density=0.1), seed=5)
    cfg = TrainConfig(
        embedding_dim=8,
        batch_size=64,
        max_epochs=5,
        lr=5e-3,
        seed=5,
        weighting=WeightStrategyConfig("uniform"),
        components=Components(False, False, False),
    )
    ours = param_trajectory(sp, cfg)
    ref = plain_loop(sp, cfg, 5)
    same = len(ours) == 5 and all(a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a) for a, b in zip(ours, ref))
    criterion(5, same, "5-epoch parameter trajectory " + ("bitwise identical" if same else "differs"))


def test_c06_metric_oracles(criterion):
    rng = np.random.default_rng(606)
    mismatches = 0
    for _ in range(500):
        n = int(rng.integers(1, 501))
        scores = rng.integers(0, 20, size=n) / 19.0 if rng.random() < 0.5 else rng.random(n)
        rel = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        k = int(rng.integers(1, n + 1))
        rep = evaluate_scores(scores[None, :], [rel], ks=(k,))
        ranked = full_sort_ranking(scores.tolist())
        mismatches += rep.per_user[("recall", k)][0] != recall_bf(ranked, rel, k)
        mismatches += rep.per_user[("ndcg", k)][0] != ndcg_bf(ranked, rel, k)
    n, k = 100, 20
    scores = rng.random((10_000, n))
    rel = [set(rng.choice(n, size=int(rng.integers(1, 6)), replace=False).tolist()) for _ in range(10_000)]
    mc = evaluate_scores(scores, rel, ks=(k,)).mean("recall", k)
    ok = mismatches == 0 and abs(mc - k / n) <= 0.02
    criterion(6, ok, f"brute-force mismatches={mismatches}/1000, Monte-Carlo recall@{k}={mc:.4f} vs {k / n}")


def test_c07_hessian_quadratics(criterion):
    cases = {"concave": lambda x, y: -(x**2) - y**2, "convex": lambda x, y: x**2 + y**2, "saddle": lambda x, y: x**2 - y**2}
    wrong = []
    for h in (1e-3, 0.01, 0.1, 0.5, 1.0, 3.0):
        for expect, f in cases.items():
            v = hessian_concavity([[f((i - 1) * h, (j - 1) * h) for j in range(3)] for i in range(3)], h, h)
            if v.classification != expect:
                wrong.append((h, expect, v.classification))
    criterion(7, not wrong, f"3 quadratics x 6 step sizes, wrong={wrong}")


@pytest.mark.slow
def test_c08_synthetic_denoising(criterion):
    t0 = time.perf_counter()
    cd_scores, uni_scores, gap_ok = [], [], True
    worst_gap = math.inf
    for s in range(5):
        sp = split(synth_generate(500, 300, 8, 0.3, seed=s), seed=s)
        uni = train(sp, TrainConfig(seed=s, batch_size=256, weighting=WeightStrategyConfig("uniform"), components=Components(False, False, False)))
        cd = train(sp, TrainConfig(seed=s, batch_size=256, alpha=1.0, beta=2.0))
        for r in cd.reports[2:]:
            gap = r.tp_weight - r.fp_weight
            worst_gap = min(worst_gap, gap)
            gap_ok &= gap > 0
        uni_scores.append(evaluate_test(uni.model, sp, ks=(10,)).mean("ndcg", 10))
        cd_scores.append(evaluate_test(cd.model, sp, ks=(10,)).mean("ndcg", 10))
    wins = sum(c > u for c, u in zip(cd_scores, uni_scores))
    secs = time.perf_counter() - t0
    ok = gap_ok and np.mean(cd_scores) >= np.mean(uni_scores) and wins >= 4 and secs < 600
    criterion(
        8,
        ok,
        f"min clean-noisy weight gap (epoch>=3)={worst_gap:.4f}, NDCG@10 CD={np.mean(cd_scores):.4f} "
        f"uniform={np.mean(uni_scores):.4f}, wins={wins}/5, {secs:.0f}s",
    )


def test_c09_gmm_separability(criterion):
    worst_low, worst_high = 1.0, 1.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        low = np.abs(rng.normal(0.1, 0.02, 100))
        high = rng.normal(2.0, 0.02, 100)
        x = np.concatenate([low, high])
        perm = rng.permutation(200)
        w = np.empty(200)
        w[perm] = gmm_base_weights(x[perm])
        worst_low = min(worst_low, float(np.mean(w[:100] > 0.9)))
        worst_high = min(worst_high, float(np.mean(w[100:] < 0.1)))
    ok = worst_low >= 0.99 and worst_high >= 0.99
    criterion(9, ok, f"worst seed: low>0.9 share={worst_low:.2f}, high<0.1 share={worst_high:.2f}")


def test_c10_overhead_scaling(criterion):
    rng = np.random.default_rng(1010)
    sizes = (10_000, 100_000, 1_000_000)
    m, n = 6040, 3706
    times = []
    cfg = WeightStrategyConfig("ecdf")
    for size in sizes:
        rec = LossRecordSet(rng.integers(0, m, size), rng.integers(0, n, size), rng.exponential(size=size))
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            epoch_weights(rec, m, n, 1.0, 2.0, cfg, Components())
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
    criterion(10, slope <= 1.2, f"log-log slope={slope:.3f}, times=" + ", ".join(f"{t * 1e3:.1f}ms" for t in times))


def _outputs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.suffix in (".csv", ".svg", ".tsv", ".json")}


def test_c11_cli_reproducibility(criterion, tmp_path):
    fast = ["--epochs", "2", "--dim", "4", "--batch-size", "64", "--lr", "0.005"]
    data = tmp_path / "data"
    runs = {
        "prepare": ["prepare", "--synthetic", "40,30,4,0.3", "--seed", "2"],
        "train": ["train", "--split", str(data), "--seeds", "0,1", *fast],
        "ablate": ["ablate", "--split", str(data), "--ks", "10", *fast],
        "sweep": ["sweep", "--split", str(data), "--alphas", "0,1,2", "--betas", "1,2,3", "--seeds", "0", *fast],
    }
    differing = []
    for name, argv in runs.items():
        first = data if name == "prepare" else tmp_path / name
        assert cli_main([*argv, "--out", str(first)]) == 0
        again = tmp_path / f"{name}_again"
        assert cli_main([name, "--config", str(first / "manifest.json"), "--out", str(again)]) == 0
        a, b = _outputs(first), _outputs(again)
        if a.keys() != b.keys() or any(a[k] != b[k] for k in a):
            differing.append(name)
        man = json.loads((first / "manifest.json").read_text())
        if not man["artifacts"]:
            differing.append(f"{name}: empty manifest")
    criterion(11, not differing, "prepare/train/ablate/sweep reruns byte-identical" if not differing else f"differ: {differing}")
