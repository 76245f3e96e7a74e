"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from softprune.analysis import count_flops, layerwise_reduction, speedup_report
from softprune.gradcheck import run_suite, tolerance
from softprune.models import BlockSpec, build_plain_cnn, build_resnet
from softprune.pruning import (
    MaskState,
    PruneConfig,
    extract_compact,
    filter_norm,
    prune_step,
    rate_at,
    select_prune_set,
    solve_schedule,
)
from softprune.train import TrainConfig, load_datasets, train, train_epoch

FIXTURE = {"kind": "synthetic", "classes": 10, "n": 200, "dim": 16, "seed": 0}
ARCH = {"arch": "resnet", "n": 1, "widths": [16, 32, 64]}


def fixture_config(epochs=30, prune=None, seed=0):
    return TrainConfig(
        arch=ARCH, dataset=FIXTURE, epochs=epochs, batch_size=64, seed=seed, prune=prune, log_timing=False,
    )


@pytest.fixture(scope="module")
def fixture_data():
    train_set, test_set = load_datasets(FIXTURE)
    assert len(train_set) == 2000
    return train_set, test_set


@pytest.fixture(scope="module")
def asym_run(fixture_data):
    t0 = time.perf_counter()
    res = train(fixture_config(prune={"mode": "asymptotic-soft", "P_goal": 0.3}), fixture_data)
    return res, time.perf_counter() - t0


def test_criterion_1_gradient_suite(criterion):
    with criterion(1, "finite-difference gradient suite") as d:
        t0 = time.perf_counter()
        errs = run_suite(0)
        d["runtime_s"] = f"{time.perf_counter() - t0:.1f}"
        d["worst_layer"] = f"{max(v for k, v in errs.items() if not k.startswith('model')):.1e}"
        d["model"] = f"{errs['model(resnet n=1)']:.1e}"
        for name, err in errs.items():
            assert err < tolerance(name), name
        assert tolerance("conv2d") == 1e-4 and tolerance("model(resnet n=1)") == 1e-3
        assert float(d["runtime_s"]) < 120


def test_criterion_2_schedule_anchors(criterion):
    with criterion(2, "asymptotic schedule anchors") as d:
        s = solve_schedule(0.3, 0.0, 1 / 8, 200)
        assert abs(rate_at(s, 0) - 0.0) < 1e-9
        assert abs(rate_at(s, 25) - 0.225) < 1e-9
        assert abs(rate_at(s, 200) - 0.3) < 1e-9
        oracle = brentq(lambda u: (1 - math.exp(-u / 8)) / (1 - math.exp(-u)) - 0.75, 1e-6, 100, xtol=1e-14)
        u = s.k * 200
        d["u"] = f"{u:.6f}"
        d["oracle"] = f"{oracle:.6f}"
        assert abs(u - oracle) <= 0.02 and abs(u - 11.09) <= 0.02
        rates = [rate_at(s, e) for e in range(201)]
        assert all(b >= a for a, b in zip(rates, rates[1:]))


@pytest.mark.slow
def test_criterion_3_soft_is_flat_asymptotic(criterion, fixture_data):
    with criterion(3, "constant-rate soft pruning equals a flat asymptotic schedule") as d:
        epochs = 4
        flat_soft = train(fixture_config(epochs, {"mode": "soft", "P_goal": 0.3}), fixture_data)
        flat_asym = train(fixture_config(epochs, {"mode": "asymptotic-soft", "P_goal": 0.3, "P_min": 0.3}), fixture_data)
        d["epochs"] = epochs
        assert len(flat_soft.masks) == len(flat_asym.masks) == epochs
        assert [m.to_json() for m in flat_soft.masks] == [m.to_json() for m in flat_asym.masks]
        assert flat_soft.csv == flat_asym.csv


def _block_sums(model, x):
    _, cache = model.forward(x)
    return {
        item.block_id: c[3]
        for item, c in zip(model.items, cache["caches"])
        if isinstance(item, BlockSpec)
    }


def test_criterion_4_masked_compact_equivalence(criterion):
    with criterion(4, "masked and compact models agree") as d:
        worst = 0.0
        x = np.random.default_rng(123).standard_normal((100, 3, 32, 32)).astype(np.float32)
        for n in (1, 3):
            for rate in (0.1, 0.3, 0.5):
                m = build_resnet(n, seed=n)
                rng = np.random.default_rng(n)
                for k in m.params:
                    if k.endswith("beta"):
                        m.params[k] = (0.2 * rng.standard_normal(m.params[k].shape)).astype(np.float32)
                cfg = PruneConfig(mode="soft", P_goal=rate, epoch_max=1)
                mask = prune_step(m, cfg, solve_schedule(rate, rate, 1 / 8, 1), 1)
                comp = extract_compact(m, mask)
                m.eval()
                c = comp.model.eval()
                worst = max(worst, float(np.abs(m(x) - c(x)).max()))
                # index sets name exactly the surviving second-conv filters, and each
                # block's merged sum equals the full-width masked sum
                full_sums, comp_sums = _block_sums(m, x[:8]), _block_sums(c, x[:8])
                for blk in m.blocks():
                    lid = f"{blk.block_id}.conv2"
                    kept = [i for i in range(blk.width) if i not in mask.layers[lid]]
                    assert comp.index_sets[blk.block_id].tolist() == kept
                    assert c.width_of(lid) == len(kept)
                    assert comp_sums[blk.block_id].shape[1] == blk.width
                    ref = full_sums[blk.block_id]
                    # float32 activations reach ~10, so compare at 1e-5 relative to their scale
                    scale = max(1.0, float(np.abs(ref).max()))
                    assert np.abs(comp_sums[blk.block_id] - ref).max() <= 1e-5 * scale
        d["max_abs_diff"] = f"{worst:.2e}"
        assert worst <= 1e-5


def test_criterion_5_flops_ratio(criterion):
    with criterion(5, "FLOPs ratio for ResNet-56 at 40%") as d:
        base = build_resnet(9)
        m = base.copy()
        cfg = PruneConfig(mode="soft", P_goal=0.4, epoch_max=1)
        mask = prune_step(m, cfg, solve_schedule(0.4, 0.4, 1 / 8, 1), 1)
        rep = count_flops(extract_compact(m, mask).model, base)
        d["baseline_macs"] = rep.baseline_total
        d["pruned_macs"] = rep.total
        d["ratio"] = f"{100 * rep.pruned_ratio:.2f}%"
        assert abs(rep.pruned_ratio - 0.526) <= 0.015

        P = 0.25
        full = build_plain_cnn([16, 32, 64, 64], (3, 32, 32))
        pm = full.copy()
        pmask = prune_step(pm, PruneConfig(mode="soft", P_goal=P, epoch_max=1), solve_schedule(P, P, 1 / 8, 1), 1)
        prep = count_flops(extract_compact(pm, pmask).model, full)
        base_macs = {l.layer_id: l.macs for l in prep.baseline}
        for l in prep.layers:
            if l.layer_id in ("conv1", "conv2", "conv3"):
                assert 1 - l.macs / base_macs[l.layer_id] == pytest.approx(1 - (1 - P) * (1 - P), abs=1e-12)
                assert layerwise_reduction(P, P) == pytest.approx(1 - (1 - P) ** 2, abs=1e-15)


@pytest.mark.slow
def test_criterion_6_desk_scale_end_to_end(criterion, fixture_data, asym_run):
    with criterion(6, "desk-scale asymptotic soft run vs unpruned twin") as d:
        res, wall = asym_run
        twin = train(fixture_config(prune=None), fixture_data)
        d["compact_acc"] = f"{res.compact_accuracy:.4f}"
        d["twin_acc"] = f"{twin.test_accuracy:.4f}"
        d["wall_s"] = f"{wall:.0f}"
        assert len(res.metrics) == 30
        assert all(math.isfinite(r.train_loss) for r in res.metrics)
        assert res.compact.model.num_params() < res.model.num_params()
        assert abs(res.compact_accuracy - twin.test_accuracy) <= 0.05
        assert twin.test_accuracy > 0.80
        assert wall < 15 * 60


def test_criterion_7_capacity_recovery(criterion, fixture_data):
    with criterion(7, "zeroized filters recover after one epoch") as d:
        train_set, _ = fixture_data
        cfg = PruneConfig(mode="asymptotic-soft", P_goal=0.3, epoch_max=30)
        sched = solve_schedule(0.3, 0.0, cfg.D, 30)
        model = build_resnet(1, (16, 32, 64), train_set.image_shape, seed=0)
        velocity: dict = {}
        rng = np.random.default_rng(0)
        mask = MaskState()
        for epoch in range(1, 6):
            train_epoch(model, train_set, 64, 0.1, 0.9, 5e-4, velocity, rng)
            mask = prune_step(model, cfg, sched, epoch)
        # one reconstruction epoch at lr 0.1 after the last pruning step
        train_epoch(model, train_set, 64, 0.1, 0.9, 5e-4, velocity, rng)
        revived = total = 0
        for lid, idx in mask.layers.items():
            norms = filter_norm(model.params[f"{lid}.weight"], 2)[idx]
            revived += int(np.count_nonzero(norms > 0))
            total += len(idx)
        d["revived"] = f"{revived}/{total}"
        assert total > 0
        assert revived / total >= 0.9


def test_criterion_8_realistic_speedup(criterion):
    with criterion(8, "measured speedup of the extracted ResNet-56") as d:
        base = build_resnet(9, seed=0)
        m = base.copy()
        cfg = PruneConfig(mode="soft", P_goal=0.4, epoch_max=1)
        mask = prune_step(m, cfg, solve_schedule(0.4, 0.4, 1 / 8, 1), 1)
        rep = speedup_report(base, extract_compact(m, mask).model, batch=16, reps=5, warmup=1, threads=1)
        print(rep.to_text())
        d["realistic"] = f"{rep.realistic_speedup:.3f}x"
        d["theoretical"] = f"{rep.theoretical_speedup:.3f}x"
        d["gap"] = f"{rep.gap:.3f}"
        assert "realistic speedup" in rep.to_text() and "theoretical speedup" in rep.to_text()
        assert rep.realistic_speedup > 1.0


def test_criterion_9_selection_criterion(criterion):
    with criterion(9, "norm-based selection matches brute force") as d:
        rng = np.random.default_rng(9)
        for trial in range(1000):
            cout = int(rng.integers(1, 65))
            w = rng.standard_normal((cout, 2, 3, 3))
            if trial % 4 == 0:
                w[rng.integers(0, cout, cout // 2)] = 0  # duplicate norms exercise tie-breaks
            count = int(rng.integers(0, cout + 1))
            for p in (1, 2):
                norms = filter_norm(w, p)
                flat = np.abs(w.reshape(cout, -1))
                ref = flat.sum(1) if p == 1 else np.sqrt((flat ** 2).sum(1))
                brute = sorted(sorted(range(cout), key=lambda i: (ref[i], i))[:count])
                assert select_prune_set(norms, count) == brute
        spike = np.zeros((1, 1, 3, 3))
        spike[0, 0, 0, 0] = 3.0
        spread = np.full((1, 1, 3, 3), 0.5)
        w = np.concatenate([spike, spread])
        l1, l2 = filter_norm(w, 1), filter_norm(w, 2)
        d["l1"] = l1.tolist()
        d["l2"] = l2.tolist()
        assert select_prune_set(l1, 1) == [0] and select_prune_set(l2, 1) == [1]


@pytest.mark.slow
def test_criterion_10_determinism(criterion, fixture_data, asym_run):
    with criterion(10, "identical configs give byte-identical metrics") as d:
        first, _ = asym_run
        second = train(fixture_config(prune={"mode": "asymptotic-soft", "P_goal": 0.3}), fixture_data)
        a, b = first.csv.encode(), second.csv.encode()
        d["bytes"] = len(a)
        assert a == b
