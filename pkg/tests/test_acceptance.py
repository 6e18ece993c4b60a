"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s``. The statistical
drand check generates 20,000 pairs at 64^3 and dominates the runtime.
"""

import itertools
import time

import numpy as np
import pytest

from vesselforge import config as cfg, flow, metrics, morphology as morph, nifti, parallel, preprocess as pp, sampler as sm
from vesselforge.config import ARTIFACT_KINDS, CHAIN_STAGES, GEOMETRIES, MERGE_MODES
from vesselforge.flow import train as tr
from vesselforge.rng import make_rng


def _elapsed(t0):
    return time.perf_counter() - t0


# ------------------------------------------------------------------ 1. velocity identity


def test_c01_velocity_identity(criterion):
    t0 = time.perf_counter()
    g = make_rng(101)
    worst = 0.0
    for _ in range(100):
        x0, x1 = g.standard_normal((8, 8, 8)), g.random((8, 8, 8))
        t = float(g.uniform(0.0, 1.0 - flow.EPS))
        x_t = flow.forward_interpolate(x0, x1, t)
        worst = max(worst, float(np.max(np.abs(flow.target_velocity(x_t, x1, t) - (x1 - x0)))))
    dt = _elapsed(t0)
    ok = worst <= 1e-6 and dt < 1.0
    assert criterion(1, "flow-matching identity", ok, f"max |u_t - (x1 - x0)| = {worst:.2e} over 100 triples, {dt:.2f} s")


# ------------------------------------------------------------------ 2. Euler exactness


def test_c02_euler_exact(criterion):
    t0 = time.perf_counter()
    g = make_rng(102)
    target = g.random((8, 8, 8))
    field = flow.AnalyticField(target)
    errs = {}
    for n in (1, 10, 100):
        x = flow.euler_sample(field, g.standard_normal(target.shape), np.zeros(target.shape), 0, n)
        errs[n] = float(np.max(np.abs(x - target)))
    dt = _elapsed(t0)
    ok = max(errs.values()) < 1e-5 and dt < 1.0
    detail = ", ".join(f"N={n}: {e:.1e}" for n, e in errs.items())
    assert criterion(2, "Euler exactness", ok, f"{detail}, {dt:.2f} s")


# ------------------------------------------------------------------ 3. gradient fidelity


def test_c03_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    g = make_rng(103)
    samples, conds = [], []
    for i in range(8):
        x1 = g.random((16, 16, 16))
        samples.append(flow.path_sample(g.standard_normal(x1.shape), x1, float(g.uniform(0.0, 0.95))))
        conds.append(flow.Conditioning(g.random(x1.shape) < 0.3, int(i % 3)))
    batch = flow.make_batch(samples, conds)
    field = flow.make_field("mlp", rng=make_rng(103, 1))
    err = flow.loss_gradient_check(field, batch, h=1e-3)
    dt = _elapsed(t0)
    ok = err < 1e-4 and dt < 30.0
    assert criterion(3, "gradient fidelity", ok, f"max relative error {err:.2e} (batch 8 at 16^3, h=1e-3), {dt:.1f} s")


# ------------------------------------------------------------------ 4. toy conditional generation


def test_c04_toy_conditional_generation(criterion):
    data = flow.toy_dataset()
    stats = tr.dataset_stats(data)
    t0 = time.perf_counter()
    field = flow.make_field("mlp", rng=make_rng(0, 0, 0))
    field, trace = flow.train_toy(field, data, 1500, 0.05, make_rng(0, 0, 1))
    train_s = _elapsed(t0)

    # unseen masks from a different toy seed; each sample uses its own class and then the other one
    held_out = flow.toy_dataset(8, seed=1)
    gaps, fg_by_class = [], {1: [], 2: []}
    for k, (_, m, c) in enumerate(held_out):
        x0 = make_rng(7, k).standard_normal(m.shape)
        for cls in (1, 2):
            x = np.clip(flow.euler_sample(field, x0, m, cls, 100), 0.0, 1.0)
            fg_by_class[cls].append(float(x[m].mean()))
            if cls == c:
                gaps.append(flow.foreground_gap(x, m))
    gap = float(np.mean(gaps))
    fg1, fg2 = float(np.mean(fg_by_class[1])), float(np.mean(fg_by_class[2]))
    # class 1 is brighter than class 2 in the data, so swapping 1 -> 2 must lower the foreground mean
    direction_ok = (stats[1]["fg"] > stats[2]["fg"]) == (fg1 > fg2)
    first, last = tr.smoothed(trace)
    ok = gap >= 0.5 * stats["gap"] and direction_ok and train_s <= 300.0 and last <= first
    detail = (
        f"gap {gap:.3f} vs true {stats['gap']:.3f} (need >= {0.5 * stats['gap']:.3f}); "
        f"fg mean class1 {fg1:.3f} / class2 {fg2:.3f}; train {train_s:.1f} s; loss {first:.3f} -> {last:.3f}"
    )
    assert criterion(4, "toy conditional generation", ok, detail)


# ------------------------------------------------------------------ 5. drand statistics


@pytest.mark.slow
def test_c05_drand_statistics(criterion):
    n = 10_000
    config = cfg.default_config(64)
    t0 = time.perf_counter()
    serial = parallel.drand_summaries(config, range(n), workers=1)
    t_serial = _elapsed(t0)
    t1 = time.perf_counter()
    pooled = parallel.drand_summaries(config, range(n), workers=8)
    t_pooled = _elapsed(t1)
    runtime = _elapsed(t0)

    binary = all(s["label_binary"] for s in serial)
    in_range = all(0.0 <= s["image_min"] and s["image_max"] <= 1.0 for s in serial)
    separated = sum(abs(s["i_m"] - s["i_b_mu"]) >= s["delta"] for s in serial)
    reproducible = [s["digest"] for s in serial] == [s["digest"] for s in pooled]

    deviations = {}
    for key, names, weights in (
        ("artifact", ARTIFACT_KINDS, config.artifact.weights),
        ("geometry", GEOMETRIES, config.background.geometry_weights),
        ("merge_mode", MERGE_MODES, config.merge.mode_weights),
    ):
        total = sum(weights.get(k, 0.0) for k in names)
        counts = {k: 0 for k in names}
        for s in serial:
            counts[s[key]] += 1
        for k in names:
            deviations[f"{key}:{k}"] = abs(counts[k] / n - weights.get(k, 0.0) / total)
    for stage in CHAIN_STAGES:
        hits = sum(stage in s["chain"] for s in serial)
        deviations[f"chain:{stage}"] = abs(hits / n - config.chain.probs[stage])
    worst_key = max(deviations, key=deviations.get)

    ok = binary and in_range and separated == n and reproducible and deviations[worst_key] <= 0.015 and runtime < 1200.0
    detail = (
        f"binary={binary}, range={in_range}, separated {separated}/{n}, 1 vs 8 workers identical={reproducible}, "
        f"worst frequency deviation {deviations[worst_key]:.4f} ({worst_key}), "
        f"runtime {runtime:.0f} s (serial {t_serial:.0f} s, pooled {t_pooled:.0f} s, {parallel.available_cores()} cores)"
    )
    assert criterion(5, "drand statistical suite", ok, detail)


# ------------------------------------------------------------------ 6. metric oracle


def _tube(shape, lo, hi, width=1, axis=2):
    m = np.zeros(shape, bool)
    c = [n // 2 for n in shape]
    sl = [slice(ci - width // 2, ci - width // 2 + width) for ci in c]
    sl[axis] = slice(lo, hi)
    m[tuple(sl)] = True
    return m


def _metric_instances():
    g = make_rng(106)
    inst = []
    t = _tube((9, 9, 24), 2, 22)
    inst.append(("identical thin tube", t, t))
    inst.append(("shifted thin tube", t, np.roll(t, 1, axis=0)))
    inst.append(("disjoint thin tubes", t, np.roll(t, 3, axis=1)))
    thick = _tube((9, 9, 20), 0, 20, width=3)
    broken = thick.copy()
    broken[:, :, 9:11] = False
    inst.append(("broken 3x3x20 tube", broken, thick))
    inst.append(("broken tube swapped", thick, broken))
    inst.append(("both empty", np.zeros((6, 6, 6), bool), np.zeros((6, 6, 6), bool)))
    inst.append(("empty prediction", np.zeros((9, 9, 24), bool), t))
    inst.append(("empty ground truth", t, np.zeros((9, 9, 24), bool)))
    inst.append(("thick tube vs thin core", _tube((11, 11, 24), 1, 23, width=5), _tube((11, 11, 24), 1, 23, width=1)))
    inst.append(("thick tube shorter", _tube((11, 11, 24), 4, 20, width=5), _tube((11, 11, 24), 1, 23, width=5)))
    # Y-shaped branch and one arm missing
    y = np.zeros((16, 16, 16), bool)
    y[8, 8, 2:9] = True
    for k in range(7):
        y[8, 8 + k, 8 + k] = True
        y[8, 8 - k, 8 + k] = True
    arm = y.copy()
    arm[8, 9:, 9:] = False
    inst.append(("Y branch", y, y))
    inst.append(("Y branch missing an arm", arm, y))
    inst.append(("dilated Y vs Y", morph.dilate(y, 1), y))
    # diagonal line through a cube
    diag = np.zeros((12, 12, 12), bool)
    for k in range(12):
        diag[k, k, k] = True
    inst.append(("diagonal line", diag, diag))
    inst.append(("diagonal vs dilated", diag, morph.dilate(diag, 1)))
    cube = np.zeros((10, 10, 10), bool)
    cube[2:8, 2:8, 2:8] = True
    inst.append(("solid cube vs itself", cube, cube))
    inst.append(("cube vs shifted cube", cube, np.roll(cube, 2, axis=2)))
    ring = np.zeros((1, 16, 16), bool)
    yy, xx = np.indices((16, 16))
    ring[0] = np.abs(np.hypot(yy - 7.5, xx - 7.5) - 5) < 0.8
    half = ring.copy()
    half[0, :, 8:] = False
    inst.append(("ring vs half ring", half, ring))
    for k in range(5):
        a = morph.dilate(g.random((20, 20, 20)) < 0.01, 1)
        b = morph.dilate(g.random((20, 20, 20)) < 0.01, 1) | a if k % 2 else np.roll(a, 1, axis=k % 3)
        inst.append((f"random blobs {k}", a, b))
    full = np.ones((5, 5, 5), bool)
    inst.append(("full volume", full, full))
    inst.append(("long tube in 32^3", _tube((32, 32, 32), 0, 32, width=3), _tube((32, 32, 32), 0, 32, width=3, axis=0)))
    return inst


def _count(a):
    n = 0
    for v in a.ravel().tolist():
        n += bool(v)
    return n


def _count_and(a, b):
    n = 0
    for u, v in zip(a.ravel().tolist(), b.ravel().tolist()):
        n += bool(u) and bool(v)
    return n


def _oracle(pred, gt):
    total = _count(pred) + _count(gt)
    d = 1.0 if total == 0 else 2.0 * _count_and(pred, gt) / total
    sp, sg = morph.skeletonize(pred), morph.skeletonize(gt)
    n_sp, n_sg = _count(sp), _count(sg)
    if n_sp == 0 and n_sg == 0:
        return d, 1.0
    if n_sp == 0 or n_sg == 0:
        return d, 0.0
    tprec = _count_and(sp, gt) / n_sp
    tsens = _count_and(sg, pred) / n_sg
    return d, (0.0 if tprec + tsens == 0 else 2 * tprec * tsens / (tprec + tsens))


def test_c06_metric_oracle(criterion):
    t0 = time.perf_counter()
    inst = _metric_instances()
    bad = []
    broken_ok = False
    for name, pred, gt in inst:
        assert max(pred.shape) <= 32
        d_ref, c_ref = _oracle(pred, gt)
        d, c = metrics.dice(pred, gt), metrics.cldice(pred, gt)
        if d != d_ref or abs(c - c_ref) > 1e-6:
            bad.append(name)
        if name == "broken 3x3x20 tube":
            broken_ok = c < d
    # one-voxel-wide lines are their own skeleton, which pins the oracle without the thinning code
    for name in ("identical thin tube", "diagonal line", "Y branch"):
        m = dict((n, p) for n, p, _ in inst)[name]
        if not np.array_equal(morph.skeletonize(m), m):
            bad.append(name + " (skeleton)")
    dt = _elapsed(t0)
    ok = len(inst) == 25 and not bad and broken_ok and dt < 10.0
    detail = f"{len(inst)} instances, mismatches {bad or 'none'}, broken tube cldice < dice: {broken_ok}, {dt:.2f} s"
    assert criterion(6, "metric oracle", ok, detail)


# ------------------------------------------------------------------ 7. label improvement


def test_c07_label_recovery(criterion):
    grid = np.indices((64, 64, 64))
    tube = ((grid[1] - 32) ** 2 + (grid[2] - 32) ** 2) <= 9
    img = (np.where(tube, 1.0, 0.2) + make_rng(107).normal(0.0, 0.02, tube.shape)).astype(np.float32)
    t0 = time.perf_counter()
    mask = pp.improve_labels_hr(img, pp.LabelImproveParams(intensity_delta=0.1, threshold=0.9, filter_size=11))
    dt = _elapsed(t0)
    d = metrics.dice(mask, tube)
    ok = d >= 0.95 and dt < 10.0
    assert criterion(7, "label improvement recovery", ok, f"dice {d:.4f} vs known tube, {dt:.2f} s")


# ------------------------------------------------------------------ 8. mixture fidelity


def test_c08_mixture_fidelity(criterion):
    registry = sm.Registry(
        [sm.SourceEntry("drand", 1000)]
        + [sm.SourceEntry("real", 10, cls=c) for c in range(1, 24)]
        + [sm.SourceEntry("flow", 10, cls=c) for c in range(1, 24)]
    )
    weights = sm.SourceWeights(0.7, 0.2, 0.1)
    n = 100_000
    t0 = time.perf_counter()
    counts = dict.fromkeys(sm.SOURCES, 0)
    excluded_seen = 0
    for item in itertools.islice(sm.stream_plan(108, registry, weights), n):
        counts[item.source] += 1
        excluded_seen += item.cls in sm.EVAL_EXCLUDED
    dt = _elapsed(t0)
    dev = {k: abs(counts[k] / n - p) for k, p in zip(sm.SOURCES, (0.7, 0.2, 0.1))}
    ok = max(dev.values()) <= 0.01 and excluded_seen == 0 and dt < 60.0
    freqs = ", ".join(f"{k} {counts[k] / n:.4f}" for k in sm.SOURCES)
    assert criterion(8, "mixture fidelity", ok, f"{freqs}; excluded classes drawn {excluded_seen}; {dt:.1f} s")


# ------------------------------------------------------------------ 9. I/O round trip


def test_c09_io_roundtrip(criterion, tmp_path):
    g = make_rng(109)
    t0 = time.perf_counter()
    failures = []
    for i in range(50):
        shape = tuple(int(s) for s in g.integers(1, 24, size=3))
        if i % 2:
            v = g.random(shape) < 0.4
            dt_code, width = nifti.DT_UINT8, 1
        else:
            v = (g.standard_normal(shape) * 10).astype(np.float32)
            dt_code, width = nifti.DT_FLOAT32, 4
        suffix = ".nii.gz" if i % 4 < 2 else ".nii"
        spacing = tuple(float(s) for s in g.uniform(0.2, 3.0, 3).astype(np.float32))
        path = nifti.write_volume(tmp_path / f"v{i}{suffix}", v, spacing)
        back, meta = nifti.read_volume(path)
        raw = path.read_bytes()
        if suffix == ".nii.gz":
            import gzip

            raw = gzip.decompress(raw)
        size_ok = len(raw) == 352 + width * int(np.prod(shape)) == nifti.expected_size(shape, dt_code)
        if not (back.dtype == v.dtype and np.array_equal(back, v) and meta["spacing"] == spacing and size_ok):
            failures.append(i)
    dt = _elapsed(t0)
    ok = not failures and dt < 10.0
    assert criterion(9, "I/O round trip", ok, f"50 volumes, failures {failures or 'none'}, {dt:.2f} s")


# ------------------------------------------------------------------ 10. throughput (tracked, not gated)


@pytest.mark.slow
def test_c10_throughput_report(criterion):
    config = cfg.default_config(128)
    cores = parallel.available_cores()
    parallel.drand_summaries(config, range(1))  # warm the compiled kernels
    n = max(4, 2 * cores)
    t0 = time.perf_counter()
    parallel.drand_summaries(config, range(1, n + 1), workers=cores)
    dt = _elapsed(t0)
    rate = n / dt
    per_8 = rate / cores * 8
    detail = f"{rate:.2f} pairs/s at 128^3 on {cores} core(s), about {per_8:.2f} pairs/s per 8 cores (target 4)"
    criterion(10, "throughput", True, detail, informational=True)
