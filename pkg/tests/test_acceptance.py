"""End-to-end acceptance checks, one test per criterion.

The heavy fixtures (vehicle detector, patch library, patch detector) are
built once per session. Each test records a PASS/FAIL line that is also
repeated in the terminal summary.
"""

import itertools
import math
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from camokit import diffcore as dc
from camokit.boxes import BoundingBox, iou
from camokit.cli import CONFIG_DIR
from camokit.dataset import overlay_patch_dataset, synth_dataset
from camokit.detector import (
    PATCH_DETECTOR_HYPER, DetectorConfig, TrainConfig, forward, init_weights,
    patch_detector_config, predict, train_detector,
)
from camokit.diffcore import Tensor
from camokit.evaluator import (
    SweepEntry, bootstrap_sigma, evaluate_entry, f1_report, match, patched_test_set, pearson, read_sweep_csv,
    run_sweep, sweep_correlations,
)
from camokit.patch_trainer import PatchConfig, adversarial_loss, load_config, train_patch
from camokit.patcher import ApplyConfig, apply_patches

N_TRAIN, N_TEST = 200, 50
PATCH_TRAIN_IMAGES = 64
ALPHA_SWEEP = (0.3, 0.5, 0.7, 1.0)
SIZE_SWEEP = (0.1, 0.2, 0.3)
FIXED_SIZE, FIXED_ALPHA = 0.3, 1.0


# -- shared fixtures ------------------------------------------------------------------

@pytest.fixture(scope="session")
def train_set():
    return synth_dataset(N_TRAIN, 1)


@pytest.fixture(scope="session")
def test_set():
    return synth_dataset(N_TEST, 2)


@pytest.fixture(scope="session")
def detector_run(train_set):
    t0 = time.perf_counter()
    result = train_detector(train_set, DetectorConfig(), TrainConfig(epochs=80, seed=0))
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def detector(detector_run):
    return detector_run[0].weights


@pytest.fixture(scope="session")
def baseline_mf1(detector, test_set):
    preds = predict(detector, [it.image for it in test_set])
    return f1_report(preds, [it.boxes for it in test_set], 4, n_boot=0).mf1


@pytest.fixture(scope="session")
def patch_library(detector, train_set):
    """obj-loss patches for the alpha sweep at fixed size and the size sweep at fixed alpha."""
    settings = sorted({(FIXED_SIZE, a) for a in ALPHA_SWEEP} | {(s, FIXED_ALPHA) for s in SIZE_SWEEP})
    lib = {}
    for size, alpha in settings:
        cfg = PatchConfig(name=f"obj_s{size}_a{alpha}", loss_kind="obj", size_fraction=size, alpha=alpha)
        lib[(size, alpha)] = (cfg, train_patch(detector, train_set[:PATCH_TRAIN_IMAGES], cfg).patch)
    return lib


def opaque_keys():
    return [(s, FIXED_ALPHA) for s in SIZE_SWEEP]


@pytest.fixture(scope="session")
def patch_detector(patch_library, train_set):
    keys = opaque_keys()
    patches = [patch_library[k][1] for k in keys]
    cfgs = [patch_library[k][0].apply_config() for k in keys]
    data = overlay_patch_dataset(train_set, patches, cfgs, label_mode="single_class", seed=3)
    return train_detector(data, patch_detector_config(1), PATCH_DETECTOR_HYPER).weights


@pytest.fixture(scope="session")
def sweep_rows(detector, patch_detector, patch_library, test_set, baseline_mf1):
    rows = {}
    for key, (cfg, patch) in patch_library.items():
        entry = SweepEntry(cfg.name, patch, cfg.apply_config())
        rows[key] = evaluate_entry(detector, patch_detector, test_set, entry, baseline_mf1, 4)
    return rows


# -- 1: gradient integrity ---------------------------------------------------------------

def _op_cases(rng):
    x = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w = rng.normal(size=(3, 4))
    img = rng.random((2, 6, 6))
    batch = rng.random((2, 2, 6, 6))

    probes = {}

    def weighted(t):
        # a fixed random probe per output shape turns any op into a scalar loss
        if t.shape not in probes:
            probes[t.shape] = np.random.default_rng(100 + len(probes)).normal(size=t.shape)
        return dc.sum_(t * Tensor(probes[t.shape]))

    kernel = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    patch = rng.random((2, 4, 4))
    mask = np.ones((1, 6, 6))
    mask[:, :2] = 0
    return {
        "add": (lambda t: weighted(t + Tensor(w)), x),
        "sub": (lambda t: weighted(Tensor(w) - t), x),
        "mul": (lambda t: weighted(t * t), x),
        "power": (lambda t: weighted(dc.power(t, 3.0)), x),
        "sqrt": (lambda t: weighted(dc.sqrt(t)), pos),
        "exp": (lambda t: weighted(dc.exp(t)), x),
        "log": (lambda t: weighted(dc.log(t)), pos),
        "clamp": (lambda t: weighted(dc.clamp(t, -0.5, 0.5)), x),
        "leaky_relu": (lambda t: weighted(dc.leaky_relu(t)), x),
        "sigmoid": (lambda t: weighted(dc.sigmoid(t)), x),
        "softplus": (lambda t: weighted(dc.softplus(t)), x),
        "log_softmax": (lambda t: weighted(dc.log_softmax(t, axis=-1)), x),
        "softmax": (lambda t: weighted(dc.softmax(t, axis=0)), x),
        "sum": (lambda t: weighted(dc.sum_(t, axis=1)), x),
        "mean": (lambda t: weighted(dc.mean(t, axis=0)), x),
        "max": (lambda t: weighted(dc.max_(t, axis=1)), x),
        "min": (lambda t: weighted(dc.min_(t, axis=0)), x),
        "reshape": (lambda t: weighted(dc.reshape(t, (4, 3))), x),
        "transpose": (lambda t: weighted(dc.transpose(t, (1, 0))), x),
        "getitem": (lambda t: weighted(t[1:, ::2]), x),
        "fancy_getitem": (lambda t: weighted(t[np.array([0, 0, 2])]), x),
        "concat": (lambda t: weighted(dc.concat([t, t * t], axis=1)), x),
        "stack": (lambda t: weighted(dc.stack([t, dc.exp(t)], axis=0)), x),
        "put": (lambda t: weighted(dc.put(t, t[0:1] * 2.0, (slice(2, 3),))), x),
        "conv2d_input": (lambda t: weighted(dc.conv2d(t, Tensor(kernel), Tensor(bias), stride=2, padding=1)), batch),
        "conv2d_kernel": (lambda t: weighted(dc.conv2d(Tensor(batch), t, Tensor(bias), padding=1)), kernel),
        "conv2d_bias": (lambda t: weighted(dc.conv2d(Tensor(batch), Tensor(kernel), t)), bias),
        "affine_sample": (lambda t: weighted(dc.affine_sample(t, 0.3, 1.3, (7, 7), center=(3.2, 2.9))[0]), patch),
        "alpha_composite_image": (lambda t: weighted(dc.alpha_composite(t, Tensor(img), mask, 0.6)), img),
        "alpha_composite_patch": (lambda t: weighted(dc.alpha_composite(Tensor(img), t, mask, 0.6)), img),
    }


def _composed_case():
    cfg = DetectorConfig(input_size=16, grid_size=2, anchor_sizes=((0.3, 0.3), (0.6, 0.6)), num_classes=2,
                         conv_channels=(3, 4, 4))
    weights = init_weights(cfg, seed=11, dtype=np.float64)
    rng = np.random.default_rng(12)
    image = rng.random((3, 16, 16))
    boxes = [BoundingBox(0, 0.35, 0.4, 0.45, 0.5), BoundingBox(1, 0.75, 0.7, 0.35, 0.4)]
    apply_cfg = ApplyConfig(0.5, 0.8, rotation_range=0.3, noise_amp=0.05, seed=5)

    def make(kind):
        def fn(patch):
            patched, _ = apply_patches(image, boxes, patch, apply_cfg)
            return adversarial_loss(forward(weights, patched), kind, boxes, cfg)
        return fn

    return make, rng.random((3, 5, 5))


def test_criterion_1_gradient_integrity(record_criterion):
    t0 = time.perf_counter()
    errors = {name: dc.grad_check(fn, x, eps=1e-4) for name, (fn, x) in _op_cases(np.random.default_rng(0)).items()}
    make, patch = _composed_case()
    for kind in ("obj", "cls", "obj_x_cls"):
        errors[f"composed_{kind}"] = dc.grad_check(make(kind), patch, eps=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    record_criterion(1, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}, {elapsed:.1f}s")
    assert errors[worst] < 1e-4, errors
    assert elapsed < 60


# -- 2: compositing identities --------------------------------------------------------------

def test_criterion_2_compositing_identities(record_criterion):
    rng = np.random.default_rng(1)
    image = rng.random((3, 40, 40))
    boxes = [BoundingBox(0, 0.3, 0.3, 0.3, 0.25), BoundingBox(2, 0.7, 0.65, 0.35, 0.4)]
    patch = rng.random((3, 8, 8))
    out0, _ = apply_patches(image, boxes, patch, ApplyConfig(0.5, 0.0, seed=2))
    identity = np.array_equal(out0.data, image)

    # opaque with full mask: the composite is exactly the resampled patch (scipy bilinear oracle)
    resampled, mask = dc.affine_sample(Tensor(patch), 0.0, 2.0, (16, 16))
    out1 = dc.alpha_composite(Tensor(rng.random((3, 16, 16))), resampled, mask, 1.0)
    coords = (np.arange(16) - 7.5) / 2.0 + 3.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    oracle = np.stack([ndimage.map_coordinates(patch[c], [yy, xx], order=1, mode="nearest") for c in range(3)])
    opaque_err = float(np.abs(out1.data - oracle).max())
    full_mask = bool(mask.all())

    blend = dc.alpha_composite(Tensor(np.array([[[0.5]]])), Tensor(np.array([[[1.0]]])), np.ones((1, 1, 1)), 0.4)
    exact = float(blend.data.ravel()[0]) == 0.7

    ok = identity and full_mask and opaque_err < 1e-6 and exact
    record_criterion(2, ok, f"alpha0 identical={identity}, opaque max err {opaque_err:.1e}, blend==0.7 {exact}")
    assert identity and full_mask and exact
    assert opaque_err < 1e-6


# -- 3: metric oracles -------------------------------------------------------------------------

def _int_box(rng, grid, cls=0):
    x0, y0 = rng.integers(0, grid - 2, 2)
    x1 = rng.integers(x0 + 1, grid + 1)
    y1 = rng.integers(y0 + 1, grid + 1)
    return BoundingBox.from_pixels(cls, x0, y0, x1, y1, grid, grid), (x0, y0, x1, y1)


def _raster_iou(a, b, grid):
    ma = np.zeros((grid, grid), bool)
    mb = np.zeros((grid, grid), bool)
    ma[a[1]:a[3], a[0]:a[2]] = True
    mb[b[1]:b[3], b[0]:b[2]] = True
    union = (ma | mb).sum()
    return (ma & mb).sum() / union


def _random_scene(rng):
    truths = [BoundingBox(int(rng.integers(2)), *rng.uniform(0.25, 0.75, 2), *rng.uniform(0.08, 0.3, 2))
              for _ in range(rng.integers(0, 6))]
    preds = []
    for t in truths:
        if rng.random() < 0.75:
            cls = t.class_id if rng.random() < 0.85 else 1 - t.class_id
            preds.append(BoundingBox(cls, t.cx + rng.normal(0, 0.03), t.cy + rng.normal(0, 0.03),
                                     t.w * rng.uniform(0.8, 1.2), t.h * rng.uniform(0.8, 1.2), float(rng.random())))
    preds += [BoundingBox(int(rng.integers(2)), *rng.uniform(0.25, 0.75, 2), *rng.uniform(0.08, 0.3, 2),
                          float(rng.random())) for _ in range(rng.integers(0, 3))]
    return preds, truths


def _optimal_tp(preds, truths):
    if not preds or not truths:
        return 0
    ok = np.array([[p.class_id == t.class_id and iou(p, t) >= 0.5 for t in truths] for p in preds])
    r, c = linear_sum_assignment(ok.astype(float), maximize=True)
    return int(ok[r, c].sum())


def _greedy_counts(preds, truths):
    """Per-class (tp, fp, fn) by an independent pure-Python greedy matcher."""
    counts = {}
    used = set()
    for p in sorted(preds, key=lambda b: -b.confidence):
        best, best_v = None, 0.5
        for t_idx, t in enumerate(truths):
            if t_idx in used or t.class_id != p.class_id:
                continue
            v = iou(p, t)
            if v >= best_v and (best is None or v > best_v):
                best, best_v = t_idx, v
        c = counts.setdefault(p.class_id, [0, 0, 0])
        if best is None:
            c[1] += 1
        else:
            used.add(best)
            c[0] += 1
    for t_idx, t in enumerate(truths):
        if t_idx not in used:
            counts.setdefault(t.class_id, [0, 0, 0])[2] += 1
    return counts


def test_criterion_3_metric_oracles(record_criterion):
    rng = np.random.default_rng(3)
    n = 1000
    failures = {}

    grid = 24
    bad = 0
    for _ in range(n):
        (a, ra), (b, rb) = _int_box(rng, grid), _int_box(rng, grid)
        bad += abs(iou(a, b) - _raster_iou(ra, rb, grid)) > 1e-9
    failures["iou"] = bad

    exceed = agree = 0
    totals_oracle = np.zeros((2, 3))
    preds_all, truths_all = [], []
    for _ in range(n):
        preds, truths = _random_scene(rng)
        preds_all.append(preds)
        truths_all.append(truths)
        g, o = match(preds, truths).tp, _optimal_tp(preds, truths)
        exceed += g > o
        agree += g == o
        for c, v in _greedy_counts(preds, truths).items():
            totals_oracle[c] += v
    failures["match_exceeds_optimal"] = exceed
    failures["match_agreement_below_95pct"] = int(agree < 0.95 * n)

    rep = f1_report(preds_all, truths_all, 2, n_boot=0)
    f1_oracle = []
    for tp, fp, fn in totals_oracle:
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1_oracle.append(2 * p * r / (p + r) if p + r else 0.0)
    failures["f1_report"] = int(abs(rep.mf1 - statistics.fmean(f1_oracle)) > 1e-12
                                or any(abs(c.f1 - f) > 1e-12 for c, f in zip(rep.classes, f1_oracle)))

    bad = 0
    for _ in range(n):
        k = int(rng.integers(3, 12))
        x, y = rng.random(k), rng.random(k)
        bad += abs(pearson(x, y) - statistics.correlation(list(x), list(y))) > 1e-9
    failures["pearson"] = bad

    # bootstrap: exact enumeration of every resample for 2-3 images
    n_boot = 1000
    tol = 3 / math.sqrt(n_boot)
    bad = 0
    for trial in range(n):
        m = int(rng.integers(2, 4))
        values = rng.integers(0, 2, m).astype(float) if trial % 2 else rng.random(m)
        means = [np.mean(values[list(idx)]) for idx in itertools.product(range(m), repeat=m)]
        exact = float(np.std(means))
        bad += abs(float(bootstrap_sigma(values, n_boot=n_boot, seed=trial)) - exact) > tol
    failures["bootstrap_sigma"] = bad

    ok = not any(failures.values())
    record_criterion(3, ok, f"{n} instances per op; greedy==optimal in {agree}/{n}; failures {failures}")
    assert ok, failures


# -- 4: baseline detector ------------------------------------------------------------------------

def test_criterion_4_baseline_detector(record_criterion, detector_run, baseline_mf1, train_set):
    result, seconds = detector_run
    # same seed, same data: the first epochs replay bit for bit
    short = [train_detector(train_set, DetectorConfig(), TrainConfig(epochs=2, seed=0)) for _ in range(2)]
    same_weights = all(np.array_equal(short[0].weights.tensors[k].data, short[1].weights.tensors[k].data)
                       for k in short[0].weights.tensors)
    same_prefix = short[0].history == result.history[:2] == short[1].history
    ok = baseline_mf1 >= 0.8 and seconds < 600 and same_weights and same_prefix
    record_criterion(4, ok, f"test mF1 {baseline_mf1:.3f}, train {seconds:.0f}s, bit-identical {same_weights and same_prefix}")
    assert baseline_mf1 >= 0.8
    assert seconds < 600
    assert same_weights and same_prefix


# -- 5: camouflage efficacy -------------------------------------------------------------------------

def test_criterion_5_camouflage_efficacy(record_criterion, sweep_rows):
    big = sweep_rows[(FIXED_SIZE, FIXED_ALPHA)]
    alpha_rows = [sweep_rows[(FIXED_SIZE, a)] for a in ALPHA_SWEEP]
    size_rows = [sweep_rows[(s, FIXED_ALPHA)] for s in SIZE_SWEEP]
    r_alpha = pearson([r.alpha for r in alpha_rows], [r.mF1_reduction_pct for r in alpha_rows])
    r_size = pearson([r.size_fraction for r in size_rows], [r.mF1_reduction_pct for r in size_rows])
    ok = big.mF1_reduction_pct >= 50 and r_alpha > 0.5 and r_size > 0.5
    detail = (f"reduction at size 0.3 alpha 1.0: {big.mF1_reduction_pct:.1f}%; "
              f"alpha sweep {[round(r.mF1_reduction_pct, 1) for r in alpha_rows]} r={r_alpha:.2f}; "
              f"size sweep {[round(r.mF1_reduction_pct, 1) for r in size_rows]} r={r_size:.2f}")
    record_criterion(5, ok, detail)
    assert big.mF1_reduction_pct >= 50
    assert r_alpha > 0.5
    assert r_size > 0.5


# -- 6: patch detectability ---------------------------------------------------------------------------

def test_criterion_6_patch_detectability(record_criterion, patch_detector, patch_library, test_set, sweep_rows):
    counts = np.zeros(3)
    per_patch = {}
    for key in opaque_keys():
        cfg, patch = patch_library[key]
        images, truths = patched_test_set(test_set, SweepEntry(cfg.name, patch, cfg.apply_config()), seed=0)
        dets = predict(patch_detector, images)
        preds = [[BoundingBox(0, d.box.cx, d.box.cy, d.box.w, d.box.h, d.score) for d in ds] for ds in dets]
        rep = f1_report(preds, truths, 1, n_boot=0)
        per_patch[key[0]] = round(rep.mf1, 3)
        counts += (rep.tp, rep.fp, rep.fn)
    tp, fp, fn = counts
    aggregate = 2 * tp / (2 * tp + fp + fn)
    big = sweep_rows[(FIXED_SIZE, FIXED_ALPHA)]
    betrayed = big.detection_score > big.mF1_camo
    ok = aggregate >= 0.9 and betrayed
    record_criterion(6, ok, f"aggregate F1 {aggregate:.3f} (by size {per_patch}); size 0.3 opaque: "
                            f"detection score {big.detection_score:.3f} vs mF1_camo {big.mF1_camo:.3f}")
    assert aggregate >= 0.9
    assert betrayed


# -- 7: aggregate trend ----------------------------------------------------------------------------------

def test_criterion_7_aggregate_trend(record_criterion, sweep_rows):
    rows = list(sweep_rows.values())
    corr = sweep_correlations(rows)
    ok = corr["detection_vs_alpha"] < 0 and corr["detection_vs_size"] < 0
    table = "; ".join(f"s{r.size_fraction} a{r.alpha}: camo {r.mF1_camo:.2f} patch {r.F1_patch:.2f}" for r in rows)
    record_criterion(7, ok, f"r(detection, alpha)={corr['detection_vs_alpha']:.2f}, "
                            f"r(detection, size)={corr['detection_vs_size']:.2f} [{table}]")
    assert corr["detection_vs_alpha"] < 0
    assert corr["detection_vs_size"] < 0


# -- 8: table grid replay ---------------------------------------------------------------------------------

def test_criterion_8_grid_replay(record_criterion, detector, patch_detector, train_set, test_set, baseline_mf1,
                                 tmp_path):
    paths = sorted(CONFIG_DIR.glob("*.cfg"))
    library = []
    for path in paths:
        cfg, _ = load_config(path)
        smoke = replace(cfg, patch_size=16, batch_size=8)
        patch = train_patch(detector, train_set[:8], smoke, epochs=1).patch
        library.append(SweepEntry(cfg.name, patch, cfg.apply_config()))
    rep = run_sweep(detector, patch_detector, library, test_set[:20], 4, seed=0, baseline_mf1=baseline_mf1)
    out = tmp_path / "sweep.csv"
    out.write_text(rep.to_csv())
    rows = read_sweep_csv(out)
    invariant = all(r.detection_score == max(r.mF1_camo, r.F1_patch) for r in rows)
    ok = len(paths) == 24 and len(rows) == 24 and invariant
    record_criterion(8, ok, f"{len(paths)} configs, {len(rows)} rows, max invariant holds={invariant}")
    assert len(paths) == 24 and len(rows) == 24
    assert invariant
