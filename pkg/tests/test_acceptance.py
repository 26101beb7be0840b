"""Acceptance criteria 1-10, one test each; every test prints a PASS/FAIL line.

Criteria 4 and 5 train a scheme x seed matrix for tens of minutes. Their run
directories are cached under ``$DEEPSUP_ACCEPTANCE_CACHE`` (default
``~/.cache/deepsup/acceptance``) keyed by the config text and a hash of the
package source, so an unchanged tree resumes instead of retraining. The CPU
time of every invocation is logged next to the results and summed for the
runtime budget.
"""

from __future__ import annotations

import hashlib
import json
import os
import pathlib
import time

import numpy as np
import pytest

import deepsup
import deepsup.genprob as gp
from deepsup import rng as rngmod
from deepsup.autodiff import (
    EVAL,
    TRAIN,
    BatchNormState,
    Parameter,
    add,
    backward,
    batch_norm,
    conv2d,
    dropout,
    fully_connected,
    global_average_pool,
    l2_loss,
    precision,
    relu,
    scale,
)
from deepsup.concepts import estimate_epsilon, keypoint_hierarchy
from deepsup.expcli import compare_schemes, load_config, read_rows, run_matrix
from deepsup.expcli.cli import main as cli_main
from deepsup.expcli.tasks import constructed_spaces, null_effect_cases
from deepsup.metrics import apk, mean_recall, pck2d, pck3d, yaw_error
from deepsup.network import ArchConfig, forward, init_network, make_scheme, total_loss
from deepsup.shapefit import BOX, fit_pca, fit_structure, pose_grid, Pose, reconstruct
from deepsup.synthgen import (
    GenConfig,
    aabb_disjoint,
    build_split,
    gen_hierarchical_classification,
    keypoint_visibility,
    load_cifar100,
    make_occluded_pair,
    occlusion_ratio,
    sample_instance,
)
from deepsup.synthgen.render import TAU_FACTOR
from deepsup.tensorio import FormatError

from oracles import (
    apk_loop,
    central_difference,
    mean_recall_loop,
    pck2d_loop,
    pck3d_loop,
    projected_corners,
    random_scene,
    rel_error,
    toy_counts,
    visibility_raycast,
    yaw_error_loop,
)
from test_metrics import CUBE_PAIRS, cube, rec2d, rec3d, random_records

CONFIGS = pathlib.Path(__file__).parent / "configs"
SRC = pathlib.Path(deepsup.__file__).parent


@pytest.fixture
def report(capsys):
    """Print one verdict line outside pytest's capture, then assert."""

    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, f"criterion {n}: {detail}"

    return emit


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.rglob("*.py")):
        h.update(str(p.relative_to(SRC)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cached_matrix(config_name: str):
    """Run (or resume) the matrix for a config; returns result plus summed CPU and wall seconds."""
    text = (CONFIGS / config_name).read_text()
    key = hashlib.sha256((text + source_hash()).encode()).hexdigest()[:16]
    root = pathlib.Path(os.environ.get("DEEPSUP_ACCEPTANCE_CACHE", pathlib.Path.home() / ".cache/deepsup/acceptance"))
    out = root / f"{pathlib.Path(config_name).stem}-{key}"
    out.mkdir(parents=True, exist_ok=True)
    cpu0, wall0 = time.process_time(), time.perf_counter()
    res = run_matrix(load_config(CONFIGS / config_name), str(out))
    log = out / "runs.jsonl"
    with open(log, "a") as fh:
        fh.write(json.dumps({"cpu": time.process_time() - cpu0, "wall": time.perf_counter() - wall0,
                             "trained": sum(c.status == "trained" for c in res.cells)}) + "\n")
    runs = [json.loads(line) for line in log.read_text().splitlines()]
    return res, sum(r["cpu"] for r in runs), sum(r["wall"] for r in runs)


# ---- 1 ------------------------------------------------------------------------

def _op_check(build, arrays, rng) -> float:
    with precision(np.float64):
        leaves = [Parameter(a.copy()) for a in arrays]
        out = build(*leaves)
        target = rng.normal(size=out.shape)
        backward(l2_loss(out, target))
        worst = 0.0
        for p in leaves:
            num = central_difference(lambda: l2_loss(build(*leaves), target).item(), p.value.data)
            worst = max(worst, rel_error(p.grad, num))
        return worst


def test_c1_gradient_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst: dict[str, float] = {}

    def case(name, build, arrays):
        worst[name] = max(worst.get(name, 0.0), _op_check(build, arrays, rng))

    for i in range(20):
        n, c, oc = (int(v) for v in rng.integers(1, 4, 3))
        k = int(rng.choice([1, 3]))
        h, w = (int(v) for v in rng.integers(k, 7, 2))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        case("conv2d", lambda x, wt, b: conv2d(x, wt, b, stride, pad),
             [rng.normal(size=(n, c, h, w)), rng.normal(size=(oc, c, k, k)), rng.normal(size=oc)])
        for mode in (TRAIN, EVAL):
            ch = int(rng.integers(1, 4))
            st = BatchNormState(ch)
            st.running_mean, st.running_var = rng.normal(size=ch), rng.uniform(0.5, 2, ch)
            case(f"batch_norm[{mode}]", lambda x, g, b: batch_norm(x, g, b, st, mode=mode),
                 [rng.normal(size=(int(rng.integers(2, 4)), ch, 2, 3)), rng.normal(size=ch), rng.normal(size=ch)])
        x = rng.normal(size=(3, 4))
        case("relu", relu, [np.where(np.abs(x) < 0.05, 0.1, x)])
        case("global_average_pool", global_average_pool, [rng.normal(size=(2, 3, 3, 2))])
        ni, no = (int(v) for v in rng.integers(1, 5, 2))
        case("fully_connected", fully_connected, [rng.normal(size=(2, ni)), rng.normal(size=(no, ni)), rng.normal(size=no)])
        case("dropout", lambda t: dropout(t, 0.3, TRAIN, np.random.default_rng(i)), [rng.normal(size=(3, 5))])
        f = float(rng.normal())
        case("scale+add", lambda a, b: add(scale(a, f), b, a), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])
        case("l2_loss", lambda a: l2_loss(a, np.ones((2, 3))), [rng.normal(size=(2, 3))])
    h = keypoint_hierarchy(4, 3)
    arch = ArchConfig(conv_layers=6, filters_per_stage=(2, 3, 3), downsample_depths=(2, 4), input_size=8,
                      branch_hidden=4, dropout_rate=0.0)
    with precision(np.float64):
        net = init_network(arch, make_scheme("ladder", h, 6), h, 1)
        x = rng.random((3, 1, 8, 8))
        labels = {"pose": np.eye(4)[rng.integers(0, 4, 3)], "vis": (rng.random((3, 3)) < 0.5) * 1.0,
                  "kp3d": rng.uniform(-0.5, 0.5, (3, 9)), "kp2d": rng.uniform(0, 1, (3, 6))}
        backward(total_loss(forward(net, x, TRAIN), labels, net.scheme)[0])
        f = lambda: total_loss(forward(net, x, TRAIN), labels, net.scheme)[0].item()
        worst["network"] = max(rel_error(p.grad, central_difference(f, p.value.data)) for p in net.parameters())
    secs = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    report(1, not bad and secs < 60,
           f"max rel error {max(worst.values()):.2e} over {len(worst)} ops x 20 cases + full network, {secs:.1f}s"
           + (f"; failing {bad}" if bad else ""))


# ---- 2 ------------------------------------------------------------------------

def test_c2_toy_example(report):
    t0 = time.perf_counter()
    fits = all(np.array_equal(gp.toy_model(p, [1, 2, 3])["y"], [0, 0, 0]) for p in (gp.TOY_TRUE, gp.TOY_ALTERNATE))
    alt4, true4 = gp.toy_model(gp.TOY_ALTERNATE, [4])["y"][0], gp.toy_model(gp.TOY_TRUE, [4])["y"][0]
    ev = gp.Evaluation(gp.toy_space(), gp.toy_riskspec())
    p0 = gp.generalization_probability(ev.H(), ev.F())
    p1 = gp.generalization_probability(ev.H(("hidden",)), ev.F(("hidden",)))
    oracle = (toy_counts(0.01, False), toy_counts(0.01, True))
    counts = ((int(ev.H().sum()), int(ev.F().sum())), (int(ev.H(("hidden",)).sum()), int(ev.F(("hidden",)).sum())))
    secs = time.perf_counter() - t0
    ok = fits and alt4 == 0 and true4 == 3 and p1 > p0 and counts == oracle and secs < 60
    report(2, ok, f"zero training loss for both tuples: {fits}; alternate at x=4 predicts {alt4:g} (truth {true4:g}); "
                  f"P without cue {p0:.6f} ({counts[0][1]}/{counts[0][0]}), with cue {p1:.6f} "
                  f"({counts[1][1]}/{counts[1][0]}); loop oracle agrees: {counts == oracle}; {secs:.1f}s")


# ---- 3 ------------------------------------------------------------------------

def test_c3_propositions(report):
    t0 = time.perf_counter()
    checked = failing = 0
    for space, spec, inter, ds in constructed_spaces():
        for rep in gp.sweep(space, spec, inter, ds, ds):
            if rep.rows and len(rep.rows) == len(inter) + 1:
                checked += 1
                failing += not rep.monotone
    null_ok = null_total = 0
    for space, spec, ds in null_effect_cases():
        ev = gp.Evaluation(space, spec)
        for d in ds:
            for dp in ds:
                # an indicator loss on T(y) never exceeds the one on y, so the claim needs delta' >= delta
                if dp < d:
                    continue
                null_total += 1
                null_ok += (np.array_equal(ev.H((), d, dp), ev.H(("t_of_main",), d, dp))
                            and np.array_equal(ev.F((), d, dp), ev.F(("t_of_main",), d, dp)))
    secs = time.perf_counter() - t0
    n_spaces = len(constructed_spaces())
    ok = n_spaces >= 3 and checked > 0 and failing == 0 and null_ok == null_total and secs < 300
    report(3, ok, f"{n_spaces} spaces, {checked - failing}/{checked} non-empty chains monotone, "
                  f"same-depth null effect {null_ok}/{null_total} (delta' >= delta), {secs:.1f}s")


# ---- 4 ------------------------------------------------------------------------

def test_c4_scheme_ordering(report):
    res, cpu, wall = cached_matrix("ordering.ini")
    assert not res.failures, res.failures
    cmp = compare_schemes(read_rows(res.csv_path), "pck2d", 0.1)
    m = cmp.medians
    wins = cmp.pair("ladder", "reversed").wins
    ok = (m["ladder"] >= m["multitask"] >= m["single"] and m["ladder"] > m["reversed"] and wins >= 4
          and cpu <= 3600)
    report(4, ok, "median PCK2D@0.1 " + ", ".join(f"{k} {v:.4f}" for k, v in m.items())
           + f"; ladder beats reversed on {wins}/5 seeds; {cpu / 60:.1f} CPU min ({wall / 60:.1f} wall)")


# ---- 5 ------------------------------------------------------------------------

def test_c5_occlusion_data(report):
    res, cpu, wall = cached_matrix("occlusion.ini")
    assert not res.failures, res.failures
    cmp = compare_schemes(read_rows(res.csv_path), "pck2d", 0.1, occlusion_type="multi_object")
    a, f = cmp.medians["ladder+all"], cmp.medians["ladder+full"]
    ok = a > f and cpu <= 2700
    report(5, ok, f"median PCK2D@0.1 on occluded test samples: all types {a:.4f}, full only {f:.4f}; "
                  f"all wins {cmp.pair('ladder+all', 'ladder+full').wins}/3 seeds; {cpu / 60:.1f} CPU min")


# ---- 6 ------------------------------------------------------------------------

def test_c6_shape_fit(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(600)
    shapes = np.stack([sample_instance("cuboid-vehicle", rng).keypoints.T for _ in range(300)])
    model = fit_pca(shapes, 5)
    vis = np.ones(model.n_keypoints, bool)
    worst_rmse = worst_res = 0.0
    for _ in range(200):
        alpha = rng.uniform(-0.9, 0.9, model.n_components) * model.bounds
        seed = Pose(float(rng.uniform(0, 360)), float(rng.uniform(5, 25)), float(rng.uniform(6, 12)))
        grid = pose_grid(seed)
        truth = grid[int(rng.integers(len(grid)))]
        X = reconstruct(model, alpha)
        p = projected_corners(truth.azimuth, truth.elevation, truth.distance, 1.0, 0.0, 0.0, X.T)[:, :2]
        Y = p * rng.uniform(20, 40, 2) + rng.uniform(0, 32, 2)
        r = fit_structure(Y, vis, model, grid)
        rmse = float(np.sqrt(np.mean(np.sum((reconstruct(model, r.alpha) - X) ** 2, axis=0))))
        worst_rmse, worst_res = max(worst_rmse, rmse), max(worst_res, r.residual)
    clipped = 0
    for _ in range(20):
        alpha = rng.uniform(-0.3, 0.3, model.n_components) * model.sigmas
        j = int(rng.integers(model.n_components))
        sign = float(rng.choice([-1.0, 1.0]))
        alpha[j] = sign * 3.0 * model.sigmas[j]
        pose = Pose(float(rng.uniform(0, 360)), 15.0, 8.0)
        p = projected_corners(pose.azimuth, pose.elevation, pose.distance, 1.0, 0.0, 0.0, reconstruct(model, alpha).T)
        r = fit_structure(p[:, :2] * 30 + 16, vis, model, [pose])
        clipped += r.alpha[j] == sign * BOX * model.sigmas[j]
    secs = time.perf_counter() - t0
    ok = worst_rmse < 1e-3 and worst_res < 1e-6 and clipped == 20 and secs < 120
    report(6, ok, f"200 in-bounds fits: max RMSE {worst_rmse:.2e}, max residual {worst_res:.2e}; "
                  f"out-of-bounds clipped to exactly 2.7 sigma in {clipped}/20; {secs:.1f}s")


# ---- 7 ------------------------------------------------------------------------

def test_c7_metric_oracles(report):
    rng = np.random.default_rng(700)
    worst = 0.0
    for trial in range(100):
        recs = random_records(rng, ties=trial % 2 == 0)
        a = float(rng.uniform(0.02, 0.5))
        pairs = [(0, 1)] if recs[0].gt_kp3d.shape[0] >= 2 else None
        diffs = [pck2d(recs, a) - pck2d_loop(recs, a), pck3d(recs, a) - pck3d_loop(recs, a),
                 mean_recall(recs) - mean_recall_loop(recs)]
        got, want = apk(recs, a), apk_loop(recs, a)
        diffs.append(0.0 if np.isnan(got) and np.isnan(want) else got - want)
        if pairs:
            diffs.append(yaw_error(recs, pairs) - yaw_error_loop(recs, pairs))
        worst = max(worst, max(abs(d) for d in diffs))
    hand = {
        "distance 9 counts at L=100": pck2d([rec2d([[9, 0]], [[0, 0]])], 0.1) == 1.0,
        "distance 11 fails at L=100": pck2d([rec2d([[11, 0]], [[0, 0]])], 0.1) == 0.0,
        "closed ball": pck2d([rec2d([[6, 8]], [[0, 0]])], 0.1) == 1.0,
        "3D distance 0.3": pck3d([rec3d([[0.3, 0, 0]], [[0, 0, 0]])], 0.31) == 1.0
                           and pck3d([rec3d([[0.3, 0, 0]], [[0, 0, 0]])], 0.29) == 0.0,
        "mean recall 0.70": abs(mean_recall([rec3d([[0.3, 0, 0]], [[0, 0, 0]])]) - 0.70) <= 0.01,
        "perfect APK": apk([rec2d([[0, 0]], [[0, 0]], score=[s]) for s in (0.9, 0.5)], 0.1) == 1.0,
        "yaw 5 degrees": abs(yaw_error([rec3d(cube(5.0), cube())], CUBE_PAIRS) - 5.0) <= 0.01,
    }
    failed = [k for k, v in hand.items() if not v]
    report(7, worst <= 1e-9 and not failed,
           f"max |metric - oracle| over 100 random record sets {worst:.1e}; hand examples "
           f"{len(hand) - len(failed)}/{len(hand)}" + (f"; failing {failed}" if failed else ""))


# ---- 8 ------------------------------------------------------------------------

def test_c8_generator_contracts(report, tmp_path):
    t0 = time.perf_counter()
    bad_ratio = overlap = stale = 0
    for i in range(1000):
        fam = ("cuboid-vehicle", "chair-frame")[i % 2]
        pair = make_occluded_pair(fam, rngmod.stream(8, rngmod.DATA, i), 32)
        bad_ratio += not 0.4 <= pair.ratio <= 0.9
        overlap += not aabb_disjoint(*pair.instances)
        if i < 50:
            stale += occlusion_ratio(pair.instances, 0, pair.camera, 32) != pair.ratio
    rng = np.random.default_rng(801)
    mismatched = 0
    for _ in range(100):
        scene, cam = random_scene(rng)
        got = keypoint_visibility(scene, cam, 32, 0).visible
        mismatched += not np.array_equal(got, visibility_raycast(scene, cam, 32, 0, TAU_FACTOR * cam.distance))
    cfg = GenConfig(n_train=150, n_val=0, n_test=0, models_train=12)
    blobs = []
    for k in range(2):
        build_split(cfg, "train", 42).save(tmp_path / f"s{k}.dsd")
        blobs.append((tmp_path / f"s{k}.dsd").read_bytes())
    same = blobs[0] == blobs[1]
    secs = time.perf_counter() - t0
    ok = bad_ratio == 0 and overlap == 0 and stale == 0 and mismatched == 0 and same
    report(8, ok, f"1000 occluded pairs: {bad_ratio} outside [0.4, 0.9], {overlap} overlapping; visibility vs "
                  f"ray-cast oracle: {100 - mismatched}/100 scenes agree; regeneration byte-identical: {same}; "
                  f"{secs:.1f}s")


# ---- 9 ------------------------------------------------------------------------

def _cifar_like(path, rng, n=500):
    """CIFAR-100 binary layout with a fixed 5-fine-per-coarse partition."""
    fine = rng.integers(0, 100, n)
    parent = rng.permutation(100) // 5
    recs = np.concatenate([np.stack([parent[fine], fine], 1), rng.integers(0, 256, (n, 3072))], 1)
    recs.astype(np.uint8).tofile(path)


def test_c9_hierarchy_validation(report, tmp_path):
    rng = np.random.default_rng(900)
    glyphs = gen_hierarchical_classification(5000, rng, size=16)
    e_glyph = estimate_epsilon(glyphs.meta["coarse_id"], glyphs.meta["fine_id"]).epsilon
    path = tmp_path / "train.bin"
    _cifar_like(path, rng)
    cifar = load_cifar100(path)
    e_cifar = estimate_epsilon(cifar.meta["coarse_id"], cifar.meta["fine_id"]).epsilon
    real = os.environ.get("DEEPSUP_CIFAR100")
    e_real = None
    if real and os.path.exists(real):
        ds = load_cifar100(real)
        e_real = estimate_epsilon(ds.meta["coarse_id"], ds.meta["fine_id"]).epsilon
    path.write_bytes(path.read_bytes()[:-100])
    try:
        load_cifar100(path)
        rejected = False
    except FormatError:
        rejected = True
    ok = e_glyph == 0.0 and e_cifar == 0.0 and rejected and (e_real is None or e_real == 0.0)
    report(9, ok, f"epsilon on glyph hierarchy {e_glyph}, on CIFAR-format labels {e_cifar}"
                  + (f", on {real} {e_real}" if e_real is not None else " (no real CIFAR-100 file given)")
                  + f"; truncated file rejected: {rejected}")


# ---- 10 -----------------------------------------------------------------------

def test_c10_determinism(report, tmp_path, capsys):
    cfg = str(CONFIGS / "determinism.ini")
    outs = []
    for k, workers in enumerate(("1", "1", "2")):
        out = tmp_path / f"run{k}"
        assert cli_main(["run-matrix", "--config", cfg, "--out", str(out), "--workers", workers]) == 0
        outs.append({name: (out / name).read_bytes() for name in ("results.csv", "pck2d_curve.svg", "report.txt")})
    capsys.readouterr()
    same = outs[0] == outs[1]
    parallel_same = outs[0] == outs[2]
    report(10, same and parallel_same,
           f"two serial runs byte-identical: {same}; serial vs 2 workers byte-identical: {parallel_same}")
