"""Acceptance criteria 1-7, each at its stated tolerance and time budget.

Every test prints one ``[criterion N] PASS|FAIL ...`` line straight to the
terminal so the verdicts are visible in a plain ``pytest -v`` log.
"""
import time

import numpy as np
import pytest
from scipy.special import log_softmax

from sfpnet import ops
from sfpnet.autograd import ParamStore, Tape, backward
from sfpnet.checkpoint import dumps, loads
from sfpnet.config import RunConfig
from sfpnet.data import ScanRecord, generate_scan, make_pattern, membership, random_scene
from sfpnet.data.scene import direction_cells, jaccard
from sfpnet.errors import FormatError
from sfpnet.gradcheck import NETWORK_TOL, OP_CASES, OP_TOL, check_op, network_case
from sfpnet.network import (ABLATIONS, NetworkConfig, ablation_config, build_network,
                            network_forward, prepare, train_step)
from sfpnet.oracles import run_oracle
from sfpnet.sfpm import (ModulatorConfig, ModulatorParams, init_modulator, make_rulebooks,
                         receptive_fields, sfpm_forward)
from sfpnet.sparse import voxelize
from sfpnet.train import synthetic_scans, train

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


def test_criterion_1_oracle_equivalence(verdict):
    start = time.perf_counter()
    cases = run_oracle(cases=200, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(c.max_abs_diff for c in cases)
    ok = len(cases) == 200 and worst < 1e-10 and elapsed < 30
    assert verdict(1, ok, f"200 cases, max abs diff {worst:.2e} (< 1e-10), {elapsed:.1f}s (< 30s)")


def test_criterion_2_gradient_suite(verdict):
    start = time.perf_counter()
    worst_op, worst_net, failures = 0.0, 0.0, []
    for seed in range(100):
        for name in OP_CASES:
            r = check_op(name, seed)
            worst_op = max(worst_op, r.max_rel_err)
            if r.max_rel_err >= OP_TOL:
                failures.append((name, seed, r.max_rel_err))
        r = network_case(seed)
        worst_net = max(worst_net, r.max_rel_err)
        if r.max_rel_err >= NETWORK_TOL:
            failures.append(("network", seed, r.max_rel_err))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 300
    assert verdict(2, ok, f"{len(OP_CASES)} op cases + network x 100 seeds, worst op {worst_op:.2e} "
                          f"(< 1e-4), worst network {worst_net:.2e} (< 1e-3), {elapsed:.0f}s (< 300s)"
                          + (f", failures {failures[:5]}" if failures else ""))


def _scene_points(seed, max_points=600):
    """Synthetic scan on a 1/256 m grid so whole-voxel shifts are exact in float32."""
    scan = generate_scan(random_scene(seed, make_pattern("hybrid_solid"), max_range=12.0), seed)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(scan), min(max_points, len(scan)), replace=False))
    pts = scan.points[idx].astype(np.float64)
    pts[:, :3] = np.round(pts[:, :3] * 256) / 256
    return ScanRecord(pts, scan.labels[idx])


def test_criterion_3_translation_invariance(verdict):
    voxel = 0.125
    cfg = ModulatorConfig(8, focal_levels=3)
    store = ParamStore(np.float32)
    init_modulator(store, "m", cfg, np.random.default_rng(0))
    params = ModulatorParams.from_source(store, "m", cfg)
    proj = np.random.default_rng(1).standard_normal((4, 8)).astype(np.float32)
    net, net_store = build_network(NetworkConfig(voxel_size=voxel, stage_channels=(8,) * 5,
                                                 blocks_per_stage=1), seed=0)
    sfpm_ok = net_ok = 0
    for seed in range(50):
        scan = _scene_points(seed)
        shift = np.random.default_rng([seed, 3]).integers(-50, 51, 3)
        moved = scan.points.copy()
        moved[:, :3] += shift * voxel
        a, _ = voxelize(scan.points, voxel)
        b, _ = voxelize(moved, voxel)
        fa = sfpm_forward(a.replace(a.features @ proj), params, make_rulebooks(a, cfg))
        fb = sfpm_forward(b.replace(b.features @ proj), params, make_rulebooks(b, cfg))
        sfpm_ok += (np.array_equal(b.coords[:, 1:], a.coords[:, 1:] + shift)
                    and np.array_equal(fa.features, fb.features))
        la = network_forward(net, net_store, scan)
        lb = network_forward(net, net_store, ScanRecord(moved, scan.labels))
        net_ok += np.array_equal(la, lb)
    ok = sfpm_ok == net_ok == 50
    assert verdict(3, ok, f"exact equality under integer voxel shifts: sfpm {sfpm_ok}/50, "
                          f"network {net_ok}/50")


def test_criterion_4_structural_fidelity(verdict):
    cfg = ModulatorConfig(16, focal_levels=3, base_kernel=3)
    sizes, fields, width = cfg.kernel_sizes, receptive_fields(cfg.kernel_sizes), cfg.gate_width
    tiny = NetworkConfig(voxel_size=0.25, stage_channels=(8,) * 5, blocks_per_stage=1)
    scan = _scene_points(0, max_points=300)
    trained = []
    for name in sorted(ABLATIONS):
        net, store = build_network(ablation_config(tiny, name))
        loss, _ = train_step(net, store, prepare(net, [scan]), 8e-4)
        if np.isfinite(loss) and store.step == 1:
            trained.append(name)
    ok = sizes == (3, 5, 7) and fields == (3, 7, 13) and width == 4 and len(trained) == 4
    assert verdict(4, ok, f"kernels {sizes}, receptive fields {fields}, gate width {width}, "
                          f"ablations trained one step: {trained}")


OVERFIT = {
    "network.stage_channels": "16,32,32,32,32",
    "network.blocks_per_stage": "1",
    "data.pattern": "hybrid_solid",
    "data.train_scans": 8,
    "network.num_classes": 5,
    "train.batch_size": 8,
    "train.steps": 2000,
    "train.target_miou": 0.95,
}
OVERFIT_SEEDS = range(5)


def test_criterion_5_overfit(verdict):
    start = time.perf_counter()
    steps = {"sfpm": [], "basic": []}
    for seed in OVERFIT_SEEDS:
        for variant, extra in (("sfpm", {}), ("basic", {"network.use_sfpm_in": ""})):
            cfg = RunConfig({**OVERFIT, **extra, "seed": seed})
            result = train(cfg, synthetic_scans(cfg))
            steps[variant].append(result.steps_to_target)
    elapsed = time.perf_counter() - start
    reached = all(s is not None for v in steps.values() for s in v)
    no_faster = reached and sum(steps["basic"]) >= sum(steps["sfpm"])
    ok = reached and no_faster and elapsed < 900
    assert verdict(5, ok, f"steps to train mIoU >= 0.95 per seed: sfpm {steps['sfpm']} "
                          f"(sum {sum(filter(None, steps['sfpm']))}), basic {steps['basic']} "
                          f"(sum {sum(filter(None, steps['basic']))}), {elapsed:.0f}s (< 900s)")


def test_criterion_6_determinism_and_formats(verdict):
    overrides = {"network.voxel_size": 0.25, "network.stage_channels": "8,8,8,8,8",
                 "network.blocks_per_stage": "1", "data.train_scans": 2, "data.max_range": 10,
                 "train.batch_size": 2, "train.steps": 4}
    cfg = RunConfig(overrides)
    scans = synthetic_scans(cfg)
    blobs = [dumps(train(cfg, scans).store, cfg.dumps()) for _ in range(2)]
    identical = blobs[0] == blobs[1]
    text, store = loads(blobs[0])
    roundtrip = text == cfg.dumps() and dumps(store, text) == blobs[0]

    rng = np.random.default_rng(6)
    detected = 0
    positions = rng.choice(len(blobs[0]), 50, replace=False)
    for pos in positions:
        bad = bytearray(blobs[0])
        bad[pos] ^= 1 << int(rng.integers(0, 8))
        try:
            loads(bytes(bad))
        except FormatError:
            detected += 1

    worst = 0.0
    for _ in range(20):
        z = rng.standard_normal((64, 5)) * 4
        y = rng.integers(0, 5, 64)
        tape = Tape()
        zv = tape.leaf(z)
        loss = ops.focal_loss(zv, y, gamma=0.0)
        ce = -log_softmax(z, axis=1)[np.arange(64), y].mean()
        grad_ce = (np.exp(log_softmax(z, axis=1)) - np.eye(5)[y]) / 64
        worst = max(worst, abs(float(loss.value) - ce),
                    np.max(np.abs(backward(tape, loss)[zv] - grad_ce)))
    ok = identical and roundtrip and detected == 50 and worst < 1e-12
    assert verdict(6, ok, f"rerun checkpoints identical: {identical}, roundtrip bit-exact: {roundtrip}, "
                          f"corruptions detected {detected}/50, focal(gamma=0) vs CE {worst:.1e} (< 1e-12)")


def test_criterion_7_pattern_coverage(verdict):
    agree = {}
    for pattern in ("spinning", "solid_state", "hybrid_solid"):
        fractions = []
        for seed in range(5):
            spec = random_scene(seed, make_pattern(pattern), noise_sigma=0.0)
            scan = generate_scan(spec, seed)
            idx = np.random.default_rng(seed).choice(len(scan), min(1000, len(scan)), replace=False)
            on = membership(spec, scan.points[idx])
            classes = np.array([p.class_id for p in spec.primitives])
            fractions.append(np.mean([(classes[on[i]] == scan.labels[j]).any()
                                      for i, j in enumerate(idx)]))
        agree[pattern] = float(min(fractions))
    spec = random_scene(0)
    overlaps = [jaccard(direction_cells(generate_scan(spec, 2 * i).points, spec.origin),
                        direction_cells(generate_scan(spec, 2 * i + 1).points, spec.origin))
                for i in range(20)]
    ok = all(v == 1.0 for v in agree.values()) and max(overlaps) < 0.9
    assert verdict(7, ok, f"label-oracle agreement {agree}, hybrid direction Jaccard max "
                          f"{max(overlaps):.3f} over 20 seed pairs (< 0.9)")
