"""Acceptance suite: the end-to-end properties the package promises.

1. Gradient correctness of every primitive, the warp's pose gradients, and
   the full tiny model (< 1e-6 / 1e-4 relative error, < 60 s).
2. Warp exactness at special poses and rotation-matrix exactness.
3. Metric implementations match brute-force oracles on 200 random grids.
4. Stream-coupling ablation: the jointly coupled variant estimates pose
   better than the decoupled one on both regimes.
5. Topology gain: over 3 seeds, the atlas-guided variant's TER beats the
   plain network's without giving up Jaccard.
6. Single-sample overfit sanity.
7. Byte-level determinism of written artifacts.

The ablation and topology runs train real models and dominate the suite's
runtime (tens of minutes on one CPU core).
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from atlasseg.benchmark import ablation_benchmark, default_benchmark, run_benchmark
from atlasseg.cli import EXIT_OK, main
from atlasseg.cli import _gradcheck_rows
from atlasseg.posewarp import Pose, rotation_matrix, warp
from atlasseg.synth import SceneParams, generate
from atlasseg.topology import check_topology, connected_components, jaccard, ter
from atlasseg.training import TrainConfig, overfit_single
from test_posewarp import quaternion_rotation_oracle
from test_topology import SPEC_AB, flood_fill_components


# -- 1. gradient suite -------------------------------------------------------

def test_gradient_suite_passes_within_budget():
    start = time.monotonic()
    rows = _gradcheck_rows()
    elapsed = time.monotonic() - start
    names = {name for name, _, _ in rows}
    assert any(n.startswith("conv") for n in names)
    assert any(n.startswith("warp_pose") for n in names)
    assert {"model/plain", "model/panet", "model/naive"} <= names
    failures = [(n, e, t) for n, e, t in rows if not e < t]
    assert not failures, f"gradient checks out of tolerance: {failures}"
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


# -- 2. warp exactness -------------------------------------------------------

def test_warp_exactness():
    rng = np.random.default_rng(2)
    g2 = rng.random((2, 12, 12))
    g3 = rng.random((2, 8, 8, 8))

    for g, ndim in ((g2, 2), (g3, 3)):
        out, _ = warp(g, Pose.identity(ndim))
        assert np.max(np.abs(out - g)) <= 1e-12

    # One translation unit is half the grid extent: t = 2k/n moves k cells.
    n = g2.shape[-1]
    out, _ = warp(g2, Pose((0.0, 2 * 3 / n), (1.0, 1.0), (0.0,)))
    np.testing.assert_array_equal(out[:, 3:, :], g2[:, :-3, :])

    out, _ = warp(g2, Pose((0.0, 0.0), (1.0, 1.0), (np.pi / 2,)))
    np.testing.assert_array_equal(out, np.rot90(g2, k=-1, axes=(1, 2)))


def test_rotation_matrices_match_quaternion_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        r = tuple(rng.uniform(-np.pi, np.pi, size=3))
        m = rotation_matrix(r)
        q = quaternion_rotation_oracle(np.array(r))
        assert np.max(np.abs(m - q)) <= 1e-12
        assert abs(np.linalg.det(m) - 1.0) <= 1e-12


# -- 3. metric oracles -------------------------------------------------------

def test_metrics_match_bruteforce_oracles_on_200_grids():
    rng = np.random.default_rng(1234)
    violation_lists_fast = []
    violations_oracle = 0
    for trial in range(200):
        ndim = int(rng.integers(2, 4))
        shape = tuple(int(rng.integers(2, 17)) for _ in range(ndim))
        labels = rng.integers(0, 3, size=shape)
        truth = rng.integers(0, 3, size=shape)

        # Jaccard against direct pixel counting.
        for cls in (1, 2):
            inter = int(np.sum((labels == cls) & (truth == cls)))
            union = int(np.sum((labels == cls) | (truth == cls)))
            want = inter / union if union else 1.0
            assert jaccard(labels, truth, cls) == want

        # Components against flood fill.
        mask = labels == 1
        got_l, got_n = connected_components(mask, "face")
        want_l, want_n = flood_fill_components(mask, "face")
        assert got_n == want_n
        np.testing.assert_array_equal(got_l, want_l)

        v = check_topology(labels, SPEC_AB)
        violation_lists_fast.append(v)
        violations_oracle += 1 if v else 0
    assert ter(violation_lists_fast) == violations_oracle / 200


# -- 4. stream-coupling ablation --------------------------------------------

def test_ablation_coupled_pose_beats_decoupled_retina():
    setup = ablation_benchmark("retina2d")
    panet, _ = run_benchmark(setup, "panet", seed=0)
    naive, _ = run_benchmark(setup, "naive", seed=0)
    assert panet["localization_error_px"] < naive["localization_error_px"], (
        f"panet {panet['localization_error_px']:.3f} px vs "
        f"naive {naive['localization_error_px']:.3f} px"
    )


def test_ablation_coupled_pose_beats_decoupled_synapse():
    setup = ablation_benchmark("synapse3d")
    panet, _ = run_benchmark(setup, "panet", seed=0)
    naive, _ = run_benchmark(setup, "naive", seed=0)
    assert panet["orientation_error_deg"] < naive["orientation_error_deg"], (
        f"panet {panet['orientation_error_deg']:.2f} deg vs "
        f"naive {naive['orientation_error_deg']:.2f} deg"
    )


# -- 5. topology gain --------------------------------------------------------

@pytest.mark.parametrize("regime", ["retina2d", "synapse3d"])
def test_topology_gain_over_three_seeds(regime):
    start = time.monotonic()
    setup = default_benchmark(regime)
    ters = {"plain": [], "panet": []}
    jaccards = {"plain": [], "panet": []}
    for seed in (0, 1, 2):
        for variant in ("plain", "panet"):
            report, _ = run_benchmark(setup, variant, seed)
            k, n = report["ter"]
            ters[variant].append(k / n)
            jaccards[variant].append(report["jaccard_mean"])
    elapsed = time.monotonic() - start
    detail = f"TER plain {ters['plain']} panet {ters['panet']}, " \
             f"J plain {jaccards['plain']} panet {jaccards['panet']}"
    assert np.mean(ters["panet"]) <= np.mean(ters["plain"]), detail
    strict_wins = sum(p < q for p, q in zip(ters["panet"], ters["plain"]))
    assert strict_wins >= 2, detail
    assert np.mean(jaccards["panet"]) >= np.mean(jaccards["plain"]) - 2.0, detail
    assert elapsed < 1800.0, f"{regime}: topology benchmark took {elapsed:.0f}s"


# -- 6. single-sample overfit ------------------------------------------------

def test_single_sample_overfit():
    sample = generate(
        SceneParams(regime="retina2d", size=16, seed=0, noise_sigma=0.0, distractor_count=0), 1
    )[0]
    config = TrainConfig(variant="panet", learning_rate=5e-3, seed=0)
    losses = overfit_single(config, sample, steps=500)
    assert min(losses) < 0.05, f"loss only reached {min(losses):.4f}"


# -- 7. determinism ----------------------------------------------------------

def test_identical_runs_write_identical_artifacts(tmp_path):
    config = {
        "schema_version": 1,
        "regime": "retina2d",
        "seed": 5,
        "scene": {"size": 16, "distractor_count": 1},
        "dataset": {"n_train": 6, "n_val": 2, "n_test": 2},
        "train": {"epochs": 2, "batch_size": 4, "depth": 2, "base_channels": 2,
                  "pose_hidden": 4},
    }
    outputs = []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        cfg = root / "config.json"
        cfg.write_text(json.dumps({**config, "output_dir": str(root / "runs")}))
        assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
        assert main(["train", "--config", str(cfg), "--data", str(root / "data"),
                     "--variant", "panet", "--out", str(root / "train")]) == EXIT_OK
        assert main(["eval", "--config", str(cfg), "--data", str(root / "data"),
                     "--checkpoint", str(root / "train" / "checkpoint"),
                     "--out", str(root / "eval")]) == EXIT_OK
        outputs.append(root)
    a, b = outputs
    for rel in ("train/history.csv", "eval/metrics.csv", "eval/metrics.txt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
