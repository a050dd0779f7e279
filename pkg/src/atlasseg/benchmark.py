"""Default benchmark configurations and a one-call comparison runner.

Two suites per regime:

* ``default_benchmark`` — the standard distractor benchmark used for the
  topology comparisons (plain vs panet TER/Jaccard over seeds).
* ``ablation_benchmark`` — the stream-coupling ablation (panet vs naive pose
  accuracy).  The synapse variant uses a much wider rotation range: with
  near-upright structures every model can coast on the identity rotation, so
  wide rotations are what make orientation estimation measurable at all.

These settings were tuned once, centrally, so the CLI, the tests, and any
notebook all run the exact same experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .synth import SceneParams, generate, split
from .topology import TopologySpec, builtin_spec
from .training import TrainConfig, TrainResult, evaluate, train, training_atlas


@dataclass(frozen=True)
class BenchmarkSetup:
    scene: SceneParams
    train: TrainConfig
    n_train: int
    n_val: int
    n_test: int

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def topology(self) -> TopologySpec:
        return builtin_spec("retina" if self.scene.regime == "retina2d" else "synapse")


_RETINA_DEFAULT = BenchmarkSetup(
    scene=SceneParams(
        regime="retina2d",
        size=32,
        translation_range=0.3,
        noise_sigma=0.1,
        distractor_count=9,
        distractor_scale_range=(0.7, 1.0),
    ),
    train=TrainConfig(learning_rate=5e-3, epochs=16, base_channels=8),
    n_train=96,
    n_val=12,
    n_test=32,
)

_SYNAPSE_DEFAULT = BenchmarkSetup(
    scene=SceneParams(
        regime="synapse3d",
        size=16,
        distractor_count=8,
    ),
    train=TrainConfig(learning_rate=5e-3, epochs=24, base_channels=8),
    n_train=64,
    n_val=8,
    n_test=32,
)

_SYNAPSE_ABLATION = BenchmarkSetup(
    scene=SceneParams(
        regime="synapse3d",
        size=16,
        rotation_range_deg=75.0,
        distractor_count=5,
        distractor_scale_range=(0.5, 0.8),
    ),
    train=TrainConfig(learning_rate=5e-3, epochs=20, base_channels=8),
    n_train=200,
    n_val=12,
    n_test=24,
)


def default_benchmark(regime: str) -> BenchmarkSetup:
    if regime == "retina2d":
        return _RETINA_DEFAULT
    if regime == "synapse3d":
        return _SYNAPSE_DEFAULT
    raise ValueError(f"no default benchmark for regime {regime!r}")


def ablation_benchmark(regime: str) -> BenchmarkSetup:
    if regime == "retina2d":
        return _RETINA_DEFAULT
    if regime == "synapse3d":
        return _SYNAPSE_ABLATION
    raise ValueError(f"no ablation benchmark for regime {regime!r}")


def run_benchmark(setup: BenchmarkSetup, variant: str, seed: int) -> tuple[dict, TrainResult]:
    """Generate the dataset, train one variant, and evaluate on the test split.

    The seed drives scene generation, the split, and training together, so a
    (setup, variant, seed) triple fully determines the result.
    """
    scene = replace(setup.scene, seed=seed)
    samples = generate(scene, setup.n_total)
    fractions = (
        setup.n_train / setup.n_total,
        setup.n_val / setup.n_total,
        setup.n_test / setup.n_total,
    )
    train_s, val_s, test_s = split(samples, fractions, seed=seed)
    config = replace(setup.train, variant=variant, seed=seed)
    spec = setup.topology()
    result = train(config, train_s, val_s, spec)
    atlas = training_atlas(config, scene.regime, scene.resolved_size())
    report = evaluate(result.params, result.arch, test_s, atlas, spec)
    return report, result
