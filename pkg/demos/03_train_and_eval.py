"""Miniature end-to-end run: collect demonstrations, train the three
stages, and score the policy against a random baseline.

Everything is scaled down (small worlds, narrow sensor, thin network) so
the whole script finishes in about a minute on a laptop while still
exercising the full pipeline.
"""

import time

import numpy as np

from navlab import demogen, evalharness, rewards
from navlab.gridsim import WorldConfig, generate_world
from navlab.policy import PolicyConfig, init_params, pretrain_obs_encoder
from navlab.training import StageConfig, TrainingData, run_stage

WCFG = WorldConfig(width=16, height=16, num_categories=3)
PCFG = PolicyConfig(num_categories=3, map_window=15, patch=5, num_rays=9,
                    d=16, d_v=16, n_queries=2, hidden=32)


def main():
    t0 = time.perf_counter()
    train_worlds = [generate_world(s, WCFG) for s in range(1, 13)]
    held = [generate_world(s, WCFG) for s in range(100, 106)]

    from navlab.gridsim import SensorConfig
    _, records = demogen.generate_corpus(
        train_worlds, seed=0,
        spec=demogen.CorpusSpec(target_records=2500,
                                window=PCFG.map_window),
        sensor=SensorConfig(num_rays=PCFG.num_rays))
    rewards.label_records(records)
    data = TrainingData.from_records(records, PCFG)
    print(f"corpus: {len(data)} labeled chunks "
          f"({time.perf_counter() - t0:.1f}s)")

    pset = init_params(PCFG, seed=0)
    pretrain_obs_encoder(pset, PCFG, seed=0)
    for stage, epochs, lr in ((1, 2, 1e-3), (2, 10, 1e-3), (3, 3, 3e-4)):
        rep = run_stage(stage, data, pset,
                        StageConfig(stage=stage, epochs=epochs, lr=lr), PCFG)
        losses = " ".join(f"{e['total']:.3f}" for e in rep.epochs)
        print(f"stage {stage}: loss per epoch {losses}")

    policy_fn = evalharness.CheckpointPolicy(pset, PCFG)
    _, m = evalharness.evaluate(held, 3, policy_fn, PCFG, budget=120, seed=7)
    _, mr = evalharness.evaluate(held, 3, evalharness.RandomPolicy(1), PCFG,
                                 budget=120, seed=7)
    print(f"trained policy SR {m.sr:.2f} SPL {m.spl:.2f} | "
          f"random baseline SR {mr.sr:.2f} SPL {mr.spl:.2f}")
    print(f"total {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
