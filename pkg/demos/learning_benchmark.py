"""Learner comparison on a 1-slot synthetic log.

Trains Regression, IPS, DRO and POEM with a reduced hyper-parameter grid,
reports their test-split estimates next to the Random and logging
references, and adds each policy's exact value from the simulator.

Run with ``python3 demos/learning_benchmark.py [seed]``; it takes under a
minute on one core.
"""
import sys

from blbf.data import LoggedData
from blbf.features import Featurizer
from blbf.learners import HyperGrid, run_benchmark
from blbf.simulator import Simulator, WorldConfig, population_value


def main(seed=0):
    config = WorldConfig(seed=seed, impression_count=100000, base_click_rate=0.01,
                         click_weight_scale=0.25)
    sim = Simulator(config)
    data = LoggedData.concat([c.logged(config.subsample_keep_prob)
                              for c in sim.chunks(config.impression_count)])
    # the policies see the world's latent crosses; the regression model does not
    grid = HyperGrid(epochs=20, lasso=(1e-8, 1e-6), learning_rate=(0.1, 1.0))
    result = run_benchmark(data, sim.logging, Featurizer(crosses=config.crosses), Featurizer(),
                           grid, split_seed=seed)
    print(result.table())
    print("method      exact x1e4")
    for r in result.reports:
        print(f"{r.method:10s}  {1e4 * population_value(r.policy, config, sim.model, 20000):10.1f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
