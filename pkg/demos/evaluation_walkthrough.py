"""Off-policy evaluation on a synthetic log, end to end.

Simulates a 2-slot world, writes its sub-sampled log in the text format,
reads it back, prints propensity statistics and the epsilon sweep, and
compares the estimates with the exact values the simulator knows.

Run with ``python3 demos/evaluation_walkthrough.py``.
"""
import io

from blbf.data import LoggedData
from blbf.estimators import diagnostic_sweep, propensity_stats, propensity_table, sweep_table
from blbf.logformat import stream_impressions
from blbf.policies import EpsilonMixturePolicy
from blbf.simulator import GroundTruthModel, WorldConfig, generate_log, population_value


def main():
    config = WorldConfig(seed=3, nb_slots=2, impression_count=50000)
    model = GroundTruthModel.from_config(config)

    buf = io.StringIO()
    summary = generate_log(config, model, buf)
    print(f"simulated {summary.n_total} impressions, kept {summary.n_kept} "
          f"({summary.n_clicked} clicked)\n")

    records = list(stream_impressions(io.BytesIO(buf.getvalue().encode())))
    data = LoggedData.from_records(records, config.subsample_keep_prob)
    logging = model.logging_policy(config.logging_temperature)

    print(propensity_table(propensity_stats(data, config.subsample_keep_prob)))
    grid = (0.0, 2 ** -4, 2 ** -2, 1.0)
    reports = diagnostic_sweep(data, logging, grid)
    print(sweep_table(reports, grid))

    print("epsilon  snips x1e4  exact x1e4")
    for eps, r in zip(grid, reports):
        exact = population_value(EpsilonMixturePolicy(eps, logging), config, model, 100000)
        print(f"{eps:7.4f}  {1e4 * r.snips:10.1f}  {1e4 * exact:10.1f}")


if __name__ == "__main__":
    main()
