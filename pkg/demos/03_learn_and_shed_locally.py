"""Offline learning, online local decisions on the bundled 6-bus case.

1. Simulate perturbed loads under two line outages; each bus records its
   local measurements and the alpha of the central shedding solution.
2. Train one small network per load bus to map measurements to alpha.
3. On held-out samples, each bus predicts alpha from its own measurements
   and recovers its shedding decision in closed form.

Run with ``python demos/03_learn_and_shed_locally.py``.
"""

import logging

import numpy as np

from loadshed.casefile import load_case
from loadshed.learning.dataset import generate_dataset
from loadshed.learning.train import Hyper, predict_shedding, split_indices, train_bus_model
from loadshed.powerflow import Contingency


def main():
    logging.basicConfig(level=logging.WARNING)
    case = load_case("case6")
    conts = [Contingency("L5", (5,)), Contingency("L9", (9,))]
    datasets, log = generate_dataset(case, conts, 200, perturb_range=(0.95, 1.3), master_seed=1)
    print(log.to_csv())

    hyper = Hyper(hidden=(20, 10), patience=50)
    for bus, ds in sorted(datasets.items()):
        model, m = train_bus_model(ds, hyper, case.cost_by_bus[bus])
        _, _, test = split_indices(len(ds), hyper)
        a_hat, p_hat = predict_shedding(model, ds.X[test])
        err = np.abs(p_hat - ds.p_shed[test])
        print(f"bus {bus}: {len(ds.layout)} local features, alpha error {m.mape:5.2f}%, "
              f"shedding error mean {err.mean():.3f} MW, max {err.max():.3f} MW "
              f"(true decisions up to {ds.p_shed[test].max():.1f} MW)")

        # one online decision: only this bus's measurements are used
        x = ds.X[test[0]]
        a, p = predict_shedding(model, x)
        print(f"    sample {test[0]}: alpha_hat {a:.3f} (true {ds.y[test[0]]:.3f}) "
              f"-> shed {p:.3f} MW (true {ds.p_shed[test[0]]:.3f} MW)")


if __name__ == "__main__":
    main()
