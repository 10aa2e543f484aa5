"""Compare the compiled and pure-Python kernel backends.

Times the per-iteration forward + input-gradient evaluation on the default
network size, and a full counterfactual search, for each available backend.

    python benchmarks/bench_kernels.py [--repeats N] [--searches N]
"""

import argparse
import time

import numpy as np

from deduce import classifier, engine, feature_density, kernels
from deduce.data_io import SyntheticSpec, generate_synthetic


def best_of(fn, repeats, inner):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--inner", type=int, default=2000)
    ap.add_argument("--searches", type=int, default=30)
    args = ap.parse_args()

    train_set, test_set = generate_synthetic(SyntheticSpec()).split(0.2, 0)
    model = classifier.train(train_set, classifier.TrainConfig(epochs=5))
    feats = classifier.extract_features_batch(model, train_set.images)
    gmm = feature_density.fit(feats, train_set.labels, train_set.class_count)
    net = model.compiled
    x = test_set.images[0]
    t = (int(test_set.labels[0]) + 1) % model.class_count
    pairs = [(test_set.images[i], (int(test_set.labels[i]) + 1) % model.class_count)
             for i in range(args.searches)]

    print(f"network: input {model.input_dim}, features {model.feature_dim}, "
          f"hidden {model.params.hidden_dim}, blocks {len(model.params.blocks)}")
    results = {}
    for name in sorted(kernels.BACKENDS):
        ev = best_of(lambda: kernels.evaluate(net, x, t, gmm, ce_weight=1.0, density_weight=1.0,
                                              normalized=True, eps=1e-12, backend=name),
                     args.repeats, args.inner)
        prev = kernels.set_backend(name)
        try:
            t0 = time.perf_counter()
            iters = sum(engine.generate(model, gmm, xi, ti).iterations for xi, ti in pairs)
            search = (time.perf_counter() - t0) / len(pairs)
        finally:
            kernels.set_backend(prev)
        results[name] = (ev, search)
        print(f"{name:>9}: evaluate {ev * 1e6:8.1f} us   search {search * 1e3:7.2f} ms "
              f"({iters / len(pairs):.0f} iterations avg)")
    if len(results) == 2:
        r_ev = results["python"][0] / results["compiled"][0]
        r_s = results["python"][1] / results["compiled"][1]
        print(f"speedup (python / compiled): evaluate {r_ev:.2f}x, search {r_s:.2f}x")
    else:
        print("compiled backend not built; only the fallback was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
