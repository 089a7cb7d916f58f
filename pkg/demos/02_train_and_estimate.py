"""Train one denoiser for both conditional and unconditional use, then read
the MI off its error curves with all four estimator variants.

Run:  python3 demos/02_train_and_estimate.py [task] [iterations]
The desk default is 30000 iterations (about a minute per model on one core).
"""
import sys
from dataclasses import replace

import numpy as np

from mmgap import estimate, parse_task_name, profile_configs, train, two_stage_train

task = parse_task_name(sys.argv[1] if len(sys.argv) > 1 else "1v1-normal-0.75")
iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 30000
mlp, tc, oc = profile_configs("desk", task, seed=0)
tc = replace(tc, iterations=iterations)
print(f"{task.name}: ground truth {task.ground_truth_nats:.4f} nats, {iterations} steps per model")

baseline = train(task, mlp, tc, oc)
print(f"final epoch loss {baseline.history[-1][1]:.4f}")

# A fixed held-out set, as in the benchmark harness.
test = task.sample(10000, np.random.default_rng(123))
for variant in ("gap", "orthogonal"):
    e = estimate(baseline.denoiser(), test, tc.sampling, np.random.default_rng(1), variant)
    print(f"{variant:>20}: {e.mean_nats:.4f} +- {e.std_nats:.4f}")

# Second stage: refit the log-SNR proposal to the preliminary model's curve.
two = two_stage_train(task, mlp, tc, oc, preliminary=baseline)
fit = two.fit
if fit.fallback:
    print("adaptive fit found no crossings; keeping the default proposal")
else:
    print(f"adaptive proposal: loc {fit.sampling.loc:.3f}, scale {fit.sampling.scale:.3f}")
for variant in ("gap-adaptive", "orthogonal-adaptive"):
    e = estimate(two.final.denoiser(), test, two.fitted, np.random.default_rng(2), variant)
    print(f"{variant:>20}: {e.mean_nats:.4f} +- {e.std_nats:.4f}")
