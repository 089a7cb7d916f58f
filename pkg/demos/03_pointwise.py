"""Pointwise quantities from denoisers: log-densities for single points and
pointwise MI for single pairs.  Exact Gaussian denoisers keep it fast.

Run:  python3 demos/03_pointwise.py
"""
import numpy as np

from mmgap import JointGaussianSpec, LinearGaussianDenoiser, pointwise_log_density, pointwise_mi

spec = JointGaussianSpec(1, 1, np.array([[1.0, 0.75], [0.75, 1.0]]))
model = LinearGaussianDenoiser(spec)
rng = np.random.default_rng(0)

print("x      log p(x) from MMSE   exact")
for x in (0.0, 1.0, 2.5):
    lp = pointwise_log_density(model, np.array([x]), rng=rng)
    print(f"{x:4.1f}   {lp:12.5f}        {-0.5 * np.log(2 * np.pi) - x * x / 2:9.5f}")

pairs = spec.sample(500, rng)
pmi = pointwise_mi(model, pairs.xs, pairs.ys, rng=rng)
print(f"\nmean pointwise MI over 500 pairs: {pmi.mean():.4f} (MI = 0.4133)")
print(f"most informative pair: x={pairs.xs[pmi.argmax(), 0]:+.2f}, y={pairs.ys[pmi.argmax(), 0]:+.2f}, "
      f"pmi={pmi.max():.3f}")
