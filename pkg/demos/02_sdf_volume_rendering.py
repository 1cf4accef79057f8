"""Volume rendering from signed distances.

Shows how SDF values along a ray turn into opacities and how the
sharpness scalar b trades blur against a hard surface.
"""

import numpy as np

from sdfseg import RaySamples, accumulate, alpha_from_sdf

# a ray marching through a sphere of radius 0.5 centered at the origin
origin = np.array([0.0, 0.0, -2.0])
direction = np.array([0.0, 0.0, 1.0])
t = np.linspace(1.0, 3.0, 64)
pts = origin + t[:, None] * direction
sdf = np.linalg.norm(pts, axis=1) - 0.5

print("closed-form check: f_i=0.1, f_next=-0.1, b=10 ->",
      alpha_from_sdf(0.1, -0.1, 10.0), "(= 1 - e^-1)")

for b in (10.0, 50.0, 400.0):
    samples = RaySamples.from_sdf(t, pts, sdf, b)
    samples.validate()
    colors = np.tile([1.0, 0.2, 0.1], (len(t), 1))
    c, a = accumulate(samples, colors)
    peak = t[np.argmax(samples.weights)]
    print(f"b={b:6.0f}: pixel alpha {a:.4f}, weight peak at t={peak:.3f} "
          f"(true crossing at t=1.5)")

# transmittance bookkeeping: sum of weights == 1 - prod(1 - alpha)
rng = np.random.default_rng(0)
alpha = rng.uniform(0, 1, size=32)
trans = np.cumprod(np.concatenate([[1.0], 1.0 - alpha[:-1]]))
print("\nweight identity:",
      np.isclose((trans * alpha).sum(), 1 - np.prod(1 - alpha)))

# opacity is zero wherever the SDF is flat or receding
print("flat interval alpha:", alpha_from_sdf(0.2, 0.2, 50.0))
print("receding interval alpha:", alpha_from_sdf(0.1, 0.3, 50.0))
