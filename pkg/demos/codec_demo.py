"""Fit the affine VAE on correlated 2-D observations and inspect what it keeps."""
import numpy as np

from semaigc.codec import SourceSample, VaeParams, decode_latent, extract_image_semantics, train_vae
from semaigc.diffusion import Guidance

rng = np.random.default_rng(0)
cov = np.array([[2.0, 1.2], [1.2, 1.0]])
S = rng.multivariate_normal([1.0, -1.0], cov, size=20_000)

p = VaeParams.init(2, 2, rng=1)
trace = train_vae(S, p, steps=3000, rng=2)
print(f"loss: first 100 steps {trace[:100].mean():.3f}, last 100 steps {trace[-100:].mean():.3f}")

z = extract_image_semantics(SourceSample(S[:5000], 0), p, rng=3)
print("aggregate latent covariance (close to identity):\n", np.round(np.cov(z.values.T), 3))

mu = extract_image_semantics(SourceSample(S[:3], 0), p, deterministic=True)
back = decode_latent(mu, Guidance(0), p)
print("originals:\n", np.round(S[:3], 3))
print("reconstructions from the posterior mean:\n", np.round(back.observation, 3))
