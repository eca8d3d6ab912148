"""Semantic extraction, latent decoding, the VAE objective and a bounded quality score.

Text semantics are a fixed seeded embedding table indexed by label. Image semantics use
an affine Gaussian encoder ``s -> (mu, log sigma)`` and an affine decoder that takes the
latent concatenated with the label embedding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import sqrtm

from .diffusion import GaussianMixture, Guidance, Latent
from .nn import make_optimizer


class CodecError(ValueError):
    pass


class TextEncoder:
    def __init__(self, labels, dim=8, seed=0):
        self.labels = sorted(int(x) for x in labels)
        self.dim = dim
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((len(self.labels), dim))
        self.table = table / np.linalg.norm(table, axis=1, keepdims=True)
        self.table.setflags(write=False)
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def __call__(self, label) -> Guidance:
        try:
            i = self._index[int(label)]
        except (KeyError, ValueError, TypeError):
            raise CodecError(f"unknown label {label!r}") from None
        return Guidance(int(label), self.table[i])


def extract_text_semantics(label, encoder: TextEncoder) -> Guidance:
    return encoder(label)


@dataclass(eq=False)
class SourceSample:
    observation: np.ndarray
    label: int

    def __post_init__(self):
        self.observation = np.asarray(self.observation, dtype=float)
        if not np.all(np.isfinite(self.observation)):
            raise CodecError("observation must be finite")


@dataclass(eq=False)
class VaeParams:
    """Affine encoder ``D -> 2d`` (means then log-stds) and decoder ``d + e -> D``."""

    enc_W: np.ndarray
    enc_b: np.ndarray
    dec_W: np.ndarray
    dec_b: np.ndarray
    trained: bool = False

    def __post_init__(self):
        D, two_d = self.enc_W.shape
        if two_d % 2 or self.enc_b.shape != (two_d,):
            raise CodecError("encoder must output d means and d log-stds")
        if self.dec_W.shape[1] != D or self.dec_b.shape != (D,) or self.dec_W.shape[0] < two_d // 2:
            raise CodecError("decoder dimensions do not match the encoder")

    @property
    def obs_dim(self):
        return self.enc_W.shape[0]

    @property
    def latent_dim(self):
        return self.enc_W.shape[1] // 2

    @property
    def embed_dim(self):
        return self.dec_W.shape[0] - self.latent_dim

    @property
    def arrays(self):
        return [self.enc_W, self.enc_b, self.dec_W, self.dec_b]

    @classmethod
    def init(cls, obs_dim, latent_dim, embed_dim=0, rng=None, scale=0.1):
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0, scale, (obs_dim, 2 * latent_dim)), np.zeros(2 * latent_dim),
                   rng.normal(0, scale, (latent_dim + embed_dim, obs_dim)), np.zeros(obs_dim))

    @classmethod
    def identity(cls, dim, log_std=0.0, embed_dim=0):
        enc_W = np.hstack([np.eye(dim), np.zeros((dim, dim))])
        enc_b = np.concatenate([np.zeros(dim), np.full(dim, float(log_std))])
        dec_W = np.vstack([np.eye(dim), np.zeros((embed_dim, dim))])
        return cls(enc_W, enc_b, dec_W, np.zeros(dim))

    def encode(self, s):
        out = np.atleast_2d(s) @ self.enc_W + self.enc_b
        d = self.latent_dim
        return out[:, :d], out[:, d:]

    def to_dict(self):
        return {"enc_W": self.enc_W.tolist(), "enc_b": self.enc_b.tolist(),
                "dec_W": self.dec_W.tolist(), "dec_b": self.dec_b.tolist(),
                "trained": self.trained}

    @classmethod
    def from_dict(cls, doc):
        return cls(*(np.asarray(doc[k], dtype=float) for k in ("enc_W", "enc_b", "dec_W", "dec_b")),
                   trained=bool(doc.get("trained", False)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _stack(batch):
    if isinstance(batch, SourceSample):
        batch = [batch]
    if len(batch) == 0:
        raise CodecError("empty batch")
    return np.vstack([b.observation for b in batch])


def extract_image_semantics(s: SourceSample, p: VaeParams, rng=None, deterministic=False) -> Latent:
    """Reparameterized encoder sample ``mu(s) + sigma(s) * eps`` at step 0."""
    if s.observation.shape[-1] != p.obs_dim:
        raise CodecError(f"observation dim {s.observation.shape[-1]} != encoder input {p.obs_dim}")
    mu, log_std = p.encode(s.observation)
    if deterministic:
        z = mu
    else:
        rng = np.random.default_rng(rng)
        z = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    return Latent(z.reshape(s.observation.shape[:-1] + (p.latent_dim,)), 0)


def decode_latent(z: Latent, g: Guidance, p: VaeParams) -> SourceSample:
    if z.step != 0:
        raise CodecError(f"refusing to decode a latent at step {z.step}")
    if z.dim != p.latent_dim:
        raise CodecError("latent dimension does not match the decoder")
    zz = np.atleast_2d(z.values)
    emb = np.broadcast_to(np.asarray(g.embedding, dtype=float)[:p.embed_dim], (zz.shape[0], p.embed_dim))
    out = np.hstack([zz, emb]) @ p.dec_W + p.dec_b
    return SourceSample(out.reshape(z.values.shape[:-1] + (p.obs_dim,)), g.label)


def vae_loss_terms(S, p: VaeParams, eps, embeddings=None, return_grads=False):
    """KL and reconstruction terms for observations ``S`` (m, D) under fixed encoder noise ``eps``.

    KL = -(1/2m) sum (1 + log sigma^2 - sigma^2 - mu^2); MSE = (1/m) sum ||s - s_hat||^2.
    """
    S = np.atleast_2d(S)
    m = S.shape[0]
    if m == 0:
        raise CodecError("empty batch")
    d = p.latent_dim
    mu, log_std = p.encode(S)
    std = np.exp(log_std)
    z = mu + std * eps
    emb = np.zeros((m, p.embed_dim)) if embeddings is None else np.broadcast_to(embeddings, (m, p.embed_dim))
    zin = np.hstack([z, emb])
    recon = zin @ p.dec_W + p.dec_b
    kl = -0.5 / m * np.sum(1.0 + 2.0 * log_std - std ** 2 - mu ** 2)
    mse = np.sum((S - recon) ** 2) / m
    if not return_grads:
        return float(kl), float(mse)
    g_rec = -2.0 / m * (S - recon)
    g_decW = zin.T @ g_rec
    g_decb = g_rec.sum(axis=0)
    g_z = g_rec @ p.dec_W[:d].T
    g_mu = g_z + mu / m
    g_ls = g_z * std * eps + (std ** 2 - 1.0) / m
    g_enc = np.hstack([g_mu, g_ls])
    return float(kl), float(mse), [S.T @ g_enc, g_enc.sum(axis=0), g_decW, g_decb]


def vae_loss(batch, p: VaeParams, rng=None, embeddings=None) -> float:
    S = _stack(batch)
    eps = np.random.default_rng(rng).standard_normal((S.shape[0], p.latent_dim))
    kl, mse = vae_loss_terms(S, p, eps, embeddings)
    return kl + mse


def train_vae(S, p: VaeParams, steps=3000, batch_size=256, lr=1e-2, optimizer="adam", rng=None):
    """Fit ``p`` in place on observations ``S`` by stochastic gradient steps; returns the loss trace."""
    rng = np.random.default_rng(rng)
    S = np.atleast_2d(S)
    opt = make_optimizer(optimizer, lr)
    trace = []
    for _ in range(steps):
        idx = rng.integers(0, S.shape[0], size=batch_size)
        eps = rng.standard_normal((batch_size, p.latent_dim))
        kl, mse, grads = vae_loss_terms(S[idx], p, eps, return_grads=True)
        opt.step(p.arrays, grads)
        trace.append(kl + mse)
    p.trained = True
    return np.asarray(trace)


# -- quality --------------------------------------------------------------------------

def gaussian_w2(m1, c1, m2, c2) -> float:
    """2-Wasserstein distance between two Gaussians."""
    r2 = sqrtm(c2)
    cross = sqrtm(r2 @ c1 @ r2)
    tr = np.trace(c1) + np.trace(c2) - 2.0 * np.real(np.trace(cross))
    return float(np.sqrt(max(float(np.sum((m1 - m2) ** 2)) + tr, 0.0)))


def mixture_distance(samples, target: GaussianMixture) -> float:
    """Weighted per-component Gaussian W2 plus total absolute weight mismatch.

    Samples are assigned to the nearest target mean; components with no assigned
    samples contribute only through the weight term.
    """
    x = samples.values if isinstance(samples, Latent) else np.asarray(samples, dtype=float)
    x = np.atleast_2d(x)
    n = x.shape[0]
    d2 = ((x[:, None, :] - target.means[None]) ** 2).sum(axis=-1)
    comp = d2.argmin(axis=1)
    dist = 0.0
    for k, w in enumerate(target.weights):
        xk = x[comp == k]
        dist += abs(xk.shape[0] / n - w)
        if xk.shape[0] == 0:
            continue
        ck = np.cov(xk.T, bias=True).reshape(target.dim, target.dim) if xk.shape[0] > 1 \
            else np.zeros((target.dim, target.dim))
        dist += w * gaussian_w2(xk.mean(axis=0), ck, target.means[k], target.covs[k])
    return dist


def quality_score(generated, target: GaussianMixture, min_samples=100) -> float:
    """``exp(-distance)`` in [0, 1] between generated latents and the target mixture."""
    x = generated.values if isinstance(generated, Latent) else np.asarray(generated, dtype=float)
    if np.atleast_2d(x).shape[0] < min_samples:
        raise CodecError(f"quality score needs at least {min_samples} samples")
    return float(np.exp(-mixture_distance(x, target)))
