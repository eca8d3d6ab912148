"""Forward diffusion, reverse (generation) steps and channel-aware fine-tuning steps.

The data model is a per-label Gaussian mixture over a ``d``-dimensional latent, so the
optimal noise predictor has a closed form (:class:`AnalyticDenoiser`). A small trained
MLP (:class:`MLPDenoiser`) exercises the noise-prediction training loss.

Latent values may be a single vector ``(d,)`` or a batch ``(n, d)``; every operation
acts row-wise on batches.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .nn import MLP, make_optimizer
from .schedules import ChannelAwareSchedule, NoiseSchedule, ScheduleError


class DiffusionError(ValueError):
    pass


class NumericalDegeneracyError(DiffusionError):
    pass


class ScheduleMismatchError(DiffusionError):
    pass


@dataclass
class Latent:
    values: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise DiffusionError("latent values must be finite")
        if self.step < 0:
            raise DiffusionError("latent step must be >= 0")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def at(self, step: int) -> "Latent":
        return Latent(self.values.copy(), step)


@dataclass(frozen=True, eq=False)
class Guidance:
    label: int
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(0))


# -- data model ---------------------------------------------------------------------

@dataclass(eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        K, d = self.means.shape
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 1:  # per-component isotropic variance
            covs = covs[:, None, None] * np.eye(d)
        self.covs = covs
        if self.weights.shape != (K,) or self.covs.shape != (K, d, d):
            raise DiffusionError("inconsistent mixture shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DiffusionError("mixture weights must be non-negative and sum to 1")
        for c in self.covs:
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12:
                raise DiffusionError("component covariances must be symmetric PSD")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n, rng=None, return_components=False):
        rng = np.random.default_rng(rng)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        chol = np.array([_psd_sqrt(c) for c in self.covs])
        eps = rng.standard_normal((n, self.dim))
        x = self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)
        return (x, comp) if return_components else x

    def mean(self):
        return self.weights @ self.means

    def cov(self):
        mu = self.mean()
        diff = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum(
            "k,ki,kj->ij", self.weights, diff, diff)

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["weights"], doc["means"], doc["covs"])


def _psd_sqrt(c):
    w, v = np.linalg.eigh(c)
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


def default_mixture_spec(dim=2, radius=3.0, std=0.3) -> dict[int, GaussianMixture]:
    """Three labels on a ring: label 0 has three modes, label 1 two, label 2 four."""
    def ring(k, phase, weights):
        ang = phase + 2 * np.pi * np.arange(k) / k
        means = np.zeros((k, dim))
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
        return GaussianMixture(np.asarray(weights), means, np.full(k, std ** 2))

    return {
        0: ring(3, np.pi / 2, [0.5, 0.3, 0.2]),
        1: ring(2, 0.0, [0.5, 0.5]),
        2: ring(4, np.pi / 4, [0.25, 0.25, 0.25, 0.25]),
    }


def save_mixture_spec(spec, path):
    with open(path, "w") as fh:
        json.dump({str(k): m.to_dict() for k, m in spec.items()}, fh, indent=2)


def load_mixture_spec(path_or_doc) -> dict[int, GaussianMixture]:
    doc = path_or_doc
    if not isinstance(doc, dict):
        with open(doc) as fh:
            doc = json.load(fh)
    return {int(k): GaussianMixture.from_dict(v) for k, v in doc.items()}


# -- denoisers ----------------------------------------------------------------------

class AnalyticDenoiser:
    """Exact noise predictor for a Gaussian-mixture prior.

    For observation ``z_t = sqrt(ab) z_0 + s eps`` with ``s^2 = 1 - ab + sigma_offset^2``
    it returns ``E[eps | z_t] = (z_t - sqrt(ab) E[z_0 | z_t]) / s``.
    """

    kind = "analytic-GMM"

    def __init__(self, mixtures: dict[int, GaussianMixture]):
        self.mixtures = mixtures
        dims = {m.dim for m in mixtures.values()}
        if len(dims) != 1:
            raise DiffusionError("all mixtures must share one dimension")
        self.dim = dims.pop()

    def mixture(self, label):
        try:
            return self.mixtures[label]
        except KeyError:
            raise DiffusionError(f"unknown guidance label {label!r}") from None

    def responsibilities(self, z, alpha_bar, s2, label):
        """Posterior component probabilities and the per-component log-likelihoods."""
        mix = self.mixture(label)
        z = np.atleast_2d(z)
        d = mix.dim
        sa = np.sqrt(alpha_bar)
        logp = np.empty((z.shape[0], len(mix.weights)))
        for k, (w, mu, cov) in enumerate(zip(mix.weights, mix.means, mix.covs)):
            S = alpha_bar * cov + s2 * np.eye(d)
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise NumericalDegeneracyError("singular observation covariance") from None
            r = np.linalg.solve(L, (z - sa * mu).T)
            logdet = 2.0 * np.log(np.diag(L)).sum()
            with np.errstate(divide="ignore", over="ignore"):
                logw = np.log(w)
                logp[:, k] = logw - 0.5 * (r * r).sum(axis=0) - 0.5 * logdet - 0.5 * d * np.log(2 * np.pi)
        norm = logsumexp(logp, axis=1, keepdims=True)
        if not np.all(np.isfinite(norm)):
            raise NumericalDegeneracyError("all mixture responsibilities underflowed")
        return np.exp(logp - norm), logp

    def posterior_mean(self, z, alpha_bar, s2, label):
        mix = self.mixture(label)
        z2 = np.atleast_2d(z)
        resp, _ = self.responsibilities(z2, alpha_bar, s2, label)
        sa = np.sqrt(alpha_bar)
        out = np.zeros_like(z2)
        for k, (mu, cov) in enumerate(zip(mix.means, mix.covs)):
            S = alpha_bar * cov + s2 * np.eye(mix.dim)
            gain = sa * cov @ np.linalg.inv(S)
            out += resp[:, k:k + 1] * (mu + (z2 - sa * mu) @ gain.T)
        return out.reshape(np.shape(z))

    def predict(self, z, t, guidance, schedule, sigma_offset=0.0):
        ab = schedule.alpha_bar[t]
        s2 = 1.0 - ab + sigma_offset ** 2
        x0 = self.posterior_mean(z, ab, s2, guidance.label)
        return (z - np.sqrt(ab) * x0) / np.sqrt(s2)

    def to_dict(self):
        return {"kind": self.kind,
                "mixtures": {str(k): m.to_dict() for k, m in self.mixtures.items()}}


def time_features(t, T, n_freq=3):
    t = np.asarray(t, dtype=float).reshape(-1, 1) / T
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    return np.hstack([t, np.sin(freqs * t), np.cos(freqs * t)])


class MLPDenoiser:
    """Two-hidden-layer tanh network predicting the added noise.

    Input is ``[z_t, time features, guidance embedding]``. ``sigma_offset`` is not a
    network input; a network trained on channel-augmented data absorbs it.
    """

    kind = "trained-MLP"

    def __init__(self, dim, embed_dim, T, hidden=64, n_freq=3, rng=None):
        self.dim, self.embed_dim, self.T, self.n_freq = dim, embed_dim, T, n_freq
        n_in = dim + 1 + 2 * n_freq + embed_dim
        self.net = MLP([n_in, hidden, hidden, dim], activation="tanh", rng=rng, init="xavier")

    def inputs(self, z, t, embedding):
        z = np.atleast_2d(z)
        n = z.shape[0]
        tf = time_features(np.broadcast_to(t, (n,)), self.T, self.n_freq)
        emb = np.broadcast_to(np.asarray(embedding, dtype=float).reshape(-1, self.embed_dim),
                              (n, self.embed_dim))
        return np.hstack([z, tf, emb])

    def forward(self, z, t, embedding):
        return self.net.forward(self.inputs(z, t, embedding))

    def predict(self, z, t, guidance, schedule=None, sigma_offset=0.0):
        out = self.net(self.inputs(z, t, guidance.embedding))
        return out.reshape(np.shape(z))

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "embed_dim": self.embed_dim, "T": self.T,
                "n_freq": self.n_freq, "net": self.net.to_dict()}


def load_denoiser(path_or_doc):
    """Load either denoiser kind from the JSON document written by ``save_denoiser``."""
    doc = path_or_doc
    if not isinstance(doc, dict):
        with open(doc) as fh:
            doc = json.load(fh)
    if doc["kind"] == AnalyticDenoiser.kind:
        return AnalyticDenoiser(load_mixture_spec(doc["mixtures"]))
    if doc["kind"] == MLPDenoiser.kind:
        den = MLPDenoiser(doc["dim"], doc["embed_dim"], doc["T"], n_freq=doc["n_freq"], rng=0)
        den.net = MLP.from_dict(doc["net"])
        return den
    raise DiffusionError(f"unknown denoiser kind {doc['kind']!r}")


def save_denoiser(denoiser, path):
    with open(path, "w") as fh:
        json.dump(denoiser.to_dict(), fh)


def predict_noise(denoiser, z: Latent, t: int, g: Guidance, schedule: NoiseSchedule,
                  sigma_offset: float = 0.0) -> np.ndarray:
    schedule.check_step(t, lo=1)
    if z.step != t:
        raise DiffusionError(f"latent is at step {z.step}, not {t}")
    return denoiser.predict(z.values, t, g, schedule, sigma_offset)


# -- forward process ----------------------------------------------------------------

def forward_diffuse_step(z: Latent, schedule: NoiseSchedule, rng=None) -> Latent:
    rng = np.random.default_rng(rng)
    if z.step >= schedule.T:
        raise ScheduleError(f"cannot diffuse past step {schedule.T}")
    t = z.step + 1
    b = schedule.beta[t]
    eps = rng.standard_normal(z.values.shape)
    return Latent(np.sqrt(1.0 - b) * z.values + np.sqrt(b) * eps, t)


def closed_form_diffuse(z0: Latent, t: int, schedule: NoiseSchedule, rng=None) -> Latent:
    rng = np.random.default_rng(rng)
    schedule.check_step(t)
    if t == 0:
        return Latent(z0.values.copy(), 0)
    ab = schedule.alpha_bar[t]
    eps = rng.standard_normal(z0.values.shape)
    return Latent(np.sqrt(ab) * z0.values + np.sqrt(1.0 - ab) * eps, t)


def recursion_moments(schedule: NoiseSchedule, t: int):
    """Mean factor and variance of z_t given z_0 by iterating the one-step recursion."""
    mean, var = 1.0, 0.0
    for k in range(1, t + 1):
        mean *= np.sqrt(1.0 - schedule.beta[k])
        var = (1.0 - schedule.beta[k]) * var + schedule.beta[k]
    return mean, var


# -- reverse process ----------------------------------------------------------------

def _sample_noise(rng, scale, shape):
    # draw only when the step is stochastic, in the same order for every step kind
    if scale > 0:
        return scale * rng.standard_normal(shape)
    return 0.0


def reverse_step(z: Latent, denoiser, g: Guidance, schedule: NoiseSchedule, rng=None) -> Latent:
    rng = np.random.default_rng(rng)
    t = z.step
    if t < 1:
        raise ScheduleError("cannot take a reverse step from step 0")
    schedule.check_step(t, lo=1)
    eps_hat = denoiser.predict(z.values, t, g, schedule, 0.0)
    a, ab = schedule.alpha[t], schedule.alpha_bar[t]
    mean = (z.values - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    return Latent(mean + _sample_noise(rng, schedule.sigma_bar[t], z.values.shape), t - 1)


def channel_aware_mean(z: Latent, denoiser, g: Guidance, cas: ChannelAwareSchedule) -> np.ndarray:
    """Deterministic part of the channel-aware reverse step (the conditional mean)."""
    t = z.step
    if not 1 <= t <= cas.T_bar:
        raise ScheduleError(f"step {t} outside [1, {cas.T_bar}]")
    base = cas.base
    eps_hat = denoiser.predict(z.values, t, g, base, cas.sigma_t[t])
    return (z.values - cas.coeff_C[t] * eps_hat) / np.sqrt(base.alpha[t])


def reverse_step_channel_aware(z: Latent, denoiser, g: Guidance, cas: ChannelAwareSchedule,
                               rng=None, schedule: NoiseSchedule | None = None) -> Latent:
    rng = np.random.default_rng(rng)
    if schedule is not None and not _same_schedule(schedule, cas.base):
        raise ScheduleMismatchError("channel-aware schedule was built from a different base")
    mean = channel_aware_mean(z, denoiser, g, cas)
    t = z.step
    return Latent(mean + _sample_noise(rng, cas.base.sigma_bar[t], z.values.shape), t - 1)


def _same_schedule(a: NoiseSchedule, b: NoiseSchedule) -> bool:
    return a is b or (a.T == b.T and np.array_equal(a.beta, b.beta)
                      and np.array_equal(a.sigma_bar, b.sigma_bar))


def denoise(z: Latent, steps: int, denoiser, g: Guidance, schedule: NoiseSchedule, rng=None) -> Latent:
    """Apply ``steps`` standard reverse steps starting from ``z.step``."""
    rng = np.random.default_rng(rng)
    if steps > z.step:
        raise ScheduleError(f"cannot take {steps} steps from step {z.step}")
    for _ in range(steps):
        z = reverse_step(z, denoiser, g, schedule, rng)
    return z


def initial_noise(dim, T, n=None, rng=None) -> Latent:
    rng = np.random.default_rng(rng)
    shape = (dim,) if n is None else (n, dim)
    return Latent(rng.standard_normal(shape), T)


def generate(denoiser, g: Guidance, T: int, schedule: NoiseSchedule, rng=None, n=None) -> Latent:
    """Sample pure noise at step ``T`` and run ``T`` reverse steps down to step 0."""
    rng = np.random.default_rng(rng)
    schedule.check_step(T)
    z = initial_noise(denoiser.dim, T, n, rng)
    return denoise(z, T, denoiser, g, schedule, rng)


def fine_tune(z_received: Latent, g: Guidance, T_bar: int, cas: ChannelAwareSchedule | None,
              denoiser, rng=None) -> Latent:
    """Run ``T_bar`` channel-aware reverse steps on a received latent treated as a step-``T_bar`` state."""
    rng = np.random.default_rng(rng)
    z = z_received.at(T_bar)
    if T_bar == 0:
        return z
    if cas is None or cas.T_bar < T_bar:
        raise ScheduleError("channel-aware schedule does not cover the requested steps")
    for _ in range(T_bar):
        z = reverse_step_channel_aware(z, denoiser, g, cas, rng)
    return z


# -- training loss ------------------------------------------------------------------

def sample_training_inputs(z0, schedule: NoiseSchedule, rng=None, sigma_c=0.0):
    """Uniform steps, fresh noise and the corresponding noisy latents for a batch of ``z0``.

    With ``sigma_c > 0`` Gaussian channel noise of that std is added to ``z_t`` and
    folded into the noise target, matching a fine-tuning network trained on
    channel-augmented data.
    """
    rng = np.random.default_rng(rng)
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    n = z0.shape[0]
    if n == 0:
        raise DiffusionError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(z0.shape)
    ab = schedule.alpha_bar[t][:, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    if sigma_c > 0:
        extra = sigma_c * rng.standard_normal(z0.shape)
        s = np.sqrt(1.0 - ab + sigma_c ** 2)
        z_t = z_t + extra
        eps = (np.sqrt(1.0 - ab) * eps + extra) / s
    return z_t, t, eps


def noise_prediction_loss(eps, eps_hat) -> float:
    return float(np.mean(np.sum((np.asarray(eps) - np.asarray(eps_hat)) ** 2, axis=-1)))


def diffusion_training_loss(denoiser: MLPDenoiser, z0, embeddings, schedule: NoiseSchedule,
                            rng=None, return_grads=False):
    """Mean squared noise-prediction error over a batch of ``(z0, guidance embedding)``."""
    if getattr(denoiser, "kind", None) != MLPDenoiser.kind:
        raise DiffusionError("training loss needs a trained-MLP denoiser")
    z_t, t, eps = sample_training_inputs(z0, schedule, rng)
    return _mlp_loss(denoiser, z_t, t, eps, embeddings, return_grads)


def _mlp_loss(denoiser, z_t, t, eps, embeddings, return_grads):
    x = np.hstack([z_t, time_features(t, denoiser.T, denoiser.n_freq),
                   np.broadcast_to(np.asarray(embeddings, dtype=float).reshape(-1, denoiser.embed_dim),
                                   (z_t.shape[0], denoiser.embed_dim))])
    out, cache = denoiser.net.forward(x)
    loss = noise_prediction_loss(eps, out)
    if not return_grads:
        return loss
    grads, _ = denoiser.net.backward(cache, 2.0 * (out - eps) / z_t.shape[0])
    return loss, grads


def train_mlp_denoiser(denoiser: MLPDenoiser, z0, embeddings, schedule: NoiseSchedule,
                       steps=2000, batch_size=256, lr=3e-3, optimizer="adam", rng=None):
    rng = np.random.default_rng(rng)
    z0 = np.atleast_2d(z0)
    embeddings = np.asarray(embeddings, dtype=float).reshape(z0.shape[0], -1)
    opt = make_optimizer(optimizer, lr)
    history = []
    for _ in range(steps):
        idx = rng.integers(0, z0.shape[0], size=batch_size)
        z_t, t, eps = sample_training_inputs(z0[idx], schedule, rng)
        loss, grads = _mlp_loss(denoiser, z_t, t, eps, embeddings[idx], True)
        opt.step(denoiser.net.params, grads)
        history.append(loss)
    return np.asarray(history)


# -- export -------------------------------------------------------------------------

def export_samples_csv(path, values, labels):
    values = np.atleast_2d(values)
    labels = np.broadcast_to(np.asarray(labels), (values.shape[0],))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i}" for i in range(values.shape[1])] + ["label"])
        for row, lab in zip(values, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
