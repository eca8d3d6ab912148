"""Brute-force reference checks for the channel-aware reverse step and the split-vs-edge condition.

Both checks recompute their answer by a route that shares nothing with the
production code path beyond the public inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .diffusion import AnalyticDenoiser, GaussianMixture, Guidance, Latent, channel_aware_mean, reverse_step, reverse_step_channel_aware
from .latency import (ComputeSpec, DataSizes, LinkSpec, compute_delay, semaigc_beats_edge,
                      total_latency, transmission_delay)
from .schedules import NoiseSchedule, build_channel_aware_schedule, build_linear_schedule


def gamma_by_bisection(base: NoiseSchedule, T_bar: int, ratio: float = 1.05) -> np.ndarray:
    """gamma_t = g r^t with g found numerically so the injected amplitudes sum to one."""
    t = np.arange(1, T_bar + 1)
    tail = np.array([np.prod(np.sqrt(base.alpha[k + 1:T_bar + 1])) for k in t])

    def resid(g):
        return np.sum(np.sqrt(g * ratio ** t) * tail) - 1.0

    g = brentq(resid, 1e-16, 1e6, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return np.concatenate([[0.0], g * ratio ** t])


def joint_gaussian_chain(m0, v0, base: NoiseSchedule, sigma, T_bar, ratio=1.05):
    """Mean vector and covariance of (z_0, ..., z_T_bar) for a 1-D Gaussian start.

    Each step adds diffusion noise and an independent channel share ``sigma sqrt(gamma_t)``.
    """
    gamma = gamma_by_bisection(base, T_bar, ratio)
    n_src = 1 + 2 * T_bar
    A = np.zeros((T_bar + 1, n_src))
    A[0, 0] = 1.0
    for t in range(1, T_bar + 1):
        A[t] = np.sqrt(base.alpha[t]) * A[t - 1]
        A[t, t] += np.sqrt(base.beta[t])
        A[t, T_bar + t] += sigma * np.sqrt(gamma[t])
    src_var = np.concatenate([[v0], np.ones(2 * T_bar)])
    mean = A[:, 0] * m0
    cov = A @ np.diag(src_var) @ A.T
    return mean, cov


def conditional_mean(mean, cov, t, x):
    """E[z_{t-1} | z_t = x] by Gaussian conditioning."""
    return mean[t - 1] + cov[t - 1, t] / cov[t, t] * (x - mean[t])


@dataclass
class OracleResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.value:.3g} (tol {self.tolerance:g}, {self.seconds:.2f}s) {self.detail}".rstrip()


def posterior_mean_oracle(T_bars=(1, 2, 3, 4), sigmas=(0.0, 0.1, 0.5, 1.0), T=20, m0=0.7, v0=0.3,
                        n_points=25, rel_tol=1e-6, seed=0) -> OracleResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    base = build_linear_schedule(T, 0.01, 0.5)
    mix = GaussianMixture(np.array([1.0]), np.array([[m0]]), np.array([[[v0]]]))
    den = AnalyticDenoiser({0: mix})
    g = Guidance(0)
    worst = 0.0
    bitwise = True
    for T_bar in T_bars:
        for sigma in sigmas:
            cas = build_channel_aware_schedule(base, sigma, T_bar)
            mean, cov = joint_gaussian_chain(m0, v0, base, sigma, T_bar)
            for t in range(1, T_bar + 1):
                x = mean[t] + np.sqrt(cov[t, t]) * rng.standard_normal((n_points, 1)) * 2
                got = channel_aware_mean(Latent(x, t), den, g, cas)
                want = conditional_mean(mean, cov, t, x)
                err = np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12))
                worst = max(worst, float(err))
            if sigma == 0.0:
                z = Latent(rng.standard_normal((n_points, 1)), T_bar)
                za, zb = z, z
                for _ in range(T_bar):
                    za = reverse_step_channel_aware(za, den, g, cas, rng=np.random.default_rng(1))
                    zb = reverse_step(zb, den, g, base, rng=np.random.default_rng(1))
                    bitwise &= bool(np.array_equal(za.values, zb.values))
    ok = bool(worst <= rel_tol and bitwise)
    return OracleResult("channel_aware_posterior_mean", ok, worst, rel_tol, time.perf_counter() - start,
                        f"sigma=0 bitwise={bitwise}")


def random_latency_case(rng):
    """One random draw of sizes, link and device specs, without fixed overheads."""
    o_s = 10 ** rng.uniform(5, 8)
    sizes = DataSizes(o_s, o_s * 10 ** rng.uniform(-2, 0.3))
    link = LinkSpec(10 ** rng.uniform(5, np.log10(20e6)), rng.uniform(-6, 15))

    def device():
        return ComputeSpec(10 ** rng.uniform(8, 9.5), int(rng.integers(1, 10_000)), rng.uniform(0, 1),
                           10 ** rng.uniform(1, 5), 0.0)

    T = int(rng.integers(0, 40))
    return sizes, link, device(), device(), T, int(rng.integers(0, 40))


def direct_edge_comparison(sizes, link, edge: ComputeSpec, local: ComputeSpec, T, T_bar) -> bool:
    """Split wins when its latency is strictly below edge-only, computed from the per-term delays."""
    split = total_latency(T, T + T_bar, sizes, link, edge, local).total_s
    edge_as_local = replace(edge, density_per_step=local.density_per_step)
    edge_only = (transmission_delay(sizes.content_bits, link)
                 + compute_delay(T, sizes.content_bits, edge)
                 + compute_delay(T_bar, sizes.latent_bits, edge_as_local))
    return split < edge_only


def split_bound_oracle(n_draws=1000, seed=0) -> OracleResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    agree = 0
    for _ in range(n_draws):
        case = random_latency_case(rng)
        agree += int(direct_edge_comparison(*case) == semaigc_beats_edge(*case).bound_beats_edge)
    frac = agree / n_draws
    return OracleResult("split_bound_equivalence", frac == 1.0, frac, 1.0, time.perf_counter() - start,
                        f"{agree}/{n_draws} draws agree")


def run_all(seed=0) -> list[OracleResult]:
    return [posterior_mean_oracle(seed=seed), split_bound_oracle(seed=seed)]
