"""Noise schedules for the forward/reverse diffusion and the channel-aware fine-tuning steps.

All per-step arrays are stored 1-based: element ``[t]`` belongs to step ``t`` and
element ``[0]`` is padding (``beta[0] = 0``, ``alpha_bar[0] = 1``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Literal

import numpy as np

SigmaBarMode = Literal["posterior", "beta", "zero"]


class ScheduleError(ValueError):
    """Invalid schedule parameters or an out-of-range step index."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    sigma_bar: np.ndarray
    sigma_bar_mode: str = "posterior"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or beta.size < 2:
            raise ScheduleError("beta must be a 1-based array with at least one step")
        steps = beta[1:]
        if np.any(steps <= 0) or np.any(steps >= 1):
            raise ScheduleError("beta_t must lie in the open interval (0, 1)")
        if np.any(np.diff(steps) <= 0):
            raise ScheduleError("beta must be strictly increasing")
        alpha = 1.0 - beta
        alpha[0] = 1.0
        alpha_bar = np.cumprod(alpha)
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar),
                          ("sigma_bar", np.asarray(self.sigma_bar, dtype=float))):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.beta.size - 1

    def check_step(self, t: int, lo: int = 0) -> int:
        if not lo <= t <= self.T:
            raise ScheduleError(f"step {t} outside [{lo}, {self.T}]")
        return int(t)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta[1:].tolist(), "sigma_bar_mode": self.sigma_bar_mode}

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseSchedule":
        beta = np.concatenate([[0.0], np.asarray(doc["beta"], dtype=float)])
        if int(doc.get("T", beta.size - 1)) != beta.size - 1:
            raise ScheduleError("T does not match the length of beta")
        mode = doc.get("sigma_bar_mode", "posterior")
        return cls(beta, _sigma_bar(beta, mode), mode)


def _sigma_bar(beta: np.ndarray, mode: str) -> np.ndarray:
    alpha_bar = np.cumprod(np.concatenate([[1.0], 1.0 - beta[1:]]))
    out = np.zeros_like(beta)
    if mode == "posterior":
        # DDPM posterior std; vanishes at t=1 since alpha_bar_0 = 1
        out[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    elif mode == "beta":
        out[2:] = np.sqrt(beta[2:])
    elif mode != "zero":
        raise ScheduleError(f"unknown sigma_bar mode {mode!r}")
    return out


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                          sigma_bar: SigmaBarMode = "posterior") -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps.

    ``sigma_bar`` picks the reverse-step sampling std: the DDPM posterior std
    (default), ``sqrt(beta_t)``, or zero (mean-only steps). In every mode the
    final step ``t=1`` is noiseless.
    """
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0 < beta_start < beta_end < 1:
        raise ScheduleError("need 0 < beta_start < beta_end < 1")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    return NoiseSchedule(beta, _sigma_bar(beta, sigma_bar), sigma_bar)


@dataclass(frozen=True, eq=False)
class ChannelAwareSchedule:
    """Per-step coefficients of the channel-noise-aware reverse step.

    ``sigma_t[t]`` is the std of the channel noise accumulated by step ``t`` of the
    augmented forward process, ``sigma_t_tm1[t]`` the std injected at step ``t``
    alone. ``sigma_tm1`` is ``sigma_t`` shifted by one step.
    """

    base: NoiseSchedule
    T_bar: int
    sigma_c: float
    gamma: np.ndarray
    ratio: float
    sigma_t: np.ndarray
    sigma_t_tm1: np.ndarray
    coeff_C: np.ndarray

    @property
    def sigma_tm1(self) -> np.ndarray:
        out = np.zeros_like(self.sigma_t)
        out[1:] = self.sigma_t[:-1]
        return out

    def normalization_residual(self) -> float:
        return abs(float(np.sum(injection_weights(self.base, self.gamma, self.T_bar))) - 1.0)

    def to_dict(self) -> dict:
        return {"T": self.base.T, "beta": self.base.beta[1:].tolist(),
                "gamma": self.gamma[1:].tolist(), "sigma_c": self.sigma_c,
                "T_bar": self.T_bar, "ratio": self.ratio}


def injection_weights(base: NoiseSchedule, gamma: np.ndarray, T_bar: int) -> np.ndarray:
    """Weight of the noise injected at step t as seen at step T_bar, for t = 1..T_bar.

    weight_t = sqrt(gamma_t) * prod_{j=t+1}^{T_bar} sqrt(alpha_j)
    """
    sqrt_alpha = np.sqrt(base.alpha[1:T_bar + 1])
    # tail[t-1] = prod_{j=t+1}^{T_bar} sqrt(alpha_j)
    tail = np.append(np.cumprod(sqrt_alpha[::-1])[::-1][1:], 1.0)
    return np.sqrt(gamma[1:T_bar + 1]) * tail


def coefficient_C_value(alpha_t: float, alpha_bar_t: float, sigma_t: float,
                        sigma_tm1: float, sigma_t_tm1: float) -> float:
    """Noise coefficient of the channel-aware reverse step from raw per-step quantities.

    Exact inversion of ``z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t + sigma_t^2) eps``
    inside the Gaussian posterior mean. Reduces to ``(1 - alpha_t) / sqrt(1 - alpha_bar_t)``
    when all sigma terms vanish.
    """
    num = (1.0 - alpha_t + sigma_t_tm1 ** 2) * np.sqrt(1.0 - alpha_bar_t + sigma_t ** 2)
    den = 1.0 - alpha_bar_t + sigma_tm1 ** 2 * alpha_t + sigma_t_tm1 ** 2
    return float(num / den)


def coefficient_C_printed(alpha_t: float, alpha_bar_t: float, sigma_t: float,
                          sigma_tm1: float, sigma_t_tm1: float) -> float:
    """The coefficient with ``sqrt(1 - alpha_bar_t) - sigma_t^2`` in the numerator.

    Kept for comparison only. It matches :func:`coefficient_C_value` when
    ``sigma_t = 0`` but does not reproduce the exact posterior mean otherwise.
    """
    num = (1.0 - alpha_t + sigma_t_tm1 ** 2) * (np.sqrt(1.0 - alpha_bar_t) - sigma_t ** 2)
    den = 1.0 - alpha_bar_t + sigma_tm1 ** 2 * alpha_t + sigma_t_tm1 ** 2
    return float(num / den)


def build_channel_aware_schedule(base: NoiseSchedule, sigma_c: float, T_bar: int,
                                 ratio: float = 1.05) -> ChannelAwareSchedule:
    """Channel-aware coefficients for ``T_bar`` fine-tuning steps under semantic noise std ``sigma_c``.

    gamma_t = g * ratio**t, with g fixed by requiring the injection weights to sum to one.
    The weights are linear in sqrt(g), so g has a closed form.
    """
    if sigma_c < 0 or not np.isfinite(sigma_c):
        raise ScheduleError("sigma_c must be finite and >= 0")
    if not 1 <= T_bar <= base.T:
        raise ScheduleError(f"T_bar={T_bar} outside [1, {base.T}]")
    if ratio <= 1:
        raise ScheduleError("gamma ratio must be > 1 for a strictly increasing schedule")
    t = np.arange(1, T_bar + 1)
    shape = np.concatenate([[0.0], ratio ** t.astype(float)])
    s = float(np.sum(injection_weights(base, shape, T_bar)))
    gamma = shape / s ** 2
    # gamma_Tbar = 1 exactly when T_bar = 1 (single-term sum); otherwise < 1
    if gamma[-1] > 1.0 + 1e-12:
        raise ScheduleError("normalization infeasible: gamma would exceed 1")

    sigma_t = np.zeros(T_bar + 1)
    sigma_t_tm1 = np.zeros(T_bar + 1)
    var = 0.0
    for k in range(1, T_bar + 1):
        inj = sigma_c ** 2 * gamma[k]
        var = base.alpha[k] * var + inj
        sigma_t_tm1[k] = np.sqrt(inj)
        sigma_t[k] = np.sqrt(var)

    coeff = np.zeros(T_bar + 1)
    a, ab = base.alpha, base.alpha_bar
    # with consistent sigmas the denominator equals 1 - alpha_bar_t + sigma_t^2, so this
    # is coefficient_C_value; the form below is bitwise the DDIM coefficient at sigma_c=0
    coeff[1:] = (1.0 - a[1:T_bar + 1] + sigma_t_tm1[1:] ** 2) / np.sqrt(
        1.0 - ab[1:T_bar + 1] + sigma_t[1:] ** 2)

    for arr in (gamma, sigma_t, sigma_t_tm1, coeff):
        arr.setflags(write=False)
    return ChannelAwareSchedule(base, int(T_bar), float(sigma_c), gamma, float(ratio),
                                sigma_t, sigma_t_tm1, coeff)


def coefficient_C(schedule: ChannelAwareSchedule, t: int) -> float:
    if not 1 <= t <= schedule.T_bar:
        raise ScheduleError(f"step {t} outside [1, {schedule.T_bar}]")
    return float(schedule.coeff_C[t])


def ddim_coefficient(schedule: NoiseSchedule, t: int) -> float:
    schedule.check_step(t, lo=1)
    return float((1.0 - schedule.alpha[t]) / np.sqrt(1.0 - schedule.alpha_bar[t]))


def dump_schedule_json(schedule: NoiseSchedule | ChannelAwareSchedule, path=None) -> str:
    doc = schedule.to_dict()
    doc.setdefault("gamma", [])
    doc.setdefault("sigma_c", 0.0)
    text = json.dumps(doc, indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def load_schedule_json(text_or_path: str) -> NoiseSchedule | ChannelAwareSchedule:
    """Inverse of :func:`dump_schedule_json`; a non-empty ``gamma`` rebuilds the channel-aware schedule."""
    try:
        doc = json.loads(text_or_path)
    except json.JSONDecodeError:
        with open(text_or_path) as fh:
            doc = json.load(fh)
    base = NoiseSchedule.from_dict(doc)
    if not doc.get("gamma"):
        return base
    cas = build_channel_aware_schedule(base, float(doc["sigma_c"]), int(doc["T_bar"]),
                                       float(doc.get("ratio", 1.05)))
    if not np.allclose(cas.gamma[1:], doc["gamma"], rtol=1e-12, atol=0):
        raise ScheduleError("stored gamma does not match the rebuilt schedule")
    return cas
