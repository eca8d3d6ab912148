"""Transmission and compute delays, total service latency, and the split-vs-edge condition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BANDWIDTH_CAP_HZ = 20e6


class LatencyError(ValueError):
    pass


@dataclass(frozen=True)
class LinkSpec:
    bandwidth_hz: float
    snr_db: float
    bandwidth_cap_hz: float = BANDWIDTH_CAP_HZ

    def __post_init__(self):
        if not 0 <= self.bandwidth_hz <= self.bandwidth_cap_hz:
            raise LatencyError(f"bandwidth {self.bandwidth_hz} outside [0, {self.bandwidth_cap_hz}]")


@dataclass(frozen=True)
class ComputeSpec:
    """One device. ``density_per_step`` is cycles per input bit per denoising step."""

    core_freq_hz: float
    cores: int
    parallel_fraction: float
    density_per_step: float
    overhead_s: float = 0.0

    def __post_init__(self):
        if self.core_freq_hz <= 0 or self.cores < 1 or self.density_per_step <= 0:
            raise LatencyError("need core_freq_hz > 0, cores >= 1 and density_per_step > 0")
        if not 0 <= self.parallel_fraction <= 1:
            raise LatencyError("parallel_fraction must be in [0, 1]")
        if self.overhead_s < 0:
            raise LatencyError("overhead must be >= 0")

    @property
    def amdahl(self) -> float:
        return 1.0 - self.parallel_fraction + self.parallel_fraction / self.cores

    def density(self, steps) -> float:
        return self.density_per_step * steps

    def scaled(self, availability: float) -> "ComputeSpec":
        """Same device with only ``availability`` of its per-core frequency on offer."""
        if not 0 < availability <= 1:
            raise LatencyError("availability must be in (0, 1]")
        return ComputeSpec(self.core_freq_hz * availability, self.cores, self.parallel_fraction,
                           self.density_per_step, self.overhead_s)


@dataclass(frozen=True)
class LatencyBreakdown:
    transmission_s: float
    edge_compute_s: float
    local_compute_s: float

    @property
    def total_s(self) -> float:
        return self.transmission_s + self.edge_compute_s + self.local_compute_s


@dataclass(frozen=True)
class DataSizes:
    """``content_bits`` is O_s (compute input / undelivered content), ``latent_bits`` is O_ij."""

    content_bits: float
    latent_bits: float


def bit_rate(link: LinkSpec) -> float:
    return link.bandwidth_hz * np.log2(1.0 + 10.0 ** (link.snr_db / 10.0))


def transmission_delay(size_bits: float, link: LinkSpec) -> float:
    if size_bits == 0:
        return 0.0
    v = bit_rate(link)
    if v <= 0:
        raise LatencyError("link rate is zero; payload cannot be delivered")
    return size_bits / v


def compute_delay(steps: int, input_bits: float, spec: ComputeSpec) -> float:
    if steps < 0:
        raise LatencyError("steps must be >= 0")
    return spec.density(steps) * input_bits / spec.core_freq_hz * spec.amdahl + spec.overhead_s


def total_latency(a: int, T_hat: int, sizes: DataSizes, link: LinkSpec, edge: ComputeSpec,
                  local: ComputeSpec) -> LatencyBreakdown:
    """Edge runs ``a`` steps on O_s, the link carries O_ij, the receiver runs ``T_hat - a`` steps on O_ij."""
    if not 0 <= a <= T_hat:
        raise LatencyError(f"split {a} outside [0, {T_hat}]")
    return LatencyBreakdown(
        transmission_delay(sizes.latent_bits, link),
        compute_delay(a, sizes.content_bits, edge),
        compute_delay(T_hat - a, sizes.latent_bits, local),
    )


@dataclass(frozen=True)
class EdgeComparison:
    beats_edge: bool
    margin_s: float
    ratio: float
    bound: float
    bound_printed: float
    bound_beats_edge: bool


def semaigc_beats_edge(sizes: DataSizes, link: LinkSpec, edge: ComputeSpec, local: ComputeSpec,
                       T: int, T_bar: int) -> EdgeComparison:
    """Compare split delivery with edge-only delivery two ways.

    Directly: split latency is O_ij/v + W_i(T) O_s C_i/nu_i + W_j(T_bar) O_ij C_j/nu_j and
    edge-only latency is O_s/v + (W_i(T) O_s + W_j(T_bar) O_ij) C_i/nu_i (overheads
    excluded). Via the compression-ratio bound O_ij/O_s < nu_i nu_j / (nu_i nu_j + W_j v D)
    with D = C_j nu_i - C_i nu_j. When the bound's denominator is not positive the
    split side wins for any positive ratio. ``bound_printed`` is the absolute-value form
    ``|1 - W_j v D / (nu_i nu_j + W_j v D)|``, which differs from ``bound`` in that regime.
    """
    v = bit_rate(link)
    if v <= 0:
        raise LatencyError("link rate is zero")
    o_s, o_ij = sizes.content_bits, sizes.latent_bits
    w_i, w_j = edge.density(T), local.density(T_bar)
    c_j, c_i = local.amdahl, edge.amdahl
    nu_i, nu_j = edge.core_freq_hz, local.core_freq_hz

    split = o_ij / v + w_i * o_s / nu_i * c_i + w_j * o_ij / nu_j * c_j
    edge_only = o_s / v + (w_i * o_s + w_j * o_ij) / nu_i * c_i

    k = w_j * v * (c_j * nu_i - c_i * nu_j)
    den = nu_i * nu_j + k
    ratio = o_ij / o_s
    bound = nu_i * nu_j / den if den != 0 else np.inf
    bound_printed = abs(1.0 - k / den) if den != 0 else np.inf
    bound_ok = True if den <= 0 else ratio < bound
    return EdgeComparison(split < edge_only, edge_only - split, ratio, bound, bound_printed, bool(bound_ok))
