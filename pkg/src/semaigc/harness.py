"""End-to-end experiments over the five delivery frameworks.

Frameworks:

* ``semaigc``      - split chosen by the trained agent, channel-aware fine-tuning at the receiver
* ``non_root``     - fixed even split (half the steps on each side)
* ``non_finetune`` - all steps at the transmitter, latent sent without receiver denoising
* ``edge``         - all steps at the edge, full-size content delivered over the link
* ``local``        - all steps at the receiver, no link

A request fails (reward 0) when its latency exceeds the failure cap or when the
delivered content misses the quality threshold; a failed request counts as lasting
the full cap.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (STATE_FIELDS, AgentConfig, AgentState, QNetwork, StateNormalizer, action_steps,
                    export_reward_trace, greedy_policy, moving_average, reward, run_training)
from .channel import ChannelModel, channel_decode, channel_encode, semantic_noise_std, transmit
from .codec import TextEncoder, quality_score
from .diffusion import (AnalyticDenoiser, Guidance, default_mixture_spec, denoise, fine_tune,
                        initial_noise, load_mixture_spec)
from .latency import (ComputeSpec, DataSizes, LatencyBreakdown, LinkSpec, compute_delay,
                      total_latency, transmission_delay)
from .schedules import build_channel_aware_schedule, build_linear_schedule

FRAMEWORKS = ("semaigc", "non_root", "non_finetune", "edge", "local")


class HarnessError(ValueError):
    pass


@dataclass
class ComputeConfig:
    core_freq_hz: float
    cores: int
    parallel_fraction: float
    density_per_step: float
    overhead_s: float

    def spec(self) -> ComputeSpec:
        return ComputeSpec(self.core_freq_hz, self.cores, self.parallel_fraction,
                           self.density_per_step, self.overhead_s)


def _edge_default():
    # ~0.25 s per denoising step over a 16384 x 32-bit latent at full availability
    return ComputeConfig(1.8e9, 10752, 0.95, 1.7e4, 0.5)


def _local_default():
    # ~0.8 s per step
    return ComputeConfig(1.6e9, 3584, 0.95, 4.9e4, 0.5)


def _agent_default():
    return AgentConfig(optimizer="adam")


@dataclass
class ExperimentConfig:
    T_hat: int = 20
    beta_start: float = 0.01
    beta_end: float = 0.5
    sigma_bar: str = "posterior"
    gamma_ratio: float = 1.05
    mixture: dict | None = None
    embed_dim: int = 8
    snr_db_range: tuple = (-6.0, 15.0)
    bandwidth_hz_range: tuple = (20e6, 20e6)
    bandwidth_cap_hz: float = 20e6
    pacr_range: tuple = (0.0, 1.0)
    latency_low_s: float = 5.0
    latency_high_range: tuple = (15.0, 25.0)
    failure_cap_s: float = 60.0
    quality_threshold: float = 0.6
    quality_samples: int = 256
    latent_values: int = 16384
    bits_per_value: int = 32
    compression_factor: float = 48.0
    edge: ComputeConfig = field(default_factory=_edge_default)
    local: ComputeConfig = field(default_factory=_local_default)
    frameworks: tuple = FRAMEWORKS
    train_episodes: int = 800
    eval_episodes: int = 200
    snr_grid: tuple = (-6.0, 0.0, 6.0, 15.0)
    pacr_grid: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    seed: int = 0
    agent: AgentConfig = field(default_factory=_agent_default)

    def __post_init__(self):
        for name in ("snr_db_range", "bandwidth_hz_range", "pacr_range", "latency_high_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise HarnessError(f"{name} must be ordered (low <= high)")
        if not (0 <= self.pacr_range[0] and 0 < self.pacr_range[1] <= 1):
            raise HarnessError("pacr_range must lie in (0, 1]")
        if self.latency_high_range[0] <= self.latency_low_s:
            raise HarnessError("latency upper bounds must exceed latency_low_s")
        if self.bandwidth_hz_range[1] > self.bandwidth_cap_hz:
            raise HarnessError("bandwidth range exceeds the cap")
        unknown = set(self.frameworks) - set(FRAMEWORKS)
        if unknown:
            raise HarnessError(f"unknown frameworks {sorted(unknown)}")

    @property
    def latent_bits(self) -> float:
        return float(self.latent_values * self.bits_per_value)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agent"] = self.agent.to_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise HarnessError(f"unknown config keys {sorted(unknown)}")
        doc = dict(doc)
        for k in ("edge", "local"):
            if k in doc:
                base = asdict(_edge_default() if k == "edge" else _local_default())
                base.update(doc[k])
                doc[k] = ComputeConfig(**base)
        if "agent" in doc:
            doc["agent"] = AgentConfig.from_dict({**_agent_default().to_dict(), **doc["agent"]})
        for k, v in doc.items():
            if isinstance(v, list) and k != "mixture":
                doc[k] = tuple(v)
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    """Read a JSON or TOML experiment config."""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        else:
            with open(path) as fh:
                doc = json.load(fh)
    except OSError as exc:
        raise HarnessError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


# -- environment ----------------------------------------------------------------------

@dataclass(frozen=True)
class EnvSample:
    state: AgentState
    snr_db: float
    pacr: float
    bandwidth_hz: float
    req: tuple
    label: int
    link: LinkSpec
    edge: ComputeSpec
    local: ComputeSpec
    channel: ChannelModel


@dataclass
class EpisodeRecord:
    framework: str
    episode: int
    seed: int
    snr_db: float
    pacr: float
    bandwidth_hz: float
    req_low_s: float
    req_high_s: float
    label: int
    action: int
    transmitter_steps: int
    transmission_s: float
    edge_compute_s: float
    local_compute_s: float
    total_s: float
    quality: float
    failed: bool
    failure_reason: str
    reward: float


RECORD_FIELDS = [f.name for f in fields(EpisodeRecord)]


def _uniform(rng, lo, hi):
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


class Simulator:
    """Owns the schedule, data model and device specs of one experiment config."""

    def __init__(self, config: ExperimentConfig):
        self.config = cfg = config
        self.schedule = build_linear_schedule(cfg.T_hat, cfg.beta_start, cfg.beta_end, cfg.sigma_bar)
        self.mixtures = load_mixture_spec(cfg.mixture) if cfg.mixture else default_mixture_spec()
        self.denoiser = AnalyticDenoiser(self.mixtures)
        self.labels = sorted(self.mixtures)
        self.text = TextEncoder(self.labels, cfg.embed_dim, seed=cfg.seed)
        self.edge_spec = cfg.edge.spec()
        self.local_spec = cfg.local.spec()
        self.sizes = DataSizes(cfg.latent_bits, cfg.latent_bits)
        self.steps = action_steps(cfg.T_hat)
        self.normalizer = StateNormalizer(
            low=(cfg.edge.density_per_step, cfg.local.density_per_step, cfg.snr_db_range[0],
                 0.0, cfg.local.core_freq_hz, cfg.bandwidth_hz_range[0], cfg.latency_high_range[0]),
            high=(cfg.edge.density_per_step, cfg.local.density_per_step, cfg.snr_db_range[1],
                  cfg.edge.core_freq_hz, cfg.local.core_freq_hz, cfg.bandwidth_hz_range[1],
                  cfg.latency_high_range[1]),
        )

    # sampling ---------------------------------------------------------------------
    def sample_environment(self, rng=None, snr_db=None, pacr=None) -> EnvSample:
        """Draw SNR, compute availability (PACR) and the latency requirement; fixed values override."""
        cfg = self.config
        rng = np.random.default_rng(rng)
        snr = _uniform(rng, *cfg.snr_db_range) if snr_db is None else float(snr_db)
        if pacr is None:
            lo, hi = cfg.pacr_range
            # uniform on (lo, hi]: availability zero is excluded
            pacr = hi if lo == hi else float(hi - (hi - lo) * rng.random())
        bw = _uniform(rng, *cfg.bandwidth_hz_range)
        high = _uniform(rng, *cfg.latency_high_range)
        label = int(self.labels[rng.integers(len(self.labels))])
        edge = self.edge_spec.scaled(pacr)
        state = AgentState(edge.density_per_step, self.local_spec.density_per_step, snr,
                           edge.core_freq_hz, self.local_spec.core_freq_hz, bw, high)
        return EnvSample(state, snr, float(pacr), bw, (cfg.latency_low_s, high), label,
                         LinkSpec(bw, snr, cfg.bandwidth_cap_hz), edge, self.local_spec,
                         ChannelModel(snr))

    def observe(self, env: EnvSample) -> np.ndarray:
        return self.normalizer(env.state)

    # serving ----------------------------------------------------------------------
    def latency(self, framework: str, env: EnvSample, a: int) -> LatencyBreakdown:
        cfg = self.config
        if framework in ("semaigc", "non_root", "non_finetune"):
            return total_latency(a, cfg.T_hat, self.sizes, env.link, env.edge, env.local)
        if framework == "edge":
            content = cfg.compression_factor * cfg.latent_bits
            return LatencyBreakdown(transmission_delay(content, env.link),
                                    compute_delay(cfg.T_hat, self.sizes.content_bits, env.edge), 0.0)
        if framework == "local":
            return LatencyBreakdown(0.0, 0.0, compute_delay(cfg.T_hat, self.sizes.latent_bits, env.local))
        raise HarnessError(f"unknown framework {framework!r}")

    def deliver(self, framework: str, env: EnvSample, a: int, rng, n=None):
        """Run the generation pipeline for ``n`` samples and return the delivered latents."""
        cfg = self.config
        rng = np.random.default_rng(rng)
        n = cfg.quality_samples if n is None else n
        g = self.text(env.label)
        z = initial_noise(self.denoiser.dim, cfg.T_hat, n, rng)
        if framework == "local":
            return denoise(z, cfg.T_hat, self.denoiser, g, self.schedule, rng)
        z = denoise(z, a, self.denoiser, g, self.schedule, rng)
        frame = channel_encode(z, a, env.label, seed_tag=0, bits_per_value=cfg.bits_per_value)
        received = transmit(frame, env.channel, rng)
        sigma = semantic_noise_std(env.channel, frame.payload)
        z_rx, header = channel_decode(received, env.channel, total_steps=cfg.T_hat)
        t_bar = cfg.T_hat - header.split_step
        if t_bar == 0 or framework in ("non_finetune", "edge"):
            return z_rx.at(0) if t_bar == 0 else z_rx
        cas = build_channel_aware_schedule(self.schedule, sigma, t_bar, cfg.gamma_ratio)
        return fine_tune(z_rx, g, t_bar, cas, self.denoiser, rng)

    def framework_action(self, framework: str, env: EnvSample, net: QNetwork | None) -> int:
        if framework == "semaigc":
            if net is None:
                raise HarnessError("semaigc needs a trained agent")
            return int(greedy_policy(net, self.observe(env))[0])
        if framework == "non_root":
            return int(np.argmin(np.abs(self.steps - self.config.T_hat / 2)))
        if framework in ("non_finetune", "edge"):
            return len(self.steps) - 1
        if framework == "local":
            return 0
        raise HarnessError(f"unknown framework {framework!r}")

    def serve(self, framework: str, env: EnvSample, action: int, rng):
        a = int(self.steps[action])
        if framework == "non_root":
            a = self.config.T_hat // 2
        lat = self.latency(framework, env, a)
        q = quality_score(self.deliver(framework, env, a, rng), self.mixtures[env.label])
        reason = ""
        if lat.total_s > self.config.failure_cap_s:
            reason = "latency"
        elif q < self.config.quality_threshold:
            reason = "quality"
        effective = self.config.failure_cap_s if reason else lat.total_s
        return a, lat, q, reason, reward(effective, env.req)

    def run_episode(self, framework: str, env: EnvSample, net: QNetwork | None = None, rng=None,
                    episode: int = 0, seed: int = 0) -> EpisodeRecord:
        if framework not in FRAMEWORKS:
            raise HarnessError(f"unknown framework {framework!r}")
        action = self.framework_action(framework, env, net)
        a, lat, q, reason, r = self.serve(framework, env, action, rng)
        return EpisodeRecord(framework, episode, seed, env.snr_db, env.pacr, env.bandwidth_hz,
                             env.req[0], env.req[1], env.label, action, a, lat.transmission_s,
                             lat.edge_compute_s, lat.local_compute_s, lat.total_s, q, bool(reason),
                             reason, r)

    # agent environment --------------------------------------------------------------
    def as_environment(self, snr_db=None, pacr=None) -> "AgentEnvironment":
        return AgentEnvironment(self, snr_db, pacr)


class AgentEnvironment:
    """Adapter exposing the simulator as the agent's request-by-request environment."""

    def __init__(self, sim: Simulator, snr_db=None, pacr=None):
        self.sim, self.snr_db, self.pacr = sim, snr_db, pacr
        self.current: EnvSample | None = None
        self.history: list = []

    def reset(self, rng) -> np.ndarray:
        self.current = self.sim.sample_environment(rng, self.snr_db, self.pacr)
        return self.sim.observe(self.current)

    def step(self, action: int, rng) -> float:
        if self.current is None:
            raise HarnessError("step() before reset()")
        a, lat, q, reason, r = self.sim.serve("semaigc", self.current, action, rng)
        self.history.append((a, lat.total_s, q, reason))
        return r


# -- experiments ----------------------------------------------------------------------

def train_agent(sim: Simulator, episodes: int | None = None, seed: int | None = None):
    cfg = sim.config
    episodes = cfg.train_episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    env = sim.as_environment()
    return run_training(env, episodes, cfg.agent, rng=np.random.default_rng([seed, 1]))


def evaluate(sim: Simulator, net: QNetwork | None, frameworks, episodes: int, seed: int,
             sweep: str = "random", x=None) -> list[EpisodeRecord]:
    """Paired evaluation: every framework sees the same requests and random streams."""
    records = []
    for i in range(episodes):
        env_rng = np.random.default_rng([seed, 2, _sweep_code(sweep), i])
        kw = {}
        if sweep == "snr":
            kw["snr_db"] = x
        elif sweep == "pacr":
            kw["pacr"] = x
        env = sim.sample_environment(env_rng, **kw)
        for fw in frameworks:
            rng = np.random.default_rng([seed, 3, _sweep_code(sweep), i])
            records.append(sim.run_episode(fw, env, net, rng, episode=i, seed=seed))
    return records


def _sweep_code(sweep):
    return {"random": 0, "snr": 1, "pacr": 2}[sweep]


@dataclass
class Aggregate:
    sweep: str
    x: float
    framework: str
    n: int
    mean_latency_s: float
    stderr_latency_s: float
    mean_satisfaction: float
    stderr_satisfaction: float
    failure_rate: float
    mean_quality: float
    mean_transmitter_steps: float


def _stderr(v):
    v = np.asarray(v, dtype=float)
    return 0.0 if v.size < 2 else float(v.std(ddof=1) / np.sqrt(v.size))


def aggregate(records, sweep, x) -> list[Aggregate]:
    out = []
    for fw in dict.fromkeys(r.framework for r in records):
        rs = [r for r in records if r.framework == fw]
        lat = [r.total_s for r in rs]
        sat = [r.reward for r in rs]
        out.append(Aggregate(sweep, float(x), fw, len(rs), float(np.mean(lat)), _stderr(lat),
                             float(np.mean(sat)), _stderr(sat),
                             float(np.mean([r.failed for r in rs])),
                             float(np.mean([r.quality for r in rs])),
                             float(np.mean([r.transmitter_steps for r in rs]))))
    return out


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows(path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from exc


def write_records(path, records):
    write_rows(path, RECORD_FIELDS, ([getattr(r, k) for k in RECORD_FIELDS] for r in records))


AGG_FIELDS = [f.name for f in fields(Aggregate)]

PLOT_FILES = {
    "latency_vs_pacr.csv": ("pacr", "mean_latency_s", "stderr_latency_s"),
    "satisfaction_vs_pacr.csv": ("pacr", "mean_satisfaction", "stderr_satisfaction"),
    "latency_vs_snr.csv": ("snr", "mean_latency_s", "stderr_latency_s"),
    "satisfaction_vs_snr.csv": ("snr", "mean_satisfaction", "stderr_satisfaction"),
}


def emit_plot_data(aggregates: list[Aggregate], out_dir, reward_trace=None, window=50) -> list[Path]:
    """Long-format ``x, series, mean, stderr`` files for each plot."""
    out_dir = Path(out_dir)
    written = []
    for name, (sweep, mean_key, err_key) in PLOT_FILES.items():
        rows = [a for a in aggregates if a.sweep == sweep]
        if not rows:
            raise HarnessError(f"no aggregates for the {sweep} sweep")
        path = out_dir / name
        write_rows(path, ["x", "series", "mean", "stderr"],
                   ([a.x, a.framework, getattr(a, mean_key), getattr(a, err_key)] for a in rows))
        written.append(path)
    if reward_trace is not None:
        r = np.asarray(reward_trace, dtype=float)
        ma = moving_average(r, window)
        path = out_dir / "reward_vs_episode.csv"
        write_rows(path, ["x", "series", "mean", "stderr"],
                   ([float(i + 1), "semaigc", float(m), 0.0] for i, m in enumerate(ma)))
        written.append(path)
    return written


def write_manifest(out_dir, config: ExperimentConfig, command: str, extra=None):
    doc = {"command": command, "config_sha256": config.digest(), "seed": config.seed,
           "config": config.to_dict(),
           "versions": {"semaigc": __version__, "numpy": np.__version__,
                        "python": platform.python_version()}}
    doc.update(extra or {})
    with open(Path(out_dir) / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def run_experiment(config: ExperimentConfig, out_dir, net: QNetwork | None = None,
                   episodes: int | None = None) -> dict:
    """Train (unless a network is given), then run random, SNR and PACR sweeps and write CSVs."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    sim = Simulator(config)
    frameworks = list(config.frameworks)
    trace = None
    if "semaigc" in frameworks and net is None:
        result = train_agent(sim)
        net, trace = result.net, result.rewards
        export_reward_trace(out_dir / "reward_trace.csv", trace)
        net.save(out_dir / "agent_weights.json")
    n = config.eval_episodes if episodes is None else episodes

    records, aggs = [], []
    recs = evaluate(sim, net, frameworks, n, config.seed, "random")
    records += recs
    if n:
        aggs += aggregate(recs, "random", 0.0)
    for x in config.snr_grid:
        recs = evaluate(sim, net, frameworks, n, config.seed, "snr", x)
        records += recs
        if n:
            aggs += aggregate(recs, "snr", x)
    for x in config.pacr_grid:
        recs = evaluate(sim, net, frameworks, n, config.seed, "pacr", x)
        records += recs
        if n:
            aggs += aggregate(recs, "pacr", x)

    write_records(out_dir / "episodes.csv", records)
    write_rows(out_dir / "aggregates.csv", AGG_FIELDS, ([getattr(a, k) for k in AGG_FIELDS] for a in aggs))
    if aggs:
        emit_plot_data(aggs, out_dir, trace)
    write_manifest(out_dir, config, "eval")
    return {"records": records, "aggregates": aggs, "reward_trace": trace, "net": net}
