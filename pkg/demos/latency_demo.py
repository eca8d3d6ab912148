"""Where the time goes for each workload split, and when splitting beats edge-only delivery."""
import numpy as np

from semaigc.harness import ExperimentConfig, Simulator
from semaigc.latency import DataSizes, LinkSpec, semaigc_beats_edge

sim = Simulator(ExperimentConfig())
print("split a  transmit_s  edge_s  local_s  total_s   (SNR 6 dB, PACR 0.6)")
env = sim.sample_environment(np.random.default_rng(0), snr_db=6.0, pacr=0.6)
for a in sim.steps:
    lat = sim.latency("semaigc", env, int(a))
    print(f"{a:>7}  {lat.transmission_s:10.4f}  {lat.edge_compute_s:6.2f}  {lat.local_compute_s:7.2f}  {lat.total_s:7.2f}")
edge = sim.latency("edge", env, 20)
print(f"edge-only total {edge.total_s:.2f} s (transmit {edge.transmission_s:.4f} s)")

print("\ncompression ratio needed for the split to win on a slow link")
link = LinkSpec(1e5, 0.0)
for ratio in (0.01, 0.1, 0.5, 1.0):
    sizes = DataSizes(1e6, ratio * 1e6)
    res = semaigc_beats_edge(sizes, link, sim.edge_spec, sim.local_spec, 10, 10)
    print(f"latent/content {ratio:<5} bound {res.bound:.3f}  split wins: {res.beats_edge}")
