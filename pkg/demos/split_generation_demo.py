"""Generate part of the content at the transmitter, send it over AWGN, finish at the receiver.

Compare the quality of three deliveries at several SNRs:
raw delivery of finished content, and a 10/10 split with channel-aware fine-tuning.
"""
import numpy as np

from semaigc.channel import ChannelModel, channel_decode, channel_encode, semantic_noise_std, transmit
from semaigc.codec import TextEncoder, quality_score
from semaigc.diffusion import AnalyticDenoiser, default_mixture_spec, denoise, fine_tune, initial_noise
from semaigc.schedules import build_channel_aware_schedule, build_linear_schedule

mixtures = default_mixture_spec()
denoiser = AnalyticDenoiser(mixtures)
schedule = build_linear_schedule(20, 0.01, 0.5)
text = TextEncoder(mixtures)
label, n = 2, 5000
g = text(label)


def deliver(snr_db, split, seed=0):
    rng = np.random.default_rng(seed)
    ch = ChannelModel(snr_db)
    z = denoise(initial_noise(2, 20, n, rng), split, denoiser, g, schedule, rng)
    frame = channel_encode(z, split, label)
    z_rx, head = channel_decode(transmit(frame, ch, rng), ch, total_steps=20)
    t_bar = 20 - head.split_step
    if t_bar == 0:
        return z_rx.at(0)
    cas = build_channel_aware_schedule(schedule, semantic_noise_std(ch, frame.payload), t_bar)
    return fine_tune(z_rx, g, t_bar, cas, denoiser, rng)


print(f"label {label}: {len(mixtures[label].weights)} modes, {n} samples per cell")
print("snr_db  raw(20/0)  split(10/10)")
for snr in (-6, 0, 6, 15):
    raw = quality_score(deliver(snr, 20), mixtures[label])
    split = quality_score(deliver(snr, 10), mixtures[label])
    print(f"{snr:>6}  {raw:9.3f}  {split:12.3f}")
