"""How a noisy link reshapes the receiver's denoising schedule.

The receiver treats channel noise as extra diffusion noise spread over its
fine-tuning steps. Larger channel noise means larger per-step coefficients.
"""
import numpy as np

from semaigc.schedules import build_channel_aware_schedule, build_linear_schedule, coefficient_C, ddim_coefficient

base = build_linear_schedule(20, 0.01, 0.5)
print("base schedule: T =", base.T, "alpha_bar[T] =", round(float(base.alpha_bar[-1]), 4))

T_bar = 8
print(f"\nper-step coefficient for the last {T_bar} receiver steps")
print("t   ddim     " + "  ".join(f"sigma={s:<4}" for s in (0.0, 0.3, 1.0)))
cas = {s: build_channel_aware_schedule(base, s, T_bar) for s in (0.0, 0.3, 1.0)}
for t in range(T_bar, 0, -1):
    row = "  ".join(f"{coefficient_C(cas[s], t):10.4f}" for s in cas)
    print(f"{t:<3} {ddim_coefficient(base, t):7.4f}  {row}")

g = cas[1.0].gamma[1:T_bar + 1]
print("\nnoise shares gamma_t grow geometrically:", np.round(g, 4))
print("normalization residual:", f"{cas[1.0].normalization_residual():.1e}")
