"""Train the split-selection agent and look at the policy it learned."""
import numpy as np

from semaigc.agent import greedy_policy, moving_average
from semaigc.harness import ExperimentConfig, Simulator, train_agent

sim = Simulator(ExperimentConfig())
res = train_agent(sim, seed=0)
ma = moving_average(res.rewards, 50)
for ep in (49, 199, 399, 599, len(ma) - 1):
    print(f"episode {ep + 1:>4}: 50-episode mean reward {ma[ep]:.3f}")

print("\ntransmitter steps chosen by the greedy policy")
print("pacr   " + "  ".join(f"{s:>6}" for s in sim.config.snr_grid))
rng = np.random.default_rng(1)
for pacr in sim.config.pacr_grid:
    cells = []
    for snr in sim.config.snr_grid:
        envs = [sim.sample_environment(rng, snr_db=snr, pacr=pacr) for _ in range(50)]
        acts = greedy_policy(res.net, np.array([sim.observe(e) for e in envs]))
        cells.append(sim.steps[acts].mean())
    print(f"{pacr:<5}  " + "  ".join(f"{c:6.1f}" for c in cells))
