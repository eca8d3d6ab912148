"""A reduced end-to-end run: train, sweep, and write every result file into ./demo_out."""
import csv
from pathlib import Path

from semaigc.harness import ExperimentConfig, run_experiment

out = Path("demo_out")
cfg = ExperimentConfig(eval_episodes=40, quality_samples=128)
run_experiment(cfg, out)
print("files:", ", ".join(sorted(p.name for p in out.iterdir())))

print("\nmean satisfaction per framework (random environments)")
with open(out / "aggregates.csv") as fh:
    for row in csv.DictReader(fh):
        if row["sweep"] == "random":
            print(f"  {row['framework']:<13} {float(row['mean_satisfaction']):.3f}")
