"""
Self-supervised training and a linear probe
===========================================

Train the Siamese model for a few steps, then fit a linear classifier on the
frozen features of held-out clips. Pass the step count as the first argument
(default 40; the full 200 steps take about two minutes on one core).
"""
import sys

from asc.config import RunConfig
from asc.evaluation import probe_state
from asc.trainer import running_mean, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 40
cfg = RunConfig(out="demo_out/train").replace(**{"train.total_steps": steps,
                                                 "train.warmup_steps": max(1, steps // 10)})
res = run_training(cfg, cfg.out)
rm = running_mean(res.losses)
k = min(10, steps)
print(f"loss: running mean {rm[k - 1]:.3f} at step {k} -> {rm[-1]:.3f} at step {steps}")
print("theta at the end:", res.rows[-1][3:5])
print("metrics in", res.metrics_path)

probe = probe_state(res.state, cfg)
print(f"probe top-1 {probe.top1:.3f} on {probe.n} held-out clips", probe.per_class)
print(f"shuffled-label control {probe_state(res.state, cfg, shuffle_labels=True).top1:.3f} (chance 0.333)")
