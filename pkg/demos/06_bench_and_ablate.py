"""
Token-count sweep and a miniature ablation
==========================================

The sweep shows how the component count, and with it the next attention
layer's N^2 d cost, depends on theta. The ablation trains each variant for a
handful of steps only, enough to see the harness work.
"""
from asc.config import RunConfig
from asc.evaluation import ablation_csv, bench_tokens, run_ablation

rows = bench_tokens(thetas=[-0.5, 0.0, 0.5, 1.0, 1.5], ns=(16, 64), kinds=("two_cluster",))
for r in rows:
    print(f"N={r['N']:3d} theta={r['theta']:5.2f} components={r['components']:3d} "
          f"attention {r['attention_cost']:7d} vs overhead {r['asc_overhead']:7d}")

base = RunConfig().replace(**{"train.total_steps": 4, "train.warmup_steps": 1, "train.batch_size": 4,
                              "probe.n_clips": 90})
report = run_ablation(base, ["full", "no-ASC", "ToMe", "max"], seeds=[0])
print(ablation_csv(report).split(",config")[0])
for r in report:
    print(f"{r.variant:<8} top1 {r.top1:.3f} tokens_ratio {r.tokens_ratio:.3f} {r.sec_per_step:.2f}s/step")
