"""
Steering gate usage with the budget term
========================================

A CLSR layer picks, per token, between the shared feed-forward block and a
language expert. Only the gate of one language is trained here, with nothing
but the budget loss, and batch usage settles near the requested budget.
"""

import numpy as np

from clsrkit import numcore as nc
from clsrkit.clsr import ClsrLayer, GateSchedule, RouteContext, clsr_forward, gate_budget_loss, gate_usage
from clsrkit.distill import Adam
from clsrkit.nn import FeedForward

dim, steps = 32, 500

# %%
# Gate logits start at zero. Training begins on the soft end of the schedule,
# where that reads as g = 0.5, so usage starts at one half.

for budget in (0.2, 0.5, 0.8):
    rng = np.random.default_rng(1)
    layer = ClsrLayer(FeedForward(dim, 4 * dim, rng), ["L5"], rng)
    opt = Adam(list(layer.gates["L5"].named_parameters()))
    sched = GateSchedule(1.0, steps)
    noise = np.random.default_rng(5)
    for step in range(steps):
        z = nc.Tensor(rng.normal(size=(8, 24, dim)))
        ctx = RouteContext(lang="L5", train=True, step=step, schedule=sched, rng=noise, skip_prob=0.2)
        clsr_forward(layer, z, ctx)
        nc.backward(gate_budget_loss(ctx.records, budget))
        opt.step(1e-2)
        if step % 100 == 0:
            print(f"b={budget}  step {step:3d}  usage {gate_usage(ctx.records):.3f}")
    print(f"b={budget}  final usage {gate_usage(ctx.records):.3f}\n")
