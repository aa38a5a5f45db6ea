"""The one-cycle learning-rate schedule and the decoupled-decay optimizer.

Training uses a single cosine-shaped cycle: the rate climbs from a tiny
start value to its peak a third of the way through, then descends to an
even smaller final value. Weights are updated by Adam with the weight
decay applied directly to the parameters, so the decay is an exact
multiplicative shrink rather than a gradient term.
"""

import numpy as np

from hybridlm.tape import Parameter
from hybridlm.training import OptimizerConfig, adamw_step, one_cycle_lr

TOTAL = 60
START, PEAK, FINAL = 1e-7, 4.5e-4, 5e-6

print(f"-- one cycle over {TOTAL} steps --")
print(f"start {START:g}, peak {PEAK:g} at step {TOTAL // 3}, final {FINAL:g}\n")

# An ASCII rendering of the curve; the vertical scale is linear.
WIDTH = 56
for step in range(0, TOTAL + 1, 4):
    lr = one_cycle_lr(step, TOTAL, START, PEAK, FINAL)
    bar = "#" * round(WIDTH * lr / PEAK)
    print(f"step {step:>3}  {lr:.3e}  {bar}")

assert abs(one_cycle_lr(0, TOTAL, START, PEAK, FINAL) - START) < 1e-12
assert one_cycle_lr(TOTAL // 3, TOTAL, START, PEAK, FINAL) == PEAK
assert one_cycle_lr(TOTAL, TOTAL, START, PEAK, FINAL) == FINAL
print("\nthe peak and final values are hit exactly: the cosine is evaluated")
print("at its own turning points, where it is exactly -1.")

# The optimizer on a toy problem: minimize |w|^2 pulled by decay alone.
print("\n-- decoupled weight decay --")
cfg = OptimizerConfig(peak_lr=0.1, weight_decay=1.0)
w = Parameter(np.full(4, 2.0))
moments = {"w": (np.zeros(4), np.zeros(4))}
w.grad = np.zeros(4)  # no loss gradient; only the decay acts
for t in range(1, 4):
    adamw_step([("w", w)], moments, lr=0.1, cfg=cfg, t=t)
print("after 3 steps of lr*decay = 0.1:", w.data)
print("each step multiplied by exactly 0.9:", np.array_equal(
    w.data, np.full(4, 2.0) * 0.9 ** 3))

# Gradients steer as usual on top of the shrink.
print("\n-- a short descent --")
target = np.array([1.0, -1.0])
w = Parameter(np.array([4.0, 4.0]))
moments = {"w": (np.zeros(2), np.zeros(2))}
cfg = OptimizerConfig(peak_lr=0.2)
for t in range(1, 81):
    w.grad = 2 * (w.data - target)
    adamw_step([("w", w)], moments, lr=0.2, cfg=cfg, t=t)
    if t % 20 == 0:
        print(f"step {t:>2}  w = {np.round(w.data, 4)}")
print("converges toward", target)
