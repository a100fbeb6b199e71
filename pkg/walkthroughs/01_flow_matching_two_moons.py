"""Flow matching on two-moons, then Euler sampling at decreasing step counts.

Trains a small velocity MLP on the linear interpolant x_t = (1-t) x0 + t eps and
shows how sample quality (energy distance to held-out data) degrades as the
number of function evaluations drops. This is the gap few-step distillation
(02_few_step_distillation.py) closes.
"""

import torch

from mmflow.sampling import CallCounter, ODESchedule, VelocityMLP, energy_distance, euler_sample, train_flow, two_moons

gen = torch.Generator().manual_seed(0)
torch.manual_seed(0)
data, held = two_moons(20_000, gen), two_moons(5_000, gen)

net = VelocityMLP()
losses = train_flow(net, data, 2000, gen)
print(f"flow loss: first 50 steps {sum(losses[:50]) / 50:.3f}, last 50 {sum(losses[-50:]) / 50:.3f}")

noise = torch.randn(5_000, 2, generator=gen)
print(f"{'NFE':>4}  energy distance")
for nfe in (50, 20, 8, 4, 2, 1):
    counted = CallCounter(net)
    x = euler_sample(counted, None, ODESchedule.uniform(nfe), noise).x
    print(f"{counted.calls:>4}  {energy_distance(x, held):.4f}")
