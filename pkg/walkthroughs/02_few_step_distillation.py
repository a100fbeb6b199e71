"""Distil a 50-step teacher into a 4-step student with straight noise rays.

Each data point is inverted through the teacher ODE, regenerated, and paired
with the path-averaged noise expectation of that trajectory. The student learns
the straight ray x0 -> eps_hat only at the timesteps its 4-step sampler visits.
"""

import torch

from mmflow.sampling import ODESchedule, VelocityMLP, distill_student, energy_distance, euler_sample, train_flow, two_moons

gen = torch.Generator().manual_seed(1)
torch.manual_seed(1)
data, held = two_moons(20_000, gen), two_moons(10_000, gen)

teacher = VelocityMLP()
train_flow(teacher, data, 3000, gen)
teacher.requires_grad_(False)

noise = torch.randn(10_000, 2, generator=gen)
ed_teacher50 = energy_distance(euler_sample(teacher, None, ODESchedule.uniform(50), noise).x, held)
ed_teacher4 = energy_distance(euler_sample(teacher, None, ODESchedule.uniform(4), noise).x, held)

student = VelocityMLP()
student.load_state_dict(teacher.state_dict())
student.requires_grad_(True)
history, _ = distill_student(teacher, student, data, k_student=4, steps=3000, gen=gen)
ed_student4 = energy_distance(euler_sample(student, None, ODESchedule.uniform(4), noise).x, held)

print(f"teacher NFE=50  {ed_teacher50:.5f}")
print(f"teacher NFE=4   {ed_teacher4:.5f}")
print(f"student NFE=4   {ed_student4:.5f}  (ratio to teacher@50: {ed_student4 / ed_teacher50:.2f})")
