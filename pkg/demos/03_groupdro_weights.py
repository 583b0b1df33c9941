"""Exponentiated-gradient weights chase the worst environment.

Simplex weights over environments update multiplicatively in the observed
risks: the environment with the largest risk gains mass, so the weighted loss
tracks the worst case. Equal risks are a fixed point.
"""

import numpy as np

from perinvfl.objectives import GroupWeights, groupdro_update_q

q = GroupWeights.uniform(3)
risks_over_time = [
    [0.9, 0.3, 0.3],
    [0.8, 0.4, 0.3],
    [0.6, 0.5, 0.4],
    [0.5, 0.5, 0.5],
    [0.4, 0.6, 0.5],
]

print(f"{'step':>4}  {'risks':<18} {'q':<30} sum(q)")
for t, risks in enumerate(risks_over_time):
    q = groupdro_update_q(q, risks, dro_step=1.5)
    q_str = np.array2string(q.q, precision=3)
    print(f"{t:>4}  {str(risks):<18} {q_str:<30} {q.q.sum():.12f}")

print()
print("equal risks leave the weights untouched:")
before = q.q.copy()
q = groupdro_update_q(q, [0.7, 0.7, 0.7], dro_step=1.5)
print(f"max |change| = {np.abs(q.q - before).max():.2e}")
