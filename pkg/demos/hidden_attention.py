"""Rebuild the token-mixing matrix of one selective scan layer and check it.

Run: python demos/hidden_attention.py
"""

import numpy as np

from pumba.ssm import SsmLayerParams, init_ssm_params, materialize_hidden_attention, selective_scan
from pumba.tensor import Tensor

np.set_printoptions(precision=3, suppress=True, linewidth=120)

rng = np.random.default_rng(0)
T, D, S = 6, 2, 4
raw = init_ssm_params(rng, D, S, 0.05, 0.5)
raw["d_skip"] = np.ones(D)
p = SsmLayerParams(**{k: Tensor(v) for k, v in raw.items()})
x = rng.normal(size=(T, D))

# forward scan mixes only the past: lower triangle
alpha_f = materialize_hidden_attention(Tensor(x), p)
print("forward alpha, channel 0\n", alpha_f[0])

# backward scan mixes only the future: upper triangle
alpha_b = materialize_hidden_attention(Tensor(x), p, reverse=True)
print("backward alpha, channel 0\n", alpha_b[0])

# alpha @ x plus the skip term is exactly what the scan computes
for alpha, rev in ((alpha_f, False), (alpha_b, True)):
    rebuilt = np.einsum("dij,jd->id", alpha, x) + x * raw["d_skip"]
    y = selective_scan(Tensor(x), p, reverse=rev).data
    print(f"reverse={rev}: max |alpha x + Dx - scan(x)| = {np.abs(rebuilt - y).max():.2e}")

# a middle token sees both sides once the two directions are summed
mid = T // 2
print("combined influence on token", mid, np.abs(alpha_f[:, mid] + alpha_b[:, mid]).mean(0))
