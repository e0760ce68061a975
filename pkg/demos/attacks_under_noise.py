"""Three attacks against a tiny linear model.

Gradient inversion recovers a training point from its exact gradient and
degrades as noise is added; model inversion reads features off outputs; brute
force walks a small key space of the toy encryption scheme.

    python3 demos/attacks_under_noise.py
"""
import numpy as np

from privutil import protection as prot
from privutil.attacks import (AttackConfig, ModelContext, brute_force_key,
                              inversion_errors_under_noise, model_inversion)

rng = np.random.default_rng(0)
context = ModelContext([[0.6, -0.8, 0.3]])
points, labels = rng.normal(size=(100, 2)), rng.normal(size=100)
sigmas = [0.0, 0.1, 0.3, 1.0]
errors = inversion_errors_under_noise(context, points, labels, sigmas, AttackConfig(restarts=1))
for s, row in zip(sigmas, errors):
    print(f"gradient noise {s:>4}: median recovery error {np.median(row):.4f}")

x = np.array([0.7, -1.2])
outputs = ModelContext([[1.0, 0.5, 0.0], [-0.3, 2.0, 1.0]])
res = model_inversion(outputs.output(x), outputs, AttackConfig())
print(f"model inversion recovered {np.round(res.recovered, 6)} (true {x})")

params = prot.ToyHE(n=4, key_alphabet=(0, 1, 2))
space = prot.KeySpace(params)
key = space[len(space) - 1]
found = brute_force_key((0.25, prot.he_encrypt(0.25, key, rng)), space)
print(f"brute force: key index {found.details['index']} after "
      f"{found.details['decrypt_calls']} decryptions of {len(space)} keys")
