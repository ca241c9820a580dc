"""
Relaxed masks, noise injection and the loss terms
==================================================

Shows how the binary-Concrete relaxation sharpens as the temperature
drops, what the causal / confound split does to atom rows, and the
closed-form values of the three losses.
"""

import numpy as np

from causalmol import autodiff as ad
from causalmol.autodiff import ParameterStore
from causalmol.causal import causal_readout, gumbel_sigmoid, split
from causalmol.intervene import ConfounderPool, PoolEntry, intervene_predict, loss_var
from causalmol.objective import bce, kl_to_uniform

rng = np.random.default_rng(0)
p = ad.constant(np.full(10_000, 0.7))

# the fraction of draws above 0.5 tracks p; the mean only does at low temperature
for tau in (2.0, 1.0, 0.5, 0.1, 0.05):
    lam = gumbel_sigmoid(p, tau, rng).values
    print(f"tau {tau:4}: mean {lam.mean():.3f}  P(lam>0.5) {np.mean(lam > 0.5):.3f}  "
          f"share within 0.05 of 0/1 {np.mean((lam < 0.05) | (lam > 0.95)):.2f}")

print("_" * 60)

# kept atoms stay, masked atoms are replaced by noise drawn from the batch statistics
H = ad.constant(rng.normal(size=(4, 3)))
lam = ad.constant(np.array([1.0, 1.0, 0.0, 0.5]))
cs = split(H, lam, rng)
c, s = causal_readout(cs)
print("H\n", H.values.round(2))
print("C\n", cs.C_nodes.values.round(2))
print("S\n", cs.S_nodes.values.round(2))
print("c =", c.values.round(2), " s =", s.values.round(2))

print("_" * 60)

# closed forms: BCE at 0.5 is ln 2, the KL term vanishes at 0.5
print("BCE(0.5) =", bce(ad.constant(np.array([0.5])), 1).values[0], " ln2 =", np.log(2))
for q in (0.5, 0.75, 0.99):
    print(f"KL(Bern({q}) || Bern(0.5)) = {kl_to_uniform(ad.constant(np.array([q]))).values[0]:.4f}")

# the intervention adds a confounder vector to the causal readout before the shared head
head = ParameterStore({"cls.w": np.array([[1.0], [0.0]]), "cls.b": np.zeros(1)})
cvec = ad.constant(np.array([1.0, 1.0]))
print("sigmoid(w.(c+s)) with s=[1,-1]:", intervene_predict(cvec, [1.0, -1.0], head).values.item())
pool = ConfounderPool(0, [PoolEntry(np.array([0.0, 0.0]), 1, "a"), PoolEntry(np.array([2.0, 0.0]), 2, "b")])
print("invariance loss over a 2-entry pool (y=1):", loss_var([1], cvec, pool, head).values.item())
