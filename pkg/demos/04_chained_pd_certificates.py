"""Incremental positive-definiteness through a factorization chain.

A block-partitioned symmetric matrix is certified PD one block row at a
time: each extension only needs the new row, so growing a certified matrix
never revisits old blocks.  This is the mechanism that lets the network
certificate absorb a join without recomputing anyone else's gains.
"""

import numpy as np

from meshnet.lmi import (
    BlockSymMatrix,
    is_pd_compositional,
    sylvester_factorize,
    sylvester_step,
)

rng = np.random.default_rng(4)

print("== certify a 3-block matrix ==")
sizes = [2, 3, 2]
mat = BlockSymMatrix(sizes)
# diagonally dominant blocks so the whole thing is comfortably PD
for i, s in enumerate(sizes):
    b = rng.normal(size=(s, s))
    mat.set(i, i, b @ b.T + 2.0 * np.eye(s))
mat.set(1, 0, 0.3 * rng.normal(size=(3, 2)))
mat.set(2, 1, 0.3 * rng.normal(size=(2, 3)))

factors = sylvester_factorize(mat)
lam = np.linalg.eigvalsh(mat.dense()).min()
print(f"chain verdict: {factors.is_pd}, eigenvalue oracle min: {lam:.4f}")
print("agree:", factors.is_pd == (lam > 0.0))

print()
print("== extend the certificate by one block row ==")
new_diag = np.eye(2) * 5.0
new_off = [0.2 * rng.normal(size=(2, s)) for s in sizes]
extended = sylvester_step(factors, new_off + [new_diag])
print("extended chain is PD:", extended.is_pd)
print("blocks touched: only the new row; the old factors are reused as-is")

print()
print("== a spoiler block flips the verdict ==")
bad = BlockSymMatrix(sizes)
for i, s in enumerate(sizes):
    bad.set(i, i, np.eye(s))
bad.set(1, 0, 5.0 * np.ones((3, 2)))  # overwhelms the unit diagonals
print("chain verdict:", is_pd_compositional(bad))
print("eigenvalue oracle min:", round(float(np.linalg.eigvalsh(bad.dense()).min()), 4))

print()
print("== agreement sweep over random partitions ==")
disagree = 0
for _ in range(200):
    blocks = rng.integers(1, 5, size=int(rng.integers(2, 5)))
    dim = int(blocks.sum())
    raw = rng.normal(size=(dim, dim))
    dense = 0.5 * (raw + raw.T) + float(rng.uniform(-1.0, 3.0)) * np.eye(dim)
    if abs(np.linalg.eigvalsh(dense).min()) < 1e-9:
        continue  # too close to singular to compare verdicts fairly
    m = BlockSymMatrix(blocks.tolist())
    offs = np.concatenate([[0], np.cumsum(blocks)])
    for i in range(len(blocks)):
        for j in range(i + 1):
            m.set(i, j, dense[offs[i]:offs[i + 1], offs[j]:offs[j + 1]])
    if is_pd_compositional(m) != (np.linalg.eigvalsh(dense).min() > 0.0):
        disagree += 1
print(f"disagreements over 200 random matrices: {disagree}")
