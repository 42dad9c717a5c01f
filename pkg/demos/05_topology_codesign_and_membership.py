"""Coupling-gain co-design and live membership changes.

Builds a 4-agent network two ways (one-shot and one-agent-at-a-time), then
walks a join and a leave, printing exactly which blocks move.  The point of
the sequential pipeline: a join is a broadcast, not a redesign.
"""

import numpy as np

from meshnet.certificates import coupling_budget_ratio
from meshnet.codesign import (
    apply_join,
    apply_leave,
    centralized_codesign,
    decentralized_codesign,
    decentralized_step,
    local_synthesis,
)

edges = [(1, 2), (2, 3), (3, 4), (1, 4)]
profiles = {i: local_synthesis() for i in (1, 2, 3, 4)}

print("== one-shot network design ==")
central = centralized_codesign(profiles, edges)
print(f"shared budget gamma = {central.gamma:.4f}")
print("edges with live coupling:", central.edges())

print()
print("== sequential design of the same network ==")
dec = decentralized_codesign(profiles, edges)
print(f"worst-agent budget gamma = {dec.gamma:.4f}")
for i, rec in sorted(dec.agents.items()):
    ratio = coupling_budget_ratio(i, rec.R, dec.k_row(i), rec.delta_eff)
    print(f"agent {i}: position {rec.position}, coupling budget ratio {ratio:.4f}")

print()
print("== a fifth agent joins next to agents 3 and 4 ==")
entrant = local_synthesis()
msg = decentralized_step(dec, entrant, 5, [3, 4])
after = apply_join(dec, msg)
print(f"budget after join: gamma = {after.gamma:.4f}")

moved, kept = [], 0
for key, blk in dec.K.items():
    if np.array_equal(after.K[key].rows(), blk.rows()):
        kept += 1
    else:
        moved.append(key)
print(f"pre-join coupling blocks unchanged: {kept}/{len(dec.K)}, moved: {moved}")
for j in (3, 4):
    # compare in the form the join update computes: old + block, bit for bit
    exact = np.array_equal(
        after.agents[j].K0.rows(),
        dec.agents[j].K0.rows() + msg.K_into_prior[j].rows(),
    )
    print(f"agent {j} accumulator gained exactly its new block: {exact}")
for j in (1, 2):
    same = np.array_equal(after.agents[j].K0.rows(), dec.agents[j].K0.rows())
    print(f"agent {j} (not a neighbor) untouched: {same}")

print()
print("== the entrant leaves again ==")
restored = apply_leave(after, 5)
worst = max(
    float(np.max(np.abs(restored.K[key].rows() - blk.rows())))
    for key, blk in dec.K.items()
)
print(f"roster restored: {restored.ids() == dec.ids()}")
print(f"largest block deviation from the pre-join network: {worst:.2e}")
