"""
Giving each user a traceable payload
====================================

Payloads are handed out so that any two users differ in at least
``min_distance`` bits. A decoded payload that survives error correction is
then matched against the registry to name the user.
"""

import tempfile
from pathlib import Path

from latentmark.registry import IdentityRegistry, registry_assign

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "registry.json"
    for user in ("alice", "bob", "carol", "dave"):
        bits = registry_assign(path, user, payload_length=10, min_distance=4, seed=0)
        print(f"{user:6s} -> {''.join(map(str, bits))}")

    reg = IdentityRegistry.load(path)
    d = reg.matrix()
    pairwise = [int((d[i] != d[j]).sum()) for i in range(len(d)) for j in range(i + 1, len(d))]
    print("smallest pairwise distance:", min(pairwise))
    print("lookup of bob's payload:", reg.lookup(reg["bob"]))
