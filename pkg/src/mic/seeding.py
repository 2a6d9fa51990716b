"""Deterministic sub-seed derivation.

One master seed governs every random stream in a run. Sub-streams are
named, and their seeds are a stable hash of (master, *scope), so adding
a new stream never perturbs existing ones.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *scope) -> int:
    key = ":".join([str(int(master)), *(str(s) for s in scope)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") % (2**63)
