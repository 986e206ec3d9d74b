"""Seed resolution, thread pinning, and small shared helpers."""
from __future__ import annotations

import hashlib
import json
import os

import torch

SEED_ENV_VAR = "MMCOT_SEED"


def resolve_seed(seed: int | None) -> int:
    """Explicit seed wins; otherwise fall back to MMCOT_SEED, then 0."""
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV_VAR)
    return int(env) if env else 0


def configure_threads(n: int) -> None:
    """Pin torch intra-op threads; 1 gives bit-reproducible runs."""
    torch.set_num_threads(max(1, n))


def model_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def stable_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)
