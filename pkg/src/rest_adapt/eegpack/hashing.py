"""
Content hashing of arrays and model state.

Used to prove model immutability across calibration, checkpoint identity
across sweep fractions, and bit-exact determinism of full runs.  Hashes are
SHA-256 over (name, dtype, shape, raw bytes) in sorted-name order, truncated to
16 hex characters.

Key functions: `hash_arrays`, `hash_state`
"""

import hashlib
import json
from collections.abc import Mapping
from typing import Any

import numpy as np

_HASH_LEN = 16


def hash_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """
    Hash a name → array mapping; independent of insertion order.
    """
    digest = hashlib.sha256()
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name])
        header = json.dumps({"name": name, "dtype": array.dtype.str, "shape": list(array.shape)}, separators=(",", ":"))
        digest.update(header.encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()[:_HASH_LEN]


def hash_state(module: Any) -> str:
    """
    Hash every parameter and buffer (running statistics included) of a torch module.
    """
    state = {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}
    return hash_arrays(state)
