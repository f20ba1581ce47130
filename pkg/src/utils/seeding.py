import hashlib

import numpy as np
import torch


def derive_seed(*parts):
    """Derive a stable 63-bit seed from arbitrary hashable parts (ints, strings, floats)."""
    digest = hashlib.sha256(repr(parts).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & 0x7FFF_FFFF_FFFF_FFFF


def numpy_rng(*parts):
    return np.random.default_rng(derive_seed(*parts))


def torch_generator(*parts):
    generator = torch.Generator()
    generator.manual_seed(derive_seed(*parts))
    return generator
