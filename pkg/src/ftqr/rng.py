"""Seeded matrix generation with a pinned xorshift64* generator.

The generator is fully specified here so fixtures are reproducible across
implementations and platforms:

    state ^= state >> 12
    state ^= (state << 25) & (2**64 - 1)
    state ^= state >> 27
    output = (state * 2685821657736338717) mod 2**64

A double in [0, 1) is (output >> 11) * 2**-53; matrix entries are mapped to
[-1, 1) via 2*u - 1 and filled in row-major order. A zero seed is remapped
to a fixed odd constant because the all-zero state is a fixed point.
"""

import numpy as np

_MASK = (1 << 64) - 1
_MULT = 2685821657736338717
_ZERO_SEED = 0x9E3779B97F4A7C15


class XorShift64Star:
    def __init__(self, seed):
        self.state = (int(seed) & _MASK) or _ZERO_SEED

    def next_u64(self):
        s = self.state
        s ^= s >> 12
        s ^= (s << 25) & _MASK
        s ^= s >> 27
        self.state = s
        return (s * _MULT) & _MASK

    def next_double(self):
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def next_signed(self):
        """Uniform double in [-1, 1)."""
        return 2.0 * self.next_double() - 1.0


def random_matrix(rows, cols, seed):
    """Seeded dense matrix with entries in [-1, 1), row-major fill order."""
    gen = XorShift64Star(seed)
    out = np.empty((rows, cols))
    flat = out.reshape(-1)
    for i in range(flat.shape[0]):
        flat[i] = gen.next_signed()
    return out
