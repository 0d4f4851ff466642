"""Pure-python/numpy fallback for the xoshiro256** stream kernels.

Both backends must produce bit-identical uint64 streams; everything here is
integer arithmetic mod 2**64, so equivalence with the compiled kernels is
exact by construction.
"""

import numpy as np

_MASK = (1 << 64) - 1

BACKEND = "python"


def fill_u64(state, out):
    """Advance one xoshiro256** stream len(out) steps, writing outputs.

    state: uint64 array of shape (4,), mutated in place.
    """
    s0, s1, s2, s3 = (int(x) for x in state)
    n = out.shape[0]
    buf = out
    for i in range(n):
        r = (s1 * 5) & _MASK
        r = (((r << 7) | (r >> 57)) & _MASK) * 9 & _MASK
        buf[i] = r
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


def fill_u64_multi(states, out):
    """Advance K parallel streams in lockstep; out has shape (K, m).

    states: uint64 array of shape (K, 4), mutated in place.
    """
    s0 = states[:, 0].copy()
    s1 = states[:, 1].copy()
    s2 = states[:, 2].copy()
    s3 = states[:, 3].copy()
    five = np.uint64(5)
    nine = np.uint64(9)
    for j in range(out.shape[1]):
        r = s1 * five
        r = ((r << np.uint64(7)) | (r >> np.uint64(57))) * nine
        out[:, j] = r
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    states[:, 0] = s0
    states[:, 1] = s1
    states[:, 2] = s2
    states[:, 3] = s3
