"""Counter-based random numbers usable from numba kernels.

Every stream is identified by ``(seed, stream_id)``; draws inside a stream are
indexed by a counter, so results never depend on scheduling or thread count.
"""

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@numba.njit(cache=True, inline="always")
def mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@numba.njit(cache=True)
def stream_key(seed, stream):
    return mix64(np.uint64(seed) ^ mix64(np.uint64(stream) + _GOLDEN))


@numba.njit(cache=True)
def new_state(seed, stream):
    st = np.empty(2, dtype=np.uint64)
    st[0] = stream_key(seed, stream)
    st[1] = np.uint64(0)
    return st


@numba.njit(cache=True)
def substream(st, index):
    """Derive an independent child stream from ``st``."""
    child = np.empty(2, dtype=np.uint64)
    child[0] = mix64(st[0] ^ mix64(np.uint64(index) * _GOLDEN + _M2))
    child[1] = np.uint64(0)
    return child


@numba.njit(cache=True, inline="always")
def rand(st):
    """Uniform double in [0, 1); advances the stream counter."""
    v = mix64(st[0] + st[1] * _GOLDEN)
    st[1] += np.uint64(1)
    return float(v >> _S11) * _INV53


def uniform_block(seed: int, stream: int, n: int) -> np.ndarray:
    """``n`` uniforms from a single stream (host convenience)."""
    return _uniform_block(np.uint64(seed), np.uint64(stream), n)


@numba.njit(cache=True)
def _uniform_block(seed, stream, n):
    st = new_state(seed, stream)
    out = np.empty(n)
    for i in range(n):
        out[i] = rand(st)
    return out
