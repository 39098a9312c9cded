"""Counter-based random streams.

Every random quantity in the package comes from a :class:`Stream`, a thin
wrapper around the Philox4x64-10 counter-based generator.  A stream is
identified by a 64-bit seed plus a path of stream ids (strings or ints).  The
128-bit Philox key is the BLAKE2b-128 digest of the canonical encoding

    "memgap/v1" | seed | id_1 | id_2 | ...

so ``Stream(seed, "train")`` and ``Stream(seed, "sampler", 3)`` are
statistically independent and reproducible regardless of which threads or
processes consume them.  Draws within a stream are taken in counter order, so
the first ``k`` values of a request for ``N >= k`` values do not depend on
``N`` (the prefix property used by the sampler and MC estimators).

Gaussians use Box-Muller on 53-bit uniforms; Gammas use Marsaglia-Tsang
rejection on top of those.  Nothing here touches numpy's global state or its
platform normal routines.
"""

from __future__ import annotations

import hashlib
import math
from typing import Union

import numpy as np

StreamId = Union[int, str]

_TWO_NEG_53 = 2.0**-53
_MASK64 = (1 << 64) - 1


def _encode(seed: int, path: tuple[StreamId, ...]) -> bytes:
    parts = ["memgap/v1", str(int(seed) & _MASK64)]
    for p in path:
        if isinstance(p, (bool, np.bool_)):
            raise TypeError("stream ids must be str or int")
        if isinstance(p, (int, np.integer)):
            parts.append("i:" + str(int(p)))
        elif isinstance(p, str):
            parts.append("s:" + p)
        else:
            raise TypeError(f"stream ids must be str or int, got {type(p).__name__}")
    return "|".join(parts).encode()


def derive_seed(seed: int, *path: StreamId) -> int:
    """Hash ``(seed, path)`` to a fresh 64-bit seed."""
    digest = hashlib.blake2b(_encode(seed, path), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Stream:
    """Reproducible random stream keyed by ``(seed, *path)``.

    Args:
        seed: 64-bit integer seed (larger ints are reduced mod 2**64).
        *path: stream ids distinguishing independent consumers of one seed.
    """

    def __init__(self, seed: int, *path: StreamId):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)
        digest = hashlib.blake2b(_encode(self.seed, self.path), digest_size=16).digest()
        key = np.frombuffer(digest, dtype="<u8").astype(np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={self.path!r})"

    def spawn(self, *path: StreamId) -> "Stream":
        """Child stream; independent of this one and of its other children."""
        return Stream(self.seed, *self.path, *path)

    def raw(self, n: int) -> np.ndarray:
        """``n`` raw 64-bit words in counter order."""
        if n <= 0:
            return np.empty(0, dtype=np.uint64)
        return self._bitgen.random_raw(int(n))

    def uniform(self, size=None) -> np.ndarray:
        """Uniforms on the open interval (0, 1) with 53-bit resolution."""
        shape = _shape(size)
        n = math.prod(shape)
        u = ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_NEG_53
        return u.reshape(shape)

    def normal(self, size=None) -> np.ndarray:
        """Standard normals via Box-Muller."""
        shape = _shape(size)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n].reshape(shape)

    def integers(self, high: int, size=None) -> np.ndarray:
        """Integers uniform on ``[0, high)`` by scaling 53-bit uniforms."""
        if high < 1:
            raise ValueError("high must be >= 1")
        shape = _shape(size)
        u = (self.raw(math.prod(shape)) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53
        return np.minimum((u * high).astype(np.int64), high - 1).reshape(shape)

    def gamma(self, shape_param: float, size=None) -> np.ndarray:
        """Gamma(shape, 1) draws by Marsaglia-Tsang rejection.

        Shapes below one use the boost ``G(a) = G(a + 1) * U**(1/a)``.
        """
        a = float(shape_param)
        if not a > 0:
            raise ValueError("gamma shape must be positive")
        shape = _shape(size)
        n = math.prod(shape)
        boost = a < 1.0
        aa = a + 1.0 if boost else a
        d = aa - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = max(16, int(1.1 * (n - filled)) + 8)
            x = self.normal(m)
            u = self.uniform(m)
            v = (1.0 + c * x) ** 3
            ok = v > 0
            with np.errstate(invalid="ignore", divide="ignore"):
                logv = np.where(ok, np.log(np.where(ok, v, 1.0)), -np.inf)
            ok &= np.log(u) < 0.5 * x * x + d - d * v + d * logv
            acc = (d * v)[ok][: n - filled]
            out[filled : filled + acc.size] = acc
            filled += acc.size
        if boost:
            out *= self.uniform(n) ** (1.0 / a)
        return out.reshape(shape)

    def beta(self, a: float, b: float, size=None) -> np.ndarray:
        """Beta(a, b) as ``X / (X + Y)`` with independent Gamma draws."""
        x = self.gamma(a, size)
        y = self.gamma(b, size)
        return x / (x + y)


def _shape(size) -> tuple[int, ...]:
    if size is None:
        return (1,)
    if isinstance(size, (int, np.integer)):
        return (int(size),)
    return tuple(int(s) for s in size)
