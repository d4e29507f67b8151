"""Counter-addressed Brownian increments.

Every normal deviate is a pure function of its address
``(seed, domain, step, node, particle, channel)``.  The address is encrypted
with the Philox4x32-10 counter-based generator: the seed is the key, the
other fields fill the 128-bit counter.  The 128 output bits feed a
128-layer ziggurat sampler; the rare rejections draw further blocks by
bumping an attempt field of the counter.  Nothing is carried over from one
call to the next, so results do not depend on call order, on how many
particles or channels are requested, or on thread scheduling.

Counter layout (32-bit words): ``c0`` particle, ``c1`` step, ``c2`` node
(24 bits) and channel (8 bits), ``c3`` domain (4 bits) and attempt (28 bits).

Initial-condition sampling uses ``philox_stream`` instead, a numpy
generator keyed in the same spirit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

_MASK64 = (1 << 64) - 1

# stream domains; keep distinct so that no two purposes share a Philox key
DOMAIN_WIENER = 0
DOMAIN_BRIDGE = 1
DOMAIN_INIT = 2
DOMAIN_AUX = 3

MAX_STEP = (1 << 32) - 1
MAX_NODE = (1 << 24) - 1
MAX_CHANNELS = 256
MAX_PARTICLES = 1 << 32


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def philox_stream(seed: int, domain: int, channel: int = 0, step: int = 0,
                  node: int = 0) -> np.random.Generator:
    """Return a numpy generator for one addressed stream (used for initial sampling).

    ``domain`` and ``channel`` go into the upper key word, ``node`` and
    ``step`` into the upper counter words; the lowest counter word is left
    for the stream itself.
    """
    seed = _check_seed(seed)
    if not 0 <= channel < (1 << 32) or not 0 <= domain < (1 << 32):
        raise ValueError("channel and domain must fit in 32 bits")
    if step < 0 or node < 0:
        raise ValueError("step and node indices must be non-negative")
    key = seed | (((domain << 32) | channel) << 64)
    counter = ((node & _MASK64) << 64) | ((step & ((1 << 128) - 1)) << 128)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


# --------------------------------------------------------------------------
# Philox4x32-10 and the ziggurat
# --------------------------------------------------------------------------

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint32(0x9E3779B9)
_PHILOX_W1 = np.uint32(0xBB67AE85)
_LOW32 = np.uint64(0xFFFFFFFF)
_U53 = 1.0 / 9007199254740992.0

# 128-layer ziggurat for the standard normal (Marsaglia and Tsang constants)
_ZIG_LAYERS = 128
_ZIG_R = 3.442619855899
_ZIG_V = 9.91256303526217e-3


def _ziggurat_tables():
    x = np.zeros(_ZIG_LAYERS + 1)
    x[0] = _ZIG_V / math.exp(-0.5 * _ZIG_R * _ZIG_R)
    x[1] = _ZIG_R
    for i in range(2, _ZIG_LAYERS):
        x[i] = math.sqrt(-2.0 * math.log(_ZIG_V / x[i - 1] + math.exp(-0.5 * x[i - 1] ** 2)))
    return x, x[1:] / x[:-1]


_ZX, _ZRATIO = _ziggurat_tables()


@nb.njit(inline="always", cache=True)
def _philox(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = np.uint64(c0) * _PHILOX_M0
        p1 = np.uint64(c2) * _PHILOX_M1
        c0, c1, c2, c3 = (np.uint32(p1 >> np.uint64(32)) ^ c1 ^ k0, np.uint32(p1 & _LOW32),
                          np.uint32(p0 >> np.uint64(32)) ^ c3 ^ k1, np.uint32(p0 & _LOW32))
        k0 = np.uint32(k0 + _PHILOX_W0)
        k1 = np.uint32(k1 + _PHILOX_W1)
    return c0, c1, c2, c3


@nb.njit(inline="always", cache=True)
def _words(a, c1, c2, c3, k0, k1):
    r0, r1, r2, r3 = _philox(np.uint32(a), c1, c2, c3, k0, k1)
    return ((np.uint64(r1) << np.uint64(32)) | np.uint64(r0),
            (np.uint64(r3) << np.uint64(32)) | np.uint64(r2))


@nb.njit(inline="always", cache=True)
def _uniform(bits):
    return float(bits >> np.uint64(11)) * _U53


@nb.njit(cache=True)
def _ziggurat_slow(a, lo, hi, c1, c2, c3, k0, k1, zx, zr):
    """Full ziggurat for one address, starting from the attempt-0 words."""
    attempt = np.uint32(0)
    while True:
        i = int(lo & np.uint64(_ZIG_LAYERS - 1))
        u = 2.0 * _uniform(lo) - 1.0
        if abs(u) < zr[i]:
            return u * zx[i]
        if i == 0:
            # tail beyond R, sampled by Marsaglia's exponential rejection
            while True:
                attempt += np.uint32(1)
                l2, h2 = _words(a, c1, c2, c3 | attempt, k0, k1)
                xt = -math.log(1.0 - _uniform(l2)) / _ZIG_R
                y = -math.log(1.0 - _uniform(h2))
                if 2.0 * y > xt * xt:
                    return -(_ZIG_R + xt) if u < 0 else _ZIG_R + xt
        x = u * zx[i]
        f0 = math.exp(-0.5 * (zx[i] * zx[i] - x * x))
        f1 = math.exp(-0.5 * (zx[i + 1] * zx[i + 1] - x * x))
        if f1 + _uniform(hi) * (f0 - f1) < 1.0:
            return x
        attempt += np.uint32(1)
        lo, hi = _words(a, c1, c2, c3 | attempt, k0, k1)


@nb.njit(cache=True)
def _fill_normals(out, k0, k1, c1, node, domain, scale, zx, zr):
    n, m = out.shape
    lo = np.empty(n, dtype=np.uint64)
    hi = np.empty(n, dtype=np.uint64)
    c3 = np.uint32(domain << 28)
    for ch in range(m):
        c2 = np.uint32(node | (ch << 24))
        for a in range(n):
            lo[a], hi[a] = _words(a, c1, c2, c3, k0, k1)
        for a in range(n):
            bits = lo[a]
            i = int(bits & np.uint64(_ZIG_LAYERS - 1))
            u = 2.0 * _uniform(bits) - 1.0
            if abs(u) < zr[i]:
                out[a, ch] = u * zx[i] * scale
            else:
                out[a, ch] = _ziggurat_slow(a, bits, hi[a], c1, c2, c3, k0, k1, zx, zr) * scale


@dataclass
class WienerBatch:
    """Brownian increments for one (sub)step, shape ``(n_particles, m_channels)``.

    ``depth`` and ``sub_index`` locate the batch inside the dyadic refinement
    tree of step ``step_index``: the root is ``(0, 0)`` and the children of
    ``(d, j)`` are ``(d + 1, 2j)`` and ``(d + 1, 2j + 1)``.
    """

    dt: float
    increments: np.ndarray
    seed: int = 0
    step_index: int = 0
    depth: int = 0
    sub_index: int = 0

    @property
    def n_particles(self) -> int:
        return self.increments.shape[0]

    @property
    def m_channels(self) -> int:
        return self.increments.shape[1]


def standard_normals(seed: int, step_index: int, n_particles: int, m_channels: int,
                     domain: int = DOMAIN_WIENER, node: int = 0, scale: float = 1.0) -> np.ndarray:
    """Normal deviates of shape ``(n_particles, m_channels)``, times ``scale``.

    Entry ``[a, c]`` is addressed by ``(seed, domain, step_index, node, a, c)``.
    """
    seed = _check_seed(seed)
    if not 0 <= step_index <= MAX_STEP:
        raise ValueError(f"step index must lie in [0, {MAX_STEP}], got {step_index}")
    if not 0 <= node <= MAX_NODE:
        raise ValueError(f"refinement node {node} exceeds the counter field (depth too large)")
    if not 0 <= m_channels <= MAX_CHANNELS or not 0 <= n_particles <= MAX_PARTICLES:
        raise ValueError("too many particles or channels for the counter layout")
    if not 0 <= domain < 16:
        raise ValueError("domain must fit in 4 bits")
    out = np.empty((n_particles, m_channels))
    _fill_normals(out, np.uint32(seed & 0xFFFFFFFF), np.uint32(seed >> 32),
                  np.uint32(step_index), node, domain, float(scale), _ZX, _ZRATIO)
    return out


def wiener_increments(seed: int, step_index: int, n_particles: int, m_channels: int,
                      dt: float) -> WienerBatch:
    """Draw the increments ``dW[a, nu] ~ N(0, dt)`` for one step."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if m_channels < 1:
        raise ValueError("m_channels must be >= 1")
    if n_particles < 0:
        raise ValueError("n_particles must be >= 0")
    z = standard_normals(seed, step_index, n_particles, m_channels, scale=np.sqrt(dt))
    return WienerBatch(dt=float(dt), increments=z, seed=_check_seed(seed),
                       step_index=int(step_index))


def empty_batch(n_particles: int, dt: float, seed: int = 0, step_index: int = 0) -> WienerBatch:
    """Zero-channel batch for noise-free dynamics."""
    return WienerBatch(dt=float(dt), increments=np.zeros((n_particles, 0)), seed=seed,
                       step_index=step_index)


def refine_increments(batch: WienerBatch,
                      bridge_noise: np.ndarray | None = None) -> tuple[WienerBatch, WienerBatch]:
    """Split a batch into two half-step batches along the Brownian bridge.

    Given ``dW`` over ``[t, t + dt]`` the midpoint value is
    ``dW / 2 + sqrt(dt) / 2 * Z`` with ``Z`` standard normal; the second half is
    the remainder, so the two children always sum back to the parent.
    ``bridge_noise`` replaces ``Z`` (used by tests); by default ``Z`` is drawn
    from the bridge stream addressed by this batch's position in the tree.
    """
    n, m = batch.increments.shape
    node = (1 << batch.depth) + batch.sub_index
    if bridge_noise is None:
        z = standard_normals(batch.seed, batch.step_index, n, m, DOMAIN_BRIDGE, node)
    else:
        z = np.asarray(bridge_noise, dtype=float)
        if z.shape != (n, m):
            raise ValueError(f"bridge noise shape {z.shape} != {(n, m)}")
    half_dt = 0.5 * batch.dt
    first = 0.5 * batch.increments + 0.5 * np.sqrt(batch.dt) * z
    second = batch.increments - first
    kw = dict(seed=batch.seed, step_index=batch.step_index, depth=batch.depth + 1)
    return (WienerBatch(half_dt, first, sub_index=2 * batch.sub_index, **kw),
            WienerBatch(half_dt, second, sub_index=2 * batch.sub_index + 1, **kw))


def refine_to_depth(batch: WienerBatch, depth: int) -> list[WienerBatch]:
    """Recursively refine ``depth`` times; returns ``2**depth`` batches in time order."""
    level = [batch]
    for _ in range(depth):
        level = [child for b in level for child in refine_increments(b)]
    return level
