"""Random-subset compression with a shared key.

The encoder keeps ``kept = clamp(round(n / ratio), 1, n)`` entries of a
vector, chosen uniformly without replacement; the decoder knows which ones
because both sides derive the same index set from a shared master key and
the message context, so no indices ever go over the wire. Dropped entries
decode to exactly zero.

Index derivation (stable; defines wire compatibility, version 1):

1. ``chan = BLAKE2b-128(key=master, person=b"varco-mask-v1",
   msg=<q epoch, layer, hop, src, dst>)`` read as two little-endian u64
   words ``(lo, hi)``.
2. ``s = mix(lo ^ mix(node + hi))`` where ``mix`` is the SplitMix64
   finalizer over u64 with wraparound.
3. Position ``j`` gets score ``mix(s + (j + 1) * 0x9E3779B97F4A7C15)``;
   the ``kept`` positions with the smallest scores (stable argsort) are
   kept, returned in increasing order.

The direction flag of a context does not enter the index stream: a
backward message reuses the forward mask of the same exchange.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_MASTER_KEY = bytes(range(16))
FORWARD = "forward"
BACKWARD = "backward"
HEADER_BYTES = 24  # 16-byte context digest + u32 orig_len + u32 kept

_PERSON = b"varco-mask-v1"
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class KeyContext:
    epoch: int
    layer: int
    src: int
    dst: int
    node: int
    direction: str = FORWARD
    hop: int = 0
    master: bytes = DEFAULT_MASTER_KEY

    def digest(self) -> bytes:
        """128-bit tag identifying this message (includes node and direction)."""
        msg = struct.pack(
            "<qqqqqq", self.epoch, self.layer, self.hop, self.src, self.dst, self.node
        ) + self.direction.encode()
        return hashlib.blake2b(msg, digest_size=16, key=self.master, person=b"varco-tag-v1").digest()

    def forward_twin(self) -> "KeyContext":
        return replace(self, direction=FORWARD)


@dataclass(frozen=True, eq=False)
class CompressedBlock:
    ratio: float
    kept: int
    orig_len: int
    values: np.ndarray
    ctx: KeyContext

    @property
    def key(self) -> bytes:
        return self.ctx.digest()

    @property
    def wire_floats(self) -> int:
        return self.kept


def kept_count(orig_len: int, ratio: float) -> int:
    """clamp(round(orig_len / ratio), 1, orig_len), rounding halves up."""
    if ratio < 1:
        raise CodecError(f"compression ratio must be >= 1, got {ratio}")
    if orig_len < 1:
        raise CodecError("cannot compress an empty vector")
    return min(max(int(math.floor(orig_len / ratio + 0.5)), 1), orig_len)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def channel_seed(master: bytes, epoch: int, layer: int, hop: int, src: int, dst: int) -> tuple[int, int]:
    msg = struct.pack("<qqqqq", epoch, layer, hop, src, dst)
    d = hashlib.blake2b(msg, digest_size=16, key=master, person=_PERSON).digest()
    lo, hi = struct.unpack("<QQ", d)
    return lo, hi


def row_indices(
    master: bytes,
    epoch: int,
    layer: int,
    hop: int,
    src: int,
    dst: int,
    nodes: np.ndarray,
    orig_len: int,
    kept: int,
) -> np.ndarray:
    """Kept positions for many node vectors of one channel, shape (len(nodes), kept)."""
    if kept > orig_len or kept < 0:
        raise CodecError(f"cannot keep {kept} of {orig_len} entries")
    nodes = np.asarray(nodes, dtype=np.int64)
    if kept == orig_len:
        return np.broadcast_to(np.arange(orig_len), (len(nodes), orig_len)).copy()
    lo, hi = channel_seed(master, epoch, layer, hop, src, dst)
    with np.errstate(over="ignore"):
        node_u = nodes.astype(np.uint64)
        s = _mix(np.uint64(lo) ^ _mix(node_u + np.uint64(hi)))
        steps = (np.arange(1, orig_len + 1, dtype=np.uint64) * _GOLDEN)
        scores = _mix(s[:, None] + steps[None, :])
    order = np.argsort(scores, axis=1, kind="stable")[:, :kept]
    return np.sort(order, axis=1)


def derive_indices(ctx: KeyContext, orig_len: int, kept: int) -> np.ndarray:
    """Sorted kept positions for a single message context."""
    return row_indices(ctx.master, ctx.epoch, ctx.layer, ctx.hop, ctx.src, ctx.dst, np.array([ctx.node]), orig_len, kept)[0]


def compress(x, ratio: float, ctx: KeyContext, unbiased: bool = False) -> CompressedBlock:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise CodecError("cannot compress an empty vector")
    kept = kept_count(x.size, ratio)
    values = x[derive_indices(ctx, x.size, kept)]
    if unbiased and kept < x.size:
        values = values * (x.size / kept)
    return CompressedBlock(float(ratio), kept, x.size, values, ctx)


def decompress(block: CompressedBlock) -> np.ndarray:
    if len(block.values) != block.kept or block.kept > block.orig_len:
        raise CodecError(f"corrupted block: kept={block.kept}, {len(block.values)} values, orig_len={block.orig_len}")
    out = np.zeros(block.orig_len)
    out[derive_indices(block.ctx.forward_twin(), block.orig_len, block.kept)] = block.values
    return out


def codec_backward(upstream_grad, block_key: KeyContext, orig_len: int, kept: int, unbiased: bool = False) -> CompressedBlock:
    """Gradient of decompress(compress(x)) w.r.t. x, sent back as a block on the forward mask.

    ``block_key`` is the context the forward block travelled under; the
    returned block carries the same context with the backward flag.
    """
    g = np.asarray(upstream_grad, dtype=np.float64).ravel()
    if block_key.direction != FORWARD:
        raise CodecError("codec_backward expects the forward context of the block")
    if g.size != orig_len:
        raise CodecError(f"gradient has length {g.size}, block had {orig_len}")
    values = g[derive_indices(block_key, orig_len, kept)]
    if unbiased and kept < orig_len:
        values = values * (orig_len / kept)
    ratio = orig_len / kept
    return CompressedBlock(ratio, kept, orig_len, values, replace(block_key, direction=BACKWARD))


def expected_error(x, ratio: float) -> float:
    """E||decompress(compress(x)) - x||^2 over keys: each entry is dropped w.p. 1 - kept/n."""
    x = np.asarray(x, dtype=np.float64).ravel()
    kept = kept_count(x.size, ratio)
    return (1.0 - kept / x.size) * float(x @ x)


def encode_block(block: CompressedBlock) -> bytes:
    """Wire layout: digest(16) | u32 orig_len | u32 kept | kept x float32 LE."""
    return block.key + struct.pack("<II", block.orig_len, block.kept) + np.asarray(block.values, dtype="<f4").tobytes()


def decode_block(data: bytes, ctx: KeyContext, ratio: float | None = None) -> CompressedBlock:
    if len(data) < HEADER_BYTES:
        raise CodecError("truncated block header")
    digest = data[:16]
    orig_len, kept = struct.unpack_from("<II", data, 16)
    if digest != ctx.digest():
        raise CodecError("block digest does not match the expected context")
    if len(data) != HEADER_BYTES + 4 * kept:
        raise CodecError(f"block declares {kept} values but carries {(len(data) - HEADER_BYTES) / 4}")
    values = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES).astype(np.float64)
    return CompressedBlock(ratio if ratio is not None else orig_len / kept, kept, orig_len, values, ctx)
