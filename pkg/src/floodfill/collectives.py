"""Ring-allreduce over neighbor channels: reduce-scatter then allgather.

The flat vector is padded with zeros to p equal chunks of ceil(n/p) elements;
chunk c starts on rank c. During reduce-scatter, step i has every rank send
chunk (rank - i) mod p to its right neighbor and fold the incoming chunk
(rank - i - 1) mod p as `incoming + local`. Chunk c therefore accumulates as
the sequential left fold

    ((x_c + x_{c+1}) + x_{c+2}) + ... + x_{c+p-1}      (indices mod p)

i.e. in ring order starting at the chunk's home rank. The completed chunk is
divided by p once, on the rank that finished it, and the allgather phase
copies those exact bytes around the ring, so every rank ends with the same
bits. Each rank transmits exactly 2*(p-1)*ceil(n/p) data elements.
"""

from __future__ import annotations

import numpy as np

from .transport import (
    TAG_GATHER,
    TAG_LEN,
    TAG_REDUCE,
    TAG_RING,
    ProtocolError,
    RingGroup,
)


def _chunk_slices(n_padded: int, p: int):
    chunk = n_padded // p
    return [slice(c * chunk, (c + 1) * chunk) for c in range(p)]


def ring_allreduce(group: RingGroup, vec: np.ndarray) -> np.ndarray:
    """Average a flat vector across all ranks; every rank gets identical bits.

    All ranks must call with vectors of equal length (>= 1); a disagreement
    raises ProtocolError. The reduction order is fixed by the ring, so results
    are bitwise reproducible and rank-independent.
    """
    vec = np.asarray(vec)
    if vec.ndim != 1:
        raise ValueError(f"expected a flat vector, got shape {vec.shape}")
    n = vec.size
    if n < 1:
        raise ValueError("vector must have at least one element")
    p = group.size
    if p == 1:
        return vec / 1.0

    own_len = np.int64(n).tobytes()
    group.right.send(TAG_LEN, own_len)
    left_len = int(np.frombuffer(group.left.recv(TAG_LEN), dtype=np.int64)[0])
    if left_len != n:
        raise ProtocolError(
            f"allreduce length mismatch: rank {group.rank} has {n} elements, "
            f"rank {group.left.peer_rank} has {left_len}"
        )

    chunk = -(-n // p)  # ceil
    buf = np.zeros(chunk * p, dtype=vec.dtype)
    buf[:n] = vec
    slices = _chunk_slices(chunk * p, p)
    r = group.rank

    for i in range(p - 1):
        send_c = (r - i) % p
        recv_c = (r - i - 1) % p
        group.right.send(TAG_REDUCE, buf[slices[send_c]].tobytes())
        incoming = np.frombuffer(group.left.recv(TAG_REDUCE), dtype=vec.dtype)
        # incoming-first keeps the left-fold order anchored at the chunk owner
        buf[slices[recv_c]] = incoming + buf[slices[recv_c]]

    done_c = (r + 1) % p  # the chunk this rank finished reducing
    buf[slices[done_c]] /= p

    for i in range(p - 1):
        send_c = (r + 1 - i) % p
        recv_c = (r - i) % p
        group.right.send(TAG_GATHER, buf[slices[send_c]].tobytes())
        buf[slices[recv_c]] = np.frombuffer(
            group.left.recv(TAG_GATHER), dtype=vec.dtype
        )

    return buf[:n].copy()


def ring_allgather_bytes(group: RingGroup, payload: bytes) -> list:
    """Collect one bytes payload from every rank, indexed by rank.

    Rotates payloads rightward p-1 times; per-rank order of arrival is
    deterministic, so all ranks end with the same list.
    """
    p = group.size
    out = [None] * p
    out[group.rank] = payload
    current = payload
    for i in range(p - 1):
        group.right.send(TAG_RING, current)
        current = group.left.recv(TAG_RING)
        out[(group.rank - i - 1) % p] = current
    return out


def fold_average_reference(vectors: list) -> np.ndarray:
    """Independent oracle for ring_allreduce's exact result.

    Computes, per chunk, the same sequential left fold in ring order starting
    at the chunk's home rank, then the same single division. Pure numpy over
    the input list; no transports involved.
    """
    p = len(vectors)
    vecs = [np.asarray(v) for v in vectors]
    n = vecs[0].size
    if p == 1:
        return vecs[0] / 1.0
    chunk = -(-n // p)
    padded = [np.concatenate([v, np.zeros(chunk * p - n, dtype=v.dtype)]) for v in vecs]
    out = np.zeros(chunk * p, dtype=vecs[0].dtype)
    for c in range(p):
        sl = slice(c * chunk, (c + 1) * chunk)
        acc = padded[c][sl].copy()
        for k in range(1, p):
            acc = acc + padded[(c + k) % p][sl]
        out[sl] = acc / p
    return out[:n]
