"""Point-to-point channels between ring neighbors.

Two interchangeable transports share one wire framing (u32 tag, u64 payload
length, payload bytes, all little-endian):

  * inproc  - queue-backed channels inside one process; deterministic and the
              default for tests and desk runs.
  * tcp     - real sockets. Each rank listens on its endpoint from a
              rendezvous host list and connects to its right neighbor; a
              one-frame hello identifies the caller's rank.

Channels are single-producer/single-consumer per direction. Payload bytes are
counted per tag on both sides, so collectives can be audited externally.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from collections import defaultdict

_FRAME = struct.Struct("<IQ")

# message tags used by the collectives and the trainer
TAG_LEN = 1  # vector-length agreement check
TAG_REDUCE = 2  # reduce-scatter chunks
TAG_GATHER = 3  # allgather chunks
TAG_RING = 4  # generic ring rotation payloads (checksums etc.)

DEFAULT_TIMEOUT = 120.0


class TransportError(RuntimeError):
    pass


class ChannelClosedError(TransportError):
    """The peer closed its end; carries the peer's rank in the message."""


class ProtocolError(RuntimeError):
    """Ranks disagreed about what should be on the wire."""


class Channel:
    """One directed neighbor link; counts payload bytes per tag."""

    def __init__(self, peer_rank: int):
        self.peer_rank = peer_rank
        self.sent_by_tag = defaultdict(int)
        self.received_by_tag = defaultdict(int)

    @property
    def bytes_sent(self) -> int:
        return sum(self.sent_by_tag.values())

    @property
    def bytes_received(self) -> int:
        return sum(self.received_by_tag.values())

    def send(self, tag: int, payload: bytes):
        raise NotImplementedError

    def recv(self, tag: int, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        raise NotImplementedError

    def close(self):
        raise NotImplementedError

    def _check_tag(self, got: int, want: int):
        if got != want:
            raise ProtocolError(
                f"expected tag {want} from rank {self.peer_rank}, got {got}"
            )


class InprocChannel(Channel):
    """Queue pair inside one process. None on the queue marks a closed peer."""

    def __init__(self, peer_rank: int, send_q: queue.Queue, recv_q: queue.Queue):
        super().__init__(peer_rank)
        self._send_q = send_q
        self._recv_q = recv_q
        self._closed = False

    def send(self, tag: int, payload: bytes):
        if self._closed:
            raise ChannelClosedError(f"channel to rank {self.peer_rank} is closed")
        self._send_q.put(_FRAME.pack(tag, len(payload)) + payload)
        self.sent_by_tag[tag] += len(payload)

    def recv(self, tag: int, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        try:
            frame = self._recv_q.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(
                f"timed out waiting for rank {self.peer_rank}"
            ) from None
        if frame is None:
            raise ChannelClosedError(f"rank {self.peer_rank} closed the channel")
        got_tag, length = _FRAME.unpack_from(frame)
        self._check_tag(got_tag, tag)
        payload = frame[_FRAME.size :]
        if len(payload) != length:
            raise ProtocolError(
                f"frame from rank {self.peer_rank} has {len(payload)} payload "
                f"bytes, header says {length}"
            )
        self.received_by_tag[tag] += length
        return payload

    def close(self):
        if not self._closed:
            self._closed = True
            self._send_q.put(None)


class TcpChannel(Channel):
    """Framed messages over a connected socket; a writer thread keeps sends
    non-blocking so the symmetric send/recv step pattern cannot deadlock."""

    def __init__(self, peer_rank: int, sock: socket.socket):
        super().__init__(peer_rank)
        self._sock = sock
        self._out = queue.Queue()
        self._closed = False
        self._writer = threading.Thread(target=self._drain, daemon=True)
        self._writer.start()

    def _drain(self):
        while True:
            frame = self._out.get()
            if frame is None:
                return
            try:
                self._sock.sendall(frame)
            except OSError:
                return

    def send(self, tag: int, payload: bytes):
        if self._closed:
            raise ChannelClosedError(f"channel to rank {self.peer_rank} is closed")
        self._out.put(_FRAME.pack(tag, len(payload)) + payload)
        self.sent_by_tag[tag] += len(payload)

    def _read_exact(self, n: int, timeout: float) -> bytes:
        self._sock.settimeout(timeout)
        buf = bytearray(n)
        view = memoryview(buf)
        done = 0
        while done < n:
            try:
                got = self._sock.recv_into(view[done:])
            except socket.timeout:
                raise TransportError(
                    f"timed out waiting for rank {self.peer_rank}"
                ) from None
            except OSError as exc:
                raise ChannelClosedError(
                    f"rank {self.peer_rank} connection failed: {exc}"
                ) from None
            if got == 0:
                raise ChannelClosedError(
                    f"rank {self.peer_rank} closed the connection"
                )
            done += got
        return bytes(buf)

    def recv(self, tag: int, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        header = self._read_exact(_FRAME.size, timeout)
        got_tag, length = _FRAME.unpack(header)
        self._check_tag(got_tag, tag)
        payload = self._read_exact(length, timeout) if length else b""
        self.received_by_tag[tag] += length
        return payload

    def close(self):
        if self._closed:
            return
        self._closed = True
        self._out.put(None)
        self._writer.join(timeout=5.0)
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class RingGroup:
    """This rank's view of the ring: its two neighbor channels."""

    def __init__(self, rank: int, size: int, left: Channel, right: Channel):
        if size < 1:
            raise ValueError("ring size must be >= 1")
        self.rank = rank
        self.size = size
        self.left = left  # receive side of the rightward flow
        self.right = right  # send side of the rightward flow

    def data_bytes_sent(self) -> int:
        """Payload bytes this rank pushed into reduce/gather traffic."""
        total = 0
        for ch in (self.left, self.right):
            if ch is not None:
                total += ch.sent_by_tag[TAG_REDUCE] + ch.sent_by_tag[TAG_GATHER]
        return total

    def close(self):
        for ch in (self.left, self.right):
            if ch is not None:
                ch.close()


def make_inproc_ring(size: int) -> list:
    """Build all ranks' RingGroups for an in-process ring of the given size."""
    if size < 1:
        raise ValueError("ring size must be >= 1")
    if size == 1:
        return [RingGroup(0, 1, None, None)]
    rightward = [queue.Queue() for _ in range(size)]  # edge r -> (r+1) % size
    leftward = [queue.Queue() for _ in range(size)]  # edge r -> (r-1) % size
    groups = []
    for r in range(size):
        right = InprocChannel(
            (r + 1) % size, send_q=rightward[r], recv_q=leftward[(r + 1) % size]
        )
        left = InprocChannel(
            (r - 1) % size, send_q=leftward[r], recv_q=rightward[(r - 1) % size]
        )
        groups.append(RingGroup(r, size, left, right))
    return groups


def _hello(sock: socket.socket, rank: int):
    sock.sendall(struct.pack("<I", rank))


def _expect_hello(sock: socket.socket, want_rank: int):
    buf = b""
    while len(buf) < 4:
        got = sock.recv(4 - len(buf))
        if not got:
            raise TransportError("peer closed during rendezvous")
        buf += got
    (got_rank,) = struct.unpack("<I", buf)
    if got_rank != want_rank:
        raise ProtocolError(
            f"rendezvous expected rank {want_rank}, peer announced {got_rank}"
        )


def connect_tcp_ring(rank: int, endpoints: list, timeout: float = 30.0) -> RingGroup:
    """Join a TCP ring. endpoints[r] = (host, port) for every rank.

    Each rank accepts one connection (from its left neighbor) and dials its
    right neighbor. Safe to call concurrently from every rank.
    """
    size = len(endpoints)
    if size == 1:
        return RingGroup(0, 1, None, None)
    host, port = endpoints[rank]
    server = socket.create_server((host, port))
    server.settimeout(timeout)

    right_addr = endpoints[(rank + 1) % size]
    dial_result = {}

    def dial():
        deadline = timeout
        step = 0.05
        waited = 0.0
        while True:
            try:
                s = socket.create_connection(right_addr, timeout=timeout)
                break
            except OSError:
                time.sleep(step)
                waited += step
                if waited > deadline:
                    dial_result["error"] = TransportError(
                        f"rank {rank} could not reach rank {(rank + 1) % size} "
                        f"at {right_addr}"
                    )
                    return
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        _hello(s, rank)
        dial_result["sock"] = s

    dialer = threading.Thread(target=dial, daemon=True)
    dialer.start()
    try:
        accepted, _ = server.accept()
    except socket.timeout:
        raise TransportError(
            f"rank {rank} timed out waiting for rank {(rank - 1) % size}"
        ) from None
    finally:
        dialer.join(timeout=timeout)
        server.close()
    if "error" in dial_result:
        raise dial_result["error"]
    accepted.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    _expect_hello(accepted, (rank - 1) % size)
    left = TcpChannel((rank - 1) % size, accepted)
    right = TcpChannel((rank + 1) % size, dial_result["sock"])
    return RingGroup(rank, size, left, right)


def free_local_endpoints(size: int) -> list:
    """Reserve `size` loopback (host, port) pairs for a local TCP ring."""
    endpoints = []
    holders = []
    for _ in range(size):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        holders.append(s)
        endpoints.append(("127.0.0.1", s.getsockname()[1]))
    for s in holders:
        s.close()
    return endpoints
