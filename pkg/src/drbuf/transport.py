"""Framed asynchronous RPC over TCP streams.

Every frame is a 20-byte little-endian header followed by the payload::

    magic "DRBF" | version u16 | msg_type u16 | payload_len u32 | request_id u64

Requests and replies share the request id, so a client may keep any number
of requests in flight on one connection and replies may come back in any
order. Sample reads for one peer are always consolidated into a single
SAMPLE_REQ frame; every SAMPLE_RESP piggybacks the owner's occupancy vector.
"""

from __future__ import annotations

import enum
import itertools
import logging
import socket
import struct
import threading
from collections import Counter
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from drbuf.buffer import LocalRehearsalBuffer, ReadFlag, SizeSnapshot, SlotRead
from drbuf.core import Sample, parse_address

log = logging.getLogger(__name__)

MAGIC = b"DRBF"
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<4sHHIQ")
MAX_PAYLOAD = 1 << 31
ALLREDUCE_CHUNK_FLOATS = 1 << 18


class MsgType(enum.IntEnum):
    SAMPLE_REQ = 1
    SAMPLE_RESP = 2
    SIZE_BCAST = 3
    ALLREDUCE_CHUNK = 4
    SHUTDOWN = 5


class TransportError(ConnectionError):
    """Retriable: connection refused, reset or timed out."""


class ProtocolError(RuntimeError):
    """Fatal: a malformed frame was received."""


class CollectiveError(RuntimeError):
    """An all-reduce could not complete; no partial average is ever returned."""

    def __init__(self, iteration: int, reason: str):
        super().__init__(f"allreduce aborted at iteration {iteration}: {reason}")
        self.iteration = iteration


def hexdump(data: bytes, limit: int = 64) -> str:
    shown = data[:limit]
    lines = []
    for off in range(0, len(shown), 16):
        chunk = shown[off : off + 16]
        lines.append(f"{off:08x}  {chunk.hex(' '):<47}  {''.join(chr(b) if 32 <= b < 127 else '.' for b in chunk)}")
    if len(data) > limit:
        lines.append(f"... ({len(data)} bytes total)")
    return "\n".join(lines)


# -- messages -------------------------------------------------------------------


@dataclass
class SampleRequest:
    entries: list = field(default_factory=list)  # [(class_id, slot_index)]

    msg_type = MsgType.SAMPLE_REQ

    def __eq__(self, other):
        return isinstance(other, SampleRequest) and [tuple(e) for e in self.entries] == [
            tuple(e) for e in other.entries
        ]


@dataclass
class ResponseEntry:
    class_id: int
    flag: ReadFlag
    features: np.ndarray | None = None
    label: int = 0

    def __eq__(self, other):
        if not isinstance(other, ResponseEntry):
            return NotImplemented
        if (self.class_id, int(self.flag)) != (other.class_id, int(other.flag)):
            return False
        if self.flag == ReadFlag.EMPTY:
            return True
        return self.label == other.label and np.array_equal(
            self.features.view(np.uint32), other.features.view(np.uint32)
        )

    @classmethod
    def from_read(cls, read: SlotRead) -> "ResponseEntry":
        if read.sample is None:
            return cls(read.class_id, ReadFlag.EMPTY)
        return cls(read.class_id, read.flag, read.sample.features, read.sample.label)

    def to_sample(self) -> Sample | None:
        if self.flag == ReadFlag.EMPTY:
            return None
        return Sample(self.features, self.label)


@dataclass
class SampleResponse:
    worker: int
    version: int
    occupancy: np.ndarray
    feature_dim: int
    entries: list = field(default_factory=list)

    msg_type = MsgType.SAMPLE_RESP

    def __eq__(self, other):
        return (
            isinstance(other, SampleResponse)
            and (self.worker, self.version, self.feature_dim)
            == (other.worker, other.version, other.feature_dim)
            and np.array_equal(self.occupancy, other.occupancy)
            and self.entries == other.entries
        )


@dataclass
class SizeBroadcast:
    worker: int
    version: int
    occupancy: np.ndarray

    msg_type = MsgType.SIZE_BCAST

    def __eq__(self, other):
        return (
            isinstance(other, SizeBroadcast)
            and (self.worker, self.version) == (other.worker, other.version)
            and np.array_equal(self.occupancy, other.occupancy)
        )


@dataclass
class AllreduceChunk:
    iteration: int
    rank: int
    offset: int
    total_len: int
    data: np.ndarray

    msg_type = MsgType.ALLREDUCE_CHUNK

    def __eq__(self, other):
        return (
            isinstance(other, AllreduceChunk)
            and (self.iteration, self.rank, self.offset, self.total_len)
            == (other.iteration, other.rank, other.offset, other.total_len)
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )


@dataclass
class Shutdown:
    msg_type = MsgType.SHUTDOWN


Message = Union[SampleRequest, SampleResponse, SizeBroadcast, AllreduceChunk, Shutdown]

_U32 = struct.Struct("<I")
_PAIR = struct.Struct("<II")
_WORKER_VERSION = struct.Struct("<IQ")
_ENTRY_HEAD = struct.Struct("<IB")
_ALLREDUCE_HEAD = struct.Struct("<QIIII")


def _occupancy_bytes(occ: np.ndarray) -> bytes:
    occ = np.asarray(occ)
    if occ.size and (occ.min() < 0 or occ.max() > 0xFFFFFFFF):
        raise ValueError("occupancy entries must fit in u32")
    return _U32.pack(occ.size) + occ.astype("<u4").tobytes()


def encode_payload(msg: Message) -> bytes:
    if isinstance(msg, SampleRequest):
        parts = [_U32.pack(len(msg.entries))]
        parts += [_PAIR.pack(int(c), int(s)) for c, s in msg.entries]
        return b"".join(parts)
    if isinstance(msg, SampleResponse):
        parts = [_WORKER_VERSION.pack(msg.worker, msg.version), _occupancy_bytes(msg.occupancy)]
        parts.append(_PAIR.pack(msg.feature_dim, len(msg.entries)))
        for e in msg.entries:
            parts.append(_ENTRY_HEAD.pack(int(e.class_id), int(e.flag)))
            if e.flag != ReadFlag.EMPTY:
                feats = np.asarray(e.features, dtype="<f4")
                if feats.shape != (msg.feature_dim,):
                    raise ValueError(f"entry has {feats.shape} features, expected {msg.feature_dim}")
                parts.append(feats.tobytes())
                parts.append(_U32.pack(int(e.label)))
        return b"".join(parts)
    if isinstance(msg, SizeBroadcast):
        return _WORKER_VERSION.pack(msg.worker, msg.version) + _occupancy_bytes(msg.occupancy)
    if isinstance(msg, AllreduceChunk):
        data = np.asarray(msg.data, dtype="<f4")
        head = _ALLREDUCE_HEAD.pack(msg.iteration, msg.rank, msg.offset, msg.total_len, data.size)
        return head + data.tobytes()
    if isinstance(msg, Shutdown):
        return b""
    raise TypeError(f"cannot encode {type(msg).__name__}")


def encode_message(msg: Message, request_id: int = 0) -> bytes:
    payload = encode_payload(msg)
    return HEADER.pack(MAGIC, PROTOCOL_VERSION, int(msg.msg_type), len(payload), request_id) + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ProtocolError(f"payload truncated: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def occupancy(self) -> np.ndarray:
        (n,) = self.unpack(_U32)
        return np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.int64)

    def finish(self):
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing payload bytes")


def decode_payload(msg_type: int, payload: bytes) -> Message:
    r = _Reader(payload)
    if msg_type == MsgType.SAMPLE_REQ:
        (n,) = r.unpack(_U32)
        entries = [r.unpack(_PAIR) for _ in range(n)]
        msg: Message = SampleRequest(entries)
    elif msg_type == MsgType.SAMPLE_RESP:
        worker, version = r.unpack(_WORKER_VERSION)
        occ = r.occupancy()
        dim, n = r.unpack(_PAIR)
        entries = []
        for _ in range(n):
            cid, flag = r.unpack(_ENTRY_HEAD)
            try:
                flag = ReadFlag(flag)
            except ValueError:
                raise ProtocolError(f"bad entry flag {flag}") from None
            if flag == ReadFlag.EMPTY:
                entries.append(ResponseEntry(cid, flag))
                continue
            feats = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(np.float32)
            (label,) = r.unpack(_U32)
            entries.append(ResponseEntry(cid, flag, feats, label))
        msg = SampleResponse(worker, version, occ, dim, entries)
    elif msg_type == MsgType.SIZE_BCAST:
        worker, version = r.unpack(_WORKER_VERSION)
        msg = SizeBroadcast(worker, version, r.occupancy())
    elif msg_type == MsgType.ALLREDUCE_CHUNK:
        it, rank, off, total, n = r.unpack(_ALLREDUCE_HEAD)
        msg = AllreduceChunk(it, rank, off, total, np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32))
    elif msg_type == MsgType.SHUTDOWN:
        msg = Shutdown()
    else:
        raise ProtocolError(f"unknown msg_type {msg_type}")
    r.finish()
    return msg


def parse_header(header: bytes) -> tuple[int, int, int]:
    """Validate a header; returns (msg_type, payload_len, request_id)."""
    if len(header) != HEADER.size:
        raise ProtocolError(f"short header ({len(header)} bytes)\n{hexdump(header)}")
    magic, version, msg_type, length, rid = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}\n{hexdump(header)}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}\n{hexdump(header)}")
    if msg_type not in MsgType._value2member_map_:
        raise ProtocolError(f"unknown msg_type {msg_type}\n{hexdump(header)}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload_len {length} exceeds limit\n{hexdump(header)}")
    return msg_type, length, rid


def decode_message(frame: bytes) -> tuple[int, Message]:
    """Decode one complete frame into (request_id, message)."""
    msg_type, length, rid = parse_header(bytes(frame[: HEADER.size]))
    payload = frame[HEADER.size :]
    if len(payload) != length:
        raise ProtocolError(
            f"payload_len {length} but {len(payload)} bytes follow\n{hexdump(bytes(frame))}"
        )
    try:
        return rid, decode_payload(msg_type, payload)
    except ProtocolError as exc:
        raise ProtocolError(f"{exc}\n{hexdump(bytes(frame))}") from None


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            if got == 0:
                return None
            raise TransportError(f"connection closed mid-frame ({got}/{n} bytes)")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, Message] | None:
    """Blocking read of one frame; ``None`` on clean EOF."""
    header = _recv_exact(sock, HEADER.size)
    if header is None:
        return None
    msg_type, length, rid = parse_header(header)
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise TransportError("connection closed before payload")
    try:
        return rid, decode_payload(msg_type, payload)
    except ProtocolError as exc:
        raise ProtocolError(f"{exc}\n{hexdump(header + payload)}") from None


# -- all-reduce rendezvous (root side) ------------------------------------------


class Rendezvous:
    """Collects one chunk from every rank and hands each the same mean."""

    def __init__(self, n: int, timeout: float):
        self.n = n
        self.timeout = timeout
        self._cond = threading.Condition()
        self._slots: dict[tuple[int, int], dict] = {}
        self._aborted: str | None = None

    def abort(self, reason: str):
        with self._cond:
            self._aborted = reason
            self._cond.notify_all()

    def contribute(self, iteration: int, offset: int, rank: int, data: np.ndarray) -> np.ndarray:
        key = (iteration, offset)
        with self._cond:
            slot = self._slots.setdefault(key, {"parts": {}, "result": None, "taken": 0})
            if rank in slot["parts"]:
                raise CollectiveError(iteration, f"rank {rank} contributed twice")
            slot["parts"][rank] = np.asarray(data, dtype=np.float32)
            if len(slot["parts"]) == self.n:
                slot["result"] = mean_in_rank_order([slot["parts"][r] for r in range(self.n)], iteration)
                self._cond.notify_all()
            self._cond.wait_for(
                lambda: slot["result"] is not None or self._aborted is not None, self.timeout
            )
            if slot["result"] is None:
                self._slots.pop(key, None)
                raise CollectiveError(iteration, self._aborted or "timed out waiting for peers")
            slot["taken"] += 1
            if slot["taken"] == self.n:
                del self._slots[key]
            return slot["result"]


def mean_in_rank_order(parts: Sequence[np.ndarray], iteration: int = 0) -> np.ndarray:
    sizes = {p.shape for p in parts}
    if len(sizes) != 1:
        raise CollectiveError(iteration, f"contributions have mismatched shapes {sorted(sizes)}")
    acc = np.array(parts[0], dtype=np.float32, copy=True)
    for p in parts[1:]:
        acc += p
    acc /= np.float32(len(parts))
    return acc


# -- server ---------------------------------------------------------------------


class _Conn:
    def __init__(self, sock: socket.socket, peer: str):
        self.sock = sock
        self.peer = peer
        self.send_lock = threading.Lock()

    def send(self, frame: bytes):
        with self.send_lock:
            self.sock.sendall(frame)


class Server:
    """Listener answering sample reads, size broadcasts and all-reduce chunks.

    Sample reads run on a bounded pool concurrently with local buffer writes;
    all-reduce chunks block on the rendezvous and get their own threads.
    """

    def __init__(
        self,
        address: str,
        buffer: LocalRehearsalBuffer | None = None,
        worker_id: int = 0,
        rendezvous: Rendezvous | None = None,
        on_size: Callable[[SizeBroadcast], None] | None = None,
        max_workers: int = 8,
    ):
        self.address = address
        self.buffer = buffer
        self.worker_id = worker_id
        self.rendezvous = rendezvous
        self.on_size = on_size
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="drbuf-serve")
        self._sock: socket.socket | None = None
        self._conns: set[_Conn] = set()
        self._threads: list[threading.Thread] = []
        self._reducers: list[threading.Thread] = []
        self._lock = threading.Lock()
        self._stopping = threading.Event()
        self.stopped = threading.Event()
        self.requests_served = Counter()
        self.errors = 0

    @property
    def bound_address(self) -> str:
        host, port = self._sock.getsockname()[:2]
        return f"{host}:{port}"

    def start(self) -> "Server":
        host, port = parse_address(self.address)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            raise TransportError(f"cannot bind {self.address}: {exc}") from exc
        sock.listen(128)
        sock.settimeout(0.2)
        self._sock = sock
        t = threading.Thread(target=self._accept_loop, name="drbuf-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                sock, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock, f"{addr[0]}:{addr[1]}")
            with self._lock:
                self._conns.add(conn)
            t = threading.Thread(target=self._conn_loop, args=(conn,), daemon=True)
            t.start()

    def _conn_loop(self, conn: _Conn):
        try:
            while not self._stopping.is_set():
                frame = read_frame(conn.sock)
                if frame is None:
                    break
                rid, msg = frame
                self._dispatch(conn, rid, msg)
        except ProtocolError as exc:
            self.errors += 1
            log.error("protocol error from %s: %s", conn.peer, exc)
        except (OSError, TransportError) as exc:
            if not self._stopping.is_set():
                log.debug("connection %s dropped: %s", conn.peer, exc)
        finally:
            # while stopping, stop() closes connections once queued replies are out
            if not self._stopping.is_set():
                with self._lock:
                    self._conns.discard(conn)
                try:
                    conn.sock.close()
                except OSError:
                    pass

    def _dispatch(self, conn: _Conn, rid: int, msg: Message):
        self.requests_served[msg.msg_type.name] += 1
        if isinstance(msg, SampleRequest):
            try:
                self._pool.submit(self._handle_sample, conn, rid, msg)
            except RuntimeError:
                pass  # pool already shut down
        elif isinstance(msg, AllreduceChunk):
            t = threading.Thread(target=self._handle_allreduce, args=(conn, rid, msg), daemon=True)
            with self._lock:
                self._reducers = [r for r in self._reducers if r.is_alive()] + [t]
            t.start()
        elif isinstance(msg, SizeBroadcast):
            if self.on_size is not None:
                self.on_size(msg)
        elif isinstance(msg, Shutdown):
            self._safe_send(conn, encode_message(Shutdown(), rid))
            threading.Thread(target=self.stop, daemon=True).start()
        else:
            raise ProtocolError(f"unexpected {msg.msg_type.name} sent to a server")

    def _safe_send(self, conn: _Conn, frame: bytes):
        try:
            conn.send(frame)
        except OSError as exc:
            log.debug("reply to %s failed: %s", conn.peer, exc)

    def _handle_sample(self, conn: _Conn, rid: int, req: SampleRequest):
        reply = self.answer(req)
        self._safe_send(conn, encode_message(reply, rid))

    def answer(self, req: SampleRequest) -> SampleResponse:
        if self.buffer is None:
            raise ProtocolError("server has no buffer to sample from")
        reads = self.buffer.read_slots(req.entries)
        snap = self.buffer.size_snapshot()
        return SampleResponse(
            worker=self.worker_id,
            version=snap.version,
            occupancy=snap.occupancy,
            feature_dim=self.buffer.feature_dim,
            entries=[ResponseEntry.from_read(r) for r in reads],
        )

    def _handle_allreduce(self, conn: _Conn, rid: int, chunk: AllreduceChunk):
        if self.rendezvous is None:
            log.error("allreduce chunk from %s but this worker is not the root", conn.peer)
            return
        try:
            mean = self.rendezvous.contribute(chunk.iteration, chunk.offset, chunk.rank, chunk.data)
        except CollectiveError as exc:
            log.error("%s", exc)
            return
        reply = AllreduceChunk(chunk.iteration, self.worker_id, chunk.offset, chunk.total_len, mean)
        self._safe_send(conn, encode_message(reply, rid))

    def stop(self, timeout: float = 5.0):
        """Stop accepting, drain in-flight replies, close connections."""
        with self._lock:
            if self._stopping.is_set():
                already = True
            else:
                already = False
                self._stopping.set()
        if already:
            self.stopped.wait(timeout)
            return
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._pool.shutdown(wait=True)
        with self._lock:
            reducers = list(self._reducers)
        # a peer's last barrier reply may still be on its way out
        for t in reducers:
            t.join(timeout)
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.sock.close()
        for t in self._threads:
            t.join(timeout)
        self.stopped.set()


# -- client ---------------------------------------------------------------------


class PeerClient:
    """One multiplexed connection to a peer's server."""

    def __init__(self, address: str, timeout: float = 10.0, retries: int = 2):
        self.address = address
        self.timeout = timeout
        self.retries = retries
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._pending: dict[int, Future] = {}
        self._ids = itertools.count(1)
        self.frames_sent = Counter()

    def _connect(self) -> socket.socket:
        with self._lock:
            if self._sock is not None:
                return self._sock
            host, port = parse_address(self.address)
            last: Exception | None = None
            for attempt in range(self.retries + 1):
                try:
                    sock = socket.create_connection((host, port), timeout=self.timeout)
                    break
                except OSError as exc:
                    last = exc
                    threading.Event().wait(0.05 * 2**attempt)
            else:
                raise TransportError(f"cannot reach {self.address}: {last}")
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
            threading.Thread(target=self._read_loop, args=(sock,), daemon=True).start()
            return sock

    def _read_loop(self, sock: socket.socket):
        error: Exception = TransportError(f"connection to {self.address} closed")
        try:
            while True:
                frame = read_frame(sock)
                if frame is None:
                    break
                rid, msg = frame
                with self._lock:
                    fut = self._pending.pop(rid, None)
                if fut is None:
                    log.warning("unmatched reply %d from %s", rid, self.address)
                elif not fut.done():
                    fut.set_result(msg)
        except ProtocolError as exc:
            error = exc
            log.error("protocol error from %s: %s", self.address, exc)
        except OSError as exc:
            error = TransportError(f"connection to {self.address} lost: {exc}")
        with self._lock:
            if self._sock is sock:
                self._sock = None
            pending, self._pending = self._pending, {}
        try:
            sock.close()
        except OSError:
            pass
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(error)

    def request(self, msg: Message) -> Future:
        """Send ``msg`` and return a future for the reply; never raises."""
        fut: Future = Future()
        rid = next(self._ids)
        try:
            sock = self._connect()
            with self._lock:
                self._pending[rid] = fut
            frame = encode_message(msg, rid)
            with self._send_lock:
                sock.sendall(frame)
            self.frames_sent[msg.msg_type.name] += 1
        except (OSError, TransportError) as exc:
            with self._lock:
                self._pending.pop(rid, None)
            if not fut.done():
                fut.set_exception(exc if isinstance(exc, TransportError) else TransportError(str(exc)))
        return fut

    def send_oneway(self, msg: Message):
        sock = self._connect()
        frame = encode_message(msg, 0)
        try:
            with self._send_lock:
                sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send to {self.address} failed: {exc}") from exc
        self.frames_sent[msg.msg_type.name] += 1

    def close(self):
        with self._lock:
            sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


class Transport:
    """Client side for one worker: lazily connected clients for every peer."""

    def __init__(self, rank: int, roster: Sequence[str], timeout: float = 10.0, retries: int = 2):
        self.rank = rank
        self.roster = list(roster)
        self.timeout = timeout
        self.retries = retries
        self._clients: dict[int, PeerClient] = {}
        self._lock = threading.Lock()

    @property
    def n_workers(self) -> int:
        return len(self.roster)

    def client(self, peer: int) -> PeerClient:
        if not 0 <= peer < len(self.roster):
            raise ValueError(f"peer {peer} not in roster of {len(self.roster)}")
        with self._lock:
            c = self._clients.get(peer)
            if c is None:
                c = self._clients[peer] = PeerClient(self.roster[peer], self.timeout, self.retries)
            return c

    def send_request(self, peer: int, req: SampleRequest) -> Future:
        return self.client(peer).request(req)

    def broadcast_sizes(self, snapshot: SizeSnapshot):
        msg = SizeBroadcast(self.rank, snapshot.version, snapshot.occupancy)
        for peer in range(len(self.roster)):
            if peer != self.rank:
                try:
                    self.client(peer).send_oneway(msg)
                except TransportError as exc:
                    log.warning("size broadcast to worker %d failed: %s", peer, exc)

    def shutdown_peer(self, peer: int, timeout: float = 5.0) -> bool:
        try:
            self.client(peer).request(Shutdown()).result(timeout)
            return True
        except (TransportError, FutureTimeout):
            return False

    def frames_sent(self, msg_type: MsgType | None = None) -> int:
        with self._lock:
            clients = list(self._clients.values())
        if msg_type is None:
            return sum(sum(c.frames_sent.values()) for c in clients)
        return sum(c.frames_sent[msg_type.name] for c in clients)

    def close(self):
        with self._lock:
            clients = list(self._clients.values())
        for c in clients:
            c.close()


class Collective:
    """Flat-tree all-reduce: rank 0 sums contributions in rank order and replies.

    Every rank ends up with the very same float32 bytes.
    """

    def __init__(self, rank: int, n: int, transport: Transport | None, rendezvous: Rendezvous | None,
                 timeout: float = 120.0):
        if n > 1 and rank == 0 and rendezvous is None:
            raise ValueError("rank 0 needs the rendezvous its server feeds")
        self.rank = rank
        self.n = n
        self.transport = transport
        self.rendezvous = rendezvous
        self.timeout = timeout
        self.iteration = 0

    def allreduce(self, vector: np.ndarray) -> np.ndarray:
        it = self.iteration
        self.iteration += 1
        vec = np.ascontiguousarray(vector, dtype=np.float32).ravel()
        if self.n == 1:
            return vec.copy()
        chunks = range(0, max(vec.size, 1), ALLREDUCE_CHUNK_FLOATS)
        out = np.empty_like(vec)
        if self.rank == 0:
            for off in chunks:
                part = vec[off : off + ALLREDUCE_CHUNK_FLOATS]
                out[off : off + part.size] = self.rendezvous.contribute(it, off, 0, part)
            return out
        client = self.transport.client(0)
        futures = [
            (off, client.request(AllreduceChunk(it, self.rank, off, vec.size, vec[off : off + ALLREDUCE_CHUNK_FLOATS])))
            for off in chunks
        ]
        for off, fut in futures:
            try:
                reply = fut.result(self.timeout)
            except FutureTimeout:
                raise CollectiveError(it, "timed out waiting for root") from None
            except (TransportError, ProtocolError) as exc:
                raise CollectiveError(it, str(exc)) from exc
            if reply.data.size != min(ALLREDUCE_CHUNK_FLOATS, vec.size - off):
                raise CollectiveError(it, "root replied with a chunk of the wrong length")
            out[off : off + reply.data.size] = reply.data
        return out

    def barrier(self):
        self.allreduce(np.zeros(1, np.float32))
