"""Wire frames and the transports that carry them.

Frame layout (little-endian)::

    magic "FSVD" | version u16 | session_id u64 | step u16 | msg_type u16 |
    payload_len u64 | payload

Two transports share one :class:`Endpoint` interface: an in-memory network of
FIFO queues (one per directed pair) and TCP, where every role listens on its
own address and peers connect to it. :class:`ShapedEndpoint` adds a fluid
bandwidth/latency model on top of either.
"""
from __future__ import annotations

import enum
import logging
import queue
import socket
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass

from .errors import Disconnected, MalformedFrame, TransportTimeout

log = logging.getLogger(__name__)

MAGIC = b"FSVD"
VERSION = 1
HEADER = struct.Struct("<4sHQHHQ")
HEADER_SIZE = HEADER.size  # 26 bytes


class MsgType(enum.IntEnum):
    SEED_P = 1
    STRIP_Q = 2
    PAIR_SEEDS = 3
    MASKED_BATCH = 4
    MASKED_QIR = 5
    RESULT_U_SIGMA = 6
    MASKED_VIR = 7
    ABORT = 8
    MASKED_LABEL = 9
    MASKED_WEIGHTS = 10


@dataclass(frozen=True)
class Frame:
    session_id: int
    step: int
    msg_type: MsgType
    payload: bytes = b""
    version: int = VERSION

    def encode(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.session_id, self.step,
                           int(self.msg_type), len(self.payload)) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        header = cls.decode_header(data[:HEADER_SIZE])
        payload_len = header[-1]
        if len(data) != HEADER_SIZE + payload_len:
            raise MalformedFrame(f"payload_len {payload_len} but {len(data) - HEADER_SIZE} bytes follow")
        version, session_id, step, msg_type, _ = header
        return cls(session_id, step, msg_type, bytes(data[HEADER_SIZE:]), version)

    @staticmethod
    def decode_header(raw: bytes) -> tuple[int, int, int, MsgType, int]:
        if len(raw) < HEADER_SIZE:
            raise MalformedFrame(f"short header: {len(raw)} bytes")
        magic, version, session_id, step, msg_type, payload_len = HEADER.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise MalformedFrame(f"bad magic {magic!r}")
        if version != VERSION:
            raise MalformedFrame(f"unsupported version {version}")
        try:
            kind = MsgType(msg_type)
        except ValueError:
            raise MalformedFrame(f"unknown msg_type {msg_type}") from None
        return version, session_id, step, kind, payload_len

    @property
    def size(self) -> int:
        return HEADER_SIZE + len(self.payload)


class Endpoint:
    """A named role's view of the network."""

    def __init__(self, name: str):
        self.name = name
        self.bytes_sent: dict[str, int] = defaultdict(int)
        self.bytes_received: dict[str, int] = defaultdict(int)

    def send(self, dest: str, frame: Frame) -> None:
        data = frame.encode()
        self._send_bytes(dest, data)
        self.bytes_sent[dest] += len(data)

    def recv(self, src: str, timeout: float | None = 60.0) -> Frame:
        data = self._recv_bytes(src, timeout)
        self.bytes_received[src] += len(data)
        return Frame.decode(data)

    def total_sent(self) -> int:
        return sum(self.bytes_sent.values())

    def close(self) -> None:
        pass

    def _send_bytes(self, dest: str, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self, src: str, timeout: float | None) -> bytes:
        raise NotImplementedError


class InMemoryNetwork:
    """FIFO queue per directed (src, dst) pair."""

    def __init__(self):
        self._queues: dict[tuple[str, str], queue.Queue] = defaultdict(queue.Queue)
        self._lock = threading.Lock()

    def channel(self, src: str, dst: str) -> queue.Queue:
        with self._lock:
            return self._queues[(src, dst)]

    def endpoint(self, name: str) -> "MemoryEndpoint":
        return MemoryEndpoint(name, self)


class MemoryEndpoint(Endpoint):
    def __init__(self, name: str, net: InMemoryNetwork):
        super().__init__(name)
        self.net = net

    def _send_bytes(self, dest, data):
        self.net.channel(self.name, dest).put(data)

    def _recv_bytes(self, src, timeout):
        try:
            return self.net.channel(src, self.name).get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"{self.name}: nothing from {src} within {timeout}s") from None


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise Disconnected("peer closed the connection")
        got += k
    return bytes(buf)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class TcpEndpoint(Endpoint):
    """Listens on ``listen``; connects lazily to ``peers[name]`` when sending.

    A connection starts with a hello (u16 length + sender name) and then
    carries whole frames in one direction.
    """

    def __init__(self, name: str, listen: tuple[str, int], peers: dict[str, tuple[str, int]],
                 connect_timeout: float = 30.0):
        super().__init__(name)
        self.peers = dict(peers)
        self.connect_timeout = connect_timeout
        self._inbox: dict[str, queue.Queue] = defaultdict(queue.Queue)
        self._inbox_lock = threading.Lock()
        self._out: dict[str, socket.socket] = {}
        self._out_lock = threading.Lock()
        self._closed = threading.Event()
        self._server = socket.create_server(listen, reuse_port=False)
        self._server.settimeout(0.2)
        self.address = self._server.getsockname()[:2]
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        self._readers: list[threading.Thread] = []

    def _queue(self, src: str) -> queue.Queue:
        with self._inbox_lock:
            return self._inbox[src]

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            t.start()
            self._readers.append(t)

    def _reader(self, conn: socket.socket):
        conn.settimeout(None)
        try:
            (nlen,) = struct.unpack("<H", _recv_exact(conn, 2))
            src = _recv_exact(conn, nlen).decode("utf-8")
        except (Disconnected, OSError):
            conn.close()
            return
        q = self._queue(src)
        try:
            while True:
                head = _recv_exact(conn, HEADER_SIZE)
                try:
                    payload_len = Frame.decode_header(head)[-1]
                except MalformedFrame as exc:
                    q.put(exc)
                    return
                q.put(head + _recv_exact(conn, payload_len))
        except (Disconnected, OSError):
            q.put(Disconnected(f"{src} disconnected"))
        finally:
            conn.close()

    def _connection(self, dest: str) -> socket.socket:
        with self._out_lock:
            sock = self._out.get(dest)
            if sock is not None:
                return sock
            if dest not in self.peers:
                raise Disconnected(f"{self.name}: no address for {dest}")
            deadline = time.monotonic() + self.connect_timeout
            while True:
                try:
                    sock = socket.create_connection(self.peers[dest], timeout=5.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise Disconnected(f"{self.name}: cannot reach {dest}") from None
                    time.sleep(0.05)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            name = self.name.encode("utf-8")
            sock.sendall(struct.pack("<H", len(name)) + name)
            self._out[dest] = sock
            return sock

    def _send_bytes(self, dest, data):
        sock = self._connection(dest)
        try:
            sock.sendall(data)
        except OSError as exc:
            raise Disconnected(f"{self.name}: send to {dest} failed: {exc}") from exc

    def _recv_bytes(self, src, timeout):
        try:
            item = self._queue(src).get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"{self.name}: nothing from {src} within {timeout}s") from None
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._closed.set()
        with self._out_lock:
            for sock in self._out.values():
                try:
                    sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                sock.close()
            self._out.clear()
        self._server.close()


@dataclass(frozen=True)
class ShaperConfig:
    bandwidth_bytes_per_sec: float | None = None
    rtt_ms: float | None = None

    def __post_init__(self):
        for v in (self.bandwidth_bytes_per_sec, self.rtt_ms):
            if v is not None and v < 0:
                raise ValueError("shaper parameters must be nonnegative")

    def delay(self, payload_len: int) -> float:
        d = (self.rtt_ms or 0.0) / 2000.0
        bw = self.bandwidth_bytes_per_sec
        if bw:
            d += payload_len / bw
        return d


class ShapedEndpoint(Endpoint):
    """Delays each outgoing frame by ``rtt/2 + payload_len/bandwidth``."""

    def __init__(self, inner: Endpoint, cfg: ShaperConfig):
        super().__init__(inner.name)
        self.inner = inner
        self.cfg = cfg
        self.bytes_sent = inner.bytes_sent
        self.bytes_received = inner.bytes_received

    def send(self, dest, frame):
        delay = self.cfg.delay(len(frame.payload))
        if delay > 0:
            time.sleep(delay)
        self.inner.send(dest, frame)

    def recv(self, src, timeout=60.0):
        return self.inner.recv(src, timeout)

    def close(self):
        self.inner.close()


def shape(endpoint: Endpoint, cfg: ShaperConfig) -> Endpoint:
    if cfg.bandwidth_bytes_per_sec is None and not cfg.rtt_ms:
        return endpoint
    return ShapedEndpoint(endpoint, cfg)
