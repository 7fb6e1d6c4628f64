"""Length-prefixed request/response transport over TCP.

Frame layout (little-endian)::

    u32 length      byte length of everything after this field
    u16 msg_type
    u64 request_id
    ... body

Replies reuse the request's ``msg_type`` and ``request_id``; failures come
back as ``ERROR`` frames whose body is a UTF-8 message.  Message types:
PULL=1, PUSH=2, REGISTER=3, SAMPLE=4, ALLREDUCE_SEG=5, CONTROL=6.
"""

from __future__ import annotations

import enum
import itertools
import logging
import socket
import struct
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<IHQ")
PREFIX = 4
MAX_FRAME = 1 << 31
DEFAULT_TIMEOUT = 30.0


class MsgType(enum.IntEnum):
    PULL = 1
    PUSH = 2
    REGISTER = 3
    SAMPLE = 4
    ALLREDUCE_SEG = 5
    CONTROL = 6
    ERROR = 0xFFFF


class TransportError(RuntimeError):
    """Connection failure, peer closed, or timeout."""


class RemoteError(RuntimeError):
    """The peer handled the request and answered with an error."""


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: int
    request_id: int
    body: bytes


def encode_frame(msg_type: int, request_id: int, body: bytes = b"") -> bytes:
    return HEADER.pack(10 + len(body), msg_type, request_id) + body


def decode_frame(buf: bytes) -> tuple[Frame, int]:
    """Decode one frame from the start of ``buf``; returns the frame and bytes consumed."""
    if len(buf) < HEADER.size:
        raise FrameError("incomplete header")
    length, msg_type, request_id = HEADER.unpack_from(buf)
    if length < 10:
        raise FrameError(f"frame length {length} below header size")
    end = PREFIX + length
    if len(buf) < end:
        raise FrameError("incomplete body")
    return Frame(msg_type, request_id, bytes(buf[HEADER.size:end])), end


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(min(n - len(chunks), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed")
        chunks += chunk
    return bytes(chunks)


def read_frame(sock: socket.socket) -> Frame:
    head = _recv_exact(sock, HEADER.size)
    length, msg_type, request_id = HEADER.unpack(head)
    if length < 10 or length > MAX_FRAME:
        raise FrameError(f"bad frame length {length}")
    body = _recv_exact(sock, length - 10) if length > 10 else b""
    return Frame(msg_type, request_id, body)


# --- body codec -----------------------------------------------------------
# Bodies are a sequence of fields: fixed struct header + raw numpy buffers.

_ARR_DTYPES = {0: np.dtype("<i8"), 1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_ARR_CODES = {v: k for k, v in _ARR_DTYPES.items()}


def pack(*fields) -> bytes:
    """Serialize ints, floats, strings and numpy arrays, in order."""
    out = []
    for f in fields:
        if isinstance(f, np.ndarray):
            arr = np.ascontiguousarray(f)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            code = _ARR_CODES.get(np.dtype(dt))
            if code is None:
                raise TypeError(f"unsupported array dtype {arr.dtype}")
            out.append(struct.pack("<cBB", b"a", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.astype(_ARR_DTYPES[code], copy=False).tobytes())
        elif isinstance(f, bool):
            out.append(struct.pack("<cq", b"i", int(f)))
        elif isinstance(f, (int, np.integer)):
            out.append(struct.pack("<cq", b"i", int(f)))
        elif isinstance(f, (float, np.floating)):
            out.append(struct.pack("<cd", b"f", float(f)))
        elif isinstance(f, str):
            raw = f.encode()
            out.append(struct.pack("<cI", b"s", len(raw)) + raw)
        elif isinstance(f, (bytes, bytearray)):
            out.append(struct.pack("<cI", b"b", len(f)) + bytes(f))
        else:
            raise TypeError(f"cannot pack {type(f).__name__}")
    return b"".join(out)


def unpack(body: bytes) -> list:
    fields = []
    off = 0
    view = memoryview(body)
    try:
        while off < len(body):
            tag = body[off:off + 1]
            off += 1
            if tag == b"i":
                fields.append(struct.unpack_from("<q", body, off)[0])
                off += 8
            elif tag == b"f":
                fields.append(struct.unpack_from("<d", body, off)[0])
                off += 8
            elif tag in (b"s", b"b"):
                (n,) = struct.unpack_from("<I", body, off)
                off += 4
                raw = bytes(view[off:off + n])
                if len(raw) != n:
                    raise FrameError("truncated field")
                fields.append(raw.decode() if tag == b"s" else raw)
                off += n
            elif tag == b"a":
                code, ndim = struct.unpack_from("<BB", body, off)
                off += 2
                shape = struct.unpack_from(f"<{ndim}Q", body, off)
                off += 8 * ndim
                dt = _ARR_DTYPES[code]
                count = int(np.prod(shape, dtype=np.int64))
                if off + count * dt.itemsize > len(body):
                    raise FrameError("truncated array")
                fields.append(np.frombuffer(body, dtype=dt, count=count, offset=off).reshape(shape))
                off += count * dt.itemsize
            else:
                raise FrameError(f"unknown field tag {tag!r}")
    except (struct.error, KeyError) as exc:
        raise FrameError(f"malformed body: {exc}") from exc
    return fields


# --- server ---------------------------------------------------------------

Handler = Callable[[bytes, "Connection"], "bytes | Future"]


class Connection:
    _ids = itertools.count()

    def __init__(self, sock: socket.socket, peer):
        self.sock = sock
        self.peer = peer
        self.id = next(self._ids)
        self._wlock = threading.Lock()
        self.closed = False

    def send(self, data: bytes) -> None:
        with self._wlock:
            self.sock.sendall(data)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Server:
    """Accepts connections and dispatches frames to handlers by ``msg_type``.

    Handlers run on a bounded thread pool and return the reply body, or a
    :class:`Future` resolving to it (used by collectives that answer only
    once every member has arrived).
    """

    def __init__(self, handlers: dict[int, Handler], host: str = "127.0.0.1", port: int = 0,
                 max_workers: int = 8):
        self.handlers = dict(handlers)
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="rpc-handler")
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._conns: set[Connection] = set()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self.disconnect_hooks: list[Callable[[Connection], None]] = []
        self._thread = threading.Thread(target=self._accept_loop, name=f"rpc-accept-{self.port}", daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    @property
    def num_connections(self) -> int:
        with self._lock:
            return len(self._conns)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = Connection(sock, peer)
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                             name=f"rpc-conn-{conn.id}").start()

    def _read_loop(self, conn: Connection) -> None:
        try:
            while not self._stop.is_set():
                frame = read_frame(conn.sock)
                self._pool.submit(self._dispatch, conn, frame)
        except (ConnectionError, OSError, FrameError) as exc:
            if not isinstance(exc, ConnectionError) and not self._stop.is_set():
                logger.debug("closing connection %s: %s", conn.peer, exc)
        except RuntimeError:
            pass  # pool shut down
        finally:
            with self._lock:
                self._conns.discard(conn)
            conn.close()
            for hook in self.disconnect_hooks:
                hook(conn)

    def _reply(self, conn: Connection, frame: Frame, result=None, error: BaseException | None = None) -> None:
        if error is not None:
            data = encode_frame(MsgType.ERROR, frame.request_id, f"{type(error).__name__}: {error}".encode())
        else:
            data = encode_frame(frame.msg_type, frame.request_id, result or b"")
        try:
            conn.send(data)
        except OSError:
            pass

    def _dispatch(self, conn: Connection, frame: Frame) -> None:
        handler = self.handlers.get(frame.msg_type)
        if handler is None:
            self._reply(conn, frame, error=KeyError(f"unknown msg_type {frame.msg_type}"))
            return
        try:
            result = handler(frame.body, conn)
        except Exception as exc:  # handler failures go back to the caller
            self._reply(conn, frame, error=exc)
            return
        if isinstance(result, Future):
            def done(fut, conn=conn, frame=frame):
                exc = fut.exception()
                self._reply(conn, frame, fut.result() if exc is None else None, exc)
            result.add_done_callback(done)
        else:
            self._reply(conn, frame, result)

    def close(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.close()
        self._pool.shutdown(wait=False, cancel_futures=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- client ---------------------------------------------------------------


class PendingReply:
    def __init__(self, client: "Client", request_id: int, msg_type: int):
        self.client = client
        self.request_id = request_id
        self.msg_type = msg_type
        self._event = threading.Event()
        self._frame: Frame | None = None
        self._error: BaseException | None = None
        self._consumed = False

    def _resolve(self, frame: Frame | None, error: BaseException | None = None) -> None:
        self._frame, self._error = frame, error
        self._event.set()

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> bytes:
        """Block for the reply body; each handle may be awaited once."""
        if self._consumed:
            raise RuntimeError(f"reply for request {self.request_id} already consumed")
        timeout = self.client.timeout if timeout is None else timeout
        if not self._event.wait(timeout):
            self.client._forget(self.request_id)
            raise TransportError(f"request {self.request_id} timed out after {timeout}s")
        self._consumed = True
        if self._error is not None:
            raise self._error
        if self._frame.msg_type == MsgType.ERROR:
            raise RemoteError(self._frame.body.decode(errors="replace"))
        return self._frame.body


class Client:
    """One persistent connection to a server; safe for concurrent callers."""

    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT,
                 connect_timeout: float = 5.0):
        self.address = (host, port)
        self.timeout = timeout
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wlock = threading.Lock()
        self._plock = threading.Lock()
        self._pending: dict[int, PendingReply] = {}
        self._ids = itertools.count(1)
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name=f"rpc-client-{port}")
        self._reader.start()

    def _read_loop(self) -> None:
        err: BaseException = TransportError("peer closed connection")
        try:
            while True:
                frame = read_frame(self._sock)
                with self._plock:
                    pending = self._pending.pop(frame.request_id, None)
                if pending is not None:
                    pending._resolve(frame)
        except (OSError, ConnectionError, FrameError) as exc:
            if not self._closed:
                err = TransportError(f"connection to {self.address[0]}:{self.address[1]} lost: {exc}")
            else:
                err = TransportError("client closed")
        finally:
            self._closed = True
            with self._plock:
                pending, self._pending = list(self._pending.values()), {}
            for p in pending:
                p._resolve(None, err)

    def _forget(self, request_id: int) -> None:
        with self._plock:
            self._pending.pop(request_id, None)

    def call_async(self, msg_type: int, body: bytes = b"") -> PendingReply:
        if self._closed:
            raise TransportError("connection closed")
        rid = next(self._ids)
        handle = PendingReply(self, rid, msg_type)
        with self._plock:
            self._pending[rid] = handle
        try:
            with self._wlock:
                self._sock.sendall(encode_frame(msg_type, rid, body))
        except OSError as exc:
            self._forget(rid)
            raise TransportError(f"send failed: {exc}") from exc
        return handle

    def call(self, msg_type: int, body: bytes = b"", timeout: float | None = None) -> bytes:
        return self.call_async(msg_type, body).wait(timeout)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
