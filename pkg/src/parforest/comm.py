"""SPMD communicator: rank/size identity and collective operations.

Two interchangeable transports implement the same collective semantics:

* in-process — every rank is a thread inside one process sharing a
  _LocalGroup; used by tests and by anything that wants SPMD semantics
  without processes.
* socket — every rank is a separate process; ranks 1..size-1 hold one TCP
  connection to rank 0, which gathers contributions and fans results out
  (star topology). The launcher plays the role of mpirun: it binds the
  rendezvous port, hands the listening socket to rank 0, and passes rank,
  group size, and the rendezvous address to every child through the
  environment.

Wire protocol: length-prefixed frames {length u32 LE, tag u8, sequence
u32 LE, payload}. Tags: 1=hello, 2=barrier, 3=bcast, 4=allgather, 5=reduce,
6=allreduce, 7=bye. The sequence number counts collective calls per
connection and must increase strictly; a frame whose tag or sequence does
not match the collective in progress is a protocol error, so SPMD bugs
surface as diagnosable errors instead of hangs. Collective payloads are
opaque byte strings; only reduce interprets its values (integer/real
scalars and vectors, summed elementwise).

Environment variables for launched children: RF_COMM_RANK, RF_COMM_SIZE,
RF_COMM_ADDR (host:port), RF_COMM_LISTEN_FD (rank 0 only), RF_COMM_TIMEOUT.
"""

from __future__ import annotations

import os
import socket
import struct
import subprocess
import threading
import time

import numpy as np

TAG_HELLO = 1
TAG_BARRIER = 2
TAG_BCAST = 3
TAG_ALLGATHER = 4
TAG_REDUCE = 5
TAG_ALLREDUCE = 6
TAG_BYE = 7

_TAG_NAMES = {1: "hello", 2: "barrier", 3: "bcast", 4: "allgather",
              5: "reduce", 6: "allreduce", 7: "bye"}

DEFAULT_TIMEOUT = 30.0
_MAX_FRAME = 1 << 30  # sanity cap on payload length

ENV_RANK = "RF_COMM_RANK"
ENV_SIZE = "RF_COMM_SIZE"
ENV_ADDR = "RF_COMM_ADDR"
ENV_LISTEN_FD = "RF_COMM_LISTEN_FD"
ENV_TIMEOUT = "RF_COMM_TIMEOUT"

_FRAME_HDR = struct.Struct("<IBI")  # length, tag, sequence


class CommError(Exception):
    """Base class for communicator failures."""


class TransportError(CommError):
    """Connection, timeout, or process-level transport failure."""


class ProtocolError(CommError):
    """Collective discipline violated (mismatched call, bad sequence,
    use after finalize)."""


# ---------------------------------------------------------------------------
# reduce value codec (shared by both transports' wire/reference paths)

_VAL_INT = 0
_VAL_FLOAT = 1
_VAL_INT_VEC = 2
_VAL_FLOAT_VEC = 3


def encode_value(value) -> bytes:
    """Encode an integer/real scalar or 1-D vector for reduce frames."""
    if isinstance(value, (bool, np.bool_)):
        raise ProtocolError("reduce values must be numeric, got bool")
    if isinstance(value, (int, np.integer)):
        return struct.pack("<BIq", _VAL_INT, 1, int(value))
    if isinstance(value, (float, np.floating)):
        return struct.pack("<BId", _VAL_FLOAT, 1, float(value))
    arr = np.asarray(value)
    if arr.ndim != 1:
        raise ProtocolError(f"reduce vectors must be 1-D, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.int64)
        return struct.pack("<BI", _VAL_INT_VEC, len(arr)) + arr.tobytes()
    if np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
        return struct.pack("<BI", _VAL_FLOAT_VEC, len(arr)) + arr.tobytes()
    raise ProtocolError(f"unsupported reduce value dtype {arr.dtype}")


def decode_value(buf: bytes):
    if len(buf) < 5:
        raise ProtocolError("reduce value payload truncated")
    kind, count = struct.unpack_from("<BI", buf, 0)
    body = buf[5:]
    if kind == _VAL_INT:
        return struct.unpack("<q", body)[0]
    if kind == _VAL_FLOAT:
        return struct.unpack("<d", body)[0]
    if kind == _VAL_INT_VEC:
        return np.frombuffer(body, dtype="<i8", count=count).copy()
    if kind == _VAL_FLOAT_VEC:
        return np.frombuffer(body, dtype="<f8", count=count).copy()
    raise ProtocolError(f"unknown reduce value kind {kind}")


def _sum_values(values: list):
    """Elementwise sum of per-rank reduce contributions."""
    scalars = [isinstance(v, (int, float, np.integer, np.floating)) for v in values]
    if all(scalars):
        if all(isinstance(v, (int, np.integer)) for v in values):
            return int(sum(int(v) for v in values))
        return float(sum(float(v) for v in values))
    if any(scalars):
        raise ProtocolError("reduce shape mismatch: scalar and vector values mixed")
    arrs = [np.asarray(v) for v in values]
    shape = arrs[0].shape
    for a in arrs:
        if a.shape != shape:
            raise ProtocolError(f"reduce shape mismatch: {a.shape} vs {shape}")
    total = arrs[0].copy()
    for a in arrs[1:]:
        total = total + a
    return total


# ---------------------------------------------------------------------------
# common communicator surface


class Communicator:
    """One SPMD endpoint. rank and size are constant for its lifetime; every
    rank must call the collectives in the same order."""

    rank: int
    size: int

    def barrier(self) -> None:
        raise NotImplementedError

    def broadcast(self, payload: bytes | None, root: int = 0) -> bytes:
        raise NotImplementedError

    def allgather(self, payload: bytes) -> list[bytes]:
        raise NotImplementedError

    def reduce_sum(self, value, root: int = 0):
        raise NotImplementedError

    def allreduce_sum(self, value):
        raise NotImplementedError

    def root_print(self, text: str) -> None:
        """Emit a line on rank 0 only."""
        if self.rank == 0:
            print(text, flush=True)

    def finalize(self) -> None:
        raise NotImplementedError

    def _check_root(self, root: int) -> None:
        if not 0 <= root < self.size:
            raise ValueError(f"root {root} out of range [0, {self.size})")


def _check_payload(payload) -> bytes:
    if not isinstance(payload, (bytes, bytearray, memoryview)):
        raise TypeError(f"collective payloads must be byte strings, "
                        f"got {type(payload).__name__}")
    return bytes(payload)


# ---------------------------------------------------------------------------
# in-process transport


class _LocalGroup:
    """Shared synchronization state for one in-process rank group.

    A collective runs in two phases under one condition variable: ranks
    arrive and deposit contributions; the last arriver combines them and
    flips the group to the distribute phase; ranks pick up their results and
    the last one out resets for the next round. Any mismatched (tag, seq)
    arrival or timeout poisons the group so every rank raises instead of
    hanging.
    """

    def __init__(self, size: int, timeout: float):
        self.size = size
        self.timeout = timeout
        self._cond = threading.Condition()
        self._contrib: list = [None] * size
        self._present = [False] * size
        self._arrived = 0
        self._departed = 0
        self._distributing = False
        self._current: tuple[int, int] | None = None
        self._results: list | None = None
        self._generation = 0
        self._error: tuple[type, str] | None = None

    def _fail(self, exc_type, msg: str):
        self._error = (exc_type, msg)
        self._cond.notify_all()
        raise exc_type(msg)

    def _raise_poisoned(self):
        exc_type, msg = self._error
        raise exc_type(msg)

    def _wait(self, deadline: float, what: str):
        remaining = deadline - time.monotonic()
        if remaining <= 0 or not self._cond.wait(remaining):
            self._fail(TransportError,
                       f"timed out after {self.timeout:.1f}s waiting for {what}; "
                       f"a rank likely skipped or reordered a collective")

    def run(self, rank: int, tag: int, seq: int, payload, combine):
        """Execute one collective step; combine maps the contribution list to
        a per-rank result list and runs exactly once per round."""
        deadline = time.monotonic() + self.timeout
        with self._cond:
            while self._distributing and self._error is None:
                self._wait(deadline, "previous collective to drain")
            if self._error is not None:
                self._raise_poisoned()
            if self._arrived == 0:
                self._current = (tag, seq)
            elif self._current != (tag, seq):
                cur_tag, cur_seq = self._current
                self._fail(ProtocolError,
                           f"collective mismatch: rank {rank} called "
                           f"{_TAG_NAMES.get(tag, tag)} (seq {seq}) while the group "
                           f"is in {_TAG_NAMES.get(cur_tag, cur_tag)} (seq {cur_seq})")
            if self._present[rank]:
                self._fail(ProtocolError,
                           f"rank {rank} entered the same collective twice")
            self._contrib[rank] = payload
            self._present[rank] = True
            self._arrived += 1
            if self._arrived == self.size:
                try:
                    self._results = combine(list(self._contrib))
                except CommError as e:
                    self._fail(type(e), str(e))
                except Exception as e:  # combine bugs must not hang peers
                    self._fail(ProtocolError, f"collective combine failed: {e}")
                self._distributing = True
                self._departed = 0
                self._generation += 1
                self._cond.notify_all()
            else:
                gen = self._generation
                while self._generation == gen and self._error is None:
                    self._wait(deadline, f"{_TAG_NAMES.get(tag, tag)} participants")
                if self._error is not None:
                    self._raise_poisoned()
            result = self._results[rank]
            self._departed += 1
            if self._departed == self.size:
                self._contrib = [None] * self.size
                self._present = [False] * self.size
                self._arrived = 0
                self._current = None
                self._results = None
                self._distributing = False
                self._cond.notify_all()
            return result


class LocalCommunicator(Communicator):
    """In-process endpoint; all ranks of the group run as threads of one
    process and synchronize through a shared _LocalGroup."""

    def __init__(self, rank: int, group: _LocalGroup):
        self.rank = rank
        self.size = group.size
        self._group = group
        self._seq = 0
        self._finalized = False

    def _run(self, tag: int, payload, combine):
        if self._finalized:
            raise ProtocolError(f"rank {self.rank}: communicator already finalized")
        self._seq += 1
        return self._group.run(self.rank, tag, self._seq, payload, combine)

    def barrier(self) -> None:
        size = self.size
        self._run(TAG_BARRIER, None, lambda contribs: [None] * size)

    def broadcast(self, payload: bytes | None, root: int = 0) -> bytes:
        self._check_root(root)
        if self.rank == root:
            payload = _check_payload(payload)
        size = self.size
        return self._run(TAG_BCAST, payload,
                         lambda contribs: [contribs[root]] * size)

    def allgather(self, payload: bytes) -> list[bytes]:
        payload = _check_payload(payload)
        size = self.size
        return self._run(TAG_ALLGATHER, payload,
                         lambda contribs: [list(contribs) for _ in range(size)])

    def reduce_sum(self, value, root: int = 0):
        self._check_root(root)
        size = self.size

        def combine(contribs):
            total = _sum_values(contribs)
            return [total if r == root else None for r in range(size)]

        return self._run(TAG_REDUCE, value, combine)

    def allreduce_sum(self, value):
        size = self.size

        def combine(contribs):
            total = _sum_values(contribs)
            if isinstance(total, np.ndarray):
                return [total.copy() for _ in range(size)]
            return [total] * size

        return self._run(TAG_ALLREDUCE, value, combine)

    def finalize(self) -> None:
        if self._finalized:
            raise ProtocolError(f"rank {self.rank}: finalize called twice")
        size = self.size
        self._run(TAG_BYE, None, lambda contribs: [None] * size)
        self._finalized = True


def make_local_comms(size: int, timeout: float = DEFAULT_TIMEOUT) -> list[LocalCommunicator]:
    """Create one in-process communicator group of the given size."""
    if size < 1:
        raise ValueError(f"group size must be >= 1, got {size}")
    group = _LocalGroup(size, timeout)
    return [LocalCommunicator(r, group) for r in range(size)]


# ---------------------------------------------------------------------------
# socket transport

def _send_frame(sock: socket.socket, tag: int, seq: int, payload: bytes) -> None:
    try:
        sock.sendall(_FRAME_HDR.pack(len(payload), tag, seq) + payload)
    except OSError as e:
        raise TransportError(f"send failed: {e}") from None


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    got = 0
    while got < count:
        try:
            chunk = sock.recv(min(count - got, 1 << 20))
        except socket.timeout:
            raise TransportError(
                "timed out waiting for a frame; a rank likely skipped or "
                "reordered a collective, or crashed") from None
        except OSError as e:
            raise TransportError(f"receive failed: {e}") from None
        if not chunk:
            raise TransportError("connection closed by peer")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _recv_frame(sock: socket.socket) -> tuple[int, int, bytes]:
    hdr = _recv_exact(sock, _FRAME_HDR.size)
    length, tag, seq = _FRAME_HDR.unpack(hdr)
    if length > _MAX_FRAME:
        raise TransportError(f"frame length {length} exceeds the {_MAX_FRAME}-byte cap")
    return tag, seq, _recv_exact(sock, length)


def _encode_gather(parts: list[bytes]) -> bytes:
    buf = bytearray(struct.pack("<I", len(parts)))
    for p in parts:
        buf += struct.pack("<I", len(p))
        buf += p
    return bytes(buf)


def _decode_gather(buf: bytes) -> list[bytes]:
    (count,) = struct.unpack_from("<I", buf, 0)
    ofs = 4
    parts = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, ofs)
        ofs += 4
        parts.append(buf[ofs:ofs + ln])
        ofs += ln
    return parts


class SocketCommunicator(Communicator):
    """Multi-process endpoint over TCP, star topology through rank 0.

    Non-root ranks send one frame per collective to rank 0 and block on the
    reply; rank 0 gathers one frame from every peer (verifying tag and
    sequence on receipt), combines, and fans results out. A size-1 group
    needs no sockets at all.
    """

    def __init__(self, rank: int, size: int, peers: dict[int, socket.socket],
                 timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self._peers = peers  # rank 0: {rank: sock}; others: {0: sock}; size 1: {}
        self._seq = 0
        self._finalized = False
        self._expected_seq = {r: 1 for r in peers}
        for sock in peers.values():
            sock.settimeout(timeout)

    def _close_all(self):
        for sock in self._peers.values():
            try:
                sock.close()
            except OSError:
                pass

    def _recv_checked(self, from_rank: int, tag: int, seq: int) -> bytes:
        rtag, rseq, payload = _recv_frame(self._peers[from_rank])
        if rseq < self._expected_seq[from_rank]:
            self._close_all()
            raise ProtocolError(
                f"rank {from_rank}: sequence went backwards "
                f"({rseq} < {self._expected_seq[from_rank]})")
        if rtag != tag or rseq != seq:
            self._close_all()
            raise ProtocolError(
                f"collective mismatch: rank {from_rank} sent "
                f"{_TAG_NAMES.get(rtag, rtag)} (seq {rseq}) while rank {self.rank} "
                f"is in {_TAG_NAMES.get(tag, tag)} (seq {seq})")
        self._expected_seq[from_rank] = rseq + 1
        return payload

    def _run(self, tag: int, my_payload: bytes, fanout) -> bytes:
        """One collective round. fanout(contribs) -> per-rank reply payloads;
        called on rank 0 only."""
        if self._finalized:
            raise ProtocolError(f"rank {self.rank}: communicator already finalized")
        self._seq += 1
        seq = self._seq
        if self.size == 1:
            return fanout([my_payload])[0]
        if self.rank == 0:
            contribs: list[bytes | None] = [None] * self.size
            contribs[0] = my_payload
            for r in range(1, self.size):
                contribs[r] = self._recv_checked(r, tag, seq)
            replies = fanout(contribs)
            for r in range(1, self.size):
                _send_frame(self._peers[r], tag, seq, replies[r])
            return replies[0]
        sock = self._peers[0]
        _send_frame(sock, tag, seq, my_payload)
        rtag, rseq, payload = _recv_frame(sock)
        if rtag != tag or rseq != seq:
            self._close_all()
            raise ProtocolError(
                f"rank {self.rank}: reply carries {_TAG_NAMES.get(rtag, rtag)} "
                f"(seq {rseq}), expected {_TAG_NAMES.get(tag, tag)} (seq {seq})")
        return payload

    def barrier(self) -> None:
        self._run(TAG_BARRIER, b"", lambda contribs: [b""] * self.size)

    def broadcast(self, payload: bytes | None, root: int = 0) -> bytes:
        self._check_root(root)
        mine = _check_payload(payload) if self.rank == root else b""
        return self._run(TAG_BCAST, mine,
                         lambda contribs: [contribs[root]] * self.size)

    def allgather(self, payload: bytes) -> list[bytes]:
        payload = _check_payload(payload)
        reply = self._run(TAG_ALLGATHER, payload,
                          lambda contribs: [_encode_gather(contribs)] * self.size)
        return _decode_gather(reply)

    def reduce_sum(self, value, root: int = 0):
        self._check_root(root)

        def fanout(contribs):
            total = encode_value(_sum_values([decode_value(c) for c in contribs]))
            return [total if r == root else b"" for r in range(self.size)]

        reply = self._run(TAG_REDUCE, encode_value(value), fanout)
        return decode_value(reply) if self.rank == root else None

    def allreduce_sum(self, value):
        def fanout(contribs):
            total = encode_value(_sum_values([decode_value(c) for c in contribs]))
            return [total] * self.size

        return decode_value(self._run(TAG_ALLREDUCE, encode_value(value), fanout))

    def finalize(self) -> None:
        if self._finalized:
            raise ProtocolError(f"rank {self.rank}: finalize called twice")
        try:
            self._run(TAG_BYE, b"", lambda contribs: [b""] * self.size)
        finally:
            self._finalized = True
            self._close_all()


def connect_from_env(env=os.environ) -> SocketCommunicator:
    """Build this process's communicator endpoint from the launcher's
    environment. Without launcher variables, returns a solo (size-1) group.
    """
    if ENV_RANK not in env:
        return SocketCommunicator(0, 1, {})
    rank = int(env[ENV_RANK])
    size = int(env[ENV_SIZE])
    timeout = float(env.get(ENV_TIMEOUT, DEFAULT_TIMEOUT))
    if size == 1:
        return SocketCommunicator(0, 1, {}, timeout)
    if rank == 0:
        fd = int(env[ENV_LISTEN_FD])
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM, fileno=fd)
        listener.settimeout(timeout)
        peers: dict[int, socket.socket] = {}
        try:
            for _ in range(size - 1):
                try:
                    conn, _addr = listener.accept()
                except socket.timeout:
                    raise TransportError(
                        f"rendezvous timed out: {len(peers)} of {size - 1} "
                        f"peers connected within {timeout:.1f}s") from None
                conn.settimeout(timeout)
                tag, seq, payload = _recv_frame(conn)
                if tag != TAG_HELLO or seq != 0 or len(payload) != 4:
                    raise ProtocolError("malformed hello frame during rendezvous")
                (peer_rank,) = struct.unpack("<I", payload)
                if not 1 <= peer_rank < size or peer_rank in peers:
                    raise ProtocolError(f"hello from invalid or duplicate rank {peer_rank}")
                peers[peer_rank] = conn
        finally:
            listener.close()
        return SocketCommunicator(0, size, peers, timeout)
    host, port = env[ENV_ADDR].rsplit(":", 1)
    deadline = time.monotonic() + timeout
    last_err: Exception | None = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
            break
        except OSError as e:
            last_err = e
            time.sleep(0.05)
    else:
        raise TransportError(f"rank {rank}: rendezvous connect failed: {last_err}")
    sock.settimeout(timeout)
    _send_frame(sock, TAG_HELLO, 0, struct.pack("<I", rank))
    return SocketCommunicator(rank, size, {0: sock}, timeout)


def launch(n: int, argv: list[str], timeout: float = DEFAULT_TIMEOUT,
           wait_timeout: float | None = None) -> list[int]:
    """Spawn an n-rank process group running argv; returns per-rank exit
    codes.

    The launcher binds the rendezvous listener on an ephemeral local port,
    hands the listening socket to rank 0 (fd inheritance), and passes each
    child its rank, the group size, and the rendezvous address through the
    environment. A nonzero code at index r means rank r failed.
    """
    if n < 1:
        raise ValueError(f"rank count must be >= 1, got {n}")
    if not argv:
        raise ValueError("launch needs a program to run")
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    procs: list[subprocess.Popen] = []
    try:
        try:
            listener.bind(("127.0.0.1", 0))
            listener.listen(n)
            host, port = listener.getsockname()
            fd = listener.fileno()
            for rank in range(n):
                env = dict(os.environ)
                env[ENV_RANK] = str(rank)
                env[ENV_SIZE] = str(n)
                env[ENV_ADDR] = f"{host}:{port}"
                env[ENV_TIMEOUT] = str(timeout)
                pass_fds: tuple[int, ...] = ()
                if rank == 0 and n > 1:
                    env[ENV_LISTEN_FD] = str(fd)
                    pass_fds = (fd,)
                try:
                    procs.append(subprocess.Popen(argv, env=env, pass_fds=pass_fds))
                except OSError as e:
                    raise TransportError(f"failed to spawn rank {rank}: {e}") from None
        finally:
            listener.close()

        codes: list[int] = []
        deadline = time.monotonic() + wait_timeout if wait_timeout is not None else None
        for rank, proc in enumerate(procs):
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                codes.append(proc.wait(remaining))
            except subprocess.TimeoutExpired:
                raise TransportError(
                    f"rank {rank} did not exit within {wait_timeout:.1f}s") from None
        return codes
    except BaseException:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
        raise
