"""Serve a model as a remote oracle over newline-delimited JSON on TCP.

Each request is one UTF-8 JSON object per line::

    {"id": 7, "op": "label", "x": [0.25, 0.5, ...]}

and each response echoes the id with exactly one of ``label``, ``logits``
or ``error``. Floats are written with ``repr`` so they survive the round
trip bit for bit. Responses may be consumed out of order; the client
matches them by id, which lets a Blind Walk pipeline a whole batch of
probes on one connection.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import socket
import socketserver
import threading
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .models import Model, forward
from .oracles import BudgetExhausted, LogitOracle, OracleError

logger = logging.getLogger(__name__)

OPS = ("label", "logits")
MODES = ("label_only", "logits")
ERR_MALFORMED = "malformed_request"
ERR_DIMENSION = "bad_dimension"
ERR_LABEL_ONLY = "label_only"
ERR_BUDGET = "budget_exhausted"
ERRORS = (ERR_MALFORMED, ERR_DIMENSION, ERR_LABEL_ONLY, ERR_BUDGET)


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class WireRequest:
    id: int
    op: str
    x: tuple

    def __post_init__(self):
        _check_id(self.id)
        if self.op not in OPS:
            raise ProtocolError(f"unknown op {self.op!r}")
        object.__setattr__(self, "x", _float_tuple(self.x))


@dataclass(frozen=True)
class WireResponse:
    id: Optional[int]
    label: Optional[int] = None
    logits: Optional[tuple] = None
    error: Optional[str] = None

    def __post_init__(self):
        given = [f for f in ("label", "logits", "error") if getattr(self, f) is not None]
        if len(given) != 1:
            raise ProtocolError("a response carries exactly one of label, logits, error")
        if self.id is None and self.error is None:
            raise ProtocolError("only error responses may omit the id")
        if self.id is not None:
            _check_id(self.id)
        if self.label is not None and (isinstance(self.label, bool) or not isinstance(self.label, int)):
            raise ProtocolError("label must be an integer")
        if self.logits is not None:
            object.__setattr__(self, "logits", _float_tuple(self.logits))
        if self.error is not None and not isinstance(self.error, str):
            raise ProtocolError("error must be a string")


def _check_id(i):
    if isinstance(i, bool) or not isinstance(i, int) or i < 0:
        raise ProtocolError("id must be an unsigned integer")


def _float_tuple(values) -> tuple:
    if isinstance(values, np.ndarray):
        arr = np.asarray(values, dtype=np.float64).ravel()
    else:
        values = list(values)
        if not set(map(type, values)) <= {int, float}:
            raise ProtocolError("vector entries must be numbers")
        arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ProtocolError("vector entries must be finite")
    return tuple(arr.tolist())


def _dump(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def _load(line) -> dict:
    if isinstance(line, (bytes, bytearray)):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("not UTF-8") from exc
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("message must be a JSON object")
    return obj


def encode_request(req: WireRequest) -> bytes:
    return _dump({"id": req.id, "op": req.op, "x": list(req.x)})


def decode_request(line) -> WireRequest:
    obj = _load(line)
    if set(obj) != {"id", "op", "x"} or not isinstance(obj["x"], list):
        raise ProtocolError("request needs exactly the fields id, op, x")
    return WireRequest(obj["id"], obj["op"], obj["x"])


def encode_response(resp: WireResponse) -> bytes:
    obj = {"id": resp.id}
    if resp.label is not None:
        obj["label"] = resp.label
    elif resp.logits is not None:
        obj["logits"] = list(resp.logits)
    else:
        obj["error"] = resp.error
    return _dump(obj)


def decode_response(line) -> WireResponse:
    obj = _load(line)
    keys = set(obj) - {"id"}
    if "id" not in obj or len(keys) != 1 or not keys <= {"label", "logits", "error"}:
        raise ProtocolError("response needs id and exactly one of label, logits, error")
    key = keys.pop()
    if key == "logits" and not isinstance(obj[key], list):
        raise ProtocolError("logits must be an array")
    return WireResponse(obj["id"], **{key: obj[key]})


# ------------------------------------------------------------------ server

@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 0
    mode: str = "label_only"
    max_queries_per_connection: Optional[int] = None
    max_concurrent_connections: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_queries_per_connection is not None and self.max_queries_per_connection < 0:
            raise ValueError("max_queries_per_connection must be non-negative")
        if self.max_concurrent_connections < 1:
            raise ValueError("max_concurrent_connections must be positive")


class _Handler(socketserver.StreamRequestHandler):
    disable_nagle_algorithm = True

    def handle(self):
        owner: OracleServer = self.server.owner
        with owner._slots:
            conn = owner._open_connection()
            buf = b""
            while True:
                try:
                    chunk = self.rfile.read1(1 << 20)
                except OSError:
                    return
                if not chunk:
                    return
                *lines, buf = (buf + chunk).split(b"\n")
                if not lines:
                    continue
                out, close = owner._answer_lines(conn, lines)
                try:
                    self.wfile.write(b"".join(encode_response(r) for r in out))
                except OSError:
                    return
                if close:
                    return


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


@dataclass
class OracleServer:
    """Handle for a running server. Use as a context manager or call :meth:`close`."""

    model: Model
    config: ServerConfig
    _tcp: Optional[_TCPServer] = None
    _thread: Optional[threading.Thread] = None
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _counts: list = field(default_factory=list)

    def __post_init__(self):
        self._slots = threading.BoundedSemaphore(self.config.max_concurrent_connections)

    @property
    def address(self) -> tuple:
        return self._tcp.server_address[:2]

    @property
    def connection_counts(self) -> list:
        with self._lock:
            return list(self._counts)

    @property
    def total_queries(self) -> int:
        with self._lock:
            return sum(self._counts)

    def _open_connection(self) -> int:
        with self._lock:
            self._counts.append(0)
            return len(self._counts) - 1

    def _check(self, conn: int, raw: bytes):
        """Validate one line; returns ``(request, None)`` or ``(None, error response)``."""
        try:
            req = decode_request(raw)
        except ProtocolError:
            rid = None
            try:
                obj = _load(raw)
                if isinstance(obj.get("id"), int) and not isinstance(obj["id"], bool) and obj["id"] >= 0:
                    rid = obj["id"]
            except ProtocolError:
                pass
            return None, WireResponse(rid, error=ERR_MALFORMED)
        if len(req.x) != self.model.arch.input_dim:
            return None, WireResponse(req.id, error=ERR_DIMENSION)
        if req.op == "logits" and self.config.mode == "label_only":
            return None, WireResponse(req.id, error=ERR_LABEL_ONLY)
        return req, None

    def _answer_lines(self, conn: int, lines: Sequence[bytes]):
        """Answer lines in order; the model runs once over all admitted requests.

        Returns the responses and whether the connection must close (budget hit).
        """
        out, admitted = [], []
        cap = self.config.max_queries_per_connection
        close = False
        for raw in lines:
            req, err = self._check(conn, raw)
            if err is not None:
                out.append(err)
                continue
            with self._lock:
                if cap is not None and self._counts[conn] >= cap:
                    close = True
                else:
                    self._counts[conn] += 1
            if close:
                out.append(WireResponse(req.id, error=ERR_BUDGET))
                break
            admitted.append(len(out))
            out.append(req)
        if admitted:
            Z = forward(self.model, np.array([out[i].x for i in admitted]))
            for i, z in zip(admitted, Z):
                req = out[i]
                out[i] = (WireResponse(req.id, label=int(np.argmax(z))) if req.op == "label"
                          else WireResponse(req.id, logits=tuple(z.tolist())))
        return out, close

    def start(self) -> "OracleServer":
        try:
            self._tcp = _TCPServer((self.config.host, self.config.port), _Handler)
        except OSError as exc:
            raise OracleError(f"cannot bind {self.config.host}:{self.config.port}: {exc}") from exc
        self._tcp.owner = self
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True,
                                        name="oracle-server")
        self._thread.start()
        logger.info("serving %s oracle on %s:%d", self.config.mode, *self.address)
        return self

    def close(self):
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_model(model: Model, cfg: Optional[ServerConfig] = None) -> OracleServer:
    """Start serving ``model`` in a background thread and return the handle."""
    return OracleServer(model, cfg or ServerConfig()).start()


# ------------------------------------------------------------------ client

def parse_address(address) -> tuple:
    if isinstance(address, str):
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"address must look like host:port, got {address!r}")
        return host, int(port)
    host, port = address
    return str(host), int(port)


_ERROR_TYPES = {ERR_BUDGET: BudgetExhausted}


class RemoteOracle(LogitOracle):
    """Oracle client over one pipelined connection.

    ``queries_used`` counts only answered queries, so it tracks the server's
    per-connection counter exactly. Safe to share between threads. If the
    connection drops, every pending and later query raises
    :class:`~dsinfer.oracles.OracleError`.
    """

    def __init__(self, address, mode: str = "label_only", budget: Optional[int] = None,
                 timeout: Optional[float] = 60.0):
        super().__init__(budget)
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.mode = mode
        self.timeout = timeout
        self.address = parse_address(address)
        try:
            self._sock = socket.create_connection(self.address, timeout=timeout)
        except OSError as exc:
            raise OracleError(f"cannot connect to {self.address[0]}:{self.address[1]}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)
        self._rfile = self._sock.makefile("rb")
        self._ids = itertools.count()
        self._pending: dict = {}
        self._plock = threading.Lock()
        self._wlock = threading.Lock()
        self._closed: Optional[str] = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name="oracle-client")
        self._reader.start()

    # transport
    def _fail_pending(self, why: str):
        with self._plock:
            self._closed = self._closed or why
            pending, self._pending = self._pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(OracleError(why))

    def _read_loop(self):
        try:
            for line in self._rfile:
                try:
                    resp = decode_response(line)
                except ProtocolError as exc:
                    self._fail_pending(f"protocol violation from server: {exc}")
                    return
                with self._plock:
                    fut = self._pending.pop(resp.id, None)
                if fut is None:
                    logger.warning("response with unknown id %r: %s", resp.id, resp.error)
                    continue
                fut.set_result(resp)
        except (OSError, ValueError):
            pass
        self._fail_pending("connection closed by server")

    def _submit(self, op: str, X: np.ndarray) -> list:
        futs, lines = [], []
        with self._plock:
            if self._closed:
                raise OracleError(self._closed)
            for row in X:
                rid = next(self._ids)
                fut = Future()
                self._pending[rid] = fut
                futs.append(fut)
                lines.append(encode_request(WireRequest(rid, op, row)))
        try:
            with self._wlock:
                self._sock.sendall(b"".join(lines))
        except OSError as exc:
            self._fail_pending(f"send failed: {exc}")
        return futs

    def _round_trip(self, op: str, X) -> list:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(X) == 0:
            return []
        if self.budget is not None and self._used + len(X) > self.budget:
            raise BudgetExhausted(f"query budget of {self.budget} exhausted "
                                  f"({self._used} used, {len(X)} requested)")
        futs = self._submit(op, X)
        out, first_error = [], None
        for fut in futs:
            try:
                resp = fut.result(timeout=self.timeout)
            except OracleError as exc:
                first_error = first_error or exc
                continue
            if resp.error is not None:
                first_error = first_error or _ERROR_TYPES.get(resp.error, OracleError)(resp.error)
                continue
            out.append(resp)
        with self._lock:
            self._used += len(out)
        if first_error is not None:
            raise first_error
        return out

    # oracle contract
    def query_batch(self, X) -> np.ndarray:
        resps = self._round_trip("label", X)
        return np.array([r.label for r in resps], dtype=np.int64)

    def query_logits_batch(self, X) -> np.ndarray:
        resps = self._round_trip("logits", X)
        return np.array([r.logits for r in resps], dtype=np.float64)

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=5)
        self._fail_pending("connection closed by client")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect_oracle(address, mode: str = "label_only", budget: Optional[int] = None,
                   timeout: Optional[float] = 60.0) -> RemoteOracle:
    return RemoteOracle(address, mode, budget, timeout)
