"""Wire protocol for out-of-process denoiser backends.

Frame layout (all integers little-endian):

    magic "MVD1" (4) | kind (1) | payload_len (u32) | payload

    payload = header_len (u32) | header JSON (UTF-8) | tensor bytes

Tensor bytes are raw 32-bit little-endian floats, row-major and
channel-major, concatenated in the order the header's "tensors" list
declares. Kinds: 1 request, 2 response, 3 error, 4 hello. The engine is the
client: it opens the connection, sends a hello carrying the protocol
version and the schedule constants (so backends never re-derive them), and
then issues one request at a time per connection.
"""

from __future__ import annotations

import json
import select
import socket
import struct
import subprocess
import sys
import time
from dataclasses import dataclass

import numpy as np

from .denoise import Denoiser, DenoiserRequest, DenoiserResponse
from .errors import BackendError, ProtocolError
from .schedule import Schedule

MAGIC = b"MVD1"
PROTOCOL_VERSION = "MVD1"

KIND_REQUEST = 1
KIND_RESPONSE = 2
KIND_ERROR = 3
KIND_HELLO = 4

DEFAULT_TIMEOUT = 120.0


@dataclass
class WireMessage:
    kind: int
    header: dict
    tensors: dict[str, np.ndarray]


def encode_message(msg: WireMessage) -> bytes:
    header = dict(msg.header)
    declared = header.get("tensors", [])
    blobs = []
    for spec in declared:
        arr = np.ascontiguousarray(msg.tensors[spec["name"]], dtype="<f4")
        if list(arr.shape) != list(spec["dims"]):
            raise ProtocolError(
                f"tensor {spec['name']}: dims {list(arr.shape)} != declared {spec['dims']}"
            )
        blobs.append(arr.tobytes())
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)
    return MAGIC + struct.pack("<BI", msg.kind, len(payload)) + payload


def decode_payload(kind: int, payload: bytes) -> WireMessage:
    if len(payload) < 4:
        raise ProtocolError("short payload")
    (header_len,) = struct.unpack_from("<I", payload, 0)
    if 4 + header_len > len(payload):
        raise ProtocolError("short payload")
    try:
        header = json.loads(payload[4 : 4 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"bad header json: {e}") from e
    tensors: dict[str, np.ndarray] = {}
    offset = 4 + header_len
    for spec in header.get("tensors", []):
        dims = spec["dims"]
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise ProtocolError("short payload")
        tensors[spec["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            .reshape(dims)
            .copy()
        )
        offset += nbytes
    if offset != len(payload):
        raise ProtocolError("payload length does not match declared tensors")
    return WireMessage(kind, header, tensors)


class Transport:
    """Byte stream with deadline-aware exact reads."""

    def read_exact(self, n: int, deadline: float | None) -> bytes:
        raise NotImplementedError

    def write(self, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def read_exact(self, n: int, deadline: float | None) -> bytes:
        chunks = []
        remaining = n
        while remaining > 0:
            if deadline is not None:
                budget = deadline - time.monotonic()
                if budget <= 0:
                    raise TimeoutError("read timed out")
                self.sock.settimeout(budget)
            else:
                self.sock.settimeout(None)
            chunk = self.sock.recv(remaining)
            if not chunk:
                raise ConnectionError("connection closed")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def write(self, data: bytes) -> None:
        self.sock.sendall(data)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class PipeTransport(Transport):
    """Stdio pipes of a spawned backend child process.

    Reads go through the raw file descriptor: draining into a buffered
    reader would blind the select-based deadline on the next call.
    """

    def __init__(self, proc: subprocess.Popen):
        self.proc = proc
        self._fd = proc.stdout.fileno()

    def read_exact(self, n: int, deadline: float | None) -> bytes:
        import os

        out = b""
        while len(out) < n:
            if deadline is not None:
                budget = deadline - time.monotonic()
                if budget <= 0:
                    raise TimeoutError("read timed out")
                ready, _, _ = select.select([self._fd], [], [], budget)
                if not ready:
                    raise TimeoutError("read timed out")
            chunk = os.read(self._fd, n - len(out))
            if not chunk:
                raise ConnectionError("backend closed its pipe")
            out += chunk
        return out

    def write(self, data: bytes) -> None:
        self.proc.stdin.write(data)
        self.proc.stdin.flush()

    def close(self) -> None:
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()


class StdStreamTransport(Transport):
    """This process's own stdio; the transport a backend serves over."""

    def __init__(self, stdin=None, stdout=None):
        self.stdin = stdin if stdin is not None else sys.stdin.buffer
        self.stdout = stdout if stdout is not None else sys.stdout.buffer

    def read_exact(self, n: int, deadline: float | None) -> bytes:
        out = b""
        while len(out) < n:
            chunk = self.stdin.read(n - len(out))
            if not chunk:
                raise ConnectionError("stdin closed")
            out += chunk
        return out

    def write(self, data: bytes) -> None:
        self.stdout.write(data)
        self.stdout.flush()


def read_message(transport: Transport, deadline: float | None = None) -> WireMessage:
    head = transport.read_exact(9, deadline)
    if head[:4] != MAGIC:
        raise ProtocolError(f"bad magic {head[:4]!r}")
    kind, payload_len = struct.unpack("<BI", head[4:])
    payload = transport.read_exact(payload_len, deadline)
    return decode_payload(kind, payload)


def write_message(transport: Transport, msg: WireMessage) -> None:
    transport.write(encode_message(msg))


def hello_message(schedule: Schedule | None = None) -> WireMessage:
    header: dict = {"version": PROTOCOL_VERSION, "tensors": []}
    if schedule is not None:
        header["num_steps"] = schedule.num_steps
        header["alpha_bar"] = [float(a) for a in schedule.alpha_bar]
    return WireMessage(KIND_HELLO, header, {})


def error_message(reason: str) -> WireMessage:
    return WireMessage(KIND_ERROR, {"reason": reason, "tensors": []}, {})


def request_message(req: DenoiserRequest) -> WireMessage:
    tensors = {"latent": req.latent}
    specs = [{"name": "latent", "dims": list(req.latent.shape)}]
    for name, arr in (req.conditions or {}).items():
        tensors[name] = arr
        specs.append({"name": name, "dims": list(np.asarray(arr).shape)})
    header = {
        "view_id": req.view_id,
        "timestep": req.timestep,
        "prompt": req.prompt,
        "tensors": specs,
    }
    return WireMessage(KIND_REQUEST, header, tensors)


def response_message(eps: np.ndarray) -> WireMessage:
    return WireMessage(
        KIND_RESPONSE,
        {"tensors": [{"name": "eps", "dims": list(eps.shape)}]},
        {"eps": eps},
    )


def serve_requests(transport: Transport, denoiser_factory, once: bool = False) -> None:
    """Serve one connection until it closes: answer hellos, map requests
    through the denoiser, and report malformed frames or denoiser failures
    as error messages without dropping the connection.

    ``denoiser_factory`` is either a Denoiser or a callable taking the hello
    header (with the schedule constants) and returning one.
    """
    denoiser: Denoiser | None = (
        denoiser_factory if isinstance(denoiser_factory, Denoiser) else None
    )

    def reply(msg: WireMessage) -> bool:
        try:
            write_message(transport, msg)
            return True
        except (ConnectionError, BrokenPipeError, OSError):
            return False

    while True:
        try:
            msg = read_message(transport)
        except (ConnectionError, EOFError, OSError):
            return
        except ProtocolError as e:
            if not reply(error_message(str(e))):
                return
            continue
        if msg.kind == KIND_HELLO:
            version = msg.header.get("version")
            if version != PROTOCOL_VERSION:
                reply(error_message(f"unsupported protocol version {version!r}"))
                transport.close()
                return
            if denoiser is None:
                denoiser = denoiser_factory(msg.header)
            if not reply(hello_message()):
                return
        elif msg.kind == KIND_REQUEST:
            if denoiser is None:
                if not reply(error_message("request before hello")):
                    return
                continue
            try:
                req = DenoiserRequest(
                    view_id=int(msg.header.get("view_id", 0)),
                    timestep=int(msg.header.get("timestep", 0)),
                    latent=msg.tensors["latent"],
                    conditions={k: v for k, v in msg.tensors.items() if k != "latent"}
                    or None,
                    prompt=msg.header.get("prompt"),
                )
                eps = denoiser(req).eps.astype(np.float32)
            except Exception as e:  # noqa: BLE001 - reported over the wire
                if not reply(error_message(f"denoiser failed: {e}")):
                    return
                continue
            if not reply(response_message(eps)):
                return
            if once:
                return
        else:
            if not reply(error_message(f"unexpected message kind {msg.kind}")):
                return


class RemoteDenoiser(Denoiser):
    """Engine-side client: synchronous request/response over one connection,
    serial per connection; failures abort the sampling step."""

    concurrent_safe = False

    def __init__(self, transport: Transport, schedule: Schedule, timeout: float = DEFAULT_TIMEOUT):
        self.transport = transport
        self.timeout = timeout
        deadline = time.monotonic() + timeout
        try:
            write_message(transport, hello_message(schedule))
            reply = read_message(transport, deadline)
        except (ConnectionError, TimeoutError, OSError, ProtocolError) as e:
            raise BackendError(f"backend handshake failed: {e}") from e
        if reply.kind == KIND_ERROR:
            raise BackendError(f"backend rejected hello: {reply.header.get('reason')}")
        if reply.kind != KIND_HELLO or reply.header.get("version") != PROTOCOL_VERSION:
            raise BackendError(f"unexpected handshake reply kind={reply.kind}")

    def __call__(self, req: DenoiserRequest) -> DenoiserResponse:
        deadline = time.monotonic() + self.timeout
        try:
            write_message(self.transport, request_message(req))
            reply = read_message(self.transport, deadline)
        except (ConnectionError, TimeoutError, OSError, ProtocolError, BrokenPipeError) as e:
            raise BackendError(f"backend request failed: {e}") from e
        if reply.kind == KIND_ERROR:
            raise BackendError(f"backend error: {reply.header.get('reason')}")
        if reply.kind != KIND_RESPONSE or "eps" not in reply.tensors:
            raise BackendError(f"unexpected reply kind={reply.kind}")
        eps = reply.tensors["eps"]
        if eps.shape != req.latent.shape:
            raise BackendError(
                f"backend returned shape {eps.shape}, expected {req.latent.shape}"
            )
        return DenoiserResponse(eps)

    def close(self) -> None:
        self.transport.close()


def connect_tcp(host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> SocketTransport:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise BackendError(f"cannot reach backend at {host}:{port}: {e}") from e
    return SocketTransport(sock)


def spawn_stdio_backend(cmd: list[str]) -> PipeTransport:
    try:
        proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    except OSError as e:
        raise BackendError(f"cannot spawn backend {cmd!r}: {e}") from e
    return PipeTransport(proc)
