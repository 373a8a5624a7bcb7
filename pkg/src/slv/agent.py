"""Verifier agent: measures application-layer RTTs on request.

The agent times TCP connection establishment (a handshake proxy that
needs no raw sockets and no payload) to targets and to peer verifiers,
and reports the per-endpoint minimum back to the manager. The wire
protocol is one JSON object per line over a persistent TCP connection.
"""

from __future__ import annotations

import ipaddress
import json
import logging
import socket
import socketserver
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

from .verify import TARGET, format_timestamp, utc_now

log = logging.getLogger(__name__)

DEFAULT_AGENT_PORT = 7707
DEFAULT_PROBES = 5
DEFAULT_TIMEOUT = 10.0

# Wire marker for an endpoint that could not be measured.
FAILED = "FAILED"

# Pause between sequential probes so we do not queue behind ourselves.
PROBE_SPACING_S = 0.05


class ProtocolError(ValueError):
    """A request or response does not follow the wire protocol."""


def _check_address(host: str, port: int, what: str) -> None:
    try:
        ipaddress.ip_address(host)
    except ValueError as exc:
        raise ProtocolError(f"{what} host is not a valid IP address: {host!r}") from exc
    if not 1 <= int(port) <= 65535:
        raise ProtocolError(f"{what} port out of range: {port}")


@dataclass(frozen=True)
class PeerSpec:
    """A peer verifier to measure, addressed by its agent listener."""

    verifier_id: str
    host: str
    port: int = DEFAULT_AGENT_PORT


@dataclass(frozen=True)
class MeasureRequest:
    """One measurement order from the manager.

    Measures the target (when given) and every peer. Endpoint ids in the
    response are TARGET for the target and the verifier id for each peer,
    so ids must be unique and no peer may claim the reserved TARGET id.
    """

    request_id: str
    target: Optional[tuple[str, int]]
    peers: tuple[PeerSpec, ...] = ()
    probes: int = DEFAULT_PROBES
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self) -> None:
        object.__setattr__(self, "peers", tuple(self.peers))
        if not self.request_id:
            raise ProtocolError("request_id must be non-empty")
        if self.target is None and not self.peers:
            raise ProtocolError("request must name a target or at least one peer")
        if self.target is not None:
            _check_address(self.target[0], self.target[1], "target")
        ids = [TARGET] + [p.verifier_id for p in self.peers]
        if len(set(ids)) != len(ids):
            raise ProtocolError("duplicate endpoint ids in request")
        for peer in self.peers:
            if not peer.verifier_id:
                raise ProtocolError("peer verifier_id must be non-empty")
            _check_address(peer.host, peer.port, f"peer {peer.verifier_id}")
        if self.probes < 1:
            raise ProtocolError("probes must be >= 1")
        if self.timeout <= 0:
            raise ProtocolError("timeout must be > 0")

    def to_wire(self) -> dict:
        return {
            "request_id": self.request_id,
            "target": (
                {"host": self.target[0], "port": self.target[1]} if self.target else None
            ),
            "peers": [
                {"verifier_id": p.verifier_id, "host": p.host, "port": p.port}
                for p in self.peers
            ],
            "probes": self.probes,
            "timeout": self.timeout,
        }

    @classmethod
    def from_wire(
        cls,
        data: dict,
        default_probes: int = DEFAULT_PROBES,
        default_timeout: float = DEFAULT_TIMEOUT,
    ) -> "MeasureRequest":
        if not isinstance(data, dict):
            raise ProtocolError("request must be a JSON object")
        try:
            target = data.get("target")
            peers = tuple(
                PeerSpec(
                    verifier_id=str(p["verifier_id"]),
                    host=str(p["host"]),
                    port=int(p.get("port", DEFAULT_AGENT_PORT)),
                )
                for p in data.get("peers", [])
            )
            return cls(
                request_id=str(data.get("request_id", "")),
                target=(str(target["host"]), int(target.get("port", 80))) if target else None,
                peers=peers,
                probes=int(data.get("probes", default_probes)),
                timeout=float(data.get("timeout", default_timeout)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed request: {exc}") from exc


@dataclass(frozen=True)
class MeasureResponse:
    """Per-endpoint minimum RTTs; None marks a failed endpoint."""

    request_id: str
    rtts: dict[str, Optional[float]]
    verifier_clock: str = field(default_factory=lambda: format_timestamp(utc_now()))

    def to_wire(self) -> dict:
        return {
            "request_id": self.request_id,
            "rtts": {eid: (FAILED if ms is None else ms) for eid, ms in self.rtts.items()},
            "verifier_clock": self.verifier_clock,
        }

    @classmethod
    def from_wire(cls, data: dict) -> "MeasureResponse":
        if not isinstance(data, dict) or "rtts" not in data:
            raise ProtocolError("response must be a JSON object with an rtts map")
        rtts: dict[str, Optional[float]] = {}
        for eid, value in data["rtts"].items():
            if value == FAILED:
                rtts[eid] = None
            else:
                ms = float(value)
                if ms < 0:
                    raise ProtocolError(f"negative RTT for {eid}: {ms}")
                rtts[eid] = ms
        return cls(
            request_id=str(data.get("request_id", "")),
            rtts=rtts,
            verifier_clock=str(data.get("verifier_clock", "")),
        )


def _tcp_connect_ms(address: tuple[str, int], timeout: float) -> float:
    """Time one TCP connection establishment with the monotonic clock."""
    start = time.perf_counter()
    sock = socket.create_connection(address, timeout=timeout)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    sock.close()
    return max(elapsed_ms, 0.0)


def _measure_rtt_ex(
    address: tuple[str, int],
    probes: int,
    timeout: float,
    probe_fn: Optional[Callable[[], float]] = None,
    spacing_s: float = PROBE_SPACING_S,
) -> tuple[Optional[float], bool]:
    """Like measure_rtt but also reports whether any probe was refused."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    probe = probe_fn or (lambda: _tcp_connect_ms(address, timeout))
    best: Optional[float] = None
    refused = False
    for attempt in range(probes):
        if attempt and spacing_s > 0:
            time.sleep(spacing_s)
        try:
            ms = probe()
        except ConnectionRefusedError:
            refused = True
            continue
        except OSError:
            continue
        if best is None or ms < best:
            best = ms
    return best, refused


def measure_rtt(
    address: tuple[str, int],
    probes: int = DEFAULT_PROBES,
    timeout: float = DEFAULT_TIMEOUT,
    *,
    probe_fn: Optional[Callable[[], float]] = None,
    spacing_s: float = PROBE_SPACING_S,
) -> Optional[float]:
    """Minimum TCP connect time to `address` in milliseconds.

    Opens `probes` sequential connections, times each from initiation to
    completion with a monotonic clock, and closes without sending any
    payload. Individual refusals and timeouts are tolerated; the result is
    None only when no probe succeeds. `probe_fn` substitutes the real
    connection probe in tests.
    """
    best, _ = _measure_rtt_ex(address, probes, timeout, probe_fn, spacing_s)
    return best


def _measure_target(address: tuple[str, int], probes: int, timeout: float) -> Optional[float]:
    """Measure a target, falling back from port 80 to 443 when every probe
    was refused (plain HTTP disabled but the host is up)."""
    best, refused = _measure_rtt_ex(address, probes, timeout)
    if best is None and refused and address[1] == 80:
        best = measure_rtt((address[0], 443), probes, timeout)
    return best


def handle_measure_request(
    req: MeasureRequest,
    measure: Callable[..., Optional[float]] = measure_rtt,
) -> MeasureResponse:
    """Measure the target and every peer of one request.

    Endpoints are measured concurrently with each other; probes within one
    endpoint stay sequential. The response has one entry per requested
    endpoint, preserving the request id. No correction of any kind is
    applied here; the agent reports raw minima.
    """
    jobs: list[tuple[str, Callable[[], Optional[float]]]] = []
    if req.target is not None:
        target = req.target
        if measure is measure_rtt:
            jobs.append((TARGET, lambda: _measure_target(target, req.probes, req.timeout)))
        else:
            jobs.append((TARGET, lambda: measure(target, req.probes, req.timeout)))
    for peer in req.peers:
        address = (peer.host, peer.port)
        jobs.append(
            (peer.verifier_id, lambda a=address: measure(a, req.probes, req.timeout))
        )

    rtts: dict[str, Optional[float]] = {}
    with ThreadPoolExecutor(max_workers=min(len(jobs), 8)) as pool:
        for (endpoint_id, _), value in zip(jobs, pool.map(lambda job: job[1](), jobs)):
            rtts[endpoint_id] = value
    return MeasureResponse(request_id=req.request_id, rtts=rtts)


class _AgentHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            request_id = None
            try:
                data = json.loads(line)
                if isinstance(data, dict):
                    request_id = data.get("request_id")
                req = MeasureRequest.from_wire(
                    data, self.server.default_probes, self.server.default_timeout
                )
            except (json.JSONDecodeError, ProtocolError) as exc:
                log.debug("rejecting request from %s: %s", self.client_address, exc)
                self._send({"error": str(exc), "request_id": request_id})
                continue
            response = handle_measure_request(req)
            self._send(response.to_wire())

    def _send(self, payload: dict) -> None:
        self.wfile.write(json.dumps(payload).encode() + b"\n")
        self.wfile.flush()


class AgentServer(socketserver.ThreadingTCPServer):
    """Measurement daemon serving newline-delimited JSON requests.

    Each manager connection is served by its own thread and may carry any
    number of requests; requests on one connection are handled in order.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(
        self,
        host: str = "0.0.0.0",
        port: int = DEFAULT_AGENT_PORT,
        default_probes: int = DEFAULT_PROBES,
        default_timeout: float = DEFAULT_TIMEOUT,
    ) -> None:
        super().__init__((host, port), _AgentHandler)
        self.default_probes = default_probes
        self.default_timeout = default_timeout

    @property
    def bound_address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


class AgentConnection:
    """Manager-side end of the wire protocol.

    Keeps one persistent connection to an agent, reconnecting once when a
    stale connection fails. One request is outstanding at a time.
    """

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0) -> None:
        self._address = (host, port)
        self._connect_timeout = connect_timeout
        self._lock = threading.Lock()
        self._sock: Optional[socket.socket] = None
        self._reader = None

    def _connect(self) -> None:
        self._sock = socket.create_connection(self._address, timeout=self._connect_timeout)
        self._reader = self._sock.makefile("rb")

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
                self._reader = None

    def close(self) -> None:
        with self._lock:
            self._drop()

    def request(self, req: MeasureRequest) -> MeasureResponse:
        """Send one request and wait for its response.

        Raises OSError on connection trouble and ProtocolError on replies
        that do not follow the protocol (including agent-side error
        replies).
        """
        # Worst case the agent probes every endpoint sequentially with full
        # timeouts; give it headroom beyond that.
        deadline = req.probes * (req.timeout + PROBE_SPACING_S) + 5.0
        payload = json.dumps(req.to_wire()).encode() + b"\n"
        with self._lock:
            for retry in (False, True):
                if self._sock is None:
                    self._connect()
                try:
                    self._sock.settimeout(deadline)
                    self._sock.sendall(payload)
                    line = self._reader.readline()
                    if line:
                        break
                    raise ConnectionError("agent closed the connection")
                except OSError:
                    self._drop()
                    if retry:
                        raise
        data = json.loads(line)
        if "error" in data:
            raise ProtocolError(f"agent rejected request: {data['error']}")
        response = MeasureResponse.from_wire(data)
        if response.request_id != req.request_id:
            raise ProtocolError(
                f"response id {response.request_id!r} does not match request {req.request_id!r}"
            )
        return response


def new_request_id() -> str:
    return uuid.uuid4().hex
