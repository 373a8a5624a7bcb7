"""Verification manager: assertion lookup, result cache, measurement
orchestration and the HTTP query API.

The manager resolves an IP address to its asserted location, answers from
its TTL cache when the assertion has not moved, and otherwise drives the
verification engine against live verifier agents.
"""

from __future__ import annotations

import ipaddress
import json
import logging
import sqlite3
import threading
import urllib.error
import urllib.request
from concurrent.futures import Future
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Protocol
from urllib.parse import parse_qs, urlsplit

from .agent import (
    DEFAULT_AGENT_PORT,
    AgentConnection,
    MeasureRequest,
    PeerSpec,
    ProtocolError,
    new_request_id,
)
from .geo import Circle, Location, great_circle_distance
from .verify import (
    TARGET,
    IPInfo,
    Reason,
    VerificationResult,
    VerifyConfig,
    format_timestamp,
    parse_timestamp,
    utc_now,
    verify_location,
)

log = logging.getLogger(__name__)

DEFAULT_API_PORT = 7700

# A cached assertion within this distance of the fresh one counts as
# unchanged; exact float equality would be brittle against provider jitter.
CACHE_LOC_TOLERANCE_KM = 1.0


class ParseError(ValueError):
    """A registry or lookup-table row cannot be parsed."""

    def __init__(self, path, line_no: int, message: str) -> None:
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class InsufficientVerifiersError(ValueError):
    """Fewer than 3 verifiers are available."""


class UnknownAddressError(LookupError):
    """No location assertion is available for an address."""


class ProviderUnavailableError(RuntimeError):
    """The assertion provider could not be reached."""


@dataclass(frozen=True)
class VerifierRecord:
    """One registry row: agent endpoint plus verifier position."""

    verifier_id: str
    host: str
    port: int
    loc: Location


@dataclass
class VerifierRegistry:
    entries: list[VerifierRecord]

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self, verifier_id: str) -> VerifierRecord:
        for record in self.entries:
            if record.verifier_id == verifier_id:
                return record
        raise KeyError(verifier_id)

    def verifier_inputs(self) -> list[tuple[str, Location]]:
        return [(record.verifier_id, record.loc) for record in self.entries]


def _split_hostport(text: str, default_port: int) -> tuple[str, int]:
    """Parse `ip`, `ip:port` or `[v6]:port`; a bare IPv6 keeps its colons."""
    text = text.strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = int(rest[1:]) if rest.startswith(":") else default_port
        return host, port
    if text.count(":") == 1:
        host, _, port_text = text.partition(":")
        return host, int(port_text)
    return text, default_port


def load_verifier_registry(path, default_port: int = DEFAULT_AGENT_PORT) -> VerifierRegistry:
    """Load verifiers from a CSV file with one `address,lat,lon` row each.

    Blank lines are skipped and ids are assigned v1, v2, ... in line
    order. The address is an IP, optionally with an agent port
    (`ip:port`); rows without a port use `default_port`.

    Raises:
        ParseError: on a malformed row, naming the line number.
        InsufficientVerifiersError: with fewer than 3 rows.
    """
    entries: list[VerifierRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = [part.strip() for part in line.split(",")]
            if len(parts) != 3:
                raise ParseError(path, line_no, f"expected 3 fields, got {len(parts)}")
            try:
                host, port = _split_hostport(parts[0], default_port)
                ipaddress.ip_address(host)
                loc = Location(float(parts[1]), float(parts[2]))
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from exc
            entries.append(
                VerifierRecord(
                    verifier_id=f"v{len(entries) + 1}", host=host, port=port, loc=loc
                )
            )
    if len(entries) < 3:
        raise InsufficientVerifiersError(
            f"registry {path} has {len(entries)} verifiers, need at least 3"
        )
    return VerifierRegistry(entries)


class Locator(Protocol):
    """Source of (unverified) location assertions for IP addresses."""

    def locate(self, ip: str) -> Location: ...


class StaticTableLocator:
    """CIDR-to-coordinates table answering by longest prefix match."""

    def __init__(self, rows: list[tuple[ipaddress.IPv4Network | ipaddress.IPv6Network, Location]]):
        self._rows = list(rows)

    @classmethod
    def from_file(cls, path) -> "StaticTableLocator":
        """Load `cidr,lat,lon` rows; blank lines and #-comments are skipped."""
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = [part.strip() for part in line.split(",")]
                if len(parts) != 3:
                    raise ParseError(path, line_no, f"expected 3 fields, got {len(parts)}")
                try:
                    network = ipaddress.ip_network(parts[0])
                    loc = Location(float(parts[1]), float(parts[2]))
                except ValueError as exc:
                    raise ParseError(path, line_no, str(exc)) from exc
                rows.append((network, loc))
        return cls(rows)

    def locate(self, ip: str) -> Location:
        address = ipaddress.ip_address(ip)
        best: Optional[tuple[int, Location]] = None
        for network, loc in self._rows:
            if address.version != network.version or address not in network:
                continue
            if best is None or network.prefixlen > best[0]:
                best = (network.prefixlen, loc)
        if best is None:
            raise UnknownAddressError(f"no assertion available for {ip}")
        return best[1]


class HttpLocator:
    """Fetches assertions from a JSON geolocation endpoint.

    The URL template must contain `{ip}`; the response body must be a JSON
    object with numeric `lat` and `lon` fields. An HTTP 404 means the
    address is unknown; any other failure means the provider is
    unavailable, never a silent fallback.
    """

    def __init__(self, url_template: str, timeout: float = 5.0) -> None:
        if "{ip}" not in url_template:
            raise ValueError("url_template must contain {ip}")
        self._url_template = url_template
        self._timeout = timeout

    def locate(self, ip: str) -> Location:
        ipaddress.ip_address(ip)
        url = self._url_template.format(ip=ip)
        try:
            with urllib.request.urlopen(url, timeout=self._timeout) as response:
                body = json.loads(response.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 404:
                raise UnknownAddressError(f"no assertion available for {ip}") from exc
            raise ProviderUnavailableError(f"assertion provider failed: {exc}") from exc
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise ProviderUnavailableError(f"assertion provider failed: {exc}") from exc
        try:
            return Location(float(body["lat"]), float(body["lon"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderUnavailableError(
                f"assertion provider returned an unusable body for {ip}: {exc}"
            ) from exc


@dataclass
class CacheEntry:
    """Cached verification for one IP address.

    Usable until expires_at and only while the fresh assertion stays
    within CACHE_LOC_TOLERANCE_KM of asserted_loc. The reason is kept so a
    cache hit reproduces the original result exactly.
    """

    ip: str
    asserted_loc: Location
    when_veri: datetime
    veri_passed: bool
    region: Optional[Circle]
    expires_at: datetime
    reason: Optional[Reason] = None

    def to_result(self) -> VerificationResult:
        return VerificationResult(
            ip=IPInfo(value=self.ip, loc=self.asserted_loc),
            veri_passed=self.veri_passed,
            region=self.region,
            when_veri=self.when_veri,
            reason=self.reason,
        )

    def to_dict(self) -> dict:
        return {
            "ip": self.ip,
            "asserted_loc": self.asserted_loc.to_dict(),
            "when_veri": format_timestamp(self.when_veri),
            "veri_passed": self.veri_passed,
            "region": self.region.to_dict() if self.region else None,
            "expires_at": format_timestamp(self.expires_at),
            "reason": self.reason.value if self.reason else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CacheEntry":
        return cls(
            ip=data["ip"],
            asserted_loc=Location.from_dict(data["asserted_loc"]),
            when_veri=parse_timestamp(data["when_veri"]),
            veri_passed=bool(data["veri_passed"]),
            region=Circle.from_dict(data["region"]) if data.get("region") else None,
            expires_at=parse_timestamp(data["expires_at"]),
            reason=Reason(data["reason"]) if data.get("reason") else None,
        )


class VerificationCache:
    """TTL cache of verification results keyed by IP address.

    An in-memory map serves reads; when a path is given every write also
    lands in a sqlite file, so a restarted manager starts warm. Access is
    serialized by a single lock.
    """

    def __init__(self, path=None) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}
        self._db: Optional[sqlite3.Connection] = None
        if path is not None:
            self._db = sqlite3.connect(str(path), check_same_thread=False)
            self._db.execute(
                "CREATE TABLE IF NOT EXISTS verifications (ip TEXT PRIMARY KEY, data TEXT NOT NULL)"
            )
            self._db.commit()
            for (blob,) in self._db.execute("SELECT data FROM verifications"):
                entry = CacheEntry.from_dict(json.loads(blob))
                self._entries[entry.ip] = entry

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def get(self, ip: str, now: datetime) -> Optional[CacheEntry]:
        """The entry for ip, or None when absent or expired."""
        with self._lock:
            entry = self._entries.get(ip)
            if entry is None or entry.expires_at <= now:
                return None
            return entry

    def put(self, entry: CacheEntry) -> None:
        with self._lock:
            self._entries[entry.ip] = entry
            if self._db is not None:
                self._db.execute(
                    "INSERT OR REPLACE INTO verifications (ip, data) VALUES (?, ?)",
                    (entry.ip, json.dumps(entry.to_dict())),
                )
                self._db.commit()

    def evict_expired(self, now: datetime) -> int:
        """Drop every entry with expires_at <= now; returns how many went."""
        with self._lock:
            stale = [ip for ip, entry in self._entries.items() if entry.expires_at <= now]
            for ip in stale:
                del self._entries[ip]
            if self._db is not None and stale:
                self._db.executemany(
                    "DELETE FROM verifications WHERE ip = ?", [(ip,) for ip in stale]
                )
                self._db.commit()
            return len(stale)

    def close(self) -> None:
        with self._lock:
            if self._db is not None:
                self._db.close()
                self._db = None


@dataclass(frozen=True)
class LocatorConfig:
    """Assertion provider selection: a CIDR table file or an HTTP service."""

    provider: str = "static_table"
    path: Optional[str] = None
    url_template: Optional[str] = None
    timeout: float = 5.0

    def build(self) -> Locator:
        if self.provider == "static_table":
            if not self.path:
                raise ValueError("static_table locator needs a path")
            return StaticTableLocator.from_file(self.path)
        if self.provider == "http_service":
            if not self.url_template:
                raise ValueError("http_service locator needs a url_template")
            return HttpLocator(self.url_template, timeout=self.timeout)
        raise ValueError(f"unknown locator provider: {self.provider!r}")


@dataclass
class ManagerConfig:
    """Manager settings; see ManagerConfig.from_file for the JSON keys."""

    registry_path: str = "verifiers.csv"
    cache_ttl: float = 4 * 3600.0
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    locator: LocatorConfig = field(default_factory=LocatorConfig)
    agent_port: int = DEFAULT_AGENT_PORT
    target_port: int = 80
    listen_host: str = "127.0.0.1"
    listen_port: int = DEFAULT_API_PORT
    cache_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.cache_ttl <= 0:
            raise ValueError("cache_ttl must be > 0")

    @classmethod
    def from_file(cls, path) -> "ManagerConfig":
        """Load a JSON config.

        Top-level keys (all optional except registry): registry, cache_ttl
        (seconds), lambda_ms, probes_per_measurement, max_triangles,
        measurement_timeout (seconds), locator {provider, path,
        url_template, timeout}, agent_port, target_port, listen_host,
        listen_port, cache_path.
        """
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(
            registry_path=data["registry"],
            cache_ttl=float(data.get("cache_ttl", 4 * 3600.0)),
            verify=VerifyConfig.from_dict(data),
            locator=LocatorConfig(
                provider=data.get("locator", {}).get("provider", "static_table"),
                path=data.get("locator", {}).get("path"),
                url_template=data.get("locator", {}).get("url_template"),
                timeout=float(data.get("locator", {}).get("timeout", 5.0)),
            ),
            agent_port=int(data.get("agent_port", DEFAULT_AGENT_PORT)),
            target_port=int(data.get("target_port", 80)),
            listen_host=data.get("listen_host", "127.0.0.1"),
            listen_port=int(data.get("listen_port", DEFAULT_API_PORT)),
            cache_path=data.get("cache_path"),
        )


class AgentPool:
    """Persistent agent connections, shared across verifications."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._connections: dict[str, AgentConnection] = {}

    def get(self, record: VerifierRecord) -> AgentConnection:
        with self._lock:
            conn = self._connections.get(record.verifier_id)
            if conn is None:
                conn = AgentConnection(record.host, record.port)
                self._connections[record.verifier_id] = conn
            return conn

    def close(self) -> None:
        with self._lock:
            for conn in self._connections.values():
                conn.close()
            self._connections.clear()


class LiveDelayProvider:
    """DelayProvider that instructs verifier agents over the wire.

    One instance per verification target. Peer endpoints are measured
    against the peer agent's own listener (a guaranteed listener), targets
    against the configured target port. Failures surface as None, as the
    engine expects.
    """

    supports_concurrent_measure = True

    def __init__(
        self,
        registry: VerifierRegistry,
        target_host: str,
        target_port: int = 80,
        pool: Optional[AgentPool] = None,
    ) -> None:
        self._registry = registry
        self._target = (target_host, target_port)
        self._pool = pool if pool is not None else AgentPool()

    def measure(
        self, verifier_id: str, endpoint_id: str, probes: int, timeout: float
    ) -> Optional[float]:
        record = self._registry.by_id(verifier_id)
        if endpoint_id == TARGET:
            request = MeasureRequest(
                request_id=new_request_id(), target=self._target,
                peers=(), probes=probes, timeout=timeout,
            )
        else:
            peer = self._registry.by_id(endpoint_id)
            request = MeasureRequest(
                request_id=new_request_id(), target=None,
                peers=(PeerSpec(endpoint_id, peer.host, peer.port),),
                probes=probes, timeout=timeout,
            )
        try:
            response = self._pool.get(record).request(request)
        except (OSError, ProtocolError) as exc:
            log.warning("measurement via %s for %s failed: %s", verifier_id, endpoint_id, exc)
            return None
        return response.rtts.get(endpoint_id)


class ManagerService:
    """Assertion lookup, caching and verification behind one entry point.

    Results (positive and negative alike) are cached per IP for the
    configured TTL and reused while the fresh assertion matches the cached
    one. Concurrent requests for the same uncached IP share a single
    verification run.
    """

    def __init__(
        self,
        registry: VerifierRegistry,
        locator: Locator,
        provider_factory,
        cfg: Optional[ManagerConfig] = None,
        cache: Optional[VerificationCache] = None,
    ) -> None:
        if len(registry) < 3:
            raise InsufficientVerifiersError(
                f"{len(registry)} verifiers registered, need at least 3"
            )
        self._registry = registry
        self._locator = locator
        self._provider_factory = provider_factory
        self._cfg = cfg or ManagerConfig()
        self._cache = cache if cache is not None else VerificationCache(self._cfg.cache_path)
        self._flight_lock = threading.Lock()
        self._inflight: dict[str, Future] = {}

    @classmethod
    def from_config(cls, cfg: ManagerConfig) -> "ManagerService":
        registry = load_verifier_registry(cfg.registry_path, default_port=cfg.agent_port)
        pool = AgentPool()

        def provider_factory(target_ip: str) -> LiveDelayProvider:
            return LiveDelayProvider(registry, target_ip, cfg.target_port, pool=pool)

        return cls(registry, cfg.locator.build(), provider_factory, cfg)

    @property
    def registry_size(self) -> int:
        return len(self._registry)

    def handle_verify_request(self, ip: str, now: Optional[datetime] = None) -> VerificationResult:
        """Verification result for one IP address, from cache when possible.

        A cached result is returned only while unexpired and while the
        freshly asserted location is within CACHE_LOC_TOLERANCE_KM of the
        cached assertion; otherwise a verification runs and its result
        (positive or negative) replaces the cache entry.

        Raises ValueError for a syntactically invalid address, and lets
        UnknownAddressError / ProviderUnavailableError from the locator
        through: failing to obtain an assertion is an error, not a
        negative verification.
        """
        ipaddress.ip_address(ip)
        now = now or utc_now()
        asserted = self._locator.locate(ip)
        cached = self._cache.get(ip, now)
        if cached is not None and (
            great_circle_distance(cached.asserted_loc, asserted) <= CACHE_LOC_TOLERANCE_KM
        ):
            return cached.to_result()
        return self._single_flight(ip, asserted, now)

    def _single_flight(self, ip: str, asserted: Location, now: datetime) -> VerificationResult:
        with self._flight_lock:
            future = self._inflight.get(ip)
            leader = future is None
            if leader:
                future = Future()
                self._inflight[ip] = future
        if not leader:
            return future.result()
        try:
            result = self._run_verification(ip, asserted, now)
            future.set_result(result)
            return result
        except BaseException as exc:
            future.set_exception(exc)
            raise
        finally:
            with self._flight_lock:
                self._inflight.pop(ip, None)

    def _run_verification(self, ip: str, asserted: Location, now: datetime) -> VerificationResult:
        provider = self._provider_factory(ip)
        result = verify_location(
            IPInfo(value=ip, loc=asserted),
            self._registry.verifier_inputs(),
            provider,
            self._cfg.verify,
            now,
        )
        self._cache.put(
            CacheEntry(
                ip=ip,
                asserted_loc=asserted,
                when_veri=result.when_veri,
                veri_passed=result.veri_passed,
                region=result.region,
                expires_at=now + timedelta(seconds=self._cfg.cache_ttl),
                reason=result.reason,
            )
        )
        return result

    def cache_evict_expired(self, now: Optional[datetime] = None) -> int:
        return self._cache.evict_expired(now or utc_now())


class _ApiHandler(BaseHTTPRequestHandler):
    server_version = "slv-manager/0.1"

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        parts = urlsplit(self.path)
        if parts.path == "/health":
            self._reply(200, {"status": "ok", "verifiers": self.server.service.registry_size})
            return
        if parts.path != "/verify":
            self._reply(404, {"error": "not found"})
            return
        params = parse_qs(parts.query)
        values = params.get("ip", [])
        if len(values) != 1 or not values[0]:
            self._reply(400, {"error": "missing ip parameter"})
            return
        try:
            result = self.server.service.handle_verify_request(values[0])
        except ValueError:
            self._reply(400, {"error": f"invalid ip address: {values[0]!r}"})
        except UnknownAddressError as exc:
            self._reply(404, {"error": str(exc)})
        except ProviderUnavailableError as exc:
            self._reply(502, {"error": str(exc)})
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("verification failed")
            self._reply(500, {"error": f"internal error: {exc}"})
        else:
            self._reply(200, result.to_dict())

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode() + b"\n"
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)


class ManagerHTTPServer(ThreadingHTTPServer):
    """HTTP front end: GET /verify?ip=<addr> and GET /health."""

    daemon_threads = True

    def __init__(self, service: ManagerService, host: str = "127.0.0.1", port: int = DEFAULT_API_PORT):
        super().__init__((host, port), _ApiHandler)
        self.service = service

    @property
    def bound_address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
