"""Synthetic-network harness for false-accept / false-reject experiments.

Builds delay providers from geography plus an adversary model and feeds
them through the real verification engine, so acceptance behaviour can be
studied deterministically at desk scale.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional, Sequence

from .geo import Location, destination_point, great_circle_distance, min_rtt_for_distance
from .verify import (
    TARGET,
    IPInfo,
    Reason,
    VerifierInput,
    VerifyConfig,
    any_triangle_contains,
    verify_location,
)

ADVERSARY_NONE = "none"
ADVERSARY_FALSE_ASSERTION = "false_assertion"
ADVERSARY_RELAY = "relay"

_ADVERSARY_KINDS = (ADVERSARY_NONE, ADVERSARY_FALSE_ASSERTION, ADVERSARY_RELAY)

# Fixed instant used for simulated verifications; reports carry no times,
# so any constant keeps runs bit-for-bit reproducible.
_SIM_EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)


class ScenarioError(ValueError):
    """A scenario cannot be generated or evaluated as specified."""


@dataclass(frozen=True)
class Adversary:
    """What the server under test is doing.

    `none` asserts its true location; `false_assertion` asserts a location
    far from where it really is; `relay` forwards traffic to the true
    server and adds `extra_ms` to every verifier-to-target RTT.
    """

    kind: str = ADVERSARY_NONE
    extra_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _ADVERSARY_KINDS:
            raise ValueError(f"unknown adversary kind: {self.kind!r}")
        if self.extra_ms < 0:
            raise ValueError("extra_ms must be >= 0")
        if self.kind != ADVERSARY_RELAY and self.extra_ms != 0.0:
            raise ValueError("extra_ms applies to relay adversaries only")

    def to_dict(self) -> dict:
        data: dict = {"type": self.kind}
        if self.kind == ADVERSARY_RELAY:
            data["extra_ms"] = self.extra_ms
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Adversary":
        return cls(kind=str(data["type"]), extra_ms=float(data.get("extra_ms", 0.0)))


@dataclass(frozen=True)
class DelayModel:
    """How simulated RTTs derive from geography.

    circuitousness stretches the geodesic lower bound (routes are never
    straight), lastmile_ms inflates verifier-to-target paths, and jitter
    adds uniform noise in [0, jitter_ms). Simulated RTTs therefore never
    fall below the physical lower bound for the true distance.
    """

    circuitousness: float = 1.5
    lastmile_ms: float = 5.0
    jitter_ms: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.circuitousness < 1.0:
            raise ValueError("circuitousness must be >= 1")
        if self.lastmile_ms < 0 or self.jitter_ms < 0:
            raise ValueError("lastmile_ms and jitter_ms must be >= 0")

    def to_dict(self) -> dict:
        return {
            "circuitousness": self.circuitousness,
            "lastmile_ms": self.lastmile_ms,
            "jitter_ms": self.jitter_ms,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DelayModel":
        return cls(
            circuitousness=float(data.get("circuitousness", 1.5)),
            lastmile_ms=float(data.get("lastmile_ms", 5.0)),
            jitter_ms=float(data.get("jitter_ms", 2.0)),
            seed=int(data.get("seed", 0)),
        )


@dataclass(frozen=True)
class SimServer:
    """One server under test: where it really is versus where it claims to be."""

    true_loc: Location
    asserted_loc: Location
    adversary: Adversary = Adversary()

    def __post_init__(self) -> None:
        if self.adversary.kind == ADVERSARY_NONE and self.true_loc != self.asserted_loc:
            raise ValueError("an honest server must assert its true location")

    def to_dict(self) -> dict:
        return {
            "true_loc": self.true_loc.to_dict(),
            "asserted_loc": self.asserted_loc.to_dict(),
            "adversary": self.adversary.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimServer":
        return cls(
            true_loc=Location.from_dict(data["true_loc"]),
            asserted_loc=Location.from_dict(data["asserted_loc"]),
            adversary=Adversary.from_dict(data.get("adversary", {"type": ADVERSARY_NONE})),
        )


@dataclass
class SimScenario:
    """A verifier deployment plus a population of servers to verify."""

    verifiers: list[VerifierInput]
    servers: list[SimServer]
    model: DelayModel = field(default_factory=DelayModel)
    cfg: VerifyConfig = field(default_factory=VerifyConfig)

    def to_dict(self) -> dict:
        return {
            "verifiers": [
                {"id": vid, "lat": loc.lat, "lon": loc.lon} for vid, loc in self.verifiers
            ],
            "servers": [s.to_dict() for s in self.servers],
            "model": self.model.to_dict(),
            "cfg": self.cfg.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimScenario":
        return cls(
            verifiers=[
                (str(v["id"]), Location(float(v["lat"]), float(v["lon"])))
                for v in data["verifiers"]
            ],
            servers=[SimServer.from_dict(s) for s in data["servers"]],
            model=DelayModel.from_dict(data.get("model", {})),
            cfg=VerifyConfig.from_dict(data.get("cfg", {})),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SimScenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def simulated_rtt(
    a: Location,
    b: Location,
    model: DelayModel,
    rng: random.Random,
    is_target_edge: bool,
) -> float:
    """One synthetic RTT measurement in milliseconds between two points.

    The geodesic lower bound stretched by route circuitousness, plus
    last-mile inflation on verifier-to-target edges, plus uniform jitter.
    Deterministic given the RNG state.
    """
    rtt = min_rtt_for_distance(great_circle_distance(a, b)) * model.circuitousness
    if is_target_edge:
        rtt += model.lastmile_ms
    return rtt + rng.uniform(0.0, model.jitter_ms)


class SimDelayProvider:
    """DelayProvider backed by scenario geography instead of sockets.

    Target RTTs reflect the server's true location (not the asserted one),
    which is exactly what live measurements would see. Jitter comes from a
    dedicated RNG per directed edge, seeded from (model seed, stream key,
    verifier, endpoint): a given edge measures the same within one
    verification regardless of call order or concurrency, and distinct
    streams never share noise.
    """

    def __init__(
        self,
        verifier_locs: dict[str, Location],
        true_loc: Location,
        model: DelayModel,
        stream: str = "0",
        extra_target_ms: float = 0.0,
    ) -> None:
        self._verifiers = dict(verifier_locs)
        self._true_loc = true_loc
        self._model = model
        self._stream = stream
        self._extra_target_ms = extra_target_ms

    def measure(
        self, verifier_id: str, endpoint_id: str, probes: int, timeout: float
    ) -> Optional[float]:
        origin = self._verifiers[verifier_id]
        is_target = endpoint_id == TARGET
        dest = self._true_loc if is_target else self._verifiers[endpoint_id]
        rng = random.Random(f"{self._model.seed}/{self._stream}/{verifier_id}/{endpoint_id}")
        rtt = simulated_rtt(origin, dest, self._model, rng, is_target)
        if is_target:
            rtt += self._extra_target_ms
        return rtt


@dataclass
class ExperimentReport:
    """Tallies of one experiment run.

    fr_rate is the fraction of honest servers rejected, fa_rate the
    fraction of adversarial servers accepted; each is None when its
    denominator is zero.
    """

    total_true: int
    accepted_true: int
    total_false: int
    accepted_false: int
    fr_rate: Optional[float]
    fa_rate: Optional[float]
    servers: list[dict]

    def to_dict(self) -> dict:
        return {
            "total_true": self.total_true,
            "accepted_true": self.accepted_true,
            "total_false": self.total_false,
            "accepted_false": self.accepted_false,
            "fr_rate": self.fr_rate,
            "fa_rate": self.fa_rate,
            "servers": self.servers,
        }

    def text_table(self) -> str:
        """Aligned per-server outcomes followed by the summary counts."""
        lines = [f"{'idx':>4}  {'adversary':<16} {'accepted':<9} reason"]
        for row in self.servers:
            lines.append(
                f"{row['index']:>4}  {row['adversary']:<16} "
                f"{'yes' if row['accepted'] else 'no':<9} {row['reason'] or '-'}"
            )
        fr = "n/a" if self.fr_rate is None else f"{self.fr_rate:.2%}"
        fa = "n/a" if self.fa_rate is None else f"{self.fa_rate:.2%}"
        lines.append(
            f"true: {self.accepted_true}/{self.total_true} accepted (FR {fr})  |  "
            f"false: {self.accepted_false}/{self.total_false} accepted (FA {fa})"
        )
        return "\n".join(lines)


def _index_ip(index: int) -> str:
    return f"10.{(index >> 16) & 255}.{(index >> 8) & 255}.{index & 255}"


def run_experiment(scenario: SimScenario) -> ExperimentReport:
    """Verify every server in the scenario and tally rejects and accepts.

    Honest servers count toward the false-reject rate, adversarial ones
    toward the false-accept rate. An honest server whose location is
    covered by no verifier triangle is a deployment hole, not a false
    reject, and raises ScenarioError.
    """
    if len(scenario.verifiers) < 3:
        raise ScenarioError("a scenario needs at least 3 verifiers")
    if not scenario.servers:
        raise ScenarioError("a scenario needs at least one server")

    verifier_locs = dict(scenario.verifiers)
    totals = {True: 0, False: 0}
    accepted = {True: 0, False: 0}
    rows: list[dict] = []
    for index, server in enumerate(scenario.servers):
        honest = server.adversary.kind == ADVERSARY_NONE
        provider = SimDelayProvider(
            verifier_locs,
            server.true_loc,
            scenario.model,
            stream=str(index),
            extra_target_ms=server.adversary.extra_ms,
        )
        result = verify_location(
            IPInfo(value=_index_ip(index), loc=server.asserted_loc),
            scenario.verifiers,
            provider,
            scenario.cfg,
            now=_SIM_EPOCH,
        )
        if honest and result.reason is Reason.NO_COVERAGE:
            raise ScenarioError(
                f"honest server {index} at {server.asserted_loc} is outside all verifier triangles"
            )
        totals[honest] += 1
        accepted[honest] += result.veri_passed
        rows.append(
            {
                "index": index,
                "adversary": server.adversary.kind,
                "accepted": result.veri_passed,
                "reason": result.reason.value if result.reason else None,
            }
        )

    fr = (totals[True] - accepted[True]) / totals[True] if totals[True] else None
    fa = accepted[False] / totals[False] if totals[False] else None
    return ExperimentReport(
        total_true=totals[True],
        accepted_true=accepted[True],
        total_false=totals[False],
        accepted_false=accepted[False],
        fr_rate=fr,
        fa_rate=fa,
        servers=rows,
    )


@dataclass(frozen=True)
class RegionBounds:
    """Axis-aligned lat/lon box that verifiers and servers are drawn from."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self) -> None:
        if not -90 <= self.lat_min < self.lat_max <= 90:
            raise ValueError("latitude bounds must satisfy -90 <= min < max <= 90")
        if not -180 <= self.lon_min < self.lon_max <= 180:
            raise ValueError("longitude bounds must satisfy -180 <= min < max <= 180")


def _random_location(rng: random.Random, bounds: RegionBounds) -> Location:
    return Location(
        rng.uniform(bounds.lat_min, bounds.lat_max),
        rng.uniform(bounds.lon_min, bounds.lon_max),
    )


def _covered_location(
    rng: random.Random, bounds: RegionBounds, verifiers: Sequence[VerifierInput]
) -> Location:
    for _ in range(1000):
        candidate = _random_location(rng, bounds)
        if any_triangle_contains(verifiers, candidate):
            return candidate
    raise ScenarioError("could not place a server inside any verifier triangle")


def generate_scenario(
    num_verifiers: int,
    num_honest: int,
    num_false_assertion: int,
    num_relay: int = 0,
    *,
    bounds: RegionBounds,
    relay_extra_ms: float = 30.0,
    displacement_km: tuple[float, float] = (3000.0, 6000.0),
    model: DelayModel = DelayModel(),
    cfg: VerifyConfig = VerifyConfig(),
    seed: int = 0,
) -> SimScenario:
    """Random scenario with uniform placement inside `bounds`, reproducible
    per seed.

    Server locations are redrawn until they fall inside at least one
    verifier triangle, so honest servers are always in coverage and
    adversarial assertions actually reach the delay test. Adversarial true
    locations sit a uniform displacement_km away from the asserted point
    in a random direction.
    """
    if num_verifiers < 3:
        raise ScenarioError("at least 3 verifiers are required")
    if min(num_honest, num_false_assertion, num_relay) < 0:
        raise ScenarioError("server counts must be >= 0")
    lo, hi = displacement_km
    if not 0 < lo <= hi:
        raise ScenarioError("displacement_km must be a (min, max) pair with 0 < min <= max")

    rng = random.Random(seed)
    verifiers = [(f"v{i + 1}", _random_location(rng, bounds)) for i in range(num_verifiers)]

    servers: list[SimServer] = []
    for _ in range(num_honest):
        loc = _covered_location(rng, bounds, verifiers)
        servers.append(SimServer(true_loc=loc, asserted_loc=loc))
    adversaries = [Adversary(ADVERSARY_FALSE_ASSERTION)] * num_false_assertion
    adversaries += [Adversary(ADVERSARY_RELAY, extra_ms=relay_extra_ms)] * num_relay
    for adversary in adversaries:
        asserted = _covered_location(rng, bounds, verifiers)
        true_loc = destination_point(asserted, rng.uniform(0.0, 360.0), rng.uniform(lo, hi))
        servers.append(SimServer(true_loc=true_loc, asserted_loc=asserted, adversary=adversary))

    return SimScenario(
        verifiers=verifiers,
        servers=servers,
        model=replace(model, seed=seed),
        cfg=cfg,
    )
