"""Synthetic CAN traffic with injected DoS / fuzzing attacks.

This is a test fixture, not a vehicle model: a handful of periodic IDs with
simple payload generators, merged by timestamp, plus attack frames built the
way the Car Hacking dataset builds them (DoS floods ID 0x000 with a zero
payload; fuzzing sends uniform random IDs and payloads).

Timestamps live on an integer microsecond grid so logs written with six
decimals read back bit-identically.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .can_ingest import MAX_CAN_ID, CanFrame, Label, format_log_record

US = 1_000_000


class WindowOutOfRange(ValueError):
    pass


class AttackKind(str, enum.Enum):
    DOS = "dos"
    FUZZY = "fuzzy"


@dataclass(frozen=True)
class IdSpec:
    can_id: int
    period_ms: float
    dlc: int = 8
    payload: str = "constant"  # constant | counter | noise
    base: tuple[int, ...] = (0,) * 8
    # byte driven by the counter / noise generator
    byte: int = 0
    noise: int = 2

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_CAN_ID:
            raise ValueError(f"id {self.can_id:#x} exceeds 0x7FF")
        if self.period_ms <= 0:
            raise ValueError("period must be positive")
        if self.payload not in ("constant", "counter", "noise"):
            raise ValueError(f"unknown payload generator {self.payload!r}")
        if not 0 <= self.dlc <= 8 or len(self.base) != 8:
            raise ValueError("dlc must be 0..8 and base must hold 8 bytes")


def _spec(can_id, period, dlc, payload, base, byte=0):
    return IdSpec(can_id, period, dlc, payload, tuple(base), byte)


DEFAULT_IDS = (
    _spec(0x130, 10, 8, "counter", [0x00, 0x80, 0x10, 0xFF, 0x00, 0xFF, 0x00, 0x00], 6),
    _spec(0x140, 10, 8, "constant", [0x00, 0x00, 0x00, 0x00, 0x08, 0x2A, 0x00, 0x00]),
    _spec(0x153, 10, 8, "noise", [0x00, 0x21, 0x10, 0xFF, 0x00, 0xFF, 0x00, 0x00], 1),
    _spec(0x18F, 10, 8, "constant", [0xFE, 0x3B, 0x00, 0x00, 0x00, 0x3C, 0x00, 0x00]),
    _spec(0x1F1, 20, 8, "noise", [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], 3),
    _spec(0x260, 20, 8, "counter", [0x07, 0x20, 0x24, 0x68, 0x77, 0x00, 0x00, 0x00], 7),
    _spec(0x2A0, 20, 8, "constant", [0x64, 0x00, 0x9A, 0x1D, 0x97, 0x02, 0xBD, 0x00]),
    _spec(0x2C0, 20, 8, "noise", [0x14, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], 0),
    _spec(0x316, 10, 8, "noise", [0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F], 2),
    _spec(0x329, 10, 8, "constant", [0x40, 0xBB, 0x7F, 0x14, 0x11, 0x20, 0x00, 0x14]),
    _spec(0x350, 20, 8, "constant", [0x05, 0x20, 0x34, 0x68, 0x77, 0x00, 0x00, 0x71]),
    _spec(0x370, 50, 8, "constant", [0x00, 0x20, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]),
    _spec(0x43F, 10, 8, "noise", [0x00, 0x40, 0x60, 0xFF, 0x5A, 0x6E, 0x08, 0x00], 4),
    _spec(0x440, 10, 8, "constant", [0xFF, 0x00, 0x00, 0x00, 0xFF, 0x6E, 0x08, 0x00]),
    _spec(0x4B0, 20, 8, "counter", [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], 0),
    _spec(0x545, 10, 8, "constant", [0xD8, 0x00, 0x00, 0x8B, 0x00, 0x00, 0x00, 0x00]),
    _spec(0x5A0, 100, 8, "constant", [0x61, 0x38, 0x00, 0xC0, 0x00, 0x00, 0x00, 0x00]),
    _spec(0x690, 100, 8, "counter", [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], 0),
    _spec(0x2B0, 10, 5, "noise", [0xFF, 0xFF, 0x00, 0x07, 0xA1, 0x00, 0x00, 0x00], 4),
    _spec(0x4F1, 100, 4, "constant", [0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00]),
)


@dataclass
class TrafficProfile:
    ids: tuple[IdSpec, ...] = DEFAULT_IDS
    duration: float = 20.0  # seconds
    # max deviation from the nominal slot is jitter/2 of the period
    jitter: float = 0.01
    base_time: float = 0.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 <= self.jitter <= 0.01:
            raise ValueError("jitter must be within 1% of the period")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ids"] = [dict(asdict(s), base=list(s.base)) for s in self.ids]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrafficProfile:
        d = dict(d)
        if "ids" in d:
            d["ids"] = tuple(IdSpec(**dict(s, base=tuple(s.get("base", (0,) * 8)))) for s in d["ids"])
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> TrafficProfile:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    rate: float  # messages per second
    start: float
    stop: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.rate <= 0:
            raise ValueError("injection rate must be positive")
        if not self.start < self.stop:
            raise ValueError("attack start must precede stop")


def _payload(spec: IdSpec, k: int, rng: np.random.Generator) -> tuple[int, ...]:
    data = list(spec.base)
    if spec.payload == "counter":
        data[spec.byte] = (spec.base[spec.byte] + k) % 256
    elif spec.payload == "noise":
        delta = int(rng.integers(-spec.noise, spec.noise + 1))
        data[spec.byte] = min(max(spec.base[spec.byte] + delta, 0), 255)
    for i in range(spec.dlc, 8):
        data[i] = 0
    return tuple(data)


def _sort_key(frame: CanFrame):
    # simultaneous frames resolve like bus arbitration: lower id first
    return frame.timestamp, frame.can_id, int(frame.label)


def generate_normal(profile: TrafficProfile | None = None, seed: int = 0) -> list[CanFrame]:
    """All-Normal periodic traffic, sorted by timestamp."""
    profile = profile or TrafficProfile()
    rng = np.random.default_rng(seed)
    duration_us = round(profile.duration * US)
    base_us = round(profile.base_time * US)
    frames = []
    for spec in profile.ids:
        period_us = spec.period_ms * 1000.0
        half_jit = profile.jitter * period_us / 2
        phase = rng.uniform(half_jit, period_us - half_jit)
        for k in range(int(duration_us // period_us)):
            offset = rng.uniform(-half_jit, half_jit) if half_jit else 0.0
            t_us = base_us + int(round(phase + k * period_us + offset))
            frames.append(CanFrame(t_us / US, spec.can_id, spec.dlc, _payload(spec, k, rng)))
    frames.sort(key=_sort_key)
    return frames


def attack_frames(spec: AttackSpec, base_time: float = 0.0) -> list[CanFrame]:
    rng = np.random.default_rng(spec.seed)
    base_us = round(base_time * US)
    start_us, stop_us = spec.start * US, spec.stop * US
    step = US / spec.rate
    out = []
    i = 1
    while True:
        t = start_us + i * step
        if t >= stop_us:
            break
        t_us = base_us + int(round(t))
        if spec.kind == AttackKind.DOS:
            out.append(CanFrame(t_us / US, 0x000, 8, (0,) * 8, Label.ATTACK))
        else:
            can_id = int(rng.integers(0, MAX_CAN_ID + 1))
            data = tuple(int(b) for b in rng.integers(0, 256, size=8))
            out.append(CanFrame(t_us / US, can_id, 8, data, Label.ATTACK))
        i += 1
    return out


def inject(stream: list[CanFrame], spec: AttackSpec, duration: float | None = None,
           base_time: float = 0.0) -> list[CanFrame]:
    """Merge attack frames into ``stream`` in timestamp order.

    ``duration`` bounds the attack interval; it defaults to the stream's last
    timestamp relative to ``base_time``.
    """
    if duration is None:
        duration = (stream[-1].timestamp - base_time) if stream else 0.0
    if spec.start < 0 or spec.stop > duration:
        raise WindowOutOfRange(
            f"attack interval [{spec.start}, {spec.stop}] outside stream duration {duration}")
    extra = attack_frames(spec, base_time)
    if not extra:
        return list(stream)
    return sorted(list(stream) + extra, key=_sort_key)


# attack bursts as fractions of the capture duration
DEFAULT_BURSTS = ((0.10, 0.25), (0.45, 0.60), (0.75, 0.90))
DEFAULT_RATES = {AttackKind.DOS: 2000.0, AttackKind.FUZZY: 1000.0}


def default_intervals(duration: float) -> tuple[tuple[float, float], ...]:
    return tuple((round(a * duration, 6), round(b * duration, 6)) for a, b in DEFAULT_BURSTS)


@dataclass
class SynthConfig:
    profile: TrafficProfile = field(default_factory=TrafficProfile)
    kind: AttackKind | None = AttackKind.DOS
    # None picks the per-kind default rate / bursts scaled to the duration
    rate: float | None = None
    intervals: tuple[tuple[float, float], ...] | None = None
    seed: int = 0


def synthesize(config: SynthConfig) -> list[CanFrame]:
    """Normal traffic with one attack burst per interval, all seeded from ``config.seed``."""
    profile = config.profile
    frames = generate_normal(profile, config.seed)
    if config.kind is None:
        return frames
    kind = AttackKind(config.kind)
    rate = config.rate if config.rate is not None else DEFAULT_RATES[kind]
    intervals = config.intervals if config.intervals is not None else default_intervals(profile.duration)
    for i, (start, stop) in enumerate(intervals):
        spec = AttackSpec(kind, rate, start, stop, seed=config.seed * 7919 + i + 1)
        frames = inject(frames, spec, profile.duration, profile.base_time)
    return frames


def write_log(stream, path: str | Path) -> int:
    """Write frames in dataset CSV layout; returns the number of records."""
    n = 0
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for frame in stream:
            fh.write(format_log_record(frame))
            fh.write("\n")
            n += 1
    return n
