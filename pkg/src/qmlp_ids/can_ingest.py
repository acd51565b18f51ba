"""CAN log ingestion: record parsing, FIFO windowing and feature encoding.

Log records use the Car Hacking dataset CSV layout::

    timestamp,ID,DLC,DATA[0],...,DATA[DLC-1],FLAG

where ``ID`` and the data bytes are hex and ``FLAG`` is ``R`` (normal) or
``T`` (injected).
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAX_CAN_ID = 0x7FF
MAX_DLC = 8
FEATURES_PER_FRAME = 10
DEFAULT_WINDOW = 4
INPUT_BITS = 8
INPUT_SCALE = 1.0 / 255.0


class Label(enum.IntEnum):
    NORMAL = 0
    ATTACK = 1


class MalformedRecord(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class CanFrame:
    timestamp: float
    can_id: int
    dlc: int
    data: tuple[int, ...]
    label: Label = Label.NORMAL

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_CAN_ID:
            raise ValueError(f"CAN id {self.can_id:#x} outside 11-bit range")
        if not 0 <= self.dlc <= MAX_DLC:
            raise ValueError(f"dlc {self.dlc} outside 0..8")
        if len(self.data) != MAX_DLC:
            raise ValueError("data must hold exactly 8 bytes")
        if any(not 0 <= b <= 0xFF for b in self.data):
            raise ValueError("data bytes must be in 0..255")
        if any(self.data[self.dlc:]):
            raise ValueError("bytes beyond dlc must be zero")


def parse_log_record(line: str, lineno: int | None = None) -> CanFrame:
    """Parse one dataset record into a validated :class:`CanFrame`."""
    fields = [f.strip() for f in line.strip().split(",")]
    if len(fields) < 4:
        raise MalformedRecord(f"too few fields ({len(fields)})", lineno)
    try:
        timestamp = float(fields[0])
    except ValueError:
        raise MalformedRecord(f"bad timestamp {fields[0]!r}", lineno) from None
    try:
        can_id = int(fields[1], 16)
        dlc = int(fields[2])
    except ValueError:
        raise MalformedRecord(f"bad id/dlc {fields[1]!r},{fields[2]!r}", lineno) from None
    if not 0 <= dlc <= MAX_DLC:
        raise MalformedRecord(f"dlc {dlc} > 8", lineno)
    if not 0 <= can_id <= MAX_CAN_ID:
        raise MalformedRecord(f"id {fields[1]} exceeds 0x7FF", lineno)
    if len(fields) != dlc + 4:
        raise MalformedRecord(
            f"expected {dlc + 4} fields for dlc={dlc}, got {len(fields)}", lineno
        )
    try:
        payload = [int(b, 16) for b in fields[3:3 + dlc]]
    except ValueError:
        raise MalformedRecord("non-hex data byte", lineno) from None
    if any(b > 0xFF for b in payload):
        raise MalformedRecord("data byte exceeds 0xFF", lineno)
    flag = fields[-1].upper()
    if flag == "R":
        label = Label.NORMAL
    elif flag == "T":
        label = Label.ATTACK
    else:
        raise MalformedRecord(f"unknown flag {fields[-1]!r}", lineno)
    data = tuple(payload) + (0,) * (MAX_DLC - dlc)
    return CanFrame(timestamp, can_id, dlc, data, label)


def format_log_record(frame: CanFrame) -> str:
    """Serialise a frame in dataset layout (inverse of :func:`parse_log_record`)."""
    payload = ",".join(f"{b:02X}" for b in frame.data[:frame.dlc])
    flag = "T" if frame.label == Label.ATTACK else "R"
    parts = [f"{frame.timestamp:.6f}", f"{frame.can_id:04X}", str(frame.dlc)]
    if payload:
        parts.append(payload)
    parts.append(flag)
    return ",".join(parts)


@dataclass
class DatasetStats:
    kind: str | None = None
    normal: int = 0
    attack: int = 0
    malformed: int = 0

    @property
    def counts(self) -> tuple[int, int]:
        return self.normal, self.attack


def iter_log(
    path: str | Path,
    *,
    strict: bool = False,
    stats: DatasetStats | None = None,
) -> Iterator[CanFrame]:
    """Lazily yield frames from a log file in file order.

    Malformed records are logged and skipped, or raised when ``strict``.
    Blank lines are ignored.
    """
    stats = stats if stats is not None else DatasetStats()
    with open(path, encoding="ascii", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                frame = parse_log_record(line, lineno)
            except MalformedRecord as exc:
                if strict:
                    raise
                stats.malformed += 1
                log.warning("skipping malformed record: %s", exc)
                continue
            if frame.label == Label.ATTACK:
                stats.attack += 1
            else:
                stats.normal += 1
            yield frame


def read_dataset(
    path: str | Path, kind: str | None = None, *, strict: bool = False
) -> tuple[list[CanFrame], DatasetStats]:
    """Read a whole log. ``kind`` ("dos"/"fuzzy") is recorded in the stats."""
    stats = DatasetStats(kind=kind)
    frames = list(iter_log(path, strict=strict, stats=stats))
    return frames, stats


@dataclass(frozen=True)
class FrameWindow:
    frames: tuple[CanFrame, ...]

    @property
    def label(self) -> Label:
        if any(f.label == Label.ATTACK for f in self.frames):
            return Label.ATTACK
        return Label.NORMAL

    def __len__(self):
        return len(self.frames)


class WindowBuffer:
    """Fixed-capacity FIFO; emits the latest ``W`` frames once full (stride 1)."""

    def __init__(self, window: int = DEFAULT_WINDOW):
        if window < 1:
            raise ValueError("window length must be >= 1")
        self.window = window
        self._frames: deque[CanFrame] = deque(maxlen=window)

    def push(self, frame: CanFrame) -> FrameWindow | None:
        self._frames.append(frame)
        if len(self._frames) < self.window:
            return None
        return FrameWindow(tuple(self._frames))


def sliding_windows(frames: Iterable[CanFrame], window: int = DEFAULT_WINDOW) -> Iterator[FrameWindow]:
    buf = WindowBuffer(window)
    for frame in frames:
        win = buf.push(frame)
        if win is not None:
            yield win


# per-frame raw fields [id, dlc, data0..data7] are divided by these to land in [0, 1]
_NORMALISERS = np.array([MAX_CAN_ID, MAX_DLC] + [255] * 8, dtype=np.float64)


def _raw_fields(frames) -> np.ndarray:
    return np.array([(f.can_id, f.dlc, *f.data) for f in frames], dtype=np.float64).reshape(
        -1, FEATURES_PER_FRAME)


def _encode(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values = raw / _NORMALISERS
    # 8-bit unsigned input quantiser, scale 1/255, zero-point 0, round half to even
    codes = np.clip(np.rint(values / INPUT_SCALE), 0, 255).astype(np.int64)
    return values, codes


def frame_features(frame: CanFrame) -> list[float]:
    """Ten floats in [0, 1]: id/2047, dlc/8, data[i]/255."""
    return _encode(_raw_fields([frame]))[0].ravel().tolist()


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray = field(repr=False)  # float64 in [0, 1]
    codes: np.ndarray = field(repr=False)  # int64 in [0, 255]


def featurize(window: FrameWindow) -> FeatureVector:
    values, codes = _encode(_raw_fields(window.frames))
    return FeatureVector(values.ravel(), codes.ravel())


def window_dataset(
    frames: Iterable[CanFrame], window: int = DEFAULT_WINDOW
) -> tuple[np.ndarray, np.ndarray]:
    """Encode a whole stream: ``(codes[n_windows, W*10], labels[n_windows])``."""
    frames = list(frames)
    n = len(frames) - window + 1
    n_feat = window * FEATURES_PER_FRAME
    if n <= 0:
        return np.zeros((0, n_feat), dtype=np.int64), np.zeros(0, dtype=np.int64)
    per_frame = _encode(_raw_fields(frames))[1]
    labels = np.array([int(f.label) for f in frames], dtype=np.int64)
    codes = np.concatenate([per_frame[i:i + n] for i in range(window)], axis=1)
    win_labels = np.zeros(n, dtype=np.int64)
    for i in range(window):
        win_labels |= labels[i:i + n]
    return codes, win_labels


def split_chronological(frames: list[CanFrame], train_fraction: float = 0.7):
    """Split one stream in time order; windows never straddle the cut."""
    cut = int(len(frames) * train_fraction)
    return frames[:cut], frames[cut:]
