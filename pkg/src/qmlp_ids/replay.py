"""Two-stage streaming replay: an ingestion thread feeds a bounded FIFO that an
inference thread drains, mimicking an ECU handing frames to a coupled IDS.

The producer blocks when the queue is full; each blocking put is counted as a
stall. Frames are never dropped.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

from .can_ingest import DEFAULT_WINDOW, CanFrame, WindowBuffer, featurize

_SENTINEL = None


@dataclass(frozen=True)
class Verdict:
    index: int  # position of the triggering frame in the stream
    timestamp: float
    can_id: int
    label: int  # ground truth of the window
    verdict: int
    latency_us: float  # enqueue -> verdict


@dataclass
class ReplayResult:
    verdicts: list[Verdict] = field(default_factory=list)
    frames: int = 0
    stalls: int = 0
    max_depth: int = 0
    wall_time_s: float = 0.0

    @property
    def predictions(self) -> list[int]:
        return [v.verdict for v in self.verdicts]


def replay(int_model, frames: list[CanFrame], window: int = DEFAULT_WINDOW,
           speed: float = 0.0, queue_depth: int = 64) -> ReplayResult:
    """Replay ``frames`` through the pipeline.

    ``speed`` scales the recorded inter-arrival gaps (2.0 = twice real time);
    0 replays as fast as possible.
    """
    if queue_depth < 1:
        raise ValueError("queue depth must be >= 1")
    if speed < 0:
        raise ValueError("speed factor must be >= 0")
    q: queue.Queue = queue.Queue(maxsize=queue_depth)
    result = ReplayResult(frames=len(frames))
    errors: list[BaseException] = []

    def produce():
        t_wall0 = time.perf_counter()
        t_log0 = frames[0].timestamp if frames else 0.0
        for i, frame in enumerate(frames):
            if speed > 0:
                delay = t_wall0 + (frame.timestamp - t_log0) / speed - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            item = (time.perf_counter_ns(), i, frame)
            try:
                q.put_nowait(item)
            except queue.Full:
                result.stalls += 1
                q.put(item)
            result.max_depth = max(result.max_depth, q.qsize())
        q.put(_SENTINEL)

    def consume():
        buf = WindowBuffer(window)
        try:
            while True:
                item = q.get()
                if item is _SENTINEL:
                    return
                t_in, i, frame = item
                win = buf.push(frame)
                if win is None:
                    continue
                cls, _ = int_model.infer(featurize(win).codes)
                latency = (time.perf_counter_ns() - t_in) / 1000.0
                result.verdicts.append(
                    Verdict(i, frame.timestamp, frame.can_id, int(win.label), cls, latency))
        except BaseException as exc:  # surface in the caller's context
            errors.append(exc)
            while q.get() is not _SENTINEL:
                pass

    start = time.perf_counter()
    consumer = threading.Thread(target=consume, name="ids-inference")
    producer = threading.Thread(target=produce, name="can-ingest")
    consumer.start()
    producer.start()
    producer.join()
    consumer.join()
    result.wall_time_s = time.perf_counter() - start
    if errors:
        raise errors[0]
    return result


def format_verdict_log(result: ReplayResult) -> str:
    lines = ["index,timestamp,can_id,label,verdict,latency_us"]
    for v in result.verdicts:
        lines.append(f"{v.index},{v.timestamp:.6f},{v.can_id:04X},{v.label},{v.verdict},{v.latency_us:.1f}")
    return "\n".join(lines) + "\n"
