"""
Acquire -> infer -> emit pipeline at a fixed frame rate.

The queue between acquisition and inference is bounded; when a new frame
arrives and the queue is full, the oldest waiting frame is dropped and
counted, so acquisition never blocks.

Two clocks:
    virtual  discrete-event simulation with a given per-frame service time;
             fully deterministic, used by tests and the field simulator
    wall     real threads, real sleeps and measured inference latency
"""

import logging
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, Iterable, List, Optional, Union

import numpy as np

from metrics import latency_stats
from models import ClassPrediction, ClockMode, PipelineStats

logger = logging.getLogger(__name__)

Sink = Callable[["FramePacket", ClassPrediction, float], None]
ServiceTime = Union[float, Callable[["FramePacket"], float], None]


@dataclass
class FramePacket:
    """One acquired frame and its scheduled arrival time in seconds."""
    index: int
    t: float
    image: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)


def _predict(classifier: Any, packet: "FramePacket") -> ClassPrediction:
    if hasattr(classifier, "predict_packet"):
        return classifier.predict_packet(packet)
    if hasattr(classifier, "predict"):
        return classifier.predict(packet.image)
    return classifier(packet.image)


def _service_ms(service_time_ms: ServiceTime, packet: FramePacket, prediction: ClassPrediction) -> float:
    if service_time_ms is None:
        return prediction.latency_ms
    if callable(service_time_ms):
        return float(service_time_ms(packet))
    return float(service_time_ms)


def run_pipeline(
    source: Iterable[np.ndarray],
    classifier: Any,
    sink: Optional[Sink] = None,
    fps: float = 10.0,
    clock: ClockMode = ClockMode.VIRTUAL,
    queue_size: int = 1,
    service_time_ms: ServiceTime = None,
) -> PipelineStats:
    """
    Feed frames from `source` at `fps` through `classifier` into `sink`.

    Args:
        source: frames (or FramePackets); exhaustion shuts the pipeline down
        classifier: object with predict(image) / predict_packet(packet), or a callable
        sink: called as sink(packet, prediction, t_done) in completion order
        service_time_ms: virtual clock only; fixed milliseconds or a function of
            the packet; None uses the latency the classifier reports

    Returns:
        PipelineStats with frames in/out/dropped and the inference latency distribution.
    """
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    if queue_size < 1:
        raise ValueError("queue_size must be at least 1")
    period = 1.0 / fps
    packets = (
        item if isinstance(item, FramePacket) else FramePacket(index=i, t=i * period, image=item)
        for i, item in enumerate(source)
    )
    if ClockMode(clock) == ClockMode.VIRTUAL:
        stats = _run_virtual(packets, classifier, sink, queue_size, service_time_ms)
    else:
        stats = _run_wall(packets, classifier, sink, period, queue_size)
    logger.info(
        f"✅ Pipeline ({ClockMode(clock).value}): {stats.frames_in} in, {stats.frames_out} out, "
        f"{stats.dropped} dropped ({stats.drop_rate:.1%})"
    )
    return stats


def _run_virtual(packets: Iterable[FramePacket], classifier: Any, sink: Optional[Sink],
                 queue_size: int, service_time_ms: ServiceTime) -> PipelineStats:
    waiting: Deque[FramePacket] = deque()
    latencies: List[float] = []
    frames_in = frames_out = dropped = 0
    busy: Optional[tuple] = None  # (packet, prediction, t_done)

    def start(packet: FramePacket, t_start: float) -> tuple:
        prediction = _predict(classifier, packet)
        ms = _service_ms(service_time_ms, packet, prediction)
        latencies.append(ms)
        return packet, prediction, t_start + ms / 1000.0

    def complete_until(t_now: float) -> None:
        nonlocal busy, frames_out
        # completions at the same instant as an arrival happen first
        while busy is not None and busy[2] <= t_now:
            packet, prediction, t_done = busy
            if sink:
                sink(packet, prediction, t_done)
            frames_out += 1
            busy = start(waiting.popleft(), t_done) if waiting else None

    for packet in packets:
        frames_in += 1
        complete_until(packet.t)
        if busy is None:
            busy = start(packet, packet.t)
            continue
        if len(waiting) >= queue_size:
            waiting.popleft()
            dropped += 1
        waiting.append(packet)
    complete_until(float("inf"))

    return PipelineStats(
        frames_in=frames_in, frames_out=frames_out, dropped=dropped,
        latency_ms=latency_stats(latencies) if latencies else None,
    )


_STOP = object()


def _run_wall(packets: Iterable[FramePacket], classifier: Any, sink: Optional[Sink],
              period: float, queue_size: int) -> PipelineStats:
    inbox: "queue.Queue" = queue.Queue(maxsize=queue_size)
    outbox: "queue.Queue" = queue.Queue(maxsize=8)
    lock = threading.Lock()
    counters = {"in": 0, "out": 0, "dropped": 0}
    latencies: List[float] = []
    errors: List[BaseException] = []
    t0 = time.perf_counter()

    def acquire() -> None:
        try:
            for packet in packets:
                delay = t0 + packet.t - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                with lock:
                    counters["in"] += 1
                    while True:
                        try:
                            inbox.put_nowait(packet)
                            break
                        except queue.Full:
                            try:
                                inbox.get_nowait()
                                counters["dropped"] += 1
                            except queue.Empty:
                                pass
        except BaseException as e:  # surfaced after join
            errors.append(e)
        finally:
            inbox.put(_STOP)

    def infer() -> None:
        try:
            while True:
                packet = inbox.get()
                if packet is _STOP:
                    break
                started = time.perf_counter()
                prediction = _predict(classifier, packet)
                latencies.append((time.perf_counter() - started) * 1000.0)
                outbox.put((packet, prediction, time.perf_counter() - t0))
        except BaseException as e:
            errors.append(e)
            # keep draining so acquire can finish
            while inbox.get() is not _STOP:
                pass
        finally:
            outbox.put(_STOP)

    def emit() -> None:
        while True:
            item = outbox.get()
            if item is _STOP:
                break
            if sink:
                try:
                    sink(*item)
                except BaseException as e:
                    errors.append(e)
            counters["out"] += 1

    threads = [threading.Thread(target=fn, name=f"pipeline-{fn.__name__}", daemon=True)
               for fn in (acquire, infer, emit)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return PipelineStats(
        frames_in=counters["in"], frames_out=counters["out"], dropped=counters["dropped"],
        latency_ms=latency_stats(latencies) if latencies else None,
    )
