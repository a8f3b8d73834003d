import numpy as np
import pytest

from engine import prediction_from_probs
from models import ClockMode
from pipeline import FramePacket, run_pipeline


@pytest.fixture
def frames():
    return [np.zeros((4, 4, 3), dtype=np.uint8) for _ in range(300)]


@pytest.fixture
def stub(taxonomy):
    prediction = prediction_from_probs(np.eye(16)[3], taxonomy)
    return lambda image: prediction


def test_slow_inference_drops_oldest_frames(frames, stub):
    stats = run_pipeline(frames, stub, fps=10, service_time_ms=250.0)
    assert stats.frames_in == 300
    assert stats.frames_in == stats.frames_out + stats.dropped
    assert abs(stats.drop_rate - 0.6) < 0.02


def test_fast_inference_drops_nothing(frames, stub):
    stats = run_pipeline(frames, stub, fps=10, service_time_ms=10.0)
    assert stats.dropped == 0
    assert stats.frames_out == 300
    assert stats.latency_ms.mean == pytest.approx(10.0)


def test_reported_latency_is_the_default_service_time(frames, taxonomy):
    slow = prediction_from_probs(np.eye(16)[0], taxonomy, latency_ms=250.0)
    stats = run_pipeline(frames, lambda image: slow, fps=10)
    assert abs(stats.drop_rate - 0.6) < 0.02


def test_sink_sees_frames_in_completion_order(frames, stub):
    seen = []
    run_pipeline(frames, stub, sink=lambda packet, prediction, t: seen.append((packet.index, t)),
                 fps=10, service_time_ms=150.0)
    indices = [i for i, _ in seen]
    times = [t for _, t in seen]
    assert indices == sorted(indices)
    assert times == sorted(times)
    assert indices[0] == 0 and indices[-1] == 299


def test_packets_keep_their_metadata(taxonomy):
    class EchoClassifier:
        def predict_packet(self, packet):
            return prediction_from_probs(np.eye(16)[packet.meta["truth"]], taxonomy)

    packets = [FramePacket(index=i, t=i * 0.1, image=np.zeros((2, 2, 3), np.uint8), meta={"truth": i % 16})
               for i in range(20)]
    out = []
    run_pipeline(packets, EchoClassifier(), sink=lambda p, pred, t: out.append(pred.class_id == p.meta["truth"]))
    assert len(out) == 20 and all(out)


def test_wall_clock_accounting(stub):
    images = [np.zeros((4, 4, 3), dtype=np.uint8) for _ in range(20)]
    stats = run_pipeline(images, stub, fps=200, clock=ClockMode.WALL)
    assert stats.frames_in == 20
    assert stats.frames_out + stats.dropped == 20


def test_wall_clock_surfaces_classifier_errors():
    def broken(image):
        raise RuntimeError("camera unplugged")

    with pytest.raises(RuntimeError):
        run_pipeline([np.zeros((2, 2, 3), np.uint8)] * 3, broken, fps=100, clock=ClockMode.WALL)


def test_invalid_settings(stub):
    with pytest.raises(ValueError):
        run_pipeline([], stub, fps=0)
    with pytest.raises(ValueError):
        run_pipeline([], stub, queue_size=0)
