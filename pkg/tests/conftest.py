import numpy as np
import pytest

from faac.matrix import NORMAL, ObservationMatrix, WindowLabel
from flows.record import BACKGROUND, FlowRecord, Protocol, anomaly, stamp_to_epoch

T0 = stamp_to_epoch("20160301000000")


def make_flow(start_time=T0, duration=0.0, src_addr="10.0.0.1", dst_addr="172.16.0.1", src_port=40000,
              dst_port=80, protocol=Protocol.TCP, fwd_packets=1, fwd_bytes=60, rev_packets=0, rev_bytes=0,
              label=BACKGROUND):
    return FlowRecord(
        start_time=start_time,
        duration=duration,
        src_addr=src_addr,
        dst_addr=dst_addr,
        src_port=src_port,
        dst_port=dst_port,
        protocol=protocol,
        fwd_packets=fwd_packets,
        fwd_bytes=fwd_bytes,
        rev_packets=rev_packets,
        rev_bytes=rev_bytes,
        label=label,
    )


def make_matrix(counts, names=None, labels=None, start=T0, window_length=60):
    counts = np.asarray(counts, dtype=float)
    n, p = counts.shape
    return ObservationMatrix(
        window_starts=start + window_length * np.arange(n),
        feature_names=tuple(names or (f"f{j}" for j in range(p))),
        counts=counts,
        window_labels=tuple(labels or [NORMAL] * n),
        window_length=window_length,
    )


def attack_label(*attacks):
    return WindowLabel.from_attacks(attacks)


def random_flows(rng, size, span=600):
    """Unidirectional flows among a few endpoints, so reverse pairs and shared windows are common."""
    hosts = ["10.0.0.1", "10.0.0.2", "172.16.0.9"]
    ports = [23, 80, 6667, 40000, 50001]
    flows = []
    for offset in np.sort(rng.integers(0, span, size)):
        a, b = rng.choice(len(hosts), 2, replace=False)
        flows.append(make_flow(
            start_time=T0 + int(offset),
            duration=float(rng.uniform(0, 10)),
            src_addr=hosts[a],
            dst_addr=hosts[b],
            src_port=int(rng.choice(ports)),
            dst_port=int(rng.choice(ports)),
            protocol=Protocol.UDP if rng.random() < 0.2 else Protocol.TCP,
            fwd_packets=int(rng.integers(1, 200)),
            fwd_bytes=int(rng.integers(40, 100000)),
            label=anomaly("DOS") if rng.random() < 0.1 else BACKGROUND,
        ))
    return flows


@pytest.fixture
def rng():
    return np.random.default_rng(20160301)


@pytest.fixture
def background_matrix(rng):
    """Correlated Poisson-like counts: 300 windows x 8 features."""
    base = rng.poisson(30, size=(300, 1))
    noise = rng.poisson(5, size=(300, 8))
    return make_matrix(base * np.array([1, 2, 1, 0, 1, 3, 0, 1]) + noise)


@pytest.fixture(scope="session")
def small_scenario():
    """Two calibration days and one test day with one episode of each labelled attack."""
    from synth.generator import ScenarioConfig, generate

    config = ScenarioConfig(
        name="small",
        seed=7,
        calibration_days=2,
        test_days=1,
        base_rate=20,
        attack_episodes=[
            {"attack_type": "DOS", "start": 36000, "duration": 900, "intensity": 2.0},
            {"attack_type": "SCAN11", "start": 50400, "duration": 600, "intensity": 0.5},
            {"attack_type": "NERISBOTNET", "start": 64800, "duration": 1800, "intensity": 0.3},
        ],
    )
    return generate(config)
