"""Deterministic synthetic labelled flows: diurnal background, attack episodes and a ground-truth manifest."""
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from common.errors import ConfigurationError
from common.settings import load_package_config, read_json, validate, write_json
from flows.record import (
    BACKGROUND, AttackType, FlowRecord, Protocol, anomaly, epoch_to_stamp, stamp_to_epoch, write_flow_csv,
)

logger = logging.getLogger(__name__)

CONFIG = load_package_config(os.path.dirname(__file__))
DEFAULTS = CONFIG["generator"]
DAY = 86400
SCAN_SOURCES = {AttackType.SCAN11: 1, AttackType.SCAN44: 4}

# stream keys: every traffic component draws from its own child of the scenario seed
BACKGROUND_STREAM = 0
EPISODE_STREAM = 1
CONTAMINATION_STREAM = 2
CALIBRATION_ANOMALY_STREAM = 3


class Episode(BaseModel):
    """An attack episode; start is in seconds from the start of its range."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    attack_type: AttackType
    start: int = Field(ge=0)
    duration: int = Field(gt=0)
    intensity: float = Field(gt=0)
    labelled: bool = True
    ports: tuple[int, ...] | None = None

    @field_validator("attack_type", mode="before")
    @classmethod
    def _upper(cls, value):
        return value.upper() if isinstance(value, str) else value

    @field_validator("ports")
    @classmethod
    def _check_ports(cls, ports):
        if ports is not None and (not ports or any(not 1 <= p <= 65535 for p in ports)):
            raise ValueError("episode ports must be a non-empty list of ports in 1-65535")
        return ports

    def port_list(self):
        if self.ports is not None:
            return np.asarray(self.ports, dtype=np.int64)
        if self.attack_type in SCAN_SOURCES:
            low, high = DEFAULTS["scan_ports"]
            return np.arange(low, high + 1, dtype=np.int64)
        return np.asarray(DEFAULTS["attack_ports"][self.attack_type.value], dtype=np.int64)


class Contamination(BaseModel):
    """Unlabelled service traffic injected inside calibration."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    port: int = Field(default=6667, ge=1, le=65535)
    start: int = Field(ge=0)
    duration: int = Field(gt=0)
    intensity: float = Field(gt=0)


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "custom"
    seed: int = Field(default=0, ge=0)
    start: str = DEFAULTS["start"]
    calibration_days: int = Field(default=7, ge=1)
    test_days: int = Field(default=3, ge=1)
    base_rate: float = Field(default=60.0, gt=0)
    diurnal_amplitude: float = Field(default=0.5, ge=0, lt=1)
    protocol_mix: dict[int, float] = Field(default_factory=lambda: dict(DEFAULTS["protocol_mix"]))
    reply_ratio: dict[str, float] = Field(default_factory=lambda: dict(DEFAULTS["reply_ratio"]))
    attack_episodes: tuple[Episode, ...] = ()
    contamination: Contamination | None = None
    calibration_anomalies: tuple[Episode, ...] = ()
    telnet_echo: bool = False
    echo_ratio: float = Field(default=DEFAULTS["echo_ratio"], ge=0, le=1)

    @field_validator("start")
    @classmethod
    def _check_start(cls, value):
        epoch = stamp_to_epoch(value)
        if epoch % DAY:
            raise ValueError("scenario start must be a midnight stamp")
        return value

    @field_validator("protocol_mix")
    @classmethod
    def _check_mix(cls, mix):
        if not mix:
            raise ValueError("protocol_mix is empty")
        for port, fraction in mix.items():
            if not 0 <= port <= 65535 or fraction < 0:
                raise ValueError(f"invalid protocol_mix entry {port}: {fraction}")
        if abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"protocol_mix fractions sum to {sum(mix.values())}, not 1")
        return mix

    @field_validator("reply_ratio")
    @classmethod
    def _check_replies(cls, ratios):
        if "default" not in ratios:
            raise ValueError("reply_ratio needs a 'default' entry")
        if any(not 0 <= r <= 1 for r in ratios.values()):
            raise ValueError("reply ratios must lie in [0, 1]")
        return ratios

    @model_validator(mode="after")
    def _check_ranges(self):
        for episode in self.attack_episodes:
            if episode.start + episode.duration > self.test_days * DAY:
                raise ValueError(f"{episode.attack_type.value} episode at {episode.start} s leaves the test range")
        for episode in self.calibration_anomalies:
            if episode.start + episode.duration > self.calibration_days * DAY:
                raise ValueError(f"calibration anomaly at {episode.start} s leaves the calibration range")
        if self.contamination is not None:
            if self.contamination.start + self.contamination.duration > self.calibration_days * DAY:
                raise ValueError("contamination must lie inside the calibration range")
        return self

    @property
    def calibration_start(self):
        return stamp_to_epoch(self.start)

    @property
    def test_start(self):
        return self.calibration_start + self.calibration_days * DAY

    @property
    def test_end(self):
        return self.test_start + self.test_days * DAY

    def expected_rate(self, epochs):
        """Background conversations per minute at the given instants."""
        time_of_day = np.asarray(epochs, dtype=float) % DAY
        return self.base_rate * (1.0 - self.diurnal_amplitude * np.cos(2.0 * np.pi * time_of_day / DAY))

    def reply_fraction(self, ports):
        default = self.reply_ratio["default"]
        return np.array([self.reply_ratio.get(str(int(p)), default) for p in ports], dtype=float)

    def expected_flow_rate(self, epochs):
        """Background flows per minute (requests and replies) at the given instants."""
        ports = np.asarray(list(self.protocol_mix), dtype=np.int64)
        fractions = np.asarray(list(self.protocol_mix.values()), dtype=float)
        return self.expected_rate(epochs) * (1.0 + float(fractions @ self.reply_fraction(ports)))


def load_scenario(name_or_path, seed=None):
    """A shipped scenario by name, or a scenario JSON file."""
    if name_or_path in CONFIG["scenarios"]:
        payload = dict(CONFIG["scenarios"][name_or_path], name=name_or_path)
    elif os.path.exists(str(name_or_path)):
        payload = read_json(name_or_path)
    else:
        raise ConfigurationError(
            f"unknown scenario {name_or_path!r}; shipped scenarios: {sorted(CONFIG['scenarios'])}")
    if seed is not None:
        payload = dict(payload, seed=seed)
    return validate(ScenarioConfig, payload, f"scenario {name_or_path}")


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _poisson_starts(rng, begin, end, rate):
    """Per-minute Poisson arrivals in [begin, end); rate is a constant or a function of the minute start."""
    minutes = np.arange(begin // 60, -(-end // 60), dtype=np.int64) * 60
    rates = rate(minutes) if callable(rate) else np.full(len(minutes), float(rate))
    counts = rng.poisson(rates)
    # offsets stop at 58 s so a reply one second later stays in the same minute
    starts = np.repeat(minutes, counts) + rng.integers(0, 59, size=int(counts.sum()))
    return starts[(starts >= begin) & (starts < end)]


def _address_table(prefix, count):
    return np.array([f"{prefix}.{i // 250}.{i % 250 + 1}" for i in range(count)], dtype=object)


def _protocols(ports):
    udp = np.isin(ports, DEFAULTS["udp_ports"])
    return np.where(ports == 0, Protocol.ICMP.value, np.where(udp, Protocol.UDP.value, Protocol.TCP.value))


def _frame(start, src_addr, dst_addr, src_port, dst_port, protocol, packets, nbytes, duration):
    return pd.DataFrame({
        "start_time": np.asarray(start, dtype=np.int64),
        "duration": np.asarray(duration, dtype=float),
        "src_addr": np.asarray(src_addr, dtype=object),
        "dst_addr": np.asarray(dst_addr, dtype=object),
        "src_port": np.asarray(src_port, dtype=np.int64),
        "dst_port": np.asarray(dst_port, dtype=np.int64),
        "protocol": np.asarray(protocol, dtype=object),
        "fwd_packets": np.asarray(packets, dtype=np.int64),
        "fwd_bytes": np.asarray(nbytes, dtype=np.int64),
    })


def _conversations(rng, starts, clients, client_ports, servers, server_ports, answered, packets=(1, 0.3)):
    """Client requests and the answered subset's server replies one second later."""
    n = len(starts)
    low, p = packets
    protocol = _protocols(server_ports)
    request_packets = low - 1 + rng.geometric(p, n)
    request_bytes = request_packets * rng.integers(60, 1200, n)
    reply_packets = low - 1 + rng.geometric(p, n)
    reply_bytes = reply_packets * rng.integers(60, 1200, n)
    durations = np.round(rng.exponential(2.0, n), 3)
    requests = _frame(starts, clients, servers, client_ports, server_ports, protocol,
                      request_packets, request_bytes, durations)
    answered = np.asarray(answered, dtype=bool)
    replies = _frame(starts[answered] + 1, servers[answered], clients[answered], server_ports[answered],
                     client_ports[answered], protocol[answered], reply_packets[answered], reply_bytes[answered],
                     durations[answered])
    return pd.concat([requests, replies], ignore_index=True)


class _Generator:
    def __init__(self, config):
        self.config = config
        self.ports = np.asarray(list(config.protocol_mix), dtype=np.int64)
        self.fractions = np.asarray(list(config.protocol_mix.values()), dtype=float)
        self.clients = _address_table("10.0", DEFAULTS["n_clients"])
        self.servers_per_port = DEFAULTS["servers_per_port"]

    def server(self, port, index):
        port = int(port)
        return f"172.{16 + port // 4096}.{port // 16 % 256}.{port % 16 * 8 + int(index) + 1}"

    def servers(self, ports, indexes):
        return np.array([self.server(p, i) for p, i in zip(ports, indexes)], dtype=object)

    def client_ports(self, rng, server_ports):
        ports = rng.integers(1024, 65536, len(server_ports))
        return np.where(server_ports == 0, 0, ports)

    def background(self):
        config = self.config
        rng = _stream(config.seed, BACKGROUND_STREAM)
        starts = _poisson_starts(rng, config.calibration_start, config.test_end, config.expected_rate)
        n = len(starts)
        server_ports = rng.choice(self.ports, size=n, p=self.fractions)
        clients = self.clients[rng.integers(0, len(self.clients), n)]
        servers = self.servers(server_ports, rng.integers(0, self.servers_per_port, n))
        client_ports = self.client_ports(rng, server_ports)
        answered = rng.random(n) < config.reply_fraction(server_ports)
        return _conversations(rng, starts, clients, client_ports, servers, server_ports, answered)

    def attack(self, rng, episode, begin):
        rate = episode.intensity * self.config.base_rate
        starts = _poisson_starts(rng, begin, begin + episode.duration, rate)
        n = len(starts)
        ports = episode.port_list()
        kind = episode.attack_type
        if kind is AttackType.DOS:
            attackers = _address_table("203.0", 4)[rng.integers(0, 4, n)]
            dst_ports = rng.choice(ports, size=n)
            victims = self.servers(dst_ports, np.zeros(n, dtype=np.int64))
            packets = rng.integers(1, 3, n)
            return _frame(starts, attackers, victims, rng.integers(1024, 65536, n), dst_ports,
                          _protocols(dst_ports), packets, packets * rng.integers(40, 80, n), np.zeros(n))
        if kind in SCAN_SOURCES:
            pairs = SCAN_SOURCES[kind]
            which = rng.integers(0, pairs, n)
            sources = _address_table("198.18", pairs)[which]
            targets = _address_table("172.31", pairs)[which]
            dst_ports = ports[np.arange(n) % len(ports)]
            return _frame(starts, sources, targets, rng.integers(1024, 65536, n), dst_ports,
                          _protocols(dst_ports), np.ones(n), rng.integers(40, 61, n), np.zeros(n))
        if kind is AttackType.NERISBOTNET:
            return self.irc_like(rng, starts, "10.66", ports)
        # OTHER: spam towards the mail servers
        server_ports = rng.choice(ports, size=n)
        servers = self.servers(server_ports, rng.integers(0, self.servers_per_port, n))
        spammers = _address_table("203.1", 2)[rng.integers(0, 2, n)]
        answered = rng.random(n) < self.config.reply_fraction(server_ports)
        return _conversations(rng, starts, spammers, rng.integers(1024, 65536, n), servers, server_ports,
                              answered, packets=(5, 0.2))

    def irc_like(self, rng, starts, prefix, ports):
        n = len(starts)
        low, high = DEFAULTS["bot_port_range"]
        bots = _address_table(prefix, 8)[rng.integers(0, 8, n)]
        server_ports = rng.choice(ports, size=n)
        controllers = np.array([f"198.51.100.{int(p) % 200 + 7}" for p in server_ports], dtype=object)
        bot_ports = rng.integers(low, high + 1, n)
        return _conversations(rng, starts, bots, bot_ports, controllers, server_ports,
                              np.ones(n, dtype=bool), packets=(2, 0.4))

    def telnet_echo(self, rng, dos_flows):
        """Server responses on port 23, each followed one second later by the client's answer."""
        echoed = dos_flows[rng.random(len(dos_flows)) < self.config.echo_ratio]
        n = len(echoed)
        starts = echoed["start_time"].to_numpy()
        servers = self.servers(np.full(n, 23), rng.integers(0, self.servers_per_port, n))
        clients = self.clients[rng.integers(0, len(self.clients), n)]
        client_ports = rng.integers(1024, 65536, n)
        telnet = np.full(n, 23)
        packets = rng.integers(1, 4, n)
        responses = _frame(starts, servers, clients, telnet, client_ports, _protocols(telnet),
                           packets, packets * rng.integers(40, 200, n), np.zeros(n))
        answers = _frame(starts + 1, clients, servers, client_ports, telnet, _protocols(telnet),
                         np.ones(n), rng.integers(40, 80, n), np.zeros(n))
        return pd.concat([responses, answers], ignore_index=True)

    def contamination(self):
        spec = self.config.contamination
        rng = _stream(self.config.seed, CONTAMINATION_STREAM)
        begin = self.config.calibration_start + spec.start
        starts = _poisson_starts(rng, begin, begin + spec.duration, spec.intensity * self.config.base_rate)
        return self.irc_like(rng, starts, "10.77", np.asarray([spec.port]))


@dataclass
class GeneratedScenario:
    config: ScenarioConfig
    flows: list
    manifest: dict

    def write(self, flows_path, manifest_path):
        write_flow_csv(self.flows, flows_path)
        write_json(manifest_path, self.manifest)


def _components(generator):
    """(frame, label, manifest entry) for every traffic component, in a fixed order."""
    config = generator.config
    yield generator.background(), BACKGROUND, None

    for i, episode in enumerate(config.attack_episodes):
        rng = _stream(config.seed, EPISODE_STREAM, i)
        begin = config.test_start + episode.start
        frame = generator.attack(rng, episode, begin)
        label = anomaly(episode.attack_type) if episode.labelled else BACKGROUND
        yield frame, label, {"id": f"episode-{i}", "kind": "attack", "attack_type": episode.attack_type.value,
                             "labelled": episode.labelled, "anomaly": True,
                             "start": epoch_to_stamp(begin), "end": epoch_to_stamp(begin + episode.duration)}
        if episode.attack_type is AttackType.DOS and config.telnet_echo:
            yield generator.telnet_echo(rng, frame), BACKGROUND, {
                "id": f"episode-{i}-echo", "kind": "telnet_echo", "attack_type": None,
                "labelled": False, "anomaly": False,
                "start": epoch_to_stamp(begin), "end": epoch_to_stamp(begin + episode.duration)}

    if config.contamination is not None:
        begin = config.calibration_start + config.contamination.start
        yield generator.contamination(), BACKGROUND, {
            "id": "contamination", "kind": "contamination", "attack_type": None,
            "labelled": False, "anomaly": True, "port": config.contamination.port,
            "start": epoch_to_stamp(begin), "end": epoch_to_stamp(begin + config.contamination.duration)}

    for i, episode in enumerate(config.calibration_anomalies):
        rng = _stream(config.seed, CALIBRATION_ANOMALY_STREAM, i)
        begin = config.calibration_start + episode.start
        label = anomaly(episode.attack_type) if episode.labelled else BACKGROUND
        yield generator.attack(rng, episode, begin), label, {
            "id": f"calibration-anomaly-{i}", "kind": "calibration_anomaly",
            "attack_type": episode.attack_type.value, "labelled": episode.labelled, "anomaly": True,
            "start": epoch_to_stamp(begin), "end": epoch_to_stamp(begin + episode.duration)}


def generate(config):
    """
    Generate a scenario.

    Args:
        config: ScenarioConfig
    Returns:
        GeneratedScenario with time-sorted FlowRecords and the ground-truth manifest
    """
    generator = _Generator(config)
    frames, labels, entries = [], [], []
    for component, (frame, label, entry) in enumerate(_components(generator)):
        frame = frame.assign(component=component, seq=np.arange(len(frame)))
        frames.append(frame)
        labels.append(label)
        entries.append(entry)

    flows_frame = pd.concat(frames, ignore_index=True)
    flows_frame = flows_frame.sort_values(["start_time", "component", "seq"], kind="stable").reset_index(drop=True)

    protocols = {p.value: p for p in Protocol}
    records = [
        FlowRecord(
            start_time=int(row.start_time),
            duration=float(row.duration),
            src_addr=row.src_addr,
            dst_addr=row.dst_addr,
            src_port=int(row.src_port),
            dst_port=int(row.dst_port),
            protocol=protocols[row.protocol],
            fwd_packets=int(row.fwd_packets),
            fwd_bytes=int(row.fwd_bytes),
            label=labels[row.component],
        )
        for row in flows_frame.itertuples(index=False)
    ]

    episodes = []
    for component, entry in enumerate(entries):
        if entry is None:
            continue
        rows = flows_frame.index[flows_frame["component"] == component]
        entry = dict(entry, flow_ids=rows.tolist(),
                     flow_seconds=sorted(set(flows_frame.loc[rows, "start_time"].tolist())))
        episodes.append(entry)

    hidden = sorted(i for e in episodes if e["anomaly"] and not e["labelled"] for i in e["flow_ids"])
    service_ports = sorted(set(generator.ports.tolist()) | {
        int(p) for e in config.attack_episodes + config.calibration_anomalies for p in e.port_list()
        if e.attack_type not in SCAN_SOURCES or e.ports is not None})
    dst_counts = flows_frame["dst_port"].value_counts()
    manifest = {
        "scenario": config.name,
        "seed": config.seed,
        "calibration": {"start": epoch_to_stamp(config.calibration_start), "end": epoch_to_stamp(config.test_start)},
        "test": {"start": epoch_to_stamp(config.test_start), "end": epoch_to_stamp(config.test_end)},
        "n_flows": len(records),
        "episodes": episodes,
        "hidden_flow_ids": hidden,
        "service_flow_counts": {str(p): int(dst_counts.get(p, 0)) for p in service_ports},
    }
    logger.info(f"generated scenario {config.name} (seed {config.seed}): {len(records)} flows, "
                f"{len(episodes)} injected components")
    return GeneratedScenario(config=config, flows=records, manifest=manifest)


@dataclass(frozen=True)
class GroundTruthWindows:
    episodes: dict
    hidden: tuple


def manifest_windows(manifest, window_length):
    """Window stamps touched by every manifest entry, and those holding withheld-label anomaly flows."""
    episodes = {}
    hidden = set()
    for entry in manifest["episodes"]:
        windows = sorted({second // window_length * window_length for second in entry["flow_seconds"]})
        episodes[entry["id"]] = tuple(windows)
        if entry["anomaly"] and not entry["labelled"]:
            hidden.update(windows)
    return GroundTruthWindows(episodes=episodes, hidden=tuple(sorted(hidden)))
