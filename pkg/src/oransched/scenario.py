"""Multi-cell scenario generation: geometry, synthetic channels, association and QoS demands.

Channels replace a ray-traced generator with a geometric pathloss model and i.i.d.
Rayleigh fading drawn independently for every (O-RU, UE, CC, RBG) tuple.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError

PAPER_ORU_POSITIONS = ((0.0, -300.0, 25.0), (-1000.0, -300.0, 25.0), (-500.0, -1200.0, 25.0))
PAPER_UE_REGION = (-1400.0, 400.0, -1400.0, -100.0)
PAPER_CC_FREQS = (3.2e9, 3.5e9, 3.8e9)

NJT = "NJT"
JT = "JT"


@dataclass(frozen=True)
class RfConfig:
    """Radio constants of one scheduling interval.

    ``tx_power`` is the per-RBG transmit power of every O-RU in watts; the default is 10 dBm.
    The pathloss is ``ref_gain * (d / ref_distance) ** -pathloss_exponent`` with ``ref_gain``
    given in dB.
    """

    num_cells: int = 3
    num_ccs: int = 2
    num_rbgs: int = 4
    nt: int = 32
    nr: int = 2
    tx_power: float = 0.01
    noise_psd: float = -174.0
    rbg_bandwidth: float = 1.44e6
    cc_center_freqs: Optional[tuple] = None
    jt_gain_window: float = 10.0
    pathloss_exponent: float = 3.5
    ref_gain_db: float = -95.0
    ref_distance: float = 200.0

    def __post_init__(self):
        if self.cc_center_freqs is None:
            freqs = PAPER_CC_FREQS[:self.num_ccs] if self.num_ccs <= 3 else \
                tuple(np.linspace(3.2e9, 3.8e9, self.num_ccs))
            object.__setattr__(self, "cc_center_freqs", tuple(float(f) for f in freqs))
        else:
            object.__setattr__(self, "cc_center_freqs", tuple(float(f) for f in self.cc_center_freqs))
        if self.num_cells < 1 or self.num_ccs < 1 or self.num_rbgs < 1:
            raise ConfigurationError("num_cells, num_ccs and num_rbgs must be >= 1")
        if not self.nt >= self.nr >= 1:
            raise ConfigurationError(f"need nt >= nr >= 1, got nt={self.nt}, nr={self.nr}")
        if self.tx_power <= 0 or self.rbg_bandwidth <= 0:
            raise ConfigurationError("tx_power and rbg_bandwidth must be positive")
        if self.jt_gain_window < 0:
            raise ConfigurationError("jt_gain_window must be >= 0")
        if len(self.cc_center_freqs) != self.num_ccs:
            raise ConfigurationError("cc_center_freqs must have one entry per CC")
        if not self.noise_power > 0:
            raise ConfigurationError("derived noise power is not positive")

    @property
    def noise_power(self) -> float:
        """Per-RBG noise power in watts."""
        return 10.0 ** ((self.noise_psd + 10.0 * math.log10(self.rbg_bandwidth) - 30.0) / 10.0)

    @property
    def pathloss_constant(self) -> float:
        # A in g = A * d^-exponent
        return 10.0 ** (self.ref_gain_db / 10.0) * self.ref_distance ** self.pathloss_exponent

    def large_scale_gain(self, distance):
        return self.pathloss_constant * np.asarray(distance, dtype=float) ** (-self.pathloss_exponent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cc_center_freqs"] = list(self.cc_center_freqs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RfConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown RfConfig keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("cc_center_freqs") is not None:
            d["cc_center_freqs"] = tuple(d["cc_center_freqs"])
        return cls(**d)


@dataclass(frozen=True)
class GeometrySpec:
    oru_positions: tuple = PAPER_ORU_POSITIONS
    ue_region: tuple = PAPER_UE_REGION  # (xmin, xmax, ymin, ymax)
    ue_height: float = 1.5
    num_ues: int = 18

    def to_dict(self) -> dict:
        return {"oru_positions": [list(p) for p in self.oru_positions],
                "ue_region": list(self.ue_region), "ue_height": self.ue_height,
                "num_ues": self.num_ues}

    @classmethod
    def from_dict(cls, d: dict) -> "GeometrySpec":
        return cls(oru_positions=tuple(tuple(float(x) for x in p) for p in d["oru_positions"]),
                   ue_region=tuple(float(x) for x in d["ue_region"]),
                   ue_height=float(d.get("ue_height", 1.5)), num_ues=int(d["num_ues"]))


@dataclass(frozen=True)
class UeProfile:
    id: int
    position: tuple
    serving_set: tuple = ()
    has_qos: bool = False
    qos_demand: float = 0.0

    def __post_init__(self):
        if self.has_qos and not self.qos_demand > 0:
            raise ConfigurationError(f"UE {self.id}: QoS UE needs a positive demand")
        if not self.has_qos and self.qos_demand != 0:
            raise ConfigurationError(f"UE {self.id}: demand set on a UE without QoS")

    @property
    def kind(self) -> Optional[str]:
        if not self.serving_set:
            return None
        return JT if len(self.serving_set) >= 2 else NJT

    @property
    def is_jt(self) -> bool:
        return len(self.serving_set) >= 2

    @property
    def primary_cell(self) -> int:
        return self.serving_set[0]


@dataclass(frozen=True)
class ChannelSet:
    """Channel matrices ``h[m, k, c, r]`` of shape (nr, nt) and large-scale gains ``[m, k]``."""

    h: np.ndarray
    large_scale_gain: np.ndarray

    @property
    def shape(self):
        return self.h.shape


@dataclass(frozen=True)
class Scenario:
    config: RfConfig
    oru_positions: np.ndarray
    ues: tuple
    seed: Optional[int] = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def num_ues(self) -> int:
        return len(self.ues)

    @property
    def num_cells(self) -> int:
        return self.config.num_cells

    @property
    def is_associated(self) -> bool:
        return all(ue.serving_set for ue in self.ues)

    def _arr(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def assoc(self) -> np.ndarray:
        """Boolean (M, K) membership of UE k in the serving set of cell m."""
        def build():
            a = np.zeros((self.num_cells, self.num_ues), dtype=bool)
            for ue in self.ues:
                a[list(ue.serving_set), ue.id] = True
            return a
        return self._arr("assoc", build)

    @property
    def serving_size(self) -> np.ndarray:
        return self._arr("size", lambda: np.array([len(u.serving_set) for u in self.ues]))

    @property
    def weight(self) -> np.ndarray:
        """Per-UE share of a JT rate credited to each serving cell (1 for NJT)."""
        return self._arr("weight", lambda: 1.0 / np.maximum(self.serving_size, 1))

    @property
    def demand(self) -> np.ndarray:
        return self._arr("demand", lambda: np.array([u.qos_demand for u in self.ues], dtype=float))

    @property
    def has_qos(self) -> np.ndarray:
        return self._arr("has_qos", lambda: np.array([u.has_qos for u in self.ues], dtype=bool))

    @property
    def is_jt(self) -> np.ndarray:
        return self._arr("is_jt", lambda: np.array([u.is_jt for u in self.ues], dtype=bool))

    def associated(self, m: int) -> list:
        """UEs served by cell m (NJT and JT), ascending."""
        return [u.id for u in self.ues if m in u.serving_set]

    def njt_ues(self, m: Optional[int] = None) -> list:
        return [u.id for u in self.ues if not u.is_jt and (m is None or m in u.serving_set)]

    def jt_ues(self, m: Optional[int] = None) -> list:
        return [u.id for u in self.ues if u.is_jt and (m is None or m in u.serving_set)]

    def qos_ues(self) -> list:
        return [u.id for u in self.ues if u.has_qos]

    def replace_ues(self, ues) -> "Scenario":
        return Scenario(self.config, self.oru_positions, tuple(ues), self.seed)

    def with_config(self, **changes) -> "Scenario":
        return Scenario(dataclasses.replace(self.config, **changes), self.oru_positions, self.ues,
                        self.seed)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "oru_positions": self.oru_positions.tolist(),
            "ues": [{"id": u.id, "position": list(u.position), "serving_set": list(u.serving_set),
                     "kind": u.kind, "has_qos": u.has_qos, "qos_demand": u.qos_demand}
                    for u in self.ues],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        ues = tuple(UeProfile(int(u["id"]), tuple(u["position"]), tuple(u["serving_set"]),
                              bool(u["has_qos"]), float(u["qos_demand"])) for u in d["ues"])
        return cls(RfConfig.from_dict(d["config"]), np.asarray(d["oru_positions"], dtype=float),
                   ues, d.get("seed"))


def generate_scenario(config: RfConfig, layout: GeometrySpec, seed: int):
    """Draw UE positions and channels; the returned UEs are not yet associated."""
    oru = np.asarray(layout.oru_positions, dtype=float).reshape(-1, 3)
    if oru.shape[0] == 0 or config.num_cells == 0:
        raise ConfigurationError("layout has no O-RU")
    if oru.shape[0] != config.num_cells:
        raise ConfigurationError(
            f"layout has {oru.shape[0]} O-RUs but config.num_cells = {config.num_cells}")
    xmin, xmax, ymin, ymax = layout.ue_region
    if not (xmax > xmin and ymax > ymin) or layout.num_ues < 1:
        raise ConfigurationError("UE region is empty")

    rng = np.random.default_rng(seed)
    k = layout.num_ues
    pos = np.column_stack([rng.uniform(xmin, xmax, k), rng.uniform(ymin, ymax, k),
                           np.full(k, layout.ue_height)])
    dist = np.linalg.norm(oru[:, None, :] - pos[None, :, :], axis=-1)
    gain = config.large_scale_gain(dist)

    shape = (config.num_cells, k, config.num_ccs, config.num_rbgs, config.nr, config.nt)
    w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    h = np.sqrt(gain)[:, :, None, None, None, None] * w

    ues = tuple(UeProfile(i, tuple(float(x) for x in pos[i])) for i in range(k))
    return Scenario(config, oru, ues, seed), ChannelSet(h, gain)


def associate_ues(scenario: Scenario, channels: ChannelSet) -> Scenario:
    """Strongest-gain association; O-RUs within the JT window of the best one join the serving set."""
    gain_db = 10.0 * np.log10(channels.large_scale_gain)
    window = scenario.config.jt_gain_window
    ues = []
    for ue in scenario.ues:
        g = gain_db[:, ue.id]
        best = int(np.argmax(g))  # argmax returns the lowest index on ties
        others = [m for m in range(len(g)) if m != best and g[best] - g[m] <= window]
        ues.append(dataclasses.replace(ue, serving_set=(best, *others)))
    return scenario.replace_ues(ues)


def assign_qos(scenario: Scenario, num_qos_users: int, q_range=(0.0, 60.0), seed: int = 0) -> Scenario:
    """Pick ``num_qos_users`` UEs uniformly and give each a demand drawn from (lo, hi]."""
    lo, hi = q_range
    k = scenario.num_ues
    if not 0 <= num_qos_users <= k:
        raise ConfigurationError(f"num_qos_users={num_qos_users} outside [0, {k}]")
    if lo < 0 or hi < lo:
        raise ConfigurationError(f"invalid QoS range {q_range}")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(k, size=num_qos_users, replace=False).tolist())
    ues = []
    for ue in scenario.ues:
        if ue.id in chosen:
            q = hi - (hi - lo) * rng.random()
            ues.append(dataclasses.replace(ue, has_qos=True, qos_demand=float(q)))
        else:
            ues.append(dataclasses.replace(ue, has_qos=False, qos_demand=0.0))
    return scenario.replace_ues(ues)


def build_scenario(config: RfConfig = RfConfig(), layout: GeometrySpec = GeometrySpec(), seed: int = 0,
                   num_qos_users: int = 0, q_range=(0.0, 60.0)):
    """Generate, associate and assign QoS in one call (QoS draws use a seed derived from ``seed``)."""
    scenario, channels = generate_scenario(config, layout, seed)
    scenario = associate_ues(scenario, channels)
    scenario = assign_qos(scenario, num_qos_users, q_range, seed=np.random.SeedSequence([seed, 1]))
    return scenario, channels


# --- scenario dump: JSON metadata + binary channel file ---------------------------------------

_CHAN_MAGIC = b"CHS1"


def write_channels(path, channels: ChannelSet) -> None:
    """Little-endian header (magic, ndim, dims as uint64) then interleaved re/im float64, row-major."""
    h = np.ascontiguousarray(channels.h, dtype="<c16")
    with open(path, "wb") as f:
        f.write(_CHAN_MAGIC)
        f.write(struct.pack("<I", h.ndim))
        f.write(struct.pack(f"<{h.ndim}Q", *h.shape))
        f.write(h.tobytes(order="C"))


def read_channels(path, large_scale_gain) -> ChannelSet:
    with open(path, "rb") as f:
        if f.read(4) != _CHAN_MAGIC:
            raise ConfigurationError(f"{path}: not a channel file")
        (ndim,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        data = np.frombuffer(f.read(), dtype="<c16")
    if data.size != int(np.prod(dims)):
        raise ConfigurationError(f"{path}: payload size does not match header dims {dims}")
    return ChannelSet(data.reshape(dims).astype(np.complex128), np.asarray(large_scale_gain, float))


def save_scenario(prefix, scenario: Scenario, channels: ChannelSet) -> tuple:
    prefix = Path(prefix)
    meta = scenario.to_dict()
    meta["large_scale_gain"] = channels.large_scale_gain.tolist()
    meta["channel_file"] = prefix.name + ".chan"
    json_path, chan_path = prefix.with_suffix(".json"), prefix.with_suffix(".chan")
    json_path.write_text(json.dumps(meta, indent=1))
    write_channels(chan_path, channels)
    return json_path, chan_path


def load_scenario(json_path):
    json_path = Path(json_path)
    meta = json.loads(json_path.read_text())
    scenario = Scenario.from_dict(meta)
    channels = read_channels(json_path.parent / meta["channel_file"], meta["large_scale_gain"])
    return scenario, channels


def scenario_from_config(d: dict):
    """Build a scenario from a config dict with keys ``config``, ``layout``, ``seed``, ``num_qos_users``."""
    config = RfConfig.from_dict(d.get("config", {}))
    layout = GeometrySpec.from_dict(d["layout"]) if "layout" in d else GeometrySpec(
        num_ues=int(d.get("num_ues", 18)))
    return build_scenario(config, layout, int(d.get("seed", 0)), int(d.get("num_qos_users", 0)),
                          tuple(d.get("q_range", (0.0, 60.0))))


def three_cell_layout(num_ues: int = 18) -> GeometrySpec:
    return GeometrySpec(num_ues=num_ues)


def single_cell_layout(num_ues: int, radius: float = 300.0, height: float = 25.0) -> GeometrySpec:
    return GeometrySpec(oru_positions=((0.0, 0.0, height),),
                        ue_region=(-radius, radius, -radius, radius), num_ues=num_ues)


def layout_for(config: RfConfig, num_ues: int) -> GeometrySpec:
    """Paper layout for three cells, otherwise O-RUs on a line 1 km apart."""
    if config.num_cells == 3:
        return three_cell_layout(num_ues)
    if config.num_cells == 1:
        return single_cell_layout(num_ues)
    xs = [-1000.0 * m for m in range(config.num_cells)]
    return GeometrySpec(oru_positions=tuple((x, -300.0, 25.0) for x in xs),
                        ue_region=(min(xs) - 400.0, 400.0, -800.0, 200.0), num_ues=num_ues)


def scenario_summary(scenario: Scenario) -> dict:
    return {"num_ues": scenario.num_ues,
            "num_jt": int(scenario.is_jt.sum()),
            "num_qos": int(scenario.has_qos.sum()),
            "per_cell": [len(scenario.associated(m)) for m in range(scenario.num_cells)]}
