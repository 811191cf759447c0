"""Synthetic multi-domain RSS world generator.

Stands in for a private measurement campaign: buildings with reference
points on a 1 m grid and access points under log-distance path loss,
per-device affine dB transfer functions with noise and a detection floor,
and a drift schedule that perturbs AP transmit powers over time epochs
(plus optional AP dropout and ambient noise growth). Every sample's noise
comes from a stream derived from (scenario seed, device, epoch, rp, sample
counter), so generation is reproducible and order-independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .errors import DataError, LayoutError

DISTANCE_FLOOR_M = 0.1


@dataclass
class BuildingLayout:
    building_id: str
    rp_coords: np.ndarray        # (n_rps, 3) meters
    ap_coords: np.ndarray        # (n_aps, 3) meters
    tx_power_dbm: np.ndarray     # (n_aps,)
    pl_exponent: np.ndarray      # (n_aps,)
    rp_spacing_m: float = 1.0

    @property
    def n_rps(self) -> int:
        return self.rp_coords.shape[0]

    @property
    def n_aps(self) -> int:
        return self.ap_coords.shape[0]

    def coordinate_table(self) -> dataio.CoordinateTable:
        return dataio.CoordinateTable(self.rp_coords.copy())


@dataclass(frozen=True)
class DeviceProfile:
    """Affine dB transfer: reported = gain * rss + offset, plus Gaussian
    noise and a detection floor below which an AP reads as missing."""

    device_id: str
    gain: float = 1.0
    offset_db: float = 0.0
    noise_sigma_db: float = 0.5
    detection_floor_dbm: float = -95.0


@dataclass
class DriftSchedule:
    """Per-epoch drift: AP transmit-power deltas (dB), dropped-out APs, and
    an ambient noise increment. Epoch 0 carries no drift by construction."""

    power_deltas: np.ndarray          # (n_epochs, n_aps)
    dropped: list[list[int]]          # per epoch
    noise_increment: np.ndarray       # (n_epochs,)

    @property
    def n_epochs(self) -> int:
        return self.power_deltas.shape[0]


DEFAULT_ROSTER = (
    DeviceProfile("BLU", gain=1.00, offset_db=0.0, noise_sigma_db=0.6),
    DeviceProfile("HTC", gain=1.04, offset_db=3.0, noise_sigma_db=0.8),
    DeviceProfile("S7", gain=0.95, offset_db=-4.0, noise_sigma_db=0.8),
    DeviceProfile("LG", gain=1.02, offset_db=2.5, noise_sigma_db=0.7),
    DeviceProfile("MOTO", gain=0.97, offset_db=-2.5, noise_sigma_db=0.9),
    DeviceProfile("OP3", gain=1.06, offset_db=4.5, noise_sigma_db=0.8),
)

# (n_rps, n_aps, extent) per preset; grid capacity must hold n_rps at 1 m
PRESETS = {
    "toy": (12, 24, (3.0, 2.0)),
    "building1": (60, 193, (9.0, 5.0)),
    "building2": (48, 168, (7.0, 5.0)),
}

RP_HEIGHT_M = 1.2   # handset height; identical across RPs (single floor)
AP_HEIGHT_M = 2.0   # mounting height; close enough that nearby RPs separate well


def generate_building(seed: int, n_rps: int, n_aps: int,
                      extent_m: tuple[float, float],
                      building_id: str = "synthetic") -> BuildingLayout:
    """RPs on a 1 m grid inside the extent, APs uniform at ceiling height.

    Transmit powers land in [-45, -25] dBm (referenced to 1 m) and path-loss
    exponents in [2, 4].
    """
    if n_rps < 1 or n_aps < 1:
        raise LayoutError("n_rps and n_aps must be >= 1")
    width, depth = extent_m
    cols = int(np.floor(width)) + 1
    rows = int(np.floor(depth)) + 1
    if cols * rows < n_rps:
        raise LayoutError(
            f"extent {extent_m} holds only {cols * rows} grid points at 1 m spacing, "
            f"need {n_rps}"
        )
    grid = [(float(c), float(r), RP_HEIGHT_M) for r in range(rows) for c in range(cols)]
    rp_coords = np.array(grid[:n_rps])
    rng = np.random.default_rng((seed, 0xB11D))
    ap_xy = rng.uniform([0.0, 0.0], [width, depth], size=(n_aps, 2))
    ap_coords = np.column_stack([ap_xy, np.full(n_aps, AP_HEIGHT_M)])
    tx = rng.uniform(-45.0, -25.0, size=n_aps)
    exponent = rng.uniform(2.0, 4.0, size=n_aps)
    return BuildingLayout(building_id, rp_coords, ap_coords, tx, exponent)


def preset_building(name: str, seed: int) -> BuildingLayout:
    if name not in PRESETS:
        raise LayoutError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    n_rps, n_aps, extent = PRESETS[name]
    return generate_building(seed, n_rps, n_aps, extent, building_id=name)


def default_schedule(seed: int, n_aps: int, n_epochs: int,
                     severity: float = 1.0) -> DriftSchedule:
    """Random-walk AP power drift that grows with the epoch index.

    `severity` scales the per-epoch dB shocks (and the ambient noise ramp),
    which is the knob the monotone-degradation property is checked against.
    From mid-schedule onwards one additional AP drops out per epoch.
    """
    rng = np.random.default_rng((seed, 0xD41F7))
    deltas = np.zeros((n_epochs, n_aps))
    for e in range(1, n_epochs):
        deltas[e] = deltas[e - 1] + rng.uniform(-2.0, 2.0, size=n_aps) * severity
    dropped: list[list[int]] = [[] for _ in range(n_epochs)]
    drop_order = rng.permutation(n_aps)
    first_drop = max(2, n_epochs // 2)
    cap = max(1, n_aps // 6)
    for e in range(first_drop, n_epochs):
        count = min(cap, int(0.5 * severity * (e - first_drop + 1) + 0.5))
        dropped[e] = sorted(int(a) for a in drop_order[:count])
    noise_inc = np.array([0.05 * e * severity for e in range(n_epochs)])
    return DriftSchedule(power_deltas=deltas, dropped=dropped, noise_increment=noise_inc)


def sample_fingerprint(layout: BuildingLayout, rp: int, device: DeviceProfile,
                       epoch: int, schedule: DriftSchedule,
                       rng: np.random.Generator) -> np.ndarray:
    """One raw RSS vector in dBm, clamped to [-100, 0].

    Per AP: log-distance path loss from the drifted transmit power, then the
    device's affine transform, then Gaussian noise; dropped APs and readings
    below the device's detection floor come out as -100 (missing).
    """
    if not 0 <= rp < layout.n_rps:
        raise IndexError(f"rp {rp} out of range [0, {layout.n_rps})")
    if not 0 <= epoch < schedule.n_epochs:
        raise IndexError(f"epoch {epoch} outside schedule of {schedule.n_epochs}")
    d = np.linalg.norm(layout.ap_coords - layout.rp_coords[rp], axis=1)
    d = np.maximum(d, DISTANCE_FLOOR_M)
    rss = (layout.tx_power_dbm + schedule.power_deltas[epoch]
           - 10.0 * layout.pl_exponent * np.log10(d))
    rss = device.gain * rss + device.offset_db
    sigma = device.noise_sigma_db + schedule.noise_increment[epoch]
    if sigma > 0:
        rss = rss + rng.normal(0.0, sigma, size=layout.n_aps)
    rss[rss < device.detection_floor_dbm] = dataio.RSS_FLOOR
    if schedule.dropped[epoch]:
        rss[np.array(schedule.dropped[epoch], dtype=int)] = dataio.RSS_FLOOR
    return np.clip(rss, dataio.RSS_FLOOR, dataio.RSS_CEIL)


SPLIT_KINDS = ("train", "onboard", "adapt", "test")


@dataclass
class Scenario:
    """A generated world plus its sample splits, keyed (kind, device, epoch).

    `fetch` is the audited accessor: every read is logged with the domain it
    touched, which is how the no-replay property is checked.
    """

    layout: BuildingLayout
    roster: tuple[DeviceProfile, ...]
    schedule: DriftSchedule
    seed: int
    n_epochs: int
    intro_epochs: dict
    splits: dict = field(default_factory=dict)
    access_log: list = field(default_factory=list)

    @property
    def base_device(self) -> str:
        return self.roster[0].device_id

    def coordinate_table(self) -> dataio.CoordinateTable:
        return self.layout.coordinate_table()

    def fetch(self, kind: str, device_id: str, epoch: int) -> list:
        self.access_log.append((kind, device_id, int(epoch)))
        return self.splits[(kind, device_id, int(epoch))]

    def split_keys(self) -> list:
        return sorted(self.splits.keys())

    def profile(self, device_id: str) -> DeviceProfile:
        for p in self.roster:
            if p.device_id == device_id:
                return p
        raise KeyError(f"unknown device {device_id!r}")


def generate_scenario(seed: int, preset: str = "toy",
                      roster: tuple[DeviceProfile, ...] = DEFAULT_ROSTER,
                      n_epochs: int = 6, samples_per_rp: int = 4,
                      train_samples_per_rp: int | None = None,
                      drift_severity: float = 1.0,
                      intro_epochs: dict | None = None) -> Scenario:
    """Full multi-domain dataset mirroring the experimental shape.

    Splits: a labeled epoch-0 train split for the base device; a labeled
    onboarding split for every device at its introduction epoch (device i
    enters at epoch i by default); and unlabeled adaptation plus held-out
    labeled test splits for every (device, epoch). Sample ids are globally
    unique, so splits are disjoint by construction.
    """
    if not roster:
        raise DataError("generate_scenario: empty device roster")
    if samples_per_rp < 1:
        raise DataError("samples_per_rp must be >= 1")
    layout = preset_building(preset, seed)
    schedule = default_schedule(seed, layout.n_aps, n_epochs, severity=drift_severity)
    if train_samples_per_rp is None:
        train_samples_per_rp = 2 * samples_per_rp
    if intro_epochs is None:
        intro_epochs = {p.device_id: min(i, n_epochs - 1) for i, p in enumerate(roster)}

    scenario = Scenario(layout=layout, roster=tuple(roster), schedule=schedule,
                        seed=seed, n_epochs=n_epochs, intro_epochs=dict(intro_epochs))
    next_id = 0

    def _make_split(kind, device, epoch, per_rp, labeled):
        nonlocal next_id
        records = []
        for rp in range(layout.n_rps):
            for s in range(per_rp):
                rng = np.random.default_rng(
                    (seed, SPLIT_KINDS.index(kind), _device_entropy(device.device_id),
                     epoch, rp, s))
                rss = sample_fingerprint(layout, rp, device, epoch, schedule, rng)
                records.append(dataio.FingerprintRecord(
                    sample_id=next_id, building_id=layout.building_id,
                    device_id=device.device_id, epoch=epoch,
                    rp_label=rp if labeled else None, rss=rss))
                next_id += 1
        scenario.splits[(kind, device.device_id, epoch)] = records

    base = roster[0]
    _make_split("train", base, 0, train_samples_per_rp, labeled=True)
    for device in roster:
        _make_split("onboard", device, intro_epochs[device.device_id],
                    samples_per_rp, labeled=True)
    for device in roster:
        for epoch in range(n_epochs):
            _make_split("adapt", device, epoch, samples_per_rp, labeled=False)
            _make_split("test", device, epoch, samples_per_rp, labeled=True)
    return scenario


def _device_entropy(device_id: str) -> int:
    return int.from_bytes(device_id.encode("utf-8")[:8].ljust(8, b"\0"), "little")


# -- persistence -----------------------------------------------------------------


def save_scenario(directory, scenario: Scenario) -> None:
    """Write the scenario manifest, coordinate table and one fingerprint
    file per split under `directory`."""
    root = Path(directory)
    (root / "splits").mkdir(parents=True, exist_ok=True)
    dataio.save_coords(root / "coords.csv", scenario.coordinate_table())
    split_entries = []
    for (kind, device, epoch) in scenario.split_keys():
        records = scenario.splits[(kind, device, epoch)]
        fname = f"splits/{kind}__{device}__e{epoch}.fp"
        dataio.save_fingerprints(root / fname, records,
                                 scenario.layout.building_id, scenario.layout.n_aps)
        split_entries.append([kind, device, epoch, fname, len(records)])
    manifest = {
        "format": "dailoc-scenario v1",
        "seed": scenario.seed,
        "n_epochs": scenario.n_epochs,
        "intro_epochs": scenario.intro_epochs,
        "layout": {
            "building_id": scenario.layout.building_id,
            "rp_spacing_m": scenario.layout.rp_spacing_m,
            "ap_coords": scenario.layout.ap_coords.tolist(),
            "tx_power_dbm": scenario.layout.tx_power_dbm.tolist(),
            "pl_exponent": scenario.layout.pl_exponent.tolist(),
        },
        "roster": [
            {"device_id": p.device_id, "gain": p.gain, "offset_db": p.offset_db,
             "noise_sigma_db": p.noise_sigma_db,
             "detection_floor_dbm": p.detection_floor_dbm}
            for p in scenario.roster
        ],
        "schedule": {
            "power_deltas": scenario.schedule.power_deltas.tolist(),
            "dropped": scenario.schedule.dropped,
            "noise_increment": scenario.schedule.noise_increment.tolist(),
        },
        "splits": split_entries,
    }
    (root / "scenario.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_scenario(directory) -> Scenario:
    root = Path(directory)
    manifest = json.loads((root / "scenario.json").read_text(encoding="utf-8"))
    coords = dataio.load_coords(root / "coords.csv")
    lay = manifest["layout"]
    layout = BuildingLayout(
        building_id=lay["building_id"],
        rp_coords=coords.coords,
        ap_coords=np.array(lay["ap_coords"]),
        tx_power_dbm=np.array(lay["tx_power_dbm"]),
        pl_exponent=np.array(lay["pl_exponent"]),
        rp_spacing_m=lay["rp_spacing_m"],
    )
    roster = tuple(DeviceProfile(**p) for p in manifest["roster"])
    schedule = DriftSchedule(
        power_deltas=np.array(manifest["schedule"]["power_deltas"]),
        dropped=[list(map(int, d)) for d in manifest["schedule"]["dropped"]],
        noise_increment=np.array(manifest["schedule"]["noise_increment"]),
    )
    scenario = Scenario(layout=layout, roster=roster, schedule=schedule,
                        seed=manifest["seed"], n_epochs=manifest["n_epochs"],
                        intro_epochs={k: int(v) for k, v in manifest["intro_epochs"].items()})
    for kind, device, epoch, fname, count in manifest["splits"]:
        records, _, _ = dataio.load_fingerprints(root / fname)
        if len(records) != count:
            raise DataError(f"{fname}: manifest promised {count} records, found {len(records)}")
        scenario.splits[(kind, device, int(epoch))] = records
    return scenario
