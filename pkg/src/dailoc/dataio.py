"""Fingerprint dataset format, RSS standardization, and persistence.

Fingerprint files are self-describing delimited text:

    #dailoc-fp v1 building=<id> aps=<n>
    sample_id,device_id,epoch,rp_label,rss_0,...,rss_{n-1}

with a literal `_` for an absent label. Reals are written with repr(), which
round-trips float64 exactly. Coordinate files are `rp_id,x,y,z` per line.

Checkpoints use a small versioned binary container: a magic line, a JSON
meta block, then raw little-endian float64 blobs in declared order; loading
reproduces every array bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, SchemaError

FP_MAGIC = "#dailoc-fp v1"
CKPT_MAGIC = b"#dailoc-ckpt v1\n"

RSS_FLOOR = -100.0
RSS_CEIL = 0.0


@dataclass
class FingerprintRecord:
    """One RSS scan: per-AP signal vector plus its domain coordinates."""

    sample_id: int
    building_id: str
    device_id: str
    epoch: int
    rp_label: int | None
    rss: np.ndarray

    @property
    def labeled(self) -> bool:
        return self.rp_label is not None


@dataclass
class CoordinateTable:
    """RP index -> (x, y, z) meters, dense over [0, n_rps)."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise SchemaError(f"coordinate table must be (n, 3), got {self.coords.shape}")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def position(self, rp: int) -> np.ndarray:
        if not 0 <= rp < len(self):
            raise KeyError(f"unknown RP index {rp} (table has {len(self)} RPs)")
        return self.coords[rp]


def standardize_rss(raw: np.ndarray, sample_id: int | None = None) -> np.ndarray:
    """Map dBm in [-100, 0] to [0, 1] via v -> (v + 100) / 100."""
    arr = np.asarray(raw, dtype=np.float64)
    bad = np.where((arr < RSS_FLOOR) | (arr > RSS_CEIL) | ~np.isfinite(arr))
    if bad[0].size:
        ap = int(bad[-1][0])
        who = f"sample {sample_id}" if sample_id is not None else "input"
        raise DataError(f"{who}: RSS value {arr[tuple(i[0] for i in bad)]} "
                        f"at AP index {ap} outside [{RSS_FLOOR}, {RSS_CEIL}] dBm")
    return (arr + 100.0) / 100.0


def destandardize_rss(normalized: np.ndarray) -> np.ndarray:
    """Exact inverse of standardize_rss: n -> 100 n - 100."""
    return np.asarray(normalized, dtype=np.float64) * 100.0 - 100.0


def records_matrix(records: list[FingerprintRecord]):
    """Stack records into a normalized feature matrix plus labels.

    Labels come back as an int array when every record is labeled, else None.
    """
    x = np.stack([standardize_rss(r.rss, r.sample_id) for r in records])
    if all(r.labeled for r in records):
        y = np.array([r.rp_label for r in records], dtype=np.int64)
        return x, y
    return x, None


# -- fingerprint files ----------------------------------------------------------


def save_fingerprints(path, records: list[FingerprintRecord], building_id: str,
                      n_aps: int) -> None:
    lines = [f"{FP_MAGIC} building={building_id} aps={n_aps}"]
    for r in records:
        if r.rss.shape != (n_aps,):
            raise SchemaError(
                f"sample {r.sample_id}: rss length {r.rss.shape[0]} != declared aps {n_aps}"
            )
        label = "_" if r.rp_label is None else str(int(r.rp_label))
        rss = ",".join(repr(float(v)) for v in r.rss)
        lines.append(f"{r.sample_id},{r.device_id},{r.epoch},{label},{rss}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_fingerprints(path) -> tuple[list[FingerprintRecord], str, int]:
    """Returns (records, building_id, n_aps); order is the file order."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(FP_MAGIC):
        raise ParseError(f"{path}: line 1: missing {FP_MAGIC!r} header")
    header = dict(part.split("=", 1) for part in lines[0][len(FP_MAGIC):].split() if "=" in part)
    try:
        building_id = header["building"]
        n_aps = int(header["aps"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: line 1: bad header fields ({exc})") from exc

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 4 + n_aps:
            raise ParseError(
                f"{path}: line {lineno}: expected {4 + n_aps} fields, got {len(fields)}"
            )
        try:
            rp = None if fields[3] == "_" else int(fields[3])
            rec = FingerprintRecord(
                sample_id=int(fields[0]),
                building_id=building_id,
                device_id=fields[1],
                epoch=int(fields[2]),
                rp_label=rp,
                rss=np.array([float(v) for v in fields[4:]]),
            )
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        records.append(rec)
    return records, building_id, n_aps


def save_coords(path, table: CoordinateTable) -> None:
    lines = [
        f"{rp},{repr(float(x))},{repr(float(y))},{repr(float(z))}"
        for rp, (x, y, z) in enumerate(table.coords)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_coords(path) -> CoordinateTable:
    rows = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise ParseError(f"{path}: line {lineno}: expected 4 fields, got {len(fields)}")
        try:
            rows[int(fields[0])] = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    if sorted(rows) != list(range(len(rows))):
        raise SchemaError(f"{path}: RP ids are not dense over [0, {len(rows)})")
    return CoordinateTable(np.array([rows[i] for i in range(len(rows))]))


def load_dataset(fp_path, coords_path):
    """Convenience: (records, coordinate table)."""
    records, _, _ = load_fingerprints(fp_path)
    return records, load_coords(coords_path)


# -- binary checkpoint container ---------------------------------------------------


def save_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a versioned container: JSON meta + float64 blobs, bit-exact."""
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        manifest.append([name, list(a.shape)])
        blobs.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint container (bad magic)")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(8 * count)
            if len(blob) != 8 * count:
                raise ParseError(f"{path}: truncated array block {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    return header["meta"], arrays
