"""Episode store: a directory of timestamped binary streams plus a manifest.

Layout:
    <dir>/manifest.json          UTF-8, schema version, stream descriptors,
                                 per-episode metadata and row counts
    <dir>/<ep>__<stream>.bin     row-major little-endian payload
    <dir>/<ep>__<stream>.ts.bin  float64 little-endian timestamps

Stream dtypes are restricted to "f32le" / "f64le". The reader validates blob
sizes against the manifest, checks timestamps are strictly increasing, and
counts bytes read per stream so consumers can prove which modalities they
touched. Writing the result of a read reproduces the directory byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
DTYPES = {"f32le": "<f4", "f64le": "<f8"}


class StoreFormatError(ValueError):
    pass


@dataclass
class StreamSpec:
    name: str
    dtype: str
    shape: tuple[int, ...]
    rate_hz: float

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise StoreFormatError(f"stream {self.name}: unsupported dtype {self.dtype!r}")
        self.shape = tuple(int(s) for s in self.shape)

    @property
    def row_size(self) -> int:
        return int(np.prod(self.shape, initial=1))

    @property
    def itemsize(self) -> int:
        return 4 if self.dtype == "f32le" else 8


@dataclass
class Episode:
    id: str
    seed: int
    meta: dict
    streams: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    # streams maps name -> (timestamps float64 (n,), values (n, *shape))

    def rows(self, name: str) -> int:
        return self.streams[name][0].shape[0]


class EpisodeStore:
    def __init__(self, specs: list[StreamSpec], episodes: list[Episode], meta: dict | None = None):
        self.specs = {s.name: s for s in specs}
        if len(self.specs) != len(specs):
            raise StoreFormatError("duplicate stream names")
        self.episodes = episodes
        self.meta = meta or {}
        self.bytes_read: dict[str, int] = {name: 0 for name in self.specs}
        for ep in episodes:
            if set(ep.streams) != set(self.specs):
                raise StoreFormatError(
                    f"episode {ep.id}: streams {sorted(ep.streams)} != manifest {sorted(self.specs)}"
                )

    def __len__(self) -> int:
        return len(self.episodes)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for ep in self.episodes:
            rows = {}
            for name, (ts, values) in ep.streams.items():
                spec = self.specs[name]
                ts = np.asarray(ts, dtype="<f8")
                values = np.ascontiguousarray(values, dtype=DTYPES[spec.dtype])
                if values.shape != (ts.shape[0],) + spec.shape:
                    raise StoreFormatError(
                        f"episode {ep.id} stream {name}: shape {values.shape} != rows x {spec.shape}"
                    )
                if ts.size > 1 and not np.all(np.diff(ts) > 0):
                    raise StoreFormatError(f"episode {ep.id} stream {name}: timestamps not increasing")
                (directory / f"{ep.id}__{name}.bin").write_bytes(values.tobytes(order="C"))
                (directory / f"{ep.id}__{name}.ts.bin").write_bytes(ts.tobytes(order="C"))
                rows[name] = int(ts.shape[0])
            entries.append({"id": ep.id, "seed": ep.seed, "meta": ep.meta, "rows": rows})
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "meta": self.meta,
            "streams": [
                {"name": s.name, "dtype": s.dtype, "shape": list(s.shape), "rate_hz": s.rate_hz}
                for s in self.specs.values()
            ],
            "episodes": entries,
        }
        (directory / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @staticmethod
    def load(directory: str | Path, lazy: bool = False) -> "EpisodeStore":
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise StoreFormatError(f"no manifest.json in {directory}")
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise StoreFormatError(f"unsupported schema version {manifest.get('schema_version')}")
        specs = [
            StreamSpec(s["name"], s["dtype"], tuple(s["shape"]), s["rate_hz"])
            for s in manifest["streams"]
        ]
        spec_by_name = {s.name: s for s in specs}

        expected_files = {"manifest.json"}
        episodes = []
        store = EpisodeStore.__new__(EpisodeStore)
        store.specs = spec_by_name
        store.meta = manifest.get("meta", {})
        store.bytes_read = {name: 0 for name in spec_by_name}

        for entry in manifest["episodes"]:
            ep = Episode(entry["id"], entry["seed"], entry.get("meta", {}))
            for name, spec in spec_by_name.items():
                rows = entry["rows"][name]
                bin_path = directory / f"{ep.id}__{name}.bin"
                ts_path = directory / f"{ep.id}__{name}.ts.bin"
                expected_files.update((bin_path.name, ts_path.name))
                for p, size in ((bin_path, rows * spec.row_size * spec.itemsize), (ts_path, rows * 8)):
                    if not p.exists():
                        raise StoreFormatError(f"missing blob {p.name}")
                    actual = p.stat().st_size
                    if actual != size:
                        raise StoreFormatError(f"{p.name}: {actual} bytes, manifest implies {size}")
                ep.streams[name] = (ts_path, bin_path) if lazy else store._read_stream(
                    spec, ts_path, bin_path, rows
                )
            episodes.append(ep)

        on_disk = {p.name for p in directory.iterdir() if p.suffix == ".bin" or p.name == "manifest.json"}
        extra = on_disk - expected_files
        if extra:
            raise StoreFormatError(f"files not declared in manifest: {sorted(extra)}")
        store.episodes = episodes
        return store

    def _read_stream(self, spec: StreamSpec, ts_path: Path, bin_path: Path, rows: int):
        ts_blob = ts_path.read_bytes()
        blob = bin_path.read_bytes()
        self.bytes_read[spec.name] += len(blob) + len(ts_blob)
        ts = np.frombuffer(ts_blob, dtype="<f8")
        values = np.frombuffer(blob, dtype=DTYPES[spec.dtype]).reshape((rows,) + spec.shape)
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise StoreFormatError(f"{ts_path.name}: timestamps not strictly increasing")
        return ts, values

    def stream(self, ep: Episode, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Stream accessor that resolves lazy entries and counts bytes."""
        value = ep.streams[name]
        if isinstance(value, tuple) and isinstance(value[0], Path):
            ts_path, bin_path = value
            ep.streams[name] = self._read_stream(self.specs[name], ts_path, bin_path,
                                                 self._rows_from_size(name, bin_path))
            value = ep.streams[name]
        return value

    def _rows_from_size(self, name: str, bin_path: Path) -> int:
        spec = self.specs[name]
        return bin_path.stat().st_size // (spec.row_size * spec.itemsize)
