"""Event-stream file parsing, dataset indexing, windowing, and splitting.

Supported on-disk formats:
  * 5-byte ATIS binary (N-MNIST layout): byte0 = x, byte1 = y, byte2 bit 7 =
    polarity, remaining 23 bits of bytes 2-4 = timestamp in microseconds.
  * CSV rows "t,x,y,p" with p in {0,1} mapped to {-1,+1}.
  * JSON-lines manifest: {"id", "events_path", "label", "rgb_path"?}.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import (
    ClassTooSmall,
    CoordinateOutOfRange,
    MalformedRow,
    TruncatedRecord,
    UnsortedTimestamps,
    InvalidWindow,
)

NMNIST_RESOLUTION = (34, 34)  # (width, height)
_TIMESTAMP_BITS = 23


class Event(NamedTuple):
    x: int
    y: int
    t: int  # microseconds
    p: int  # +1 or -1


@dataclass(frozen=True)
class EventStream:
    """An ordered window of events plus the sensor resolution.

    Events are stored column-wise as an (N, 4) int64 array [x, y, t, p]
    with timestamps nondecreasing.
    """

    data: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.int64)
        if arr.size == 0:
            arr = arr.reshape(0, 4)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"event array must be (N, 4), got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"resolution must be positive, got {self.width}x{self.height}")
        if len(arr):
            x, y, t, p = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
            bad = (x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)
            if bad.any():
                i = int(np.argmax(bad))
                raise CoordinateOutOfRange(
                    f"event {i} at ({arr[i, 0]}, {arr[i, 1]}) outside {self.width}x{self.height}"
                )
            if (t < 0).any():
                raise ValueError("negative timestamp")
            if not np.isin(p, (-1, 1)).all():
                raise ValueError("polarity must be +1 or -1")
            if (np.diff(t) < 0).any():
                raise UnsortedTimestamps("timestamps are not nondecreasing")

    @classmethod
    def from_events(cls, events, width: int, height: int) -> "EventStream":
        rows = [(e.x, e.y, e.t, e.p) for e in events]
        return cls(np.array(rows, dtype=np.int64).reshape(len(rows), 4), width, height)

    @property
    def xs(self) -> np.ndarray:
        return self.data[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.data[:, 1]

    @property
    def ts(self) -> np.ndarray:
        return self.data[:, 2]

    @property
    def ps(self) -> np.ndarray:
        return self.data[:, 3]

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, i: int) -> Event:
        x, y, t, p = self.data[i]
        return Event(int(x), int(y), int(t), int(p))

    def __iter__(self) -> Iterator[Event]:
        for row in self.data:
            yield Event(int(row[0]), int(row[1]), int(row[2]), int(row[3]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    def time_span(self) -> tuple[int, int]:
        """Half-open [t0, t1) window covering every event; [0, 1) if empty."""
        if not len(self):
            return 0, 1
        return int(self.ts[0]), int(self.ts[-1]) + 1


def parse_nmnist_bin(
    data: bytes,
    width: int = NMNIST_RESOLUTION[0],
    height: int = NMNIST_RESOLUTION[1],
    sort: bool = False,
) -> EventStream:
    """Decode a 5-byte-per-event ATIS binary blob.

    Polarity bit 1 maps to +1, bit 0 to -1. Events are kept in file order;
    files with decreasing timestamps are rejected unless ``sort`` is set.
    """
    if len(data) % 5 != 0:
        raise TruncatedRecord(f"{len(data)} bytes is not a multiple of 5")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 5).astype(np.int64)
    x = raw[:, 0]
    y = raw[:, 1]
    p = ((raw[:, 2] >> 7) & 1) * 2 - 1
    t = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]
    arr = np.stack([x, y, t, p], axis=1)
    if sort:
        arr = arr[np.argsort(arr[:, 2], kind="stable")]
    return EventStream(arr, width, height)


def encode_nmnist_bin(stream: EventStream) -> bytes:
    """Inverse of :func:`parse_nmnist_bin`; timestamps must fit in 23 bits."""
    if len(stream) and int(stream.ts.max()) >= (1 << _TIMESTAMP_BITS):
        raise ValueError(f"timestamp does not fit in {_TIMESTAMP_BITS} bits")
    out = np.empty((len(stream), 5), dtype=np.uint8)
    out[:, 0] = stream.xs
    out[:, 1] = stream.ys
    pol_bit = ((stream.ps + 1) // 2).astype(np.int64)  # +1 -> 1, -1 -> 0
    out[:, 2] = (pol_bit << 7) | ((stream.ts >> 16) & 0x7F)
    out[:, 3] = (stream.ts >> 8) & 0xFF
    out[:, 4] = stream.ts & 0xFF
    return out.tobytes()


def parse_csv_events(text: str, width: int, height: int, sort: bool = False) -> EventStream:
    """Parse CSV rows "t,x,y,p" (p in {0,1}) into an EventStream.

    Blank lines are skipped. Raises MalformedRow with the 1-based line
    number, and UnsortedTimestamps if timestamps decrease and ``sort``
    was not requested.
    """
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedRow(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            t, x, y, p = (int(part.strip()) for part in parts)
        except ValueError:
            raise MalformedRow(f"line {lineno}: non-integer field in {line!r}") from None
        if p not in (0, 1):
            raise MalformedRow(f"line {lineno}: polarity must be 0 or 1, got {p}")
        rows.append((x, y, t, 2 * p - 1))
    arr = np.array(rows, dtype=np.int64).reshape(len(rows), 4)
    if sort and len(arr):
        arr = arr[np.argsort(arr[:, 2], kind="stable")]
    return EventStream(arr, width, height)


def window_events(stream: EventStream, t0: int, t1: int) -> EventStream:
    """Events with t0 <= t < t1, order preserved."""
    if t0 > t1:
        raise InvalidWindow(f"t0={t0} > t1={t1}")
    lo = int(np.searchsorted(stream.ts, t0, side="left"))
    hi = int(np.searchsorted(stream.ts, t1, side="left"))
    return EventStream(stream.data[lo:hi].copy(), stream.width, stream.height)


# --- dataset indexing ---


@dataclass(frozen=True)
class SampleRef:
    sample_id: str
    events_path: str
    label: str
    rgb_path: str | None = None  # paired frame; required for training losses


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable list of labeled samples plus the ordered class vocabulary."""

    samples: tuple[SampleRef, ...]
    class_list: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_list", tuple(self.class_list))
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise ValueError(f"duplicate sample id {s.sample_id!r}")
            seen.add(s.sample_id)
            if s.label not in self.class_list:
                raise ValueError(f"label {s.label!r} of {s.sample_id!r} not in class list")

    def __len__(self) -> int:
        return len(self.samples)

    def by_label(self) -> dict[str, list[SampleRef]]:
        groups: dict[str, list[SampleRef]] = {c: [] for c in self.class_list}
        for s in self.samples:
            groups[s.label].append(s)
        return groups

    @classmethod
    def from_manifest(cls, path: str | Path, class_list=None) -> "DatasetIndex":
        """Read a JSON-lines manifest; class list defaults to sorted labels."""
        samples = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRow(f"{path}:{lineno}: {e}") from None
            try:
                samples.append(
                    SampleRef(
                        sample_id=str(obj["id"]),
                        events_path=str(obj["events_path"]),
                        label=str(obj["label"]),
                        rgb_path=str(obj["rgb_path"]) if obj.get("rgb_path") else None,
                    )
                )
            except KeyError as e:
                raise MalformedRow(f"{path}:{lineno}: missing key {e}") from None
        if class_list is None:
            class_list = sorted({s.label for s in samples})
        return cls(tuple(samples), tuple(class_list))

    @classmethod
    def from_directory(cls, root: str | Path, patterns=("*.bin", "*.csv")) -> "DatasetIndex":
        """Index a one-directory-per-class layout. No RGB pairs are assumed."""
        root = Path(root)
        classes = sorted(d.name for d in root.iterdir() if d.is_dir())
        samples = []
        for cls_name in classes:
            files: list[Path] = []
            for pat in patterns:
                files.extend((root / cls_name).glob(pat))
            for f in sorted(files):
                samples.append(SampleRef(f"{cls_name}/{f.stem}", str(f), cls_name))
        return cls(tuple(samples), tuple(classes))

    def to_manifest(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for s in self.samples:
                obj = {"id": s.sample_id, "events_path": s.events_path, "label": s.label}
                if s.rgb_path:
                    obj["rgb_path"] = s.rgb_path
                fh.write(json.dumps(obj) + "\n")


def split_dataset(index: DatasetIndex, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Deterministic per-class 5:1 train/test partition.

    Each class contributes floor(n/6) test samples; the remainder
    (including rounding leftovers) goes to train. Classes with fewer than
    6 samples raise ClassTooSmall.
    """
    rng = random.Random(seed)
    train_ids: set[str] = set()
    test_ids: set[str] = set()
    for label, group in index.by_label().items():
        if len(group) < 6:
            raise ClassTooSmall(f"class {label!r} has {len(group)} samples, need >= 6")
        ids = [s.sample_id for s in group]
        rng.shuffle(ids)
        n_test = len(ids) // 6
        test_ids.update(ids[:n_test])
        train_ids.update(ids[n_test:])
    train = tuple(s for s in index.samples if s.sample_id in train_ids)
    test = tuple(s for s in index.samples if s.sample_id in test_ids)
    return (
        replace(index, samples=train),
        replace(index, samples=test),
    )


def load_events_file(path: str | Path, width: int, height: int, sort: bool = False) -> EventStream:
    """Dispatch on extension: .bin -> ATIS binary, anything else -> CSV."""
    path = Path(path)
    if path.suffix.lower() == ".bin":
        return parse_nmnist_bin(path.read_bytes(), width, height, sort=sort)
    return parse_csv_events(path.read_text(), width, height, sort=sort)
