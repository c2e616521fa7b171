"""Data model for mixed-type time series and the JSON-lines dataset format.

A record pairs a regularly sampled continuous signal with an irregular,
typed event sequence. Records are serialized one per line; every real is
written with 17 significant digits so that decoding reproduces the original
64-bit floats bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_VERSION = 1
RECORD_KEYS = ("id", "i_ec", "i_ce", "seed", "t0", "dt", "cont", "events")
_U64_MAX = 2**64 - 1


class RecordParseError(ValueError):
    """Malformed record line. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class RecordValidationError(ValueError):
    """A record that parses but violates one or more invariants."""

    def __init__(self, violations: Sequence[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


@dataclass(frozen=True)
class ContinuousSeries:
    t0: float
    dt: float
    values: tuple[float, ...]

    @cached_property
    def array(self) -> np.ndarray:
        arr = np.asarray(self.values, dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def times(self) -> np.ndarray:
        arr = self.t0 + np.arange(len(self.values)) * self.dt
        arr.setflags(write=False)
        return arr

    @property
    def last_time(self) -> float:
        return self.t0 + (len(self.values) - 1) * self.dt


@dataclass(frozen=True)
class EventSequence:
    events: tuple[tuple[float, int], ...] = ()

    def __len__(self) -> int:
        return len(self.events)

    @cached_property
    def times(self) -> np.ndarray:
        arr = np.asarray([e[0] for e in self.events], dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def types(self) -> np.ndarray:
        arr = np.asarray([e[1] for e in self.events], dtype=np.int64)
        arr.setflags(write=False)
        return arr


@dataclass(frozen=True)
class MttsRecord:
    id: str
    cont: ContinuousSeries
    events: EventSequence
    i_ec: float
    i_ce: float
    seed: int


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    split: str
    k_event_types: int
    record_count: int
    grid_shape: tuple[int, int]

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "split": self.split,
                "k_event_types": self.k_event_types,
                "record_count": self.record_count,
                "grid_shape": list(self.grid_shape),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        obj = json.loads(text)
        manifest = cls(
            version=int(obj["version"]),
            split=str(obj["split"]),
            k_event_types=int(obj["k_event_types"]),
            record_count=int(obj["record_count"]),
            grid_shape=(int(obj["grid_shape"][0]), int(obj["grid_shape"][1])),
        )
        if manifest.version != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {manifest.version}")
        if manifest.split not in ("train", "test"):
            raise ValueError(f"unknown split {manifest.split!r}")
        return manifest


@dataclass(frozen=True)
class Dataset:
    manifest: DatasetManifest
    records: tuple[MttsRecord, ...] = field(default=())

    def cells(self) -> dict[tuple[float, float], list[MttsRecord]]:
        """Records grouped by ``(i_ec, i_ce)`` in first-seen order."""
        out: dict[tuple[float, float], list[MttsRecord]] = {}
        for rec in self.records:
            out.setdefault((rec.i_ec, rec.i_ce), []).append(rec)
        return out


def validate_record(record: MttsRecord, k: int | None = None) -> list[str]:
    """Return the list of invariant violations; empty means the record is valid.

    ``k`` is the number of event types; type ids are only range-checked
    against it when given.
    """
    problems: list[str] = []
    if not isinstance(record.id, str):
        problems.append("id is not a string")
    for name in ("i_ec", "i_ce"):
        v = getattr(record, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
            problems.append(f"{name} out of [0,1]")
    seed = record.seed
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or not 0 <= seed <= _U64_MAX:
        problems.append("seed is not a 64-bit unsigned integer")

    cont = record.cont
    if not math.isfinite(cont.t0):
        problems.append("t0 not finite")
    if not (math.isfinite(cont.dt) and cont.dt > 0):
        problems.append("dt must be positive and finite")
    if len(cont.values) == 0:
        problems.append("continuous values empty")
    elif not all(math.isfinite(v) for v in cont.values):
        problems.append("continuous values not finite")

    prev = -math.inf
    ordered = True
    for t, typ in record.events.events:
        if not math.isfinite(t) or t < 0:
            problems.append("event time not finite or negative")
            break
        if t <= prev:
            ordered = False
        prev = t
        if isinstance(typ, bool) or not isinstance(typ, (int, np.integer)) or typ < 0:
            problems.append("event type id not a non-negative integer")
            break
        if k is not None and typ >= k:
            problems.append(f"event type id {typ} >= K={k}")
            break
    if not ordered:
        problems.append("event times not strictly increasing")
    if (
        record.events.events
        and len(cont.values) > 0
        and math.isfinite(prev)
        and prev > cont.last_time
    ):
        problems.append("event time after last continuous timestamp")
    return problems


def _num(x: float) -> str:
    s = format(float(x), ".17g")
    # keep the token a JSON float so "-0" and integral values decode as floats
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def encode_record(record: MttsRecord) -> str:
    """Serialize ``record`` as a single JSON line (without trailing newline)."""
    problems = validate_record(record)
    if problems:
        raise RecordValidationError(problems)
    cont = ",".join(_num(v) for v in record.cont.values)
    events = ",".join(f"[{_num(t)},{int(k)}]" for t, k in record.events.events)
    return (
        f'{{"id":{json.dumps(record.id)},"i_ec":{_num(record.i_ec)},'
        f'"i_ce":{_num(record.i_ce)},"seed":{int(record.seed)},'
        f'"t0":{_num(record.cont.t0)},"dt":{_num(record.cont.dt)},'
        f'"cont":[{cont}],"events":[{events}]}}'
    )


def _as_float(v: object, key: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RecordParseError(f"field {key!r} is not a number")
    return float(v)


def decode_record(line: str, k: int | None = None) -> MttsRecord:
    """Parse one JSON line produced by :func:`encode_record`."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        offset = len(line[: exc.pos].encode("utf-8"))
        raise RecordParseError(f"malformed record: {exc.msg}", offset) from None
    if not isinstance(obj, dict):
        raise RecordParseError("record is not a JSON object")
    for key in RECORD_KEYS:
        if key not in obj:
            raise RecordParseError(f"missing key {key!r}")
    if not isinstance(obj["cont"], list) or not isinstance(obj["events"], list):
        raise RecordParseError("'cont' and 'events' must be arrays")
    seed = obj["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise RecordParseError("field 'seed' is not an integer")

    events = []
    for item in obj["events"]:
        if not (isinstance(item, list) and len(item) == 2):
            raise RecordParseError("event entries must be [time, typeid] pairs")
        t, typ = item
        if isinstance(typ, bool) or not isinstance(typ, int):
            raise RecordParseError("event type id is not an integer")
        events.append((_as_float(t, "events"), typ))

    record = MttsRecord(
        id=obj["id"] if isinstance(obj["id"], str) else str(obj["id"]),
        cont=ContinuousSeries(
            t0=_as_float(obj["t0"], "t0"),
            dt=_as_float(obj["dt"], "dt"),
            values=tuple(_as_float(v, "cont") for v in obj["cont"]),
        ),
        events=EventSequence(tuple(events)),
        i_ec=_as_float(obj["i_ec"], "i_ec"),
        i_ce=_as_float(obj["i_ce"], "i_ce"),
        seed=seed,
    )
    problems = validate_record(record, k)
    if problems:
        raise RecordValidationError(problems)
    return record


def write_dataset(directory: str | os.PathLike, dataset: Dataset) -> Path:
    """Write ``manifest.json`` and ``records.jsonl`` into ``directory``."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    if dataset.manifest.record_count != len(dataset.records):
        raise ValueError("manifest record_count does not match number of records")
    with open(path / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dataset.manifest.to_json() + "\n")
    with open(path / "records.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in dataset.records:
            fh.write(encode_record(rec) + "\n")
    return path


def read_dataset(directory: str | os.PathLike) -> Dataset:
    path = Path(directory)
    manifest = DatasetManifest.from_json((path / "manifest.json").read_text(encoding="utf-8"))
    records = []
    with open(path / "records.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                records.append(decode_record(line, manifest.k_event_types))
            except RecordParseError as exc:
                raise RecordParseError(f"line {lineno}: {exc}", exc.offset) from None
    if len(records) != manifest.record_count:
        raise ValueError(
            f"manifest says {manifest.record_count} records, found {len(records)}"
        )
    return Dataset(manifest, tuple(records))


def make_record(
    id: str,
    values: Iterable[float],
    dt: float,
    events: Iterable[tuple[float, int]] = (),
    i_ec: float = 0.0,
    i_ce: float = 0.0,
    seed: int = 0,
    t0: float = 0.0,
) -> MttsRecord:
    """Convenience constructor normalizing containers to tuples of Python scalars."""
    return MttsRecord(
        id=id,
        cont=ContinuousSeries(float(t0), float(dt), tuple(float(v) for v in values)),
        events=EventSequence(tuple((float(t), int(k)) for t, k in events)),
        i_ec=float(i_ec),
        i_ce=float(i_ce),
        seed=int(seed),
    )
