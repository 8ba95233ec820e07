"""Timestamp alignment of independently clocked sensor streams."""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .episode import DatasetError

Stream = Sequence[tuple[float, Any]]


@dataclass
class SyncedRecord:
    timestamp: float
    values: dict[str, Any]
    source_times: dict[str, float]


def synchronize(streams: Mapping[str, Stream], reference: str | None = None,
                rule: str = "hold") -> list[SyncedRecord]:
    """Align every stream to the ticks of ``reference`` (default: the first stream).

    ``rule="hold"`` takes, per stream, the latest record at or before the tick
    (zero-order hold); leading ticks where some stream has no such record are
    dropped. ``rule="nearest"`` takes the record closest in time (ties go to
    the earlier one) and keeps every tick.
    """
    if not streams:
        raise DatasetError("no streams to synchronize")
    for name, recs in streams.items():
        if len(recs) == 0:
            raise DatasetError(f"sensor stream {name!r} is empty")
        times = [t for t, _ in recs]
        if any(b < a for a, b in zip(times, times[1:])):
            raise DatasetError(f"sensor stream {name!r} is not time-ordered")
    if rule not in ("hold", "nearest"):
        raise DatasetError(f"unknown synchronization rule {rule!r}")
    reference = reference or next(iter(streams))
    if reference not in streams:
        raise DatasetError(f"reference stream {reference!r} not present")
    times = {name: [t for t, _ in recs] for name, recs in streams.items()}

    out = []
    for tick, _ in streams[reference]:
        values, sources = {}, {}
        for name, recs in streams.items():
            ts = times[name]
            if rule == "hold":
                k = bisect.bisect_right(ts, tick) - 1
                if k < 0:
                    break
            else:
                k = bisect.bisect_left(ts, tick)
                if k == len(ts) or (k > 0 and tick - ts[k - 1] <= ts[k] - tick):
                    k -= 1
            values[name] = recs[k][1]
            sources[name] = ts[k]
        else:
            out.append(SyncedRecord(tick, values, sources))
    return out
