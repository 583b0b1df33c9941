"""Append-only per-round metrics log with a fixed CSV schema.

The column header is part of the artifact contract and must stay bit-exact:
``method,seed,round,client,split,metric,value``. Server-level rows use
client -1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

CSV_HEADER = ("method", "seed", "round", "client", "split", "metric", "value")

SERVER = -1


@dataclass(frozen=True)
class MetricRow:
    method: str
    seed: int
    round: int
    client: int
    split: str
    metric: str
    value: float


@dataclass
class MetricsLog:
    rows: list[MetricRow] = field(default_factory=list)

    def append(self, method, seed, round, client, split, metric, value) -> None:
        self.rows.append(
            MetricRow(str(method), int(seed), int(round), int(client), str(split), str(metric), float(value))
        )

    def extend(self, other: "MetricsLog") -> None:
        self.rows.extend(other.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def sorted_rows(self) -> list[MetricRow]:
        """Total order (seed, round, client); stable for equal keys."""
        return sorted(self.rows, key=lambda r: (r.seed, r.round, r.client))

    def select(self, **criteria) -> list[MetricRow]:
        rows = self.rows
        for key, want in criteria.items():
            rows = [r for r in rows if getattr(r, key) == want]
        return rows

    def series(self, metric: str, **criteria) -> list[float]:
        """Values of one metric in round order (averaged over matching clients)."""
        rows = self.select(metric=metric, **criteria)
        by_round: dict[int, list[float]] = {}
        for r in rows:
            by_round.setdefault(r.round, []).append(r.value)
        return [sum(v) / len(v) for _, v in sorted(by_round.items())]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in self.sorted_rows():
                writer.writerow(
                    [r.method, r.seed, r.round, r.client, r.split, r.metric, repr(r.value)]
                )

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValueError(f"unexpected CSV header {header!r}")
            for row in reader:
                log.append(*row)
        return log

    @classmethod
    def merged(cls, logs: Iterable["MetricsLog"]) -> "MetricsLog":
        out = cls()
        for log in logs:
            out.extend(log)
        return out
