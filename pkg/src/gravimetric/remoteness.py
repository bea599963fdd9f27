"""Expenditure-weighted remoteness indices from bilateral trade data.

The index for an exporter is the expenditure-share-weighted average
distance to its partners. The exporter's own expenditure is excluded and
the shares renormalized over the remaining partners; a missing distance for
a positive-expenditure partner is a hard error, never silently dropped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .datamodel import BilateralTradeRecord, validate_iso
from .errors import (
    AsymmetricDistance,
    EmptyYear,
    MissingDistance,
    SchemaMismatch,
)

DISTANCES_HEADER = ["country_a", "country_b", "distance_km"]
REMOTENESS_HEADER = ["country", "year", "r"]

#: Symmetric lookup: (a, b) and (b, a) both present with equal values.
DistanceTable = Mapping[tuple[str, str], float]


@dataclass(frozen=True)
class RemotenessIndex:
    country: str
    year: int
    r: float

    def __post_init__(self):
        validate_iso(self.country)
        if not self.r > 0:
            raise ValueError(f"remoteness must be positive, got {self.r}")


def expenditures(bilateral: Sequence[BilateralTradeRecord],
                 year: int) -> tuple[dict[str, int], int]:
    """Per-country import expenditure E_k and world total Y for one year.

    Both are exact integer cents computed from the same table, so the
    shares sum to one by construction.
    """
    e: dict[str, int] = {}
    total = 0
    seen = False
    for rec in bilateral:
        if rec.year != year:
            continue
        seen = True
        e[rec.partner] = e.get(rec.partner, 0) + rec.flow_value_cents
        e.setdefault(rec.reporter, 0)
        total += rec.flow_value_cents
    if not seen:
        raise EmptyYear(f"no bilateral flows for year {year}")
    return e, total


def remoteness_of(country: str, year: int, distances: DistanceTable,
                  expend: Mapping[str, int]) -> RemotenessIndex:
    """Weighted average distance over partners with positive expenditure."""
    partners = [(k, v) for k, v in expend.items() if k != country and v > 0]
    if not partners:
        raise EmptyYear(f"no partner has positive expenditure in {year}")
    denom = sum(v for _, v in partners)
    r = 0.0
    for k, v in sorted(partners):
        d = distances.get((country, k))
        if d is None:
            raise MissingDistance(k)
        r += d * (v / denom)
    return RemotenessIndex(country=country, year=year, r=r)


def exporter_remoteness_series(exporter: str, years: Iterable[int],
                               bilateral: Sequence[BilateralTradeRecord],
                               distances) -> list[RemotenessIndex]:
    """One remoteness index per year for the exporting country.

    ``distances`` is a single symmetric table, or a mapping year -> table
    when per-year distances are available.
    """
    per_year = None
    if distances and isinstance(next(iter(distances)), int):
        per_year = distances
    out = []
    for year in sorted(set(years)):
        table = per_year[year] if per_year is not None else distances
        e, _ = expenditures(bilateral, year)
        out.append(remoteness_of(exporter, year, table, e))
    return out


def read_distances(path) -> dict[tuple[str, str], float]:
    """Load distances.csv and apply the symmetric closure.

    A pair that appears in both orientations with different values is
    rejected.
    """
    table: dict[tuple[str, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != DISTANCES_HEADER:
            raise SchemaMismatch("bad distances header", path=path, row=1)
        for i, row in enumerate(rows, start=2):
            if len(row) != 3:
                raise SchemaMismatch(f"expected 3 fields, got {len(row)}",
                                     path=path, row=i)
            a, b = row[0], row[1]
            try:
                d = float(row[2])
            except ValueError:
                raise SchemaMismatch(f"'{row[2]}' is not a number", path=path,
                                     row=i, column="distance_km") from None
            if d <= 0:
                raise SchemaMismatch(f"distance must be > 0, got {d}",
                                     path=path, row=i, column="distance_km")
            for key in ((a, b), (b, a)):
                if key in table and table[key] != d:
                    raise AsymmetricDistance(
                        f"{path}, row {i}: pair {key} already has distance "
                        f"{table[key]}, conflicting with {d}")
                table[key] = d
    return table


def write_distances(path, table: DistanceTable) -> None:
    pairs = {}
    for (a, b), d in table.items():
        key = (a, b) if a < b else (b, a)
        if key in pairs and pairs[key] != d:
            raise AsymmetricDistance(f"pair {key} has conflicting distances")
        pairs[key] = d
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DISTANCES_HEADER)
        for (a, b) in sorted(pairs):
            w.writerow([a, b, repr(float(pairs[(a, b)]))])


def read_remoteness(path) -> list[RemotenessIndex]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != REMOTENESS_HEADER:
            raise SchemaMismatch("bad remoteness header", path=path, row=1)
        for i, row in enumerate(rows, start=2):
            if len(row) != 3:
                raise SchemaMismatch(f"expected 3 fields, got {len(row)}",
                                     path=path, row=i)
            try:
                out.append(RemotenessIndex(country=row[0], year=int(row[1]),
                                           r=float(row[2])))
            except ValueError as exc:
                raise SchemaMismatch(str(exc), path=path, row=i) from None
    return out


def write_remoteness(path, indices: Iterable[RemotenessIndex]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REMOTENESS_HEADER)
        for idx in sorted(indices, key=lambda r: (r.country, r.year)):
            w.writerow([idx.country, idx.year, repr(float(idx.r))])
