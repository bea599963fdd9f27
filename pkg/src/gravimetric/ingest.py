"""Read, validate, merge, and aggregate the input files.

All files are UTF-8 CSV with a header row, '.' decimal separator and no
thousands separators. Validation failures name the file, row number and
column. Writers emit the same schemas the readers consume, so generated
bundles round-trip.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .datamodel import (
    BilateralTradeRecord,
    CountryYearAttributes,
    GravityObservation,
    IndicatorFlags,
    INDICATOR_NAMES,
    SectorMap,
    TariffLine,
    TradeFlowRecord,
    sector_of,
)
from .errors import (
    BadCode,
    DuplicateAttributeKey,
    FileFormatError,
    FlagConflict,
    NegativeValue,
    NonPositiveCovariate,
    SchemaMismatch,
)

FLOWS_HEADER = ["year", "destination", "cn8", "value_eur", "volume"]
ATTRS_HEADER = ["iso", "year", "gdp", "population", "area_km2", "distance_km",
                "religion_share", *INDICATOR_NAMES]
BILATERAL_HEADER = ["year", "reporter", "partner", "flow_value"]
TARIFFS_HEADER = ["hs6", "advalorem_rate"]
SECTORS_HEADER = ["cn_prefix", "sector_label"]


class AggregationLevel(str, Enum):
    COUNTRY = "year_country"
    SECTOR = "year_country_sector"
    CN8 = "year_country_cn8"


@dataclass(frozen=True)
class AggregatedFlow:
    """One cell of an aggregated flow table."""

    year: int
    destination: str
    value_cents: int
    volume: float | None = None
    sector: str | None = None
    cn8: str | None = None


@dataclass(frozen=True)
class MergeReport:
    n_flows_read: int
    n_attrs_read: int
    n_matched: int
    n_dropped_no_attrs: int
    n_clamped: int
    duplicate_keys: int


def _open_rows(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        yield from csv.reader(fh)


def _check_header(path, header, expected):
    if header is None or [h.strip() for h in header] != expected:
        raise SchemaMismatch(
            f"expected header {','.join(expected)}, got "
            f"{','.join(header) if header else '<empty file>'}",
            path=path, row=1,
        )


def _parse_int(raw, path, row, column):
    try:
        return int(raw)
    except ValueError:
        raise SchemaMismatch(f"'{raw}' is not an integer",
                             path=path, row=row, column=column) from None


def _parse_float(raw, path, row, column):
    try:
        v = float(raw)
    except ValueError:
        raise SchemaMismatch(f"'{raw}' is not a number",
                             path=path, row=row, column=column) from None
    return v


def _parse_money_cents(raw, path, row, column):
    """Parse a decimal euro amount into exact integer cents."""
    try:
        cents = int((Decimal(raw) * 100).quantize(Decimal(1)))
    except InvalidOperation:
        raise SchemaMismatch(f"'{raw}' is not a money amount",
                             path=path, row=row, column=column) from None
    return cents


def _parse_flag(raw, path, row, column):
    if raw not in ("0", "1"):
        raise SchemaMismatch(f"flag must be 0 or 1, got '{raw}'",
                             path=path, row=row, column=column)
    return raw == "1"


def _reraise_at(exc, path, row, column=None):
    if isinstance(exc, NegativeValue):
        raise NegativeValue(str(exc), path=path, row=row, column=column) from None
    if isinstance(exc, BadCode):
        raise BadCode(str(exc), path=path, row=row, column=column) from None
    if isinstance(exc, FlagConflict):
        raise FlagConflict(str(exc), path=path, row=row, column=column) from None
    raise exc


def read_trade_flows(path) -> list[TradeFlowRecord]:
    """Load flows.csv; row order is preserved."""
    rows = _open_rows(path)
    _check_header(path, next(rows, None), FLOWS_HEADER)
    records = []
    for i, row in enumerate(rows, start=2):
        if len(row) != len(FLOWS_HEADER):
            raise SchemaMismatch(f"expected {len(FLOWS_HEADER)} fields, got {len(row)}",
                                 path=path, row=i)
        year = _parse_int(row[0], path, i, "year")
        cents = _parse_money_cents(row[3], path, i, "value_eur")
        if cents < 0:
            raise NegativeValue(f"value_eur is negative ({row[3]})",
                                path=path, row=i, column="value_eur")
        volume = None
        if row[4].strip():
            volume = _parse_float(row[4], path, i, "volume")
            if volume < 0:
                raise NegativeValue(f"volume is negative ({row[4]})",
                                    path=path, row=i, column="volume")
        try:
            rec = TradeFlowRecord(year=year, destination=row[1], cn8=row[2],
                                  value_cents=cents, volume=volume)
        except FileFormatError as exc:
            _reraise_at(exc, path, i)
        records.append(rec)
    return records


def read_attributes(path) -> list[CountryYearAttributes]:
    """Load attrs.csv. Non-positive gdp/population/area/distance are rejected."""
    rows = _open_rows(path)
    _check_header(path, next(rows, None), ATTRS_HEADER)
    records = []
    for i, row in enumerate(rows, start=2):
        if len(row) != len(ATTRS_HEADER):
            raise SchemaMismatch(f"expected {len(ATTRS_HEADER)} fields, got {len(row)}",
                                 path=path, row=i)
        year = _parse_int(row[1], path, i, "year")
        numeric = {}
        for j, name in enumerate(("gdp", "population", "area_km2", "distance_km"),
                                 start=2):
            v = _parse_float(row[j], path, i, name)
            if not v > 0:
                raise NonPositiveCovariate(f"{name} must be > 0, got {row[j]}",
                                           path=path, row=i, column=name)
            numeric[name] = v
        share = _parse_float(row[6], path, i, "religion_share")
        if not 0.0 <= share <= 1.0:
            raise NonPositiveCovariate(
                f"religion_share must lie in [0, 1], got {row[6]}",
                path=path, row=i, column="religion_share")
        flag_values = {}
        for j, name in enumerate(INDICATOR_NAMES, start=7):
            flag_values[name] = _parse_flag(row[j], path, i, name)
        try:
            rec = CountryYearAttributes(
                iso=row[0], year=year, religion_share=share,
                flags=IndicatorFlags(**flag_values), **numeric)
        except FileFormatError as exc:
            _reraise_at(exc, path, i)
        records.append(rec)
    return records


def read_bilateral(path) -> list[BilateralTradeRecord]:
    rows = _open_rows(path)
    _check_header(path, next(rows, None), BILATERAL_HEADER)
    records = []
    for i, row in enumerate(rows, start=2):
        if len(row) != len(BILATERAL_HEADER):
            raise SchemaMismatch(f"expected {len(BILATERAL_HEADER)} fields, got {len(row)}",
                                 path=path, row=i)
        year = _parse_int(row[0], path, i, "year")
        cents = _parse_money_cents(row[3], path, i, "flow_value")
        if cents < 0:
            raise NegativeValue(f"flow_value is negative ({row[3]})",
                                path=path, row=i, column="flow_value")
        try:
            rec = BilateralTradeRecord(year=year, reporter=row[1], partner=row[2],
                                       flow_value_cents=cents)
        except FileFormatError as exc:
            _reraise_at(exc, path, i)
        records.append(rec)
    return records


def read_tariffs(path) -> list[TariffLine]:
    rows = _open_rows(path)
    _check_header(path, next(rows, None), TARIFFS_HEADER)
    records = []
    for i, row in enumerate(rows, start=2):
        if len(row) != len(TARIFFS_HEADER):
            raise SchemaMismatch(f"expected {len(TARIFFS_HEADER)} fields, got {len(row)}",
                                 path=path, row=i)
        rate = _parse_float(row[1], path, i, "advalorem_rate")
        if rate < 0:
            raise NegativeValue(f"advalorem_rate is negative ({row[1]})",
                                path=path, row=i, column="advalorem_rate")
        try:
            rec = TariffLine(hs6=row[0], rate=rate)
        except FileFormatError as exc:
            _reraise_at(exc, path, i)
        records.append(rec)
    return records


def read_sector_map(path) -> SectorMap:
    rows = _open_rows(path)
    _check_header(path, next(rows, None), SECTORS_HEADER)
    mapping = {}
    for i, row in enumerate(rows, start=2):
        if len(row) != len(SECTORS_HEADER):
            raise SchemaMismatch(f"expected {len(SECTORS_HEADER)} fields, got {len(row)}",
                                 path=path, row=i)
        prefix, label = row
        if prefix in mapping:
            raise SchemaMismatch(f"duplicate sector prefix '{prefix}'",
                                 path=path, row=i, column="cn_prefix")
        try:
            SectorMap({prefix: label})
        except FileFormatError as exc:
            _reraise_at(exc, path, i)
        mapping[prefix] = label
    return SectorMap(mapping)


def _fmt_cents(cents: int) -> str:
    return f"{cents // 100}.{cents % 100:02d}"


def _fmt_float(v: float) -> str:
    return repr(float(v))


def write_trade_flows(path, records: Iterable[TradeFlowRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FLOWS_HEADER)
        for r in records:
            vol = "" if r.volume is None else _fmt_float(r.volume)
            w.writerow([r.year, r.destination, r.cn8, _fmt_cents(r.value_cents), vol])


def write_attributes(path, records: Iterable[CountryYearAttributes]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ATTRS_HEADER)
        for r in records:
            w.writerow([r.iso, r.year, _fmt_float(r.gdp), _fmt_float(r.population),
                        _fmt_float(r.area_km2), _fmt_float(r.distance_km),
                        _fmt_float(r.religion_share),
                        *(int(r.flags.get(n)) for n in INDICATOR_NAMES)])


def write_bilateral(path, records: Iterable[BilateralTradeRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BILATERAL_HEADER)
        for r in records:
            w.writerow([r.year, r.reporter, r.partner, _fmt_cents(r.flow_value_cents)])


def write_tariffs(path, records: Iterable[TariffLine]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TARIFFS_HEADER)
        for r in records:
            w.writerow([r.hs6, _fmt_float(r.rate)])


def write_sector_map(path, sector_map: SectorMap) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SECTORS_HEADER)
        for prefix in sorted(sector_map.mapping):
            w.writerow([prefix, sector_map.mapping[prefix]])


def aggregate(flows: Sequence[TradeFlowRecord], level: AggregationLevel,
              sector_map: SectorMap | None = None) -> list[AggregatedFlow]:
    """Sum flows into cells at the requested level.

    Values are summed exactly (integer cents). Zero-valued cells are
    retained. A cell's volume is the sum of record volumes when every
    contributing record carries one, else None.
    """
    level = AggregationLevel(level)
    if level is AggregationLevel.SECTOR and sector_map is None:
        raise ValueError("sector-level aggregation requires a sector map")

    cells: dict[tuple, list] = {}
    for rec in flows:
        if level is AggregationLevel.COUNTRY:
            key = (rec.year, rec.destination, None, None)
        elif level is AggregationLevel.SECTOR:
            key = (rec.year, rec.destination, sector_of(rec.cn8, sector_map), None)
        else:
            key = (rec.year, rec.destination, None, rec.cn8)
        slot = cells.get(key)
        if slot is None:
            cells[key] = [rec.value_cents, rec.volume, rec.volume is not None]
        else:
            slot[0] += rec.value_cents
            if slot[2] and rec.volume is not None:
                slot[1] += rec.volume
            else:
                slot[1], slot[2] = None, False

    out = []
    for key in sorted(cells, key=lambda k: (k[0], k[1], k[2] or "", k[3] or "")):
        value, volume, has_vol = cells[key]
        out.append(AggregatedFlow(year=key[0], destination=key[1],
                                  value_cents=value,
                                  volume=volume if has_vol else None,
                                  sector=key[2], cn8=key[3]))
    return out


def count_duplicate_flow_keys(flows: Sequence[TradeFlowRecord]) -> int:
    """Records sharing a (year, destination, cn8) key with an earlier row."""
    seen = set()
    dups = 0
    for rec in flows:
        key = (rec.year, rec.destination, rec.cn8)
        if key in seen:
            dups += 1
        seen.add(key)
    return dups


RemotenessInput = Mapping[int, float]


def _remoteness_by_year(remoteness) -> dict[int, float] | None:
    if remoteness is None:
        return None
    if isinstance(remoteness, Mapping):
        return dict(remoteness)
    by_year = {}
    for idx in remoteness:     # RemotenessIndex-like records
        by_year[idx.year] = idx.r
    return by_year


def merge(cells: Sequence[AggregatedFlow],
          attrs: Sequence[CountryYearAttributes],
          remoteness=None,
          *,
          clamp_floor: float = 1e-4,
          n_flows_read: int | None = None,
          duplicate_keys: int = 0) -> tuple[list[GravityObservation], MergeReport]:
    """Inner-join flow cells with attributes on (year, destination).

    Cells without attributes are dropped and counted, never errored. A
    religion share of exactly zero is clamped to ``clamp_floor`` so the
    later log transform is defined; clamped rows are counted. Output order
    is (year, iso, sector, cn8).
    """
    attr_index: dict[tuple[str, int], CountryYearAttributes] = {}
    for a in attrs:
        key = (a.iso, a.year)
        if key in attr_index:
            raise DuplicateAttributeKey(f"duplicate attribute rows for {key}")
        attr_index[key] = a

    r_by_year = _remoteness_by_year(remoteness)

    observations = []
    dropped = 0
    clamped = 0
    for cell in cells:
        a = attr_index.get((cell.destination, cell.year))
        if a is None:
            dropped += 1
            continue
        if a.religion_share == 0.0:
            a = replace(a, religion_share=clamp_floor)
            clamped += 1
        r = None if r_by_year is None else r_by_year.get(cell.year)
        observations.append(GravityObservation(
            year=cell.year, iso=cell.destination, value_cents=cell.value_cents,
            attrs=a, sector=cell.sector, cn8=cell.cn8, volume=cell.volume,
            remoteness=r))

    observations.sort(key=lambda o: (o.year, o.iso, o.sector or "", o.cn8 or ""))
    report = MergeReport(
        n_flows_read=len(cells) if n_flows_read is None else n_flows_read,
        n_attrs_read=len(attrs),
        n_matched=len(observations),
        n_dropped_no_attrs=dropped,
        n_clamped=clamped,
        duplicate_keys=duplicate_keys,
    )
    return observations, report


def load_dataset(flows_path, attrs_path, level: AggregationLevel,
                 sector_map: SectorMap | None = None,
                 remoteness=None,
                 clamp_floor: float = 1e-4):
    """Read, aggregate and merge in one step; the usual pipeline entry."""
    flows = read_trade_flows(flows_path)
    attrs = read_attributes(attrs_path)
    cells = aggregate(flows, level, sector_map)
    return merge(cells, attrs, remoteness, clamp_floor=clamp_floor,
                 n_flows_read=len(flows),
                 duplicate_keys=count_duplicate_flow_keys(flows))
