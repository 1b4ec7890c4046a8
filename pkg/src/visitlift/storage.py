"""File formats shared by the CLI stages: impressions CSV, visit-series CSV,
device activity CSV. Device rows are always assigned by sorted device id so
every stage agrees on the row mapping."""

from __future__ import annotations

import json
import os

import numpy as np

from .config import DataError
from .synth import ImpressionArrays


def read_impressions_csv(path: str) -> tuple[ImpressionArrays, list[str]]:
    """Load {device_id, t, lat?, lon?, source, exposed_campaign?} rows.

    Returns the column arrays (device ids mapped to sorted-id rows) and the
    sorted device-id universe.
    """
    if not os.path.exists(path):
        raise DataError(f"impressions file {path!r} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        expected = ["device_id", "t", "lat", "lon", "source", "exposed_campaign"]
        if header[: len(expected)] != expected:
            raise DataError(f"{path}: expected header {','.join(expected)}")
        ids: list[str] = []
        ts: list[int] = []
        lats: list[float] = []
        lons: list[float] = []
        sources: list[int] = []
        exposed: list[int] = []
        for line_no, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise DataError(f"{path}:{line_no}: expected 6 columns, got {len(parts)}")
            try:
                ids.append(parts[0])
                ts.append(int(parts[1]))
                lats.append(float(parts[2]) if parts[2] else np.nan)
                lons.append(float(parts[3]) if parts[3] else np.nan)
                sources.append(int(parts[4]))
                exposed.append(int(parts[5]) if parts[5] else 0)
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from exc
    if not ids:
        raise DataError(f"{path}: no impression rows")
    id_arr = np.asarray(ids)
    universe, dev_rows = np.unique(id_arr, return_inverse=True)
    imp = ImpressionArrays(
        dev_rows.astype(np.int64),
        np.asarray(ts, dtype=np.int64),
        np.asarray(lats, dtype=np.float64),
        np.asarray(lons, dtype=np.float64),
        np.asarray(sources, dtype=np.int8),
        np.asarray(exposed, dtype=bool),
    )
    return imp, universe.tolist()


def device_exposure(imp: ImpressionArrays, n_devices: int) -> np.ndarray:
    exposed = np.zeros(n_devices, dtype=bool)
    exposed[imp.dev[imp.exposed]] = True
    return exposed


def write_series_csv(path: str, counts: np.ndarray, device_ids: list[str]) -> None:
    """Sparse visit series: one row per device-day with non-zero weight."""
    rows, days = np.nonzero(counts)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("device_id,day_index,weight\n")
        for r, d in zip(rows, days):
            fh.write(f"{device_ids[r]},{d},{float(counts[r, d])!r}\n")


def read_series_csv(path: str, device_ids: list[str], t_days: int) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"series file {path!r} does not exist")
    row_of = {dev: i for i, dev in enumerate(device_ids)}
    counts = np.zeros((len(device_ids), t_days))
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "device_id,day_index,weight":
            raise DataError(f"{path}: bad header {header!r}")
        for line_no, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            dev, day, weight = line.split(",")
            if dev not in row_of:
                raise DataError(f"{path}:{line_no}: unknown device {dev!r}")
            day = int(day)
            if not 0 <= day < t_days:
                raise DataError(f"{path}:{line_no}: day {day} outside flight")
            counts[row_of[dev], day] = float(weight)
    return counts


def write_devices_csv(path: str, device_ids: list[str], table) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("device_id,exposed,first_seen,last_impression,active_days\n")
        for i, dev in enumerate(device_ids):
            fh.write(
                f"{dev},{int(table.exposed[i])},{table.first_seen[i]},"
                f"{table.last_impression[i]},{table.active_days[i]}\n"
            )


def read_devices_csv(path: str):
    from .pipeline import DeviceTable

    if not os.path.exists(path):
        raise DataError(f"devices file {path!r} does not exist")
    ids: list[str] = []
    exposed: list[int] = []
    first: list[int] = []
    last: list[int] = []
    active: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "device_id,exposed,first_seen,last_impression,active_days":
            raise DataError(f"{path}: bad header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            dev, e, f, l, a = line.split(",")
            ids.append(dev)
            exposed.append(int(e))
            first.append(int(f))
            last.append(int(l))
            active.append(int(a))
    return DeviceTable(
        device_ids=ids,
        exposed=np.asarray(exposed, dtype=bool),
        first_seen=np.asarray(first, dtype=np.int64),
        last_impression=np.asarray(last, dtype=np.int64),
        active_days=np.asarray(active, dtype=np.int64),
    )


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")
