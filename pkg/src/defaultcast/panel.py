"""Firm/macro covariate panels, event records, and order-3 differencing.

The monthly cross-section is stacked into one vector per month with layout
``(D_1..D_n, V_1..V_n, r, S)``: one distance-to-default column and one
trailing-stock-return column per firm, then the Treasury bill rate and the
trailing index return. Missing firm cells are NaN; the two macro columns must
be fully observed. Panels are immutable after construction and safe to share
across workers.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .validation import carry_forward

__all__ = [
    "DEFAULT",
    "OTHER_EXIT",
    "CENSORED",
    "EVENT_TYPES",
    "EventRecord",
    "FirmPanel",
    "DifferencedPanel",
    "PanelParseError",
    "PanelValidationError",
    "InsufficientHistoryError",
    "InversionError",
    "load_panel",
    "write_panel_files",
    "difference_order3",
    "invert_difference",
    "reconstruct_levels",
    "tail_levels",
]

DEFAULT = "default"
OTHER_EXIT = "exit"
CENSORED = "censored"
EVENT_TYPES = (DEFAULT, OTHER_EXIT, CENSORED)

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


class PanelParseError(ValueError):
    """A malformed input row; the message names the file and line."""


class PanelValidationError(ValueError):
    """Structurally valid input that violates a panel contract."""


class InsufficientHistoryError(PanelValidationError):
    """Too few months to apply the order-3 difference."""


class InversionError(ValueError):
    """Missing trailing levels prevent reconstructing future levels."""


def _month_ordinal(label: str, context: str = "") -> int:
    match = _MONTH_RE.match(label.strip())
    if not match:
        raise PanelParseError(f"{context}expected month as YYYY-MM, got {label!r}")
    year, month = int(match.group(1)), int(match.group(2))
    if not 1 <= month <= 12:
        raise PanelParseError(f"{context}month out of range in {label!r}")
    return year * 12 + (month - 1)


def month_label(ordinal: int) -> str:
    return f"{ordinal // 12:04d}-{ordinal % 12 + 1:02d}"


@dataclass(frozen=True)
class EventRecord:
    """Resolution of one firm's observation: what happened and when.

    ``month`` counts months since the panel origin (1-based); censored firms
    observed through the end of the panel carry ``month == tau``.
    """

    firm_id: str
    month: int
    kind: str

    def __post_init__(self):
        if self.kind not in EVENT_TYPES:
            raise PanelValidationError(
                f"event kind must be one of {EVENT_TYPES}, got {self.kind!r}"
            )
        if self.month < 1:
            raise PanelValidationError(f"event month must be >= 1, got {self.month}")

    @property
    def indicator(self) -> tuple[int, int]:
        return (int(self.kind == DEFAULT), int(self.kind == OTHER_EXIT))


@dataclass(frozen=True)
class FirmPanel:
    """Stacked monthly covariate levels for ``n`` firms plus two macro series."""

    firm_ids: tuple
    time_index: tuple
    values: np.ndarray  # (tau, 2n + 2) float, NaN = missing firm cell

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "firm_ids", tuple(self.firm_ids))
        object.__setattr__(self, "time_index", tuple(self.time_index))
        n = len(self.firm_ids)
        if values.ndim != 2 or values.shape != (len(self.time_index), 2 * n + 2):
            raise PanelValidationError(
                f"values must have shape (tau, 2n+2) = "
                f"({len(self.time_index)}, {2 * n + 2}), got {values.shape}"
            )
        ordinals = [_month_ordinal(lbl) for lbl in self.time_index]
        if any(b - a != 1 for a, b in zip(ordinals, ordinals[1:])):
            raise PanelValidationError("time_index must be consecutive months")
        if np.isnan(values[:, 2 * n:]).any():
            raise PanelValidationError("macro columns must be fully observed")
        values.setflags(write=False)

    @property
    def n_firms(self) -> int:
        return len(self.firm_ids)

    @property
    def n_periods(self) -> int:
        return len(self.time_index)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def firm_columns(self, i: int) -> tuple[int, int]:
        """Column indices of firm ``i``'s (D, V) series in the stacked layout."""
        return i, self.n_firms + i

    @cached_property
    def windows(self) -> np.ndarray:
        """(n, 2) first/last month index (0-based) with any firm cell observed."""
        n = self.n_firms
        out = np.full((n, 2), -1, dtype=int)
        observed = ~np.isnan(self.values)
        for i in range(n):
            rows = np.nonzero(observed[:, i] | observed[:, n + i])[0]
            if rows.size:
                out[i] = rows[0], rows[-1]
        return out

    def firm_index(self, firm_id: str) -> int:
        try:
            return self.firm_ids.index(firm_id)
        except ValueError:
            raise KeyError(f"unknown firm id {firm_id!r}") from None


@dataclass(frozen=True)
class DifferencedPanel:
    """Order-3 differences of a :class:`FirmPanel`, one month shorter by 3.

    ``values[t] = source[t + 3] - source[t]``; a cell is observed iff both of
    its source cells are. ``source`` is retained so that level paths can be
    reconstructed (the trailing three observed levels seed forecasts, the
    leading ones seed historical reconstruction).
    """

    firm_ids: tuple
    time_index: tuple
    values: np.ndarray  # (tau - 3, 2n + 2)
    source: FirmPanel

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "firm_ids", tuple(self.firm_ids))
        object.__setattr__(self, "time_index", tuple(self.time_index))
        if values.shape != (self.source.n_periods - 3, self.source.m):
            raise PanelValidationError(
                "differenced values must be exactly 3 months shorter than source"
            )
        values.setflags(write=False)

    @property
    def n_firms(self) -> int:
        return len(self.firm_ids)

    @property
    def n_periods(self) -> int:
        return len(self.time_index)

    @property
    def m(self) -> int:
        return self.values.shape[1]


def _read_rows(path, expected_header):
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelParseError(f"{path}:1: empty file") from None
        if [h.strip() for h in header] != expected_header:
            raise PanelParseError(
                f"{path}:1: expected header {','.join(expected_header)!r}, "
                f"got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(expected_header):
                raise PanelParseError(
                    f"{path}:{lineno}: expected {len(expected_header)} fields, "
                    f"got {len(row)}"
                )
            yield lineno, [cell.strip() for cell in row]


def _parse_float(cell, path, lineno, name, allow_blank=False):
    if cell == "":
        if allow_blank:
            return np.nan
        raise PanelParseError(f"{path}:{lineno}: {name} must not be blank")
    try:
        return float(cell)
    except ValueError:
        raise PanelParseError(
            f"{path}:{lineno}: cannot parse {name} value {cell!r}"
        ) from None


def load_panel(events_path, firms_path, macro_path):
    """Load and cross-validate the three input files.

    Returns ``(FirmPanel, list[EventRecord])``. The macro file defines the
    panel's time index; firm rows outside it, duplicate ``(firm, month)``
    rows, events for unknown firms, events outside the panel range, and panel
    firms lacking an event record are all rejected.
    """
    months, macro = [], []
    for lineno, (month, r, s) in _read_rows(macro_path, ["month", "r", "S"]):
        months.append(_month_ordinal(month, f"{macro_path}:{lineno}: "))
        macro.append(
            (
                _parse_float(r, macro_path, lineno, "r"),
                _parse_float(s, macro_path, lineno, "S"),
            )
        )
    if not months:
        raise PanelValidationError(f"{macro_path}: no macro rows")
    if any(b - a != 1 for a, b in zip(months, months[1:])):
        raise PanelValidationError(f"{macro_path}: months must be consecutive")
    origin = months[0]
    tau = len(months)
    time_index = tuple(month_label(o) for o in months)

    firm_ids: list[str] = []
    firm_pos: dict[str, int] = {}
    cells: dict[tuple[str, int], tuple[float, float]] = {}
    for lineno, (firm, month, d, v) in _read_rows(
        firms_path, ["firm_id", "month", "D", "V"]
    ):
        ordinal = _month_ordinal(month, f"{firms_path}:{lineno}: ")
        t = ordinal - origin
        if not 0 <= t < tau:
            raise PanelValidationError(
                f"{firms_path}:{lineno}: month {month} outside the macro range"
            )
        if firm not in firm_pos:
            firm_pos[firm] = len(firm_ids)
            firm_ids.append(firm)
        key = (firm, t)
        if key in cells:
            raise PanelValidationError(
                f"{firms_path}:{lineno}: duplicate row for firm {firm!r}, month {month}"
            )
        cells[key] = (
            _parse_float(d, firms_path, lineno, "D", allow_blank=True),
            _parse_float(v, firms_path, lineno, "V", allow_blank=True),
        )

    n = len(firm_ids)
    values = np.full((tau, 2 * n + 2), np.nan)
    values[:, 2 * n:] = np.asarray(macro)
    for (firm, t), (d, v) in cells.items():
        i = firm_pos[firm]
        values[t, i] = d
        values[t, n + i] = v

    events: list[EventRecord] = []
    seen: set[str] = set()
    for lineno, (firm, month, kind) in _read_rows(
        events_path, ["firm_id", "event_month", "event_type"]
    ):
        if firm not in firm_pos:
            raise PanelValidationError(
                f"{events_path}:{lineno}: firm {firm!r} has no panel rows"
            )
        if firm in seen:
            raise PanelValidationError(
                f"{events_path}:{lineno}: duplicate event record for firm {firm!r}"
            )
        seen.add(firm)
        if kind not in EVENT_TYPES:
            raise PanelParseError(
                f"{events_path}:{lineno}: event_type must be one of "
                f"{'/'.join(EVENT_TYPES)}, got {kind!r}"
            )
        ordinal = _month_ordinal(month, f"{events_path}:{lineno}: ")
        t = ordinal - origin + 1
        if not 1 <= t <= tau:
            raise PanelValidationError(
                f"{events_path}:{lineno}: event month {month} outside the panel range"
            )
        events.append(EventRecord(firm_id=firm, month=t, kind=kind))

    missing = [f for f in firm_ids if f not in seen]
    if missing:
        raise PanelValidationError(
            f"{events_path}: no event record for firm(s) {', '.join(map(repr, missing[:5]))}"
            + ("..." if len(missing) > 5 else "")
        )

    panel = FirmPanel(firm_ids=tuple(firm_ids), time_index=time_index, values=values)
    return panel, events


def write_panel_files(panel: FirmPanel, events, firms_path, macro_path, events_path) -> None:
    """Write a panel and its event records in the CSV input formats."""
    n = panel.n_firms
    origin = _month_ordinal(panel.time_index[0])
    with open(macro_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["month", "r", "S"])
        for t, label in enumerate(panel.time_index):
            writer.writerow(
                [label, repr(float(panel.values[t, 2 * n])), repr(float(panel.values[t, 2 * n + 1]))]
            )
    with open(firms_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["firm_id", "month", "D", "V"])
        for i, firm in enumerate(panel.firm_ids):
            for t, label in enumerate(panel.time_index):
                d = panel.values[t, i]
                v = panel.values[t, n + i]
                if np.isnan(d) and np.isnan(v):
                    continue
                writer.writerow(
                    [
                        firm,
                        label,
                        "" if np.isnan(d) else repr(float(d)),
                        "" if np.isnan(v) else repr(float(v)),
                    ]
                )
    with open(events_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["firm_id", "event_month", "event_type"])
        for rec in events:
            writer.writerow([rec.firm_id, month_label(origin + rec.month - 1), rec.kind])


def difference_order3(panel: FirmPanel) -> DifferencedPanel:
    """Quarter-over-quarter differences on the monthly grid.

    ``out[t] = panel[t + 3] - panel[t]``; NaN propagates so that no cell is
    invented where either source month is missing.
    """
    if panel.n_periods < 4:
        raise InsufficientHistoryError(
            f"need at least 4 months to difference, got {panel.n_periods}"
        )
    values = panel.values[3:] - panel.values[:-3]
    return DifferencedPanel(
        firm_ids=panel.firm_ids,
        time_index=panel.time_index[:-3],
        values=values,
        source=panel,
    )


def tail_levels(panel: FirmPanel, columns=None, staleness_limit: int | None = None):
    """Carried-forward levels at the last three panel months.

    Returns ``(tails, age)`` with shape ``(3, k)``: row ``j`` holds the level
    in force at month ``tau - 2 + j`` (1-based). Entries are NaN where a
    column has no observation at or before that month (or is staler than
    ``staleness_limit``).
    """
    cols = np.arange(panel.m) if columns is None else np.asarray(columns, dtype=int)
    filled, age = carry_forward(panel.values[:, cols], limit=staleness_limit)
    return filled[-3:], age[-3:]


def invert_difference(diffs: DifferencedPanel, future_diffs, columns=None) -> np.ndarray:
    """Turn forecast differences back into level paths.

    ``future_diffs`` has shape ``(s, k)`` holding the differenced forecasts
    at months ``tau' + 1 .. tau' + s`` for the selected columns. Levels obey
    ``level[tau + h] = level[tau + h - 3] + future_diffs[h]``, seeded by the
    carried-forward levels of the last three source months. Raises
    :class:`InversionError` if any requested column lacks all three seeds.
    """
    future = np.asarray(future_diffs, dtype=float)
    if future.ndim != 2:
        raise ValueError("future_diffs must be 2-d (horizon, columns)")
    tails, _ = tail_levels(diffs.source, columns=columns)
    if future.shape[1] != tails.shape[1]:
        raise ValueError(
            f"future_diffs has {future.shape[1]} columns but {tails.shape[1]} were selected"
        )
    bad = np.nonzero(np.isnan(tails).any(axis=0))[0]
    if bad.size:
        raise InversionError(
            f"columns {bad.tolist()} lack the three trailing levels needed for inversion"
        )
    s = future.shape[0]
    levels = np.empty_like(future)
    for h in range(s):
        base = tails[h] if h < 3 else levels[h - 3]
        levels[h] = base + future[h]
    return levels


def reconstruct_levels(diffs: DifferencedPanel, prefer_source: bool = True) -> np.ndarray:
    """Rebuild a level panel from a differenced one.

    Each column follows its three interleaved chains
    ``level[t] = level[t - 3] + diff[t - 3]`` seeded by the source panel's
    observed levels. With ``prefer_source`` (the default) every cell observed
    in the source is copied verbatim, so reconstructing the unmodified
    differences of a panel reproduces it exactly, and the chains only fill
    gaps. With ``prefer_source=False`` the chains take precedence and source
    levels seed only chain starts and restarts after gaps; this is the mode
    for simulated differences, where each firm's simulated level path must
    stay anchored at its first observed months but then run free.
    """
    src = diffs.source.values
    d = diffs.values
    tau = src.shape[0]
    out = np.full_like(src, np.nan)
    for t in range(tau):
        if t >= 3:
            ext = out[t - 3] + d[t - 3]
        else:
            ext = np.full(src.shape[1], np.nan)
        if prefer_source:
            out[t] = np.where(np.isnan(src[t]), ext, src[t])
        else:
            out[t] = np.where(np.isnan(ext), src[t], ext)
    return out
