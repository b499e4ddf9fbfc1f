"""CSV and JSON readers and writers.

Floats are written with 17 significant digits so that every double survives a
round trip unchanged.
"""

from __future__ import annotations

import csv
import json
from datetime import datetime
from pathlib import Path

import numpy as np

from .model import ExecutionSpec, MarketPath, OUParams, SpecError
from .riccati import RiccatiSolution
from .simulation import ExecutionTrace, PnLSummary


class ParseError(SpecError):
    """Malformed input file; the message carries the file name and line number."""


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _tolist(a):
    return np.asarray(a, dtype=float).tolist()


def dump_json(obj, path: Path) -> None:
    # json emits repr(float), which is already the shortest round-trip form
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}:{err.lineno}: invalid JSON ({err.msg})") from None


def ou_to_dict(ou: OUParams, names=()) -> dict:
    out = {"R": _tolist(ou.R), "Sbar": _tolist(ou.Sbar), "Sigma": _tolist(ou.Sigma)}
    if names:
        out["names"] = list(names)
    return out


def ou_from_dict(data: dict, strict: bool = True) -> OUParams:
    missing = [k for k in ("R", "Sbar", "Sigma") if k not in data]
    if missing:
        raise SpecError(f"OU parameters missing fields {missing}")
    return OUParams(data["R"], data["Sbar"], data["Sigma"], strict=strict)


def exec_to_dict(ex: ExecutionSpec) -> dict:
    return {"eta": _tolist(ex.eta), "K": _tolist(ex.K), "GammaTilde": _tolist(ex.GammaTilde),
            "gamma": ex.gamma, "T": ex.T}


def exec_from_dict(data: dict, strict: bool = True) -> ExecutionSpec:
    missing = [k for k in ("eta", "GammaTilde", "gamma", "T") if k not in data]
    if missing:
        raise SpecError(f"execution spec missing fields {missing}")
    return ExecutionSpec(data["eta"], data["GammaTilde"], data["gamma"], data["T"], K=data.get("K"), strict=strict)


def _parse_time(cell: str):
    try:
        return float(cell), "fractional_days"
    except ValueError:
        return datetime.fromisoformat(cell.strip()), "iso8601"


def read_prices_csv(path: Path) -> tuple[MarketPath, str]:
    """Read ``time,<name1>,...`` rows. Returns the path and the detected time format.

    ISO-8601 timestamps are converted to fractional days since the first row.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}:1: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "time":
        raise ParseError(f"{path}:1: header must be 'time,<asset names>'")
    names = tuple(header[1:])
    times, prices, kind = [], [], None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            t, k = _parse_time(row[0])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: cannot parse time {row[0]!r}") from None
        if kind is None:
            kind = k
        elif k != kind:
            raise ParseError(f"{path}:{lineno}: time format changes from {kind} to {k}")
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric price in {row[1:]}") from None
        if not all(np.isfinite(vals)):
            raise ParseError(f"{path}:{lineno}: non-finite price")
        times.append(t)
        prices.append(vals)
    if not times:
        raise ParseError(f"{path}:2: no data rows")
    if kind == "iso8601":
        t0 = times[0]
        times = [(t - t0).total_seconds() / 86400.0 for t in times]
    t = np.array(times, dtype=float)
    bad = np.flatnonzero(np.diff(t) <= 0)
    if bad.size:
        raise ParseError(f"{path}:{bad[0] + 3}: time does not increase")
    return MarketPath(t, np.array(prices), names), kind


def write_prices_csv(mp: MarketPath, path: Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", *mp.names])
        for t, row in zip(mp.times, mp.prices):
            w.writerow([fmt(t), *map(fmt, row)])


def _labels(prefix: str, d: int, matrix: bool) -> list[str]:
    if matrix:
        return [f"{prefix}_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    return [f"{prefix}_{i + 1}" for i in range(d)]


def write_riccati_csv(sol: RiccatiSolution, path: Path) -> None:
    d = sol.d
    header = ["t", *_labels("A", d, True), *_labels("B", d, True), *_labels("C", d, True),
              *_labels("D", d, False), *_labels("E", d, False), "F"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, t in enumerate(sol.times):
            vals = [t, *sol.A[k].ravel(), *sol.B[k].ravel(), *sol.C[k].ravel(), *sol.D[k], *sol.E[k], sol.F[k]]
            w.writerow(list(map(fmt, vals)))


def trace_header(d: int) -> list[str]:
    return ["t", *_labels("q", d, False), *_labels("v", d, False), *_labels("S", d, False),
            *_labels("Stilde", d, False), "X", "pnl", "Xfund"]


def write_trace_csv(tr: ExecutionTrace, path: Path) -> None:
    """One row per node; the rate columns of the final row are empty."""
    d = tr.q.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(d))
        for k in range(tr.N + 1):
            v = list(map(fmt, tr.v[k])) if k < tr.N else [""] * d
            w.writerow([fmt(tr.times[k]), *map(fmt, tr.q[k]), *v, *map(fmt, tr.S[k]), *map(fmt, tr.Stilde[k]),
                        fmt(tr.X[k]), fmt(tr.pnl[k]), fmt(tr.Xfund[k])])


def read_trace_csv(path: Path) -> ExecutionTrace:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d = (len(header) - 4) // 4
    if header != trace_header(d):
        raise ParseError(f"{path}:1: unexpected trace header")
    body = rows[1:]
    try:
        num = np.array([[float(c) if c else np.nan for c in r] for r in body])
    except ValueError as err:
        raise ParseError(f"{path}: {err}") from None
    t = num[:, 0]
    q = num[:, 1:1 + d]
    v = num[:-1, 1 + d:1 + 2 * d]
    S = num[:, 1 + 2 * d:1 + 3 * d]
    St = num[:, 1 + 3 * d:1 + 4 * d]
    return ExecutionTrace(t, q, v, S, St, num[:, -3], num[:, -1], num[:, -2])


def write_histogram_csv(summary: PnLSummary, path: Path) -> None:
    e = summary.bin_edges
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(e[:-1], e[1:], summary.counts):
            w.writerow([fmt(lo), fmt(hi), int(c)])
