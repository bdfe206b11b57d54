"""Event, histogram and summary files.

Event files are CSV with a ``#``-prefixed header of ``key: value`` lines
followed by the column row ``shot_id,t,x,y,z_equiv``.  Numbers are written
with 17 significant digits so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import io as _io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import DataError
from .core import Shot

__all__ = [
    "FORMAT_VERSION",
    "EventFile",
    "write_events",
    "read_events",
    "write_histogram",
    "write_summary",
    "write_slices",
    "format_summary",
]

FORMAT_VERSION = 1
EVENT_COLUMNS = ("shot_id", "t", "x", "y", "z_equiv")
UNITS = "t=s x=m y=m z_equiv=m"
_FLOAT = "%.17g"


@dataclass
class EventFile:
    """Parsed event file: header fields plus one :class:`Shot` per shot id."""

    header: dict
    shots: list = field(default_factory=list)

    @property
    def config_digest(self):
        return self.header.get("config_digest")

    @property
    def n_events(self):
        return sum(len(s) for s in self.shots)


def _header_lines(header):
    out = ["# atomcorr event file"]
    for key, value in header.items():
        if isinstance(value, float):
            value = repr(value)
        out.append(f"# {key}: {value}")
    return out


def write_events(path, shots, experiment="", config_digest="", extra=None):
    """Write shots sorted by ``(shot_id, t)``.

    The header records format version, units, experiment, config digest and
    the number of shots (so empty shots survive a round trip).
    """
    shots = sorted(shots, key=lambda s: s.shot_id)
    header = {
        "format_version": FORMAT_VERSION,
        "units": UNITS,
        "experiment": experiment,
        "config_digest": config_digest,
        "n_shots": len(shots),
        "shot_ids": _compress_ids([s.shot_id for s in shots]),
    }
    header.update(extra or {})
    n = sum(len(s) for s in shots)
    rows = np.empty((n, 5))
    ids = np.empty(n, dtype=np.int64)
    k = 0
    for s in shots:
        m = len(s)
        ids[k : k + m] = s.shot_id
        rows[k : k + m, 1] = s.t
        rows[k : k + m, 2] = s.x
        rows[k : k + m, 3] = s.y
        rows[k : k + m, 4] = s.z_equiv
        k += m
    buf = _io.StringIO()
    buf.write("\n".join(_header_lines(header)) + "\n")
    buf.write(",".join(EVENT_COLUMNS) + "\n")
    if n:
        body = np.column_stack([ids.astype(object), *(rows[:, j] for j in range(1, 5))])
        np.savetxt(buf, body, fmt=["%d"] + [_FLOAT] * 4, delimiter=",")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def _compress_ids(ids):
    """``0-9,12,15-16`` style run-length form of sorted integer ids."""
    parts = []
    i = 0
    while i < len(ids):
        j = i
        while j + 1 < len(ids) and ids[j + 1] == ids[j] + 1:
            j += 1
        parts.append(str(ids[i]) if i == j else f"{ids[i]}-{ids[j]}")
        i = j + 1
    return ",".join(parts)


def _expand_ids(text):
    ids = []
    for part in filter(None, text.split(",")):
        lo, _, hi = part.partition("-")
        ids.extend(range(int(lo), int(hi or lo) + 1))
    return ids


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_events(path):
    """Read an event file written by :func:`write_events`.

    Raises
    ------
    DataError
        For a missing column row, malformed rows (with their line number),
        rows out of ``(shot_id, t)`` order or a file with no events.
    """
    header = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = None
    for i, line in enumerate(lines):
        if line.startswith("#"):
            key, sep, value = line[1:].partition(":")
            if sep:
                header[key.strip()] = _parse_value(value.strip())
            continue
        if line.strip() == ",".join(EVENT_COLUMNS):
            start = i + 1
            break
        raise DataError(f"{path}: line {i + 1}: expected the column row {','.join(EVENT_COLUMNS)!r}")
    if start is None:
        raise DataError(f"{path}: no column row found")
    version = header.get("format_version")
    if version is not None and version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {version!r}")
    for i in range(start, len(lines)):
        line = lines[i]
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise DataError(f"{path}: line {i + 1}: expected 5 fields, got {len(parts)}")
        try:
            sid = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{path}: line {i + 1}: {exc}") from None
        if not all(np.isfinite(vals)):
            raise DataError(f"{path}: line {i + 1}: non-finite value")
        rows.append((sid, *vals, i + 1))
    if not rows:
        raise DataError(f"{path}: file contains no events")
    arr = np.array([r[1:5] for r in rows])
    ids = np.array([r[0] for r in rows])
    line_no = [r[5] for r in rows]
    for k in range(1, len(rows)):
        if ids[k] < ids[k - 1] or (ids[k] == ids[k - 1] and arr[k, 0] < arr[k - 1, 0]):
            raise DataError(f"{path}: line {line_no[k]}: rows are not sorted by (shot_id, t)")
    declared = header.get("shot_ids")
    all_ids = _expand_ids(str(declared)) if declared not in (None, "") else sorted(set(ids.tolist()))
    missing = set(ids.tolist()) - set(all_ids)
    if missing:
        raise DataError(f"{path}: shot ids {sorted(missing)[:5]} are not declared in the header")
    bounds = np.searchsorted(ids, all_ids, side="left"), np.searchsorted(ids, all_ids, side="right")
    shots = []
    for sid, lo, hi in zip(all_ids, *bounds):
        block = arr[lo:hi]
        shots.append(Shot(sid, block[:, 0], block[:, 1], block[:, 2], block[:, 3], sort=False))
    return EventFile(header, shots)


def write_histogram(path, hist, result=None, header=None):
    """CSV with bin centres, raw counts and (optionally) ``g2`` per bin.

    Same and mixed counts are the raw, unfolded values; ``g2`` and its error
    come from ``result`` (folded, NaN where invalid).
    """
    spec = hist.spec
    grids = np.meshgrid(*spec.centers(), indexing="ij")
    names = [_axis_column(spec, a) for a in spec.axes]
    cols = [g.ravel() for g in grids]
    lines = ["# atomcorr pair histogram"]
    meta = {"spec": spec.to_dict(), "n_shots": hist.n_shots, "n_events_total": hist.n_events_total}
    meta.update(header or {})
    lines.append("# " + json.dumps(meta, sort_keys=True))
    head = names + ["same", "mixed"]
    if result is not None:
        head += ["g2", "g2_error", "valid"]
    lines.append(",".join(head))
    same = hist.same_shot_counts.ravel()
    mixed = hist.mixed_counts.ravel()
    g2 = result.g2.ravel() if result is not None else None
    err = result.error.ravel() if result is not None else None
    valid = result.valid.ravel() if result is not None else None
    for k in range(same.size):
        row = [_FLOAT % c[k] for c in cols] + [str(int(same[k])), str(int(mixed[k]))]
        if result is not None:
            row += [_FLOAT % g2[k], _FLOAT % err[k], str(int(valid[k]))]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _axis_column(spec, axis):
    prefix = "s" if spec.coordinates == "sum" else "d"
    if axis == "z" and spec.longitudinal == "t":
        return f"{prefix}t_s"
    return f"{prefix}{axis}_m"


def format_summary(title, summary):
    """Human-readable ``key: value`` block followed by the same data as JSON."""
    lines = [title, "=" * len(title)]
    width = max((len(k) for k in summary), default=0)
    for key, value in summary.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        elif isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        lines.append(f"{key.ljust(width)} : {value}")
    lines.append("")
    lines.append("--- json ---")
    lines.append(json.dumps(summary, sort_keys=True, indent=2, default=_json_default))
    return "\n".join(lines) + "\n"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def write_summary(path, title, summary):
    """Write :func:`format_summary` text and a sibling ``.json`` file."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_summary(title, summary))
    root, _ = os.path.splitext(path)
    with open(root + ".json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2, default=_json_default)
        fh.write("\n")


def write_slices(directory, stack, prefix="slice"):
    """One CSV per arrival-time slab plus an ``index.csv`` listing them."""
    os.makedirs(directory, exist_ok=True)
    index = ["index,t_start_s,t_stop_s,counts,file"]
    xc = 0.5 * (stack.x_edges[:-1] + stack.x_edges[1:])
    yc = 0.5 * (stack.y_edges[:-1] + stack.y_edges[1:])
    for i, counts in enumerate(stack.counts):
        name = f"{prefix}_{i:04d}.csv"
        lines = [f"# t_start_s: {stack.t_edges[i]!r}", f"# t_stop_s: {stack.t_edges[i + 1]!r}"]
        lines.append("y_m\\x_m," + ",".join(_FLOAT % v for v in xc))
        for j, y in enumerate(yc):
            lines.append(_FLOAT % y + "," + ",".join(str(int(c)) for c in counts[:, j]))
        with open(os.path.join(directory, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        index.append(f"{i},{stack.t_edges[i]!r},{stack.t_edges[i + 1]!r},{int(counts.sum())},{name}")
    with open(os.path.join(directory, "index.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(index) + "\n")
