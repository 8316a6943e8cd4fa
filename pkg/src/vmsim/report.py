"""Byte-stable serialization for reports and CSV outputs.

Keys are emitted in lexicographic order and reals with exactly six decimals,
so identical runs produce identical bytes on any platform.
"""

from __future__ import annotations

import io


def _write_value(out: io.StringIO, value, indent: int) -> None:
    pad = "  " * indent
    if isinstance(value, dict):
        if not value:
            out.write("{}")
            return
        out.write("{\n")
        keys = sorted(value, key=str)
        for i, key in enumerate(keys):
            out.write(f'{pad}  "{key}": ')
            _write_value(out, value[key], indent + 1)
            out.write(",\n" if i + 1 < len(keys) else "\n")
        out.write(pad + "}")
    elif isinstance(value, (list, tuple)):
        if not value:
            out.write("[]")
            return
        out.write("[\n")
        for i, item in enumerate(value):
            out.write(pad + "  ")
            _write_value(out, item, indent + 1)
            out.write(",\n" if i + 1 < len(value) else "\n")
        out.write(pad + "]")
    elif isinstance(value, bool):
        out.write("true" if value else "false")
    elif isinstance(value, int):
        out.write(str(value))
    elif isinstance(value, float):
        out.write(f"{value:.6f}")
    elif value is None:
        out.write("null")
    elif isinstance(value, str):
        out.write(_escape(value))
    else:
        raise TypeError(f"unserializable value {value!r}")


def _escape(text: str) -> str:
    body = (
        text.replace("\\", "\\\\").replace('"', '\\"')
        .replace("\n", "\\n").replace("\r", "\\r").replace("\t", "\\t")
    )
    return f'"{body}"'


def canonical_json(obj) -> str:
    out = io.StringIO()
    _write_value(out, obj, 0)
    out.write("\n")
    return out.getvalue()


def flatten(obj, prefix: str = "") -> dict[str, object]:
    """Flatten nested dicts/lists into dotted scalar columns."""
    flat: dict[str, object] = {}
    if isinstance(obj, dict):
        for key in sorted(obj, key=str):
            flat.update(flatten(obj[key], f"{prefix}.{key}" if prefix else str(key)))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            flat.update(flatten(item, f"{prefix}.{i}"))
    else:
        flat[prefix] = obj
    return flat


def _csv_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    if value is None:
        return ""
    text = str(value)
    if any(c in text for c in ",\"\n"):
        text = '"' + text.replace('"', '""') + '"'
    return text


def compare_csv(reports: list[tuple[str, dict]]) -> str:
    """One row per report; columns are the union of flattened counters."""
    flats = [(label, flatten(report)) for label, report in reports]
    columns = sorted({key for _, flat in flats for key in flat})
    lines = ["report," + ",".join(columns)]
    for label, flat in flats:
        lines.append(
            _csv_cell(label) + "," + ",".join(_csv_cell(flat.get(col)) for col in columns)
        )
    return "\n".join(lines) + "\n"


TIMESERIES_HEADER = "event,cycle,fmfi,l1_tlb_hit_rate,walk_rate,faults"


def timeseries_row(event: int, cycle: int, fmfi: float, l1_rate: float,
                   walk_rate: float, faults: int) -> str:
    return f"{event},{cycle},{fmfi:.6f},{l1_rate:.6f},{walk_rate:.6f},{faults}"
