"""Run configuration: schema, validation, defaults, and dotted-path overrides.

A config is a single JSON document. Validation merges user values over the
defaults below, rejects unknown keys, and checks types and ranges. The merged
dict is echoed verbatim into every report, so validation output must be
deterministic.
"""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Any

from .core import VmsimError


class ConfigError(VmsimError):
    pass


class _Field:
    """Leaf schema node: a typed scalar with a default."""

    def __init__(self, default, kind, choices=None, nullable=False, minimum=None):
        self.default = default
        self.kind = kind  # int | float | str | bool
        self.choices = choices
        self.nullable = nullable
        self.minimum = minimum

    def validate(self, value, path):
        if value is None:
            if self.nullable:
                return None
            raise ConfigError(f"{path}: null not allowed")
        if self.kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: expected integer, got {value!r}")
        elif self.kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: expected number, got {value!r}")
            value = float(value)
        elif self.kind == "str":
            if not isinstance(value, str):
                raise ConfigError(f"{path}: expected string, got {value!r}")
        elif self.kind == "bool":
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected boolean, got {value!r}")
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{path}: {value!r} not one of {sorted(self.choices)}")
        if self.minimum is not None and value < self.minimum:
            raise ConfigError(f"{path}: {value!r} below minimum {self.minimum}")
        return value


class _ListOf:
    """Schema node for a list of homogeneous sub-objects."""

    def __init__(self, item_schema, default):
        self.item_schema = item_schema
        self.default = default


_SIZE_NAMES = ("4K", "2M", "1G")

_CACHE_LEVEL = lambda size, assoc, latency: {  # noqa: E731
    "size": _Field(size, "int", minimum=64),
    "assoc": _Field(assoc, "int", minimum=1),
    "latency": _Field(latency, "int", minimum=0),
}

_TLB_LEVEL_SCHEMA = {
    "name": _Field("", "str"),
    "entries": _Field(64, "int", minimum=1),
    "assoc": _Field(4, "int", minimum=1),
    "latency": _Field(1, "int", minimum=0),
    "sizes": None,  # handled specially: list of page-size names
    "probe": _Field("serial", "str", choices=("serial", "parallel")),
}

_PWC_LEVEL = lambda entries: {  # noqa: E731
    "entries": _Field(entries, "int", minimum=1),
    "assoc": _Field(4, "int", minimum=1),
    "latency": _Field(1, "int", minimum=0),
}

SCHEMA: dict[str, Any] = {
    "seed": _Field(42, "int", minimum=0),
    "mode": _Field("classic", "str", choices=("classic", "intermediate")),
    "mem": {
        "l1": _CACHE_LEVEL(32 * 1024, 8, 4),
        "l2": _CACHE_LEVEL(256 * 1024, 8, 12),
        "llc": _CACHE_LEVEL(2 * 1024 * 1024, 16, 40),
        "dram": {"latency": _Field(200, "int", minimum=1)},
    },
    "tlb": {
        "levels": _ListOf(
            _TLB_LEVEL_SCHEMA,
            [
                {"name": "l1d", "entries": 64, "assoc": 4, "latency": 1,
                 "sizes": ["4K", "2M"], "probe": "serial"},
                {"name": "l2", "entries": 1024, "assoc": 8, "latency": 8,
                 "sizes": ["4K", "2M"], "probe": "serial"},
            ],
        ),
        "predictor": {
            "enabled": _Field(False, "bool"),
            "table_entries": _Field(256, "int", minimum=1),
            "counter_bits": _Field(2, "int", minimum=2),
        },
        "prefetch": {"entries": _Field(0, "int", minimum=0)},
        "victima": {
            "enabled": _Field(False, "bool"),
            "capacity_lines": _Field(4096, "int", minimum=1),
        },
        "pomtlb": {
            "enabled": _Field(False, "bool"),
            "entries": _Field(65536, "int", minimum=4),
            "base": _Field(None, "int", nullable=True, minimum=0),
        },
        "shootdown_cycles": _Field(100, "int", minimum=0),
    },
    "pt": {
        "kind": _Field("radix", "str", choices=("radix", "clustered", "cuckoo", "compact")),
        "pwc": {
            "enabled": _Field(True, "bool"),
            "l4": _PWC_LEVEL(32),
            "l3": _PWC_LEVEL(32),
            "l2": _PWC_LEVEL(64),
        },
        "buckets": _Field(32768, "int", minimum=1),
        "cuckoo": {
            "ways": _Field(2, "int", minimum=2),
            "threshold": _Field(0.6, "float", minimum=0.05),
            "kick_limit": _Field(32, "int", minimum=1),
            "probe": _Field("serial", "str", choices=("serial", "parallel")),
        },
        "nested": {
            "enabled": _Field(False, "bool"),
            "guest": _Field("radix", "str", choices=("radix", "clustered", "cuckoo", "compact")),
            "host": _Field("radix", "str", choices=("radix", "clustered", "cuckoo", "compact")),
            "ntlb": {
                "entries": _Field(64, "int", minimum=1),
                "assoc": _Field(8, "int", minimum=1),
                "latency": _Field(1, "int", minimum=0),
            },
        },
    },
    "altmap": {
        "segment": None,  # nullable object {pid, base, limit, offset}
        "ranges": {
            "rtlb": {
                "entries": _Field(32, "int", minimum=1),
                "latency": _Field(1, "int", minimum=0),
            },
        },
        "restseg": {
            "enabled": _Field(False, "bool"),
            "sets": _Field(4096, "int", minimum=1),
            "ways": _Field(4, "int", minimum=1),
            "base": _Field(None, "int", nullable=True, minimum=0),
        },
        "vma_tlb": {
            "entries": _Field(32, "int", minimum=1),
            "latency": _Field(1, "int", minimum=0),
        },
        "backside": {
            "tlb": {
                "entries": _Field(1024, "int", minimum=1),
                "assoc": _Field(8, "int", minimum=1),
                "latency": _Field(1, "int", minimum=0),
            },
        },
    },
    "mm": {
        "frames": _Field(262144, "int", minimum=2),
        "max_order": _Field(10, "int", minimum=1),
        "policy": _Field("demand4k", "str", choices=("demand4k", "thp_reserve", "eager")),
        "thp": {"promote_threshold": _Field(1.0, "float", minimum=0.0)},
        "fragment": {
            "target": _Field(None, "float", nullable=True, minimum=0.0),
            "seed": _Field(None, "int", nullable=True, minimum=0),
        },
        "snapshot": _Field(None, "str", nullable=True),
    },
    "fault": {
        "handler": _Field("inproc:demand4k", "str"),
        "timeout_ms": _Field(30000, "int", minimum=1),
        "base_cycles": _Field(1000, "int", minimum=0),
        "per_action_cycles": _Field(200, "int", minimum=0),
    },
    "trace": {
        "strict": _Field(False, "bool"),
        "file": _Field(None, "str", nullable=True),
    },
    "report": {
        "sample_every": _Field(0, "int", minimum=0),
        "timeseries": _Field(None, "str", nullable=True),
        "debug_log": _Field(None, "str", nullable=True),
    },
}

_SEGMENT_SCHEMA = {
    "pid": _Field(1, "int", minimum=1),
    "base": _Field(0, "int", minimum=0),
    "limit": _Field(0, "int", minimum=0),
    "offset": _Field(0, "int"),
}

_VALID_HANDLERS = ("inproc:demand4k", "inproc:thp", "inproc:eager")


def _defaults(schema) -> dict:
    out = {}
    for key, node in schema.items():
        if isinstance(node, dict):
            out[key] = _defaults(node)
        elif isinstance(node, _ListOf):
            out[key] = copy.deepcopy(node.default)
        elif node is None:
            out[key] = None
        else:
            out[key] = node.default
    return out


def _validate_sizes(value, path):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{path}: expected non-empty list of page sizes")
    seen = []
    for s in value:
        if s not in _SIZE_NAMES:
            raise ConfigError(f"{path}: unknown page size {s!r}")
        if s in seen:
            raise ConfigError(f"{path}: duplicate page size {s!r}")
        seen.append(s)
    return seen


def _validate_tlb_level(raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected object")
    merged = {
        "name": "", "entries": 64, "assoc": 4, "latency": 1,
        "sizes": ["4K"], "probe": "serial",
    }
    for key, value in raw.items():
        if key not in _TLB_LEVEL_SCHEMA:
            raise ConfigError(f"{path}.{key}: unknown config key")
        if key == "sizes":
            merged[key] = _validate_sizes(value, f"{path}.sizes")
        else:
            merged[key] = _TLB_LEVEL_SCHEMA[key].validate(value, f"{path}.{key}")
    if not merged["name"]:
        raise ConfigError(f"{path}.name: required")
    if merged["entries"] % merged["assoc"]:
        raise ConfigError(f"{path}: entries not divisible by assoc")
    return merged


def _validate_segment(raw, path):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected object or null")
    merged = _defaults(_SEGMENT_SCHEMA)
    for key, value in raw.items():
        if key not in _SEGMENT_SCHEMA:
            raise ConfigError(f"{path}.{key}: unknown config key")
        merged[key] = _SEGMENT_SCHEMA[key].validate(value, f"{path}.{key}")
    if merged["base"] >= merged["limit"]:
        raise ConfigError(f"{path}: base must be below limit")
    return merged


def _merge(schema, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected object")
    out = _defaults(schema)
    for key, value in raw.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"{here}: unknown config key")
        node = schema[key]
        if isinstance(node, dict):
            out[key] = _merge(node, value, here)
        elif isinstance(node, _ListOf):
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{here}: expected non-empty list")
            out[key] = [_validate_tlb_level(item, f"{here}[{i}]") for i, item in enumerate(value)]
        elif node is None:
            out[key] = _validate_segment(value, here)
        else:
            out[key] = node.validate(value, here)
    return out


def _check_cross(cfg):
    for name in ("l1", "l2", "llc"):
        lvl = cfg["mem"][name]
        if lvl["size"] % (lvl["assoc"] * 64):
            raise ConfigError(f"mem.{name}: size not divisible by assoc*64")
        sets = lvl["size"] // (lvl["assoc"] * 64)
        if sets & (sets - 1):
            raise ConfigError(f"mem.{name}: set count {sets} not a power of two")
    names = [lvl["name"] for lvl in cfg["tlb"]["levels"]]
    if len(set(names)) != len(names):
        raise ConfigError("tlb.levels: duplicate level names")
    handler = cfg["fault"]["handler"]
    if not (handler in _VALID_HANDLERS or handler.startswith(("exec:", "tcp:"))):
        raise ConfigError(f"fault.handler: {handler!r} is not a recognized endpoint")
    te = cfg["tlb"]["predictor"]["table_entries"]
    if te & (te - 1):
        raise ConfigError("tlb.predictor.table_entries: must be a power of two")
    seg = cfg["altmap"]["segment"]
    if seg is not None and (seg["base"] % 4096 or seg["limit"] % 4096):
        raise ConfigError("altmap.segment: base and limit must be 4K-aligned")


def validate_config(raw: dict) -> dict:
    """Merge raw over defaults, reject unknown keys, check invariants."""
    cfg = _merge(SCHEMA, raw, "")
    _check_cross(cfg)
    return cfg


def default_config() -> dict:
    cfg = _defaults(SCHEMA)
    _check_cross(cfg)
    return cfg


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one `dotted.path=value` override in place.

    A path segment that names a TLB level (e.g. `tlb.l1d.entries`) is routed
    into the matching element of `tlb.levels`.
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r}: expected key=value")
    dotted, _, text = assignment.partition("=")
    value = _parse_override_value(text)
    parts = dotted.strip().split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        nxt = None
        if isinstance(node, dict):
            if part in node:
                nxt = node[part]
            elif "levels" in node and isinstance(node["levels"], list):
                for item in node["levels"]:
                    if item.get("name") == part:
                        nxt = item
                        break
        elif isinstance(node, list):
            if part.isdigit() and int(part) < len(node):
                nxt = node[int(part)]
            else:
                for item in node:
                    if isinstance(item, dict) and item.get("name") == part:
                        nxt = item
                        break
        if nxt is None:
            raise ConfigError(f"override {dotted!r}: no such key {'.'.join(parts[: i + 1])!r}")
        node = nxt
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"override {dotted!r}: no such key")
    node[leaf] = value


def load_config(path: str, overrides: list[str] | None = None) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if overrides:
        # Overrides are applied to the raw document, then the whole thing is
        # re-validated so bad override values get real error messages.
        raw = _merge(SCHEMA, raw, "")
        for assignment in overrides:
            apply_override(raw, assignment)
    cfg = validate_config(raw)
    return cfg


def config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
