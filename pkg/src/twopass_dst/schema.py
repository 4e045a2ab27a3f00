"""Schema table: the domains, slots, and descriptions that define legal outputs.

File format is JSON: ``{"domain": {"slot": {"description": str, "values": [str]?}}}``.
Domains and slots are kept in sorted order so every rendering of the same
table is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DataFormatError, ValidationError
from .states import normalize_value

_NAME_OK = "abcdefghijklmnopqrstuvwxyz0123456789_ "


def _check_name(name: str, what: str) -> str:
    name = normalize_value(name)
    if "-" in name or any(ch not in _NAME_OK for ch in name):
        raise ValidationError(f"{what} name must be lowercase words without hyphens: {name!r}")
    return name


@dataclass(frozen=True)
class SlotSpec:
    name: str
    description: str
    values: tuple[str, ...] | None = None


class SchemaTable:
    """Immutable mapping of domain -> slot specs, with qualified-slot lookups."""

    def __init__(self, domains: Mapping[str, Iterable[SlotSpec]]):
        table: dict[str, tuple[SlotSpec, ...]] = {}
        for domain, slots in sorted(domains.items()):
            domain = _check_name(domain, "domain")
            if domain in table:
                raise ValidationError(f"duplicate domain {domain!r}")
            specs: list[SlotSpec] = []
            seen: set[str] = set()
            for spec in slots:
                name = _check_name(spec.name, "slot")
                if name in seen:
                    raise ValidationError(f"duplicate slot {name!r} in domain {domain!r}")
                seen.add(name)
                specs.append(SlotSpec(name, spec.description, spec.values))
            table[domain] = tuple(sorted(specs, key=lambda s: s.name))
        if not table:
            raise ValidationError("schema table has no domains")
        self._table = table
        self._qualified = {
            f"{domain}-{spec.name}": spec
            for domain, specs in table.items()
            for spec in specs
        }

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(self._table)

    def slots_for(self, domain: str) -> tuple[SlotSpec, ...]:
        try:
            return self._table[domain]
        except KeyError:
            raise ValidationError(f"unknown domain {domain!r}") from None

    def all_slots(self) -> frozenset[str]:
        return frozenset(self._qualified)

    def has_slot(self, qualified: str) -> bool:
        return qualified in self._qualified

    def slot_spec(self, qualified: str) -> SlotSpec:
        try:
            return self._qualified[qualified]
        except KeyError:
            raise ValidationError(f"unknown slot {qualified!r}") from None

    def restricted_to(self, domains: Iterable[str]) -> "SchemaTable":
        wanted = sorted(set(domains))
        if not wanted:
            raise ValidationError("cannot restrict schema to an empty domain set")
        return SchemaTable({d: self.slots_for(d) for d in wanted})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SchemaTable):
            return NotImplemented
        return self._table == other._table

    def __repr__(self) -> str:
        return f"SchemaTable(domains={list(self._table)})"

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Mapping[str, object]]]) -> "SchemaTable":
        domains: dict[str, list[SlotSpec]] = {}
        for domain, slots in data.items():
            specs: list[SlotSpec] = []
            for slot_name, spec in slots.items():
                if "description" not in spec:
                    raise ValidationError(
                        f"slot {domain}-{slot_name} is missing a description"
                    )
                values = spec.get("values")
                if values is not None:
                    values = tuple(normalize_value(str(v)) for v in values)
                unknown = set(spec) - {"description", "values"}
                if unknown:
                    raise ValidationError(
                        f"slot {domain}-{slot_name} has unknown keys {sorted(unknown)}"
                    )
                specs.append(SlotSpec(slot_name, str(spec["description"]), values))
            domains[domain] = specs
        return cls(domains)


def load_schema(path: str | Path) -> SchemaTable:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"schema file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid schema JSON: {exc.msg}", path=str(path), line=exc.lineno) from None
    if not isinstance(data, dict):
        raise DataFormatError("schema root must be a JSON object", path=str(path))
    return SchemaTable.from_dict(data)
