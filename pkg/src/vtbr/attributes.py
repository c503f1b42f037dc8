"""Attribute schema, annotation I/O and appearance-probability tables.

Annotations are JSON Lines, one observation per line::

    {"id": 3, "cam": 1, "attrs": {"hair": "long", "weather": "sunny", ...}}

Identity-level categories are counted over distinct identities, scene-level
categories over distinct (identity, camera) observations.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from vtbr.errors import (
    AnnotationParseError,
    ConsistencyError,
    EmptyInputError,
    SchemaViolationError,
)

IDENTITY = "identity"
SCENE = "scene"
LEVELS = (IDENTITY, SCENE)


@dataclass(frozen=True)
class Category:
    name: str
    level: str
    values: tuple[str, ...]


@dataclass(frozen=True)
class AttributeSchema:
    categories: tuple[Category, ...]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.categories]

    def category(self, name: str) -> Category:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(name)

    def level_of(self, name: str) -> str:
        return self.category(name).level

    def to_dict(self) -> dict:
        return {
            "categories": [
                {"name": c.name, "level": c.level, "values": list(c.values)}
                for c in self.categories
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeSchema":
        try:
            cats = tuple(
                Category(str(c["name"]), str(c["level"]), tuple(c["values"]))
                for c in data["categories"]
            )
        except (KeyError, TypeError) as exc:
            raise SchemaViolationError(f"malformed schema document: {exc!r}") from exc
        schema = cls(cats)
        violations = validate_schema(schema)
        if violations:
            raise SchemaViolationError("; ".join(violations))
        return schema

    @classmethod
    def load(cls, path: str | Path) -> "AttributeSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def validate_schema(schema: AttributeSchema) -> list[str]:
    """Return a list of human-readable violations; empty means valid."""
    violations = []
    seen = set()
    for cat in schema.categories:
        if cat.name in seen:
            violations.append(f"duplicate category name {cat.name!r}")
        seen.add(cat.name)
        if cat.level not in LEVELS:
            violations.append(f"category {cat.name!r} has unknown level {cat.level!r}")
        if len(cat.values) == 0:
            violations.append(f"category {cat.name!r} has an empty value list")
        elif len(cat.values) < 2:
            violations.append(f"category {cat.name!r} needs at least 2 values")
        if len(set(cat.values)) != len(cat.values):
            violations.append(f"category {cat.name!r} has duplicate values")
    return violations


@dataclass(frozen=True)
class AttributeRecord:
    identity_id: int
    camera_id: int
    values: Mapping[str, str] = field(hash=False)

    def to_json(self) -> dict:
        return {"id": self.identity_id, "cam": self.camera_id, "attrs": dict(self.values)}


def check_record(record: AttributeRecord, schema: AttributeSchema, line: int | None = None):
    if not isinstance(record.identity_id, int) or record.identity_id < 0:
        raise SchemaViolationError(f"identity id must be a non-negative integer, got {record.identity_id!r}", line)
    if not isinstance(record.camera_id, int) or record.camera_id < 0:
        raise SchemaViolationError(f"camera id must be a non-negative integer, got {record.camera_id!r}", line)
    names = set(schema.names)
    for key in record.values:
        if key not in names:
            raise SchemaViolationError(f"unknown category {key!r}", line)
    for cat in schema.categories:
        if cat.name not in record.values:
            raise SchemaViolationError(f"missing category {cat.name!r}", line)
        value = record.values[cat.name]
        if value not in cat.values:
            raise SchemaViolationError(
                f"value {value!r} not allowed for category {cat.name!r}", line
            )


def load_annotations(path: str | Path, schema: AttributeSchema) -> list[AttributeRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise AnnotationParseError(lineno, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise AnnotationParseError(lineno, "expected a JSON object")
            if "meta" in obj and len(obj) == 1:
                continue
            try:
                ident, cam, attrs = obj["id"], obj["cam"], obj["attrs"]
            except KeyError as exc:
                raise AnnotationParseError(lineno, f"missing key {exc.args[0]!r}") from exc
            if not isinstance(attrs, dict):
                raise AnnotationParseError(lineno, "'attrs' must be an object")
            record = AttributeRecord(ident, cam, dict(attrs))
            check_record(record, schema, lineno)
            records.append(record)
    return records


def save_annotations(records: Iterable[AttributeRecord], path: str | Path, meta: dict | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class FrequencyTable:
    probabilities: Mapping[tuple[str, str], float]
    id_count: int

    def __getitem__(self, key: tuple[str, str]) -> float:
        return self.probabilities[key]

    def get(self, category: str, value: str, default: float | None = None):
        return self.probabilities.get((category, value), default)

    def category_total(self, category: str) -> float:
        return sum(p for (c, _), p in self.probabilities.items() if c == category)


def attribute_frequencies(
    records: list[AttributeRecord],
    schema: AttributeSchema | None = None,
    scene_unit: str = "observation",
) -> FrequencyTable:
    """Appearance probability of each (category, value) pair.

    Identity-level values are counted once per distinct identity. Scene-level
    values are counted once per distinct (identity, camera) observation, or per
    identity when ``scene_unit="identity"``. Without a schema every category is
    treated as identity-level.
    """
    if not records:
        raise EmptyInputError("attribute_frequencies needs at least one record")
    if scene_unit not in ("observation", "identity"):
        raise ValueError(f"unknown scene_unit {scene_unit!r}")

    categories = schema.names if schema is not None else sorted(records[0].values)

    def unit_key(rec: AttributeRecord, category: str):
        level = schema.level_of(category) if schema is not None else IDENTITY
        if level == SCENE and scene_unit == "observation":
            return (rec.identity_id, rec.camera_id)
        return rec.identity_id

    probabilities = {}
    for category in categories:
        observed: dict = {}
        for rec in records:
            key = unit_key(rec, category)
            value = rec.values[category]
            prev = observed.setdefault(key, value)
            if prev != value:
                raise ConsistencyError(
                    f"unit {key!r} has conflicting values {prev!r} / {value!r} for {category!r}"
                )
        counts: dict[str, int] = defaultdict(int)
        for value in observed.values():
            counts[value] += 1
        total = len(observed)
        values = schema.category(category).values if schema is not None else sorted(counts)
        for value in values:
            probabilities[(category, value)] = counts.get(value, 0) / total

    id_count = len({r.identity_id for r in records})
    return FrequencyTable(probabilities, id_count)
