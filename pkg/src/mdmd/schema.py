"""Landmark definitions and the semantic-group registry.

A :class:`DatasetSchema` describes one landmark definition: how many points it
has, how those points are partitioned into the shared semantic groups, how
faces are normalized for NME, and (optionally) how indices swap under a
horizontal flip.  Schemas are loaded from YAML documents; the eight bundled
definitions live in ``mdmd/schemas``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import yaml

DEFAULT_GROUP_COUNT = 12

GROUP_NAMES = (
    "upper left contour",
    "lower left contour",
    "jaw",
    "lower right contour",
    "upper right contour",
    "left eye",
    "right eye",
    "left brow",
    "right brow",
    "nose",
    "top mouth",
    "bottom mouth",
)

BUNDLED = ("WFLW", "LaPa", "COFW", "300W", "AnimalWeb", "ArtFace", "CariFace", "PARE")

# Coarser groupings over the 12 default groups (target group per source group).
COARSE_5 = (0, 0, 0, 0, 0, 1, 1, 2, 2, 3, 4, 4)  # contour / eyes / brows / nose / mouth
COARSE_8 = (0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7)  # contour merged, the rest kept


class SchemaError(ValueError):
    """Raised when a schema document fails to parse or validate."""

    def __init__(self, schema: str, message: str):
        super().__init__(f"schema {schema!r}: {message}")
        self.schema = schema


@dataclass(frozen=True)
class Normalization:
    """``kind`` is ``"pair"`` (distance between two landmarks) or ``"bbox"``."""

    kind: str
    pair: tuple[int, int] | None = None

    @classmethod
    def parse(cls, value) -> "Normalization":
        if isinstance(value, Normalization):
            return value
        if value == "bbox":
            return cls("bbox")
        if isinstance(value, dict) and "pair" in value:
            i, j = value["pair"]
            return cls("pair", (int(i), int(j)))
        if isinstance(value, str) and value.startswith("pair:"):
            i, j = value[5:].split(",")
            return cls("pair", (int(i), int(j)))
        raise ValueError(f"unrecognized normalization {value!r}")

    def to_doc(self):
        return "bbox" if self.kind == "bbox" else {"pair": list(self.pair)}

    def __str__(self) -> str:
        return "bbox" if self.kind == "bbox" else f"pair:{self.pair[0]},{self.pair[1]}"


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    landmark_count: int
    groups: tuple[tuple[int, ...], ...]
    normalization: Normalization = field(default_factory=lambda: Normalization("bbox"))
    flip_permutation: tuple[int, ...] | None = None

    @property
    def group_count(self) -> int:
        return len(self.groups)

    def to_doc(self) -> dict:
        doc = {
            "name": self.name,
            "landmark_count": self.landmark_count,
            "groups": [list(g) for g in self.groups],
            "normalization": self.normalization.to_doc(),
        }
        if self.flip_permutation is not None:
            doc["flip_permutation"] = list(self.flip_permutation)
        return doc

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_doc(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_schema(
    name: str,
    landmark_count: int,
    groups: Iterable[Iterable[int]],
    normalization="bbox",
    flip_permutation: Sequence[int] | None = None,
) -> DatasetSchema:
    return DatasetSchema(
        name=str(name),
        landmark_count=int(landmark_count),
        groups=tuple(tuple(int(i) for i in g) for g in groups),
        normalization=Normalization.parse(normalization),
        flip_permutation=None if flip_permutation is None else tuple(int(i) for i in flip_permutation),
    )


@dataclass(frozen=True)
class SchemaSet:
    schemas: tuple[DatasetSchema, ...]
    group_count: int = DEFAULT_GROUP_COUNT

    def __post_init__(self):
        if not self.schemas:
            raise SchemaError("<set>", "at least one schema is required")
        for s in self.schemas:
            if s.group_count != self.group_count:
                raise SchemaError(s.name, f"has {s.group_count} groups, set requires {self.group_count}")
            validate_schema(s)
        names = [s.name for s in self.schemas]
        if len(set(names)) != len(names):
            raise SchemaError("<set>", f"duplicate schema names in {names}")

    def __len__(self) -> int:
        return len(self.schemas)

    def __getitem__(self, dataset_id: int) -> DatasetSchema:
        if not 0 <= dataset_id < len(self.schemas):
            raise KeyError(f"unknown dataset id {dataset_id}")
        return self.schemas[dataset_id]

    def index(self, name: str) -> int:
        for i, s in enumerate(self.schemas):
            if s.name.lower() == name.lower():
                return i
        raise KeyError(f"unknown dataset {name!r}")

    def to_doc(self) -> dict:
        return {"group_count": self.group_count, "schemas": [s.to_doc() for s in self.schemas]}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_doc(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def validate_schema(schema: DatasetSchema) -> None:
    """Raise :class:`SchemaError` naming the offending index if any invariant fails."""
    n = schema.landmark_count
    if n < 1:
        raise SchemaError(schema.name, f"landmark_count must be positive, got {n}")
    seen: dict[int, int] = {}
    for gi, group in enumerate(schema.groups):
        for idx in group:
            if not 0 <= idx < n:
                raise SchemaError(schema.name, f"out-of-range index {idx} in group {gi} (N={n})")
            if idx in seen:
                raise SchemaError(schema.name, f"duplicate index {idx} in groups {seen[idx]} and {gi}")
            seen[idx] = gi
    missing = sorted(set(range(n)) - set(seen))
    if missing:
        raise SchemaError(schema.name, f"missing index {missing[0]} (all missing: {missing})")

    norm = schema.normalization
    if norm.kind == "pair":
        i, j = norm.pair
        if i == j or not (0 <= i < n and 0 <= j < n):
            raise SchemaError(schema.name, f"bad normalization pair ({i}, {j}) for N={n}")
    elif norm.kind != "bbox":
        raise SchemaError(schema.name, f"unknown normalization kind {norm.kind!r}")

    perm = schema.flip_permutation
    if perm is not None:
        if sorted(perm) != list(range(n)):
            raise SchemaError(schema.name, "flip_permutation is not a permutation of 0..N-1")
        for k in range(n):
            if perm[perm[k]] != k:
                raise SchemaError(schema.name, f"flip_permutation is not an involution at index {k}")


def flatten_ids(groups: Sequence[Sequence[int]]) -> list[int]:
    return [i for group in groups for i in group]


def group_sizes(schema: DatasetSchema) -> list[int]:
    return [len(g) for g in schema.groups]


def _schema_from_doc(doc: dict) -> DatasetSchema:
    name = doc.get("name", "<unnamed>")
    try:
        return make_schema(
            name,
            doc["landmark_count"],
            doc["groups"],
            doc.get("normalization", "bbox"),
            doc.get("flip_permutation"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(name, f"malformed document ({exc})") from exc


def load_schemas(document: str, group_count: int | None = None) -> SchemaSet:
    """Parse a YAML document holding one schema, a list, or ``{schemas: [...]}``."""
    try:
        data = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise SchemaError("<document>", f"parse failure: {exc}") from exc
    if isinstance(data, dict) and "schemas" in data:
        group_count = group_count or data.get("group_count")
        docs = data["schemas"]
    elif isinstance(data, dict):
        docs = [data]
    elif isinstance(data, list):
        docs = data
    else:
        raise SchemaError("<document>", "expected a mapping or list of schemas")
    schemas = tuple(_schema_from_doc(d) for d in docs or [])
    if not schemas:
        raise SchemaError("<document>", "no schemas present")
    if group_count is None:
        group_count = schemas[0].group_count
    return SchemaSet(schemas, int(group_count))


def _bundled_text(name: str) -> str:
    for candidate in BUNDLED:
        if candidate.lower() == name.lower():
            return resources.files("mdmd.schemas").joinpath(f"{candidate.lower()}.yaml").read_text()
    raise KeyError(f"unknown schema {name!r}; bundled: {', '.join(BUNDLED)}")


def bundled_schema(name: str) -> DatasetSchema:
    return load_schemas(_bundled_text(name)).schemas[0]


def resolve_schema(name: str, extra: Sequence[DatasetSchema] = ()) -> DatasetSchema:
    """Look ``name`` up among ``extra`` schemas first, then the bundled registry."""
    for s in extra:
        if s.name.lower() == name.lower():
            return s
    return bundled_schema(name)


def load_schema_file(path: str | Path) -> list[DatasetSchema]:
    return list(load_schemas(Path(path).read_text()).schemas)


def bundled_schema_set(names: Sequence[str] = BUNDLED) -> SchemaSet:
    return SchemaSet(tuple(bundled_schema(n) for n in names))


def coarsen(schema: DatasetSchema, assignment: Sequence[int]) -> DatasetSchema:
    """Merge groups: source group ``i`` is folded into target group ``assignment[i]``."""
    if len(assignment) != schema.group_count:
        raise SchemaError(schema.name, f"assignment covers {len(assignment)} groups, schema has {schema.group_count}")
    merged: list[list[int]] = [[] for _ in range(max(assignment) + 1)]
    for group, target in zip(schema.groups, assignment):
        merged[target].extend(group)
    return make_schema(schema.name, schema.landmark_count, merged, schema.normalization, schema.flip_permutation)


def per_landmark(schema_set: SchemaSet) -> SchemaSet:
    """One group per landmark; groups padded with empties to the largest N in the set."""
    g = max(s.landmark_count for s in schema_set.schemas)
    out = []
    for s in schema_set.schemas:
        groups = [[k] for k in range(s.landmark_count)] + [[] for _ in range(g - s.landmark_count)]
        out.append(make_schema(s.name, s.landmark_count, groups, s.normalization, s.flip_permutation))
    return SchemaSet(tuple(out), g)


def describe(schema: DatasetSchema) -> str:
    lines = [f"{schema.name}: N={schema.landmark_count}, G={schema.group_count}, normalization={schema.normalization}"]
    for gi, group in enumerate(schema.groups):
        label = GROUP_NAMES[gi] if schema.group_count == len(GROUP_NAMES) else f"group {gi}"
        body = ", ".join(map(str, group)) if group else "-"
        lines.append(f"  ({chr(ord('a') + gi) if gi < 26 else gi}) {label:<20} size={len(group):<3} [{body}]")
    lines.append(f"  sizes: {group_sizes(schema)} (sum {sum(group_sizes(schema))})")
    lines.append(f"  flatten_ids: {flatten_ids(schema.groups)}")
    return "\n".join(lines)
