"""Segmentation evaluation: Jaccard index and topology-rule checking.

A segmentation is judged against a declarative rule set evaluated on its
component graph (connected components as nodes, face adjacency as edges).
The Topological Error Ratio over a test set is the fraction of
segmentations with at least one rule violation.

Label grids use 0 for background and i+1 for the i-th declared class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

RULE_KINDS = ("REQUIRED_ADJACENCY", "FORBIDDEN_ADJACENCY", "MAX_COMPONENTS", "CONTAINED_IN")


class TopologyError(ValueError):
    """Invalid rule set or label grid."""


@dataclass(frozen=True)
class Rule:
    kind: str
    a: str
    b: str | None = None
    limit: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in RULE_KINDS:
            raise TopologyError(f"unknown rule kind {self.kind!r}")
        if self.kind == "MAX_COMPONENTS":
            if self.limit is None or self.limit < 1:
                raise TopologyError(f"MAX_COMPONENTS needs a positive limit, got {self.limit}")
        elif self.b is None:
            raise TopologyError(f"{self.kind} needs a second class")

    def describe(self) -> str:
        if self.kind == "MAX_COMPONENTS":
            return f"MAX_COMPONENTS({self.a}, {self.limit})"
        return f"{self.kind}({self.a}, {self.b})"


@dataclass(frozen=True)
class Violation:
    rule: str
    components: tuple[int, ...] = ()


@dataclass
class TopologySpec:
    classes: tuple[str, ...]
    rules: tuple[Rule, ...]
    connectivity: str = "face"  # "face" (4/6) or "full" (8/26)
    min_component_size: int = 1
    missing_class_is_violation: bool = True

    def __post_init__(self) -> None:
        self.classes = tuple(self.classes)
        self.rules = tuple(self.rules)
        if self.connectivity not in ("face", "full"):
            raise TopologyError(f"connectivity must be 'face' or 'full', got {self.connectivity!r}")
        known = set(self.classes)
        for rule in self.rules:
            for name in (rule.a, rule.b):
                if name is not None and name not in known:
                    raise TopologyError(f"rule {rule.describe()} references unknown class {name!r}")

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "connectivity": self.connectivity,
            "min_component_size": self.min_component_size,
            "missing_class_is_violation": self.missing_class_is_violation,
            "rules": [
                {k: v for k, v in
                 (("kind", r.kind), ("a", r.a), ("b", r.b), ("limit", r.limit))
                 if v is not None}
                for r in self.rules
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "TopologySpec":
        rules = tuple(
            Rule(r["kind"], r["a"], r.get("b"), r.get("limit")) for r in obj["rules"]
        )
        return TopologySpec(
            classes=tuple(obj["classes"]),
            rules=rules,
            connectivity=obj.get("connectivity", "face"),
            min_component_size=obj.get("min_component_size", 1),
            missing_class_is_violation=obj.get("missing_class_is_violation", True),
        )


def builtin_spec(name: str) -> TopologySpec:
    if name == "synapse":
        return TopologySpec(
            classes=("pre", "cleft", "post"),
            rules=(
                Rule("REQUIRED_ADJACENCY", "cleft", "pre"),
                Rule("REQUIRED_ADJACENCY", "cleft", "post"),
                Rule("FORBIDDEN_ADJACENCY", "pre", "post"),
                Rule("MAX_COMPONENTS", "cleft", limit=1),
            ),
        )
    if name == "retina":
        return TopologySpec(
            classes=("disc", "cup"),
            rules=(
                Rule("CONTAINED_IN", "cup", "disc"),
                Rule("MAX_COMPONENTS", "disc", limit=1),
                Rule("MAX_COMPONENTS", "cup", limit=1),
            ),
        )
    raise TopologyError(f"no builtin topology spec named {name!r}")


def load_spec(name_or_path: str | Path) -> TopologySpec:
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        return TopologySpec.from_json(json.loads(path.read_text()))
    return builtin_spec(str(name_or_path))


def _structure(ndim: int, connectivity: str) -> np.ndarray:
    order = 1 if connectivity == "face" else ndim
    return ndimage.generate_binary_structure(ndim, order)


def connected_components(mask: np.ndarray, connectivity: str = "face") -> tuple[np.ndarray, int]:
    """Label connected components; ids are 1..n in raster order of first pixel."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=_structure(mask.ndim, connectivity))
    if n == 0:
        return labels.astype(np.int64), 0
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    order = [int(i) for i in ids[np.argsort(first)] if i != 0]
    remap = np.zeros(n + 1, dtype=np.int64)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    return remap[labels], n


def jaccard(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Intersection over union for one class; 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise TopologyError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    a = pred == class_id
    b = truth == class_id
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _class_masks(labels: np.ndarray, spec: TopologySpec) -> dict[str, np.ndarray]:
    labels = np.asarray(labels)
    if labels.size and labels.max() > len(spec.classes):
        raise TopologyError(
            f"label {labels.max()} outside declared classes (max {len(spec.classes)})"
        )
    if labels.size and labels.min() < 0:
        raise TopologyError(f"negative label {labels.min()}")
    return {name: labels == i + 1 for i, name in enumerate(spec.classes)}


def _components(mask: np.ndarray, spec: TopologySpec) -> np.ndarray:
    comp, n = connected_components(mask, spec.connectivity)
    if spec.min_component_size > 1 and n:
        sizes = np.bincount(comp.ravel(), minlength=n + 1)
        small = np.flatnonzero(sizes < spec.min_component_size)
        comp = np.where(np.isin(comp, small[small > 0]), 0, comp)
    return comp


def _adjacent_pairs(comp_a: np.ndarray, comp_b: np.ndarray, connectivity: str) -> set[tuple[int, int]]:
    """Pairs (id_a, id_b) of components touching under the given connectivity."""
    d = comp_a.ndim
    pairs: set[tuple[int, int]] = set()
    shifts: list[tuple[int, ...]] = []
    if connectivity == "face":
        for axis in range(d):
            shift = [0] * d
            shift[axis] = 1
            shifts.append(tuple(shift))
    else:
        for offset in np.ndindex(*(3,) * d):
            delta = tuple(o - 1 for o in offset)
            if delta > (0,) * d:  # half the neighborhood, symmetry covers the rest
                shifts.append(delta)
    for shift in shifts:
        sl_lo = tuple(slice(None, -s) if s else slice(None) for s in shift)
        sl_hi = tuple(slice(s, None) if s else slice(None) for s in shift)
        for x, y in ((comp_a[sl_lo], comp_b[sl_hi]), (comp_a[sl_hi], comp_b[sl_lo])):
            both = (x > 0) & (y > 0)
            if both.any():
                pairs.update(zip(x[both].tolist(), y[both].tolist()))
    return pairs


def _filled_hull(mask_a: np.ndarray, mask_b: np.ndarray, connectivity: str) -> np.ndarray:
    """Hole-filled union of a and b, restricted to components that carry b.

    Components of the filled union that contain no b pixel (stray islands of
    a) are not part of the hull, so containment catches them.
    """
    union = mask_a | mask_b
    filled = ndimage.binary_fill_holes(union, structure=_structure(union.ndim, "face"))
    comp, n = connected_components(filled, connectivity)
    if n == 0:
        return np.zeros_like(union)
    keep = np.unique(comp[mask_b])
    keep = keep[keep > 0]
    return np.isin(comp, keep)


def check_topology(labels: np.ndarray, spec: TopologySpec) -> list[Violation]:
    """Evaluate every rule; returns all violations (empty list = clean)."""
    masks = _class_masks(labels, spec)
    comps = {name: _components(mask, spec) for name, mask in masks.items()}
    counts = {name: int(comp.max()) for name, comp in comps.items()}

    violations: list[Violation] = []
    if spec.missing_class_is_violation:
        for name in spec.classes:
            if counts[name] == 0:
                violations.append(Violation(rule=f"MISSING_CLASS({name})"))

    for rule in spec.rules:
        if rule.kind == "MAX_COMPONENTS":
            if counts[rule.a] > rule.limit:
                extra = tuple(range(rule.limit + 1, counts[rule.a] + 1))
                violations.append(Violation(rule.describe(), components=extra))
        elif rule.kind in ("REQUIRED_ADJACENCY", "FORBIDDEN_ADJACENCY"):
            pairs = _adjacent_pairs(comps[rule.a], comps[rule.b], spec.connectivity)
            if rule.kind == "REQUIRED_ADJACENCY":
                touching = {a for a, _ in pairs}
                missing = tuple(i for i in range(1, counts[rule.a] + 1) if i not in touching)
                if missing and counts[rule.a] > 0:
                    violations.append(Violation(rule.describe(), components=missing))
            else:
                if pairs:
                    offenders = tuple(sorted({a for a, _ in pairs}))
                    violations.append(Violation(rule.describe(), components=offenders))
        elif rule.kind == "CONTAINED_IN":
            hull = _filled_hull(masks[rule.a], masks[rule.b], spec.connectivity)
            outside = masks[rule.a] & ~hull
            if outside.any():
                offenders = tuple(sorted({int(i) for i in np.unique(comps[rule.a][outside]) if i}))
                violations.append(Violation(rule.describe(), components=offenders))
    return violations


def ter(violation_lists: list[list[Violation]]) -> float:
    """Fraction of results that contain at least one violation."""
    k, n = ter_counts(violation_lists)
    return k / n


def ter_counts(violation_lists: list[list[Violation]]) -> tuple[int, int]:
    if not violation_lists:
        raise TopologyError("TER undefined for an empty result list")
    k = sum(1 for v in violation_lists if v)
    return k, len(violation_lists)
