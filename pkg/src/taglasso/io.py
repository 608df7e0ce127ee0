"""File formats: matrix and tree CSVs, and the JSON fit document."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .tree import AggregationTree, TreeNode

SCHEMA_VERSION = "taglasso-fit/1"


class InputError(ValueError):
    """Malformed input file; the message carries the file and line number."""

    def __init__(self, path, line, message):
        self.path, self.line = str(path), line
        where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class SchemaError(ValueError):
    """A fit document with an unexpected schema version or layout."""


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _rows(path):
    try:
        with open(path, newline="") as fh:
            return [(i, r) for i, r in enumerate(csv.reader(fh), start=1)
                    if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise InputError(path, None, exc.strerror or str(exc)) from None
    except csv.Error as exc:
        raise InputError(path, None, str(exc)) from None


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_matrix_csv(path) -> tuple[np.ndarray, list[str] | None]:
    """Numeric CSV with an optional header row of variable names.

    Returns ``(matrix, names)``; ``names`` is None without a header.
    """
    rows = _rows(path)
    if not rows:
        raise InputError(path, None, "file is empty")
    names = None
    first_line, first = rows[0]
    if not all(_is_number(c) for c in first):
        names = [c.strip() for c in first]
        if len(set(names)) != len(names):
            raise InputError(path, first_line, "duplicate column names in header")
        rows = rows[1:]
        if not rows:
            raise InputError(path, first_line, "header but no data rows")
    width = len(names) if names is not None else len(rows[0][1])
    out = np.empty((len(rows), width))
    for r, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise InputError(path, line, f"expected {width} fields, found {len(cells)}")
        for c, cell in enumerate(cells):
            text = cell.strip()
            try:
                v = float(text)
            except ValueError:
                raise InputError(path, line, f"field {c + 1} is not a number: {text!r}") from None
            if not np.isfinite(v):
                raise InputError(path, line, f"field {c + 1} is missing or not finite: {text!r}")
            out[r, c] = v
    return out, names


def read_symmetric_csv(path) -> tuple[np.ndarray, list[str] | None]:
    m, names = read_matrix_csv(path)
    if m.shape[0] != m.shape[1]:
        raise InputError(path, None, f"matrix must be square, got {m.shape[0]}x{m.shape[1]}")
    scale = max(1.0, float(np.abs(m).max()))
    i, j = np.unravel_index(np.argmax(np.abs(m - m.T)), m.shape)
    if abs(m[i, j] - m[j, i]) > 1e-10 * scale:
        raise InputError(path, None, f"matrix is not symmetric at entries ({i + 1}, {j + 1})")
    return m, names


def write_matrix_csv(path, m, names=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if names is not None:
            w.writerow(names)
        for row in np.asarray(m, dtype=float):
            w.writerow([repr(float(v)) for v in row])


TREE_HEADER = ["node_id", "parent_id", "label"]


def read_tree_csv(path) -> AggregationTree:
    """``node_id,parent_id,label`` rows; the root has an empty parent.

    The header row is optional; an empty label defaults to the node id.
    """
    rows = _rows(path)
    if rows and [c.strip().lower() for c in rows[0][1]] == TREE_HEADER:
        rows = rows[1:]
    if not rows:
        raise InputError(path, None, "tree file has no nodes")
    nodes, seen = [], {}
    for line, cells in rows:
        if len(cells) not in (2, 3):
            raise InputError(path, line, f"expected node_id,parent_id,label, found {len(cells)} fields")
        nid, parent = cells[0].strip(), cells[1].strip()
        label = cells[2].strip() if len(cells) == 3 else ""
        if not nid:
            raise InputError(path, line, "empty node id")
        if nid in seen:
            raise InputError(path, line, f"node id {nid!r} already defined on line {seen[nid]}")
        seen[nid] = line
        nodes.append(TreeNode(nid, parent or None, label or nid))
    return AggregationTree(tuple(nodes))


def write_tree_csv(path, tree: AggregationTree):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TREE_HEADER)
        for n in tree.nodes:
            w.writerow([n.id, n.parent or "", n.label])


# -- fit document ---------------------------------------------------------------------

@dataclass
class FitDocument:
    """Serialisable record of a fit; ``content`` is a JSON-compatible dict."""

    content: dict

    REQUIRED = ("schema", "variables", "penalties", "config", "omega", "gamma", "d",
                "partition", "aggregated", "edges", "residuals", "provenance")

    def dumps(self) -> str:
        return json.dumps(self.content, indent=1, sort_keys=True, allow_nan=False) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "FitDocument":
        try:
            content = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not a JSON document (line {exc.lineno}: {exc.msg})") from None
        if not isinstance(content, dict):
            raise SchemaError("fit document must be a JSON object")
        version = content.get("schema")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema version {version!r}; expected {SCHEMA_VERSION!r}")
        missing = [k for k in cls.REQUIRED if k not in content]
        if missing:
            raise SchemaError(f"fit document lacks fields {missing}")
        return cls(content)

    @classmethod
    def load(cls, path) -> "FitDocument":
        with open(path) as fh:
            return cls.loads(fh.read())

    @property
    def omega(self) -> np.ndarray:
        return np.array(self.content["omega"], dtype=float)

    @property
    def d(self) -> np.ndarray:
        return np.array(self.content["d"], dtype=float)

    @property
    def labels(self) -> np.ndarray:
        return np.array(self.content["partition"], dtype=int)

    @property
    def variables(self) -> list[str]:
        return list(self.content["variables"])

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [tuple(e) for e in self.content["edges"]]


def _floats(a):
    a = np.asarray(a, dtype=float)
    return a.tolist()


def build_document(*, variables, omega, gamma, d, partition, node_order, edges,
                   penalties, config, residuals, aggregated=None, selection=None,
                   provenance=None, refitted=False) -> FitDocument:
    """Assemble a :class:`FitDocument` from arrays; only nonzero Gamma rows are stored."""
    gamma = np.asarray(gamma, dtype=float)
    rows = {node_order[k]: _floats(gamma[k]) for k in range(len(node_order)) if np.any(gamma[k] != 0)}
    content = {
        "schema": SCHEMA_VERSION,
        "variables": list(variables),
        "penalties": {"lambda1": float(penalties[0]), "lambda2": float(penalties[1])},
        "config": dict(config),
        "refitted": bool(refitted),
        "omega": _floats(omega),
        "gamma": rows,
        "d": _floats(d),
        "partition": [int(v) for v in partition.labels],
        "k": int(partition.k),
        "aggregated": aggregated,
        "edges": [[int(i), int(j)] for i, j in edges],
        "residuals": {k: float(v) for k, v in residuals.items()},
        "selection": selection,
        "provenance": provenance or {},
    }
    return FitDocument(content)
