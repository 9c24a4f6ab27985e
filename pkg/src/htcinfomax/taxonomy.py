"""Label hierarchy parsing, validation, and graph-convolution adjacency.

The taxonomy file is UTF-8 text, one parent per line with tab-separated
children, and the token `Root` naming the root.  Multi-parent nodes are
allowed (DAG) as long as the graph stays acyclic and connected from the
root.  The root is a virtual node: it participates in the graph but is
never a prediction target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

ROOT_TOKEN = "Root"

log = logging.getLogger(__name__)


class TaxonomyError(ValueError):
    """Malformed hierarchy: cycle, orphan node, or missing root."""


@dataclass
class Taxonomy:
    """Rooted label hierarchy with dense ids in first-appearance order."""

    labels: list[str]
    root: int
    children: dict[int, list[int]]
    depth: int
    parents: dict[int, list[int]] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    @property
    def num_labels(self) -> int:
        """Prediction targets: every node except the virtual root."""
        return len(self.labels) - 1

    def nonroot_ids(self) -> list[int]:
        return [i for i in range(len(self.labels)) if i != self.root]

    def target_index(self) -> dict[int, int]:
        """Map label id -> column in a multi-hot target row."""
        return {label_id: col for col, label_id in enumerate(self.nonroot_ids())}

    def target_names(self) -> list[str]:
        return [self.labels[i] for i in self.nonroot_ids()]

    def id_of(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise KeyError(f"unknown label name {name!r}") from None

    def leaves(self) -> list[int]:
        return [i for i in range(len(self.labels)) if not self.children.get(i)]

    def path_to_root(self, label_id: int) -> list[int]:
        """Ancestors up to (excluding) the root, starting at label_id.

        Follows the first parent at multi-parent nodes.
        """
        path = []
        node = label_id
        while node != self.root:
            path.append(node)
            node = self.parents[node][0]
        return path


def parse_taxonomy(text: str) -> Taxonomy:
    """Parse `parent<TAB>child...` lines into a validated Taxonomy.

    Ids are assigned in first-appearance order; duplicate edges are
    dropped with a warning; cycles and orphan nodes raise TaxonomyError.
    """
    ids: dict[str, int] = {}
    labels: list[str] = []
    children: dict[int, list[int]] = {}
    parents: dict[int, list[int]] = {}

    def intern(name: str) -> int:
        if name not in ids:
            ids[name] = len(labels)
            labels.append(name)
            children[ids[name]] = []
            parents[ids[name]] = []
        return ids[name]

    for line in text.splitlines():
        line = line.rstrip("\n")
        if not line.strip():
            continue
        names = line.split("\t")
        parent = intern(names[0])
        for child_name in names[1:]:
            if not child_name:
                continue
            child = intern(child_name)
            if child in children[parent]:
                log.warning("duplicate edge %s -> %s, deduplicated", names[0], child_name)
                continue
            children[parent].append(child)
            parents[child].append(parent)

    if ROOT_TOKEN not in ids:
        raise TaxonomyError(f"taxonomy has no {ROOT_TOKEN!r} node")
    root = ids[ROOT_TOKEN]
    if parents[root]:
        raise TaxonomyError("root must not have a parent")

    # Longest-path depth via DFS; a back edge on the active stack is a cycle.
    depth_of: dict[int, int] = {root: 0}
    on_stack: set[int] = set()

    def visit(node: int, trail: list[int]):
        if node in on_stack:
            cycle = trail[trail.index(node):] + [node]
            pretty = " -> ".join(labels[n] for n in cycle)
            raise TaxonomyError(f"cycle detected: {pretty}")
        on_stack.add(node)
        for child in children[node]:
            cand = depth_of[node] + 1
            if cand > depth_of.get(child, -1):
                depth_of[child] = cand
                visit(child, trail + [node])
        on_stack.discard(node)

    visit(root, [])

    unreachable = [labels[i] for i in range(len(labels)) if i not in depth_of]
    if unreachable:
        raise TaxonomyError(f"orphan nodes not reachable from root: {', '.join(unreachable)}")

    depth = max(depth_of.values())
    return Taxonomy(labels=labels, root=root, children=children, depth=depth, parents=parents)


def load_taxonomy(path) -> Taxonomy:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


def serialize_taxonomy(tax: Taxonomy) -> str:
    """Inverse of parse_taxonomy: one line per node with children."""
    lines = []
    for node in range(tax.num_nodes):
        kids = tax.children.get(node, [])
        if kids:
            lines.append("\t".join([tax.labels[node]] + [tax.labels[c] for c in kids]))
    return "\n".join(lines) + "\n"


def normalized_adjacency(tax: Taxonomy) -> Tensor:
    """Symmetric degree-normalized adjacency with self-loops.

    A_hat = D^{-1/2} (A + A^T + I) D^{-1/2} over all nodes including the
    root, where A holds the parent->child edges.
    """
    n = tax.num_nodes
    a = np.zeros((n, n))
    for parent, kids in tax.children.items():
        for child in kids:
            a[parent, child] = 1.0
    sym = a + a.T + np.eye(n)
    inv_sqrt_deg = 1.0 / np.sqrt(sym.sum(axis=1))
    a_hat = sym * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    return Tensor(a_hat)


def stats(tax: Taxonomy) -> dict:
    """Corpus-card style summary: label count, depth, branching histogram.

    `label_count` excludes the virtual root; the branching histogram maps
    out-degree -> number of internal nodes with that many children.
    """
    histogram: dict[int, int] = {}
    for node in range(tax.num_nodes):
        fanout = len(tax.children.get(node, []))
        if fanout > 0:
            histogram[fanout] = histogram.get(fanout, 0) + 1
    return {
        "label_count": tax.num_labels,
        "node_count": tax.num_nodes,
        "depth": tax.depth,
        "branching": dict(sorted(histogram.items())),
    }
