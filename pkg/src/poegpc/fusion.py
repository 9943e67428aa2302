"""Expert collections and hierarchical product-of-experts fusion.

Gaussian experts are fused per class in latent space: precisions add and
means are precision-weighted. The fusion hierarchy is a tree whose leaves
name (stream, expert index) pairs; every internal node applies the same
rule to its children, bottom-up, so any tree shape over the same leaves
yields the same root (precision addition is associative).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import LabelVector
from .laplace import ExpertModel, LatentPrediction, predictive_density, train_expert

# Leaf variances below this are clamped before inversion so a degenerate
# expert cannot contribute infinite precision.
VARIANCE_FLOOR = 1e-12


class FusionTreeError(ValueError):
    """A fusion tree document is malformed or references unknown experts."""


@dataclass(frozen=True)
class ExpertCollection:
    """Ordered experts trained on disjoint subsets of one feature stream."""

    stream: str
    experts: tuple

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        if not self.experts:
            raise ValueError("expert collection cannot be empty")
        first = self.experts[0]
        for i, e in enumerate(self.experts):
            if e.num_classes != first.num_classes:
                raise ValueError(
                    f"expert {i} has {e.num_classes} classes, expected {first.num_classes}"
                )
            if e.features.shape[1] != first.features.shape[1]:
                raise ValueError(
                    f"expert {i} has {e.features.shape[1]} feature dims, "
                    f"expected {first.features.shape[1]}"
                )

    def __len__(self):
        return len(self.experts)


def train_collection(X, y, partition, spec, stream="stream", jobs=1):
    """Train one expert per partition subset, optionally in parallel.

    Experts are independent; results are identical for any ``jobs`` value
    because each expert is a pure function of its subset.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)

    def _train(k):
        idx = partition.subsets[k]
        sub_labels = LabelVector(y.labels[idx], y.num_classes)
        try:
            return train_expert(X[idx], sub_labels, spec, indices=idx)
        except Exception as exc:
            raise type(exc)(f"expert {k}: {exc}") from exc

    count = len(partition)
    if jobs > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            experts = list(pool.map(_train, range(count)))
    else:
        experts = [_train(k) for k in range(count)]
    return ExpertCollection(stream=stream, experts=experts)


@dataclass(frozen=True)
class FusionLeaf:
    stream: str
    expert: int


@dataclass(frozen=True)
class FusionNode:
    label: str
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class FusedPrediction:
    """Precision-weighted latent mean/variance per test point and class."""

    mean: np.ndarray
    var: np.ndarray


def fusion_tree_from_dict(doc):
    """Parse a fusion tree document: internal nodes are
    ``{"label": str, "children": [...]}``, leaves ``{"stream": str, "expert": int}``.
    """
    if not isinstance(doc, dict):
        raise FusionTreeError(f"tree node must be an object, got {type(doc).__name__}")
    if "children" in doc:
        label = doc.get("label")
        if not isinstance(label, str) or not label:
            raise FusionTreeError("internal node needs a non-empty string 'label'")
        children = doc["children"]
        if not isinstance(children, list) or not children:
            raise FusionTreeError(f"node {label!r} needs a non-empty 'children' list")
        return FusionNode(label=label, children=[fusion_tree_from_dict(c) for c in children])
    if "stream" in doc and "expert" in doc:
        if not isinstance(doc["stream"], str) or not isinstance(doc["expert"], int):
            raise FusionTreeError(f"leaf must have string 'stream' and integer 'expert': {doc}")
        return FusionLeaf(stream=doc["stream"], expert=doc["expert"])
    raise FusionTreeError(
        f"node must have either 'children' or ('stream', 'expert'): {sorted(doc)}"
    )


def load_fusion_tree(path):
    with open(str(path)) as fh:
        return fusion_tree_from_dict(json.load(fh))


def tree_leaves(tree):
    """All leaves in declaration order."""
    if isinstance(tree, FusionLeaf):
        return [tree]
    out = []
    for child in tree.children:
        out.extend(tree_leaves(child))
    return out


def internal_labels(tree):
    """Labels of internal nodes, parents before children."""
    if isinstance(tree, FusionLeaf):
        return []
    out = [tree.label]
    for child in tree.children:
        out.extend(internal_labels(child))
    return out


def validate_tree(tree, available):
    """Check leaf uniqueness and that every leaf resolves to a known expert.

    ``available`` maps stream name -> expert count (or is a set of
    (stream, index) pairs).
    """
    leaves = tree_leaves(tree)
    seen = set()
    for leaf in leaves:
        key = (leaf.stream, leaf.expert)
        if key in seen:
            raise FusionTreeError(f"leaf {key} appears more than once")
        seen.add(key)
        if isinstance(available, dict):
            known = leaf.stream in available and 0 <= leaf.expert < available[leaf.stream]
        else:
            known = key in available
        if not known:
            raise FusionTreeError(f"leaf {key} does not resolve to a trained expert")
    labels = internal_labels(tree)
    dup = {l for l in labels if labels.count(l) > 1}
    if dup:
        raise FusionTreeError(f"duplicate internal node labels: {sorted(dup)}")
    return leaves


def fuse_poe(children):
    """Fuse Gaussian (mean, variance) pairs with the product-of-experts rule.

    Precisions add; the fused mean is the precision-weighted average. A
    single child is returned unchanged (bit-exact identity). Values may be
    scalars or broadcasting arrays.
    """
    children = list(children)
    if not children:
        raise ValueError("fuse_poe needs at least one child")
    for i, (_, var) in enumerate(children):
        if np.any(np.asarray(var) <= 0):
            raise ValueError(f"child {i} has non-positive variance")
    if len(children) == 1:
        return children[0]
    precision = sum(1.0 / np.asarray(var, dtype=np.float64) for _, var in children)
    weighted = sum(
        np.asarray(mean, dtype=np.float64) / np.asarray(var, dtype=np.float64)
        for mean, var in children
    )
    fused_var = 1.0 / precision
    return weighted * fused_var, fused_var


def _fuse_node(node, predictions, collected):
    if isinstance(node, FusionLeaf):
        pred = predictions[(node.stream, node.expert)]
        var = np.maximum(pred.var, VARIANCE_FLOOR)
        return pred.mean, var
    parts = [_fuse_node(child, predictions, collected) for child in node.children]
    mean, var = fuse_poe(parts)
    collected[node.label] = FusedPrediction(mean=mean, var=var)
    return mean, var


def hierarchical_fuse(tree, predictions, collect=None):
    """Fuse leaf latent predictions bottom-up through the tree.

    ``predictions`` maps (stream, expert index) -> LatentPrediction; all
    entries must cover the same test points and classes. Children are
    reduced in declared order, so the result is deterministic. When
    ``collect`` is a dict it receives the fused prediction of every internal
    node keyed by label. Returns the root FusedPrediction.
    """
    leaves = validate_tree(tree, set(predictions.keys()))
    shapes = {predictions[(l.stream, l.expert)].mean.shape for l in leaves}
    if len(shapes) != 1:
        raise FusionTreeError(f"leaf predictions disagree on shape: {sorted(shapes)}")
    collected = collect if collect is not None else {}
    if isinstance(tree, FusionLeaf):
        pred = predictions[(tree.stream, tree.expert)]
        return FusedPrediction(mean=pred.mean, var=np.maximum(pred.var, VARIANCE_FLOOR))
    mean, var = _fuse_node(tree, predictions, collected)
    return collected[tree.label]


def classify(fused, num_samples=1000, seed=0):
    """Labels and class posteriors from fused latent predictions.

    Posteriors come from the Monte Carlo softmax integral; the label is the
    argmax with the lowest class index winning exact ties.
    """
    posterior = predictive_density(fused, num_samples=num_samples, seed=seed)
    labels = np.argmax(posterior, axis=1)
    return labels, posterior


def evaluate(predicted, true, num_classes=None):
    """Accuracy and C x C confusion matrix (rows true, columns predicted)."""
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise ValueError(
            f"length mismatch: {predicted.shape[0]} predictions vs {true.shape[0]} labels"
        )
    if num_classes is None:
        num_classes = int(max(predicted.max(), true.max())) + 1
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (true, predicted), 1)
    accuracy = float((predicted == true).mean())
    return accuracy, confusion
