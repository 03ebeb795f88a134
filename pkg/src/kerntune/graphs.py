"""Loop nests as graphs: root/for/iterval nodes, super-graph augmentation.

Every lowered nest becomes a small star-shaped graph (root fans out to for
nodes, each for node owns one iterval node carrying the loop's context
features).  The super-graph template is the union of all per-type shapes;
augmenting into it gives every op_type the same adjacency so one GCN can
read them all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .kernels import (
    AXES_BY_OP,
    AXIS_ORDER,
    REDUCTION_AXES,
    KernelSpec,
    KnobConfig,
    KnobSpace,
    LoopNest,
    axis_extents,
    build_knob_space,
    knob_value_map,
)

FEATURE_SLOTS = (
    "extent",
    "log2_extent",
    "tile_level",
    "is_reduction",
    "is_unrolled",
    "stride_hint",
    "touched_elements_estimate",
    "log2_touched",
    "arithmetic_ops_estimate",
    "log2_arith",
    "loop_depth",
    "normalized_position",
)
FEATURE_DIM = len(FEATURE_SLOTS)


@dataclass
class GraphNode:
    kind: str  # "root" | "for_node" | "iterval"
    feature: np.ndarray | None = None
    template_slot: str | None = None


@dataclass
class CodeGraph:
    nodes: list
    edges: list
    label: float | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class SuperGraphTemplate:
    op_types: tuple
    slots: tuple  # iterval slot ids in canonical node order
    mapping_table: dict  # (op_type, loop axis_name) -> slot id

    @property
    def num_nodes(self) -> int:
        return 1 + 2 * len(self.slots)

    def iterval_index(self, slot: str) -> int:
        return 2 * self.slots.index(slot) + 2


@dataclass
class GraphTensors:
    feature_matrix: np.ndarray  # (num_nodes, F)
    normalized_adjacency: np.ndarray  # (num_nodes, num_nodes)
    feature_mask: np.ndarray  # (num_nodes,) bool, true where a real feature sits


# --- loop context features ---------------------------------------------------


def _context_features(
    extents: np.ndarray,
    tile_levels: np.ndarray,
    reductions: np.ndarray,
    unrolled: np.ndarray,
    stride_hints: np.ndarray,
) -> np.ndarray:
    """Feature rows for a chain of loops; leading axes of the inputs may carry
    a batch dimension, the last axis indexes loops outermost-first.
    """
    e = np.asarray(extents, dtype=np.float64)
    n = e.shape[-1]
    touched = np.ones_like(e)
    if n > 1:
        # product of extents strictly inside each loop
        rev = np.cumprod(e[..., ::-1], axis=-1)[..., ::-1]
        touched[..., :-1] = rev[..., 1:]
    arith = 2.0 * touched
    depth = np.broadcast_to(np.arange(1, n + 1, dtype=np.float64), e.shape)
    pos = np.broadcast_to(
        np.arange(n, dtype=np.float64) / max(n - 1, 1), e.shape
    )
    log2 = lambda v: np.log2(np.maximum(v, 1.0))
    cols = [
        e,
        log2(e),
        np.asarray(tile_levels, dtype=np.float64),
        np.asarray(reductions, dtype=np.float64),
        np.asarray(unrolled, dtype=np.float64),
        np.asarray(stride_hints, dtype=np.float64),
        touched,
        log2(touched),
        arith,
        log2(arith),
        depth,
        pos,
    ]
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def _nest_feature_rows(nest: LoopNest) -> tuple:
    """(axis_names, feature matrix (L, F)) for the nest's loop chain."""
    loops = nest.loops()
    names = [lp.axis_name for lp in loops]
    inner_extent = {}
    for lp in loops:
        base, _, suffix = lp.axis_name.rpartition("_")
        if suffix == "inner":
            inner_extent[base] = lp.extent
    extents, levels, reds, unrolls, strides = [], [], [], [], []
    for lp in loops:
        ann = lp.annotations
        base, _, suffix = lp.axis_name.rpartition("_")
        extents.append(lp.extent)
        levels.append(ann.get("tile_level", 0))
        reds.append(1.0 if ann.get("reduction") else 0.0)
        unrolls.append(1.0 if ann.get("unrolled") else 0.0)
        strides.append(float(inner_extent.get(base, 1)) if suffix == "outer" else 1.0)
    if not loops:
        return [], np.zeros((0, FEATURE_DIM))
    feats = _context_features(
        np.array(extents, dtype=np.float64),
        np.array(levels, dtype=np.float64),
        np.array(reds),
        np.array(unrolls),
        np.array(strides),
    )
    return names, feats


def ast_to_graph(nest: LoopNest, label: float | None = None) -> CodeGraph:
    """Root node, then one (for_node, iterval) pair per loop in pre-order."""
    names, feats = _nest_feature_rows(nest)
    nodes = [GraphNode("root")]
    edges = []
    for i, name in enumerate(names):
        for_idx = len(nodes)
        nodes.append(GraphNode("for_node", template_slot=name))
        nodes.append(GraphNode("iterval", feature=feats[i].copy(), template_slot=name))
        edges.append((0, for_idx))
        edges.append((for_idx, for_idx + 1))
    return CodeGraph(nodes=nodes, edges=edges, label=label)


# --- super-graph template -----------------------------------------------------


def _loop_slot_order(axes_present: set) -> list:
    order = []
    for suffix in ("outer", "inner"):
        for axis in AXIS_ORDER:
            if axis in axes_present:
                order.append(f"{axis}_{suffix}")
    return order


def build_super_template(op_types) -> SuperGraphTemplate:
    ops = tuple(sorted(set(op_types)))
    if not ops:
        raise DomainError("op_types must be non-empty")
    for op in ops:
        if op not in AXES_BY_OP:
            raise DomainError(f"unsupported op_type {op!r}")
    axes_present = set()
    for op in ops:
        axes_present.update(AXES_BY_OP[op])
    slots = tuple(_loop_slot_order(axes_present))
    mapping = {}
    for op in ops:
        for name in _loop_slot_order(set(AXES_BY_OP[op])):
            mapping[(op, name)] = name
    return SuperGraphTemplate(op_types=ops, slots=slots, mapping_table=mapping)


def template_graph_skeleton(template: SuperGraphTemplate) -> CodeGraph:
    """The template's node/edge set with all iterval slots null."""
    nodes = [GraphNode("root")]
    edges = []
    for slot in template.slots:
        for_idx = len(nodes)
        nodes.append(GraphNode("for_node", template_slot=slot))
        nodes.append(GraphNode("iterval", template_slot=slot))
        edges.append((0, for_idx))
        edges.append((for_idx, for_idx + 1))
    return CodeGraph(nodes=nodes, edges=edges)


def augment_to_super(graph: CodeGraph, template: SuperGraphTemplate, op_type: str) -> CodeGraph:
    out = template_graph_skeleton(template)
    out.label = graph.label
    for node in graph.nodes:
        if node.kind != "iterval":
            continue
        key = (op_type, node.template_slot)
        slot = template.mapping_table.get(key)
        if slot is None:
            raise DomainError(f"template has no slot for {key}")
        if node.feature is not None:
            out.nodes[template.iterval_index(slot)].feature = node.feature.copy()
    return out


# --- tensorization ------------------------------------------------------------


def _normalized_adjacency(num_nodes: int, edges) -> np.ndarray:
    a = np.zeros((num_nodes, num_nodes))
    for s, d in edges:
        a[s, d] = 1.0
        a[d, s] = 1.0
    np.fill_diagonal(a, a.diagonal() + 1.0)
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


def graph_to_tensors(graph: CodeGraph) -> GraphTensors:
    n = graph.num_nodes
    x = np.zeros((n, FEATURE_DIM))
    mask = np.zeros(n, dtype=bool)
    for i, node in enumerate(graph.nodes):
        if node.feature is not None:
            if node.feature.shape != (FEATURE_DIM,):
                raise DomainError(
                    f"node {i} feature has shape {node.feature.shape}, want ({FEATURE_DIM},)"
                )
            x[i] = node.feature
            mask[i] = True
    return GraphTensors(
        feature_matrix=x,
        normalized_adjacency=_normalized_adjacency(n, graph.edges),
        feature_mask=mask,
    )


# --- vectorized encoding ------------------------------------------------------


@dataclass
class BatchLayout:
    """Shared structure for a (spec, space, template) combination: adjacency,
    node rows of each loop's iterval slot, and the feature mask."""

    adjacency: np.ndarray
    iterval_rows: np.ndarray  # (n_loops,) node index per loop in chain order
    feature_mask: np.ndarray
    num_nodes: int
    loop_names: tuple


def batch_layout(spec: KernelSpec, template: SuperGraphTemplate | None) -> BatchLayout:
    names = _loop_slot_order(set(AXES_BY_OP[spec.op_type]))
    if template is None:
        rows = np.array([2 * i + 2 for i in range(len(names))])
        num = 1 + 2 * len(names)
        edges = [(0, 2 * i + 1) for i in range(len(names))] + [
            (2 * i + 1, 2 * i + 2) for i in range(len(names))
        ]
        adj = _normalized_adjacency(num, edges)
    else:
        rows = np.array(
            [template.iterval_index(template.mapping_table[(spec.op_type, n)]) for n in names]
        )
        skel = template_graph_skeleton(template)
        num = skel.num_nodes
        adj = _normalized_adjacency(num, skel.edges)
    mask = np.zeros(num, dtype=bool)
    mask[rows] = True
    return BatchLayout(
        adjacency=adj,
        iterval_rows=rows,
        feature_mask=mask,
        num_nodes=num,
        loop_names=tuple(names),
    )


def encode_batch(
    spec: KernelSpec,
    space: KnobSpace,
    configs: list,
    layout: BatchLayout,
) -> np.ndarray:
    """Feature tensors (B, num_nodes, F) for many configs at once.

    Exactly matches the per-graph path (ast_to_graph + graph_to_tensors);
    the test suite holds the two bit-equal.
    """
    b = len(configs)
    axes = AXES_BY_OP[spec.op_type]
    ext = axis_extents(spec)
    n_loops = 2 * len(axes)

    choice_mat = np.array([c.choices for c in configs], dtype=np.int64).reshape(b, -1)
    values = {}
    for j, knob in enumerate(space.knobs):
        vals = np.asarray(knob.values, dtype=np.int64)
        values[knob.name] = vals[choice_mat[:, j]]

    extents = np.empty((b, n_loops))
    levels = np.zeros((b, n_loops))
    reds = np.zeros((b, n_loops))
    unrolls = np.zeros((b, n_loops))
    strides = np.ones((b, n_loops))
    auto = values.get("auto_unroll_max_step", np.zeros(b, dtype=np.int64))
    explicit = values.get("unroll_explicit", np.zeros(b, dtype=np.int64)).astype(bool)
    na = len(axes)
    for k, axis in enumerate(axes):
        e = ext[axis]
        t = values.get(f"tile_{axis}", np.ones(b, dtype=np.int64))
        t = np.clip(t, 1, e)
        outer = -(-e // t)
        extents[:, k] = outer
        extents[:, na + k] = t
        levels[:, na + k] = 1.0
        if axis in REDUCTION_AXES:
            reds[:, [k, na + k]] = 1.0
        unrolls[:, na + k] = (explicit & (auto > 0) & (t <= auto)).astype(np.float64)
        strides[:, k] = t
    feats = _context_features(extents, levels, reds, unrolls, strides)

    out = np.zeros((b, layout.num_nodes, FEATURE_DIM))
    out[:, layout.iterval_rows, :] = feats
    return out


def config_graph(
    spec: KernelSpec,
    config: KnobConfig,
    space: KnobSpace | None = None,
    template: SuperGraphTemplate | None = None,
    label: float | None = None,
) -> CodeGraph:
    """Convenience: lower, encode, optionally augment."""
    from .kernels import lower_to_loop_nest

    if space is None:
        space = build_knob_space(spec)
    g = ast_to_graph(lower_to_loop_nest(spec, config, space), label=label)
    if template is not None:
        g = augment_to_super(g, template, spec.op_type)
    return g


def feature_multiset(graph: CodeGraph) -> list:
    """Sorted list of feature-vector tuples, for augmentation-preservation checks."""
    rows = [tuple(n.feature.tolist()) for n in graph.nodes if n.feature is not None]
    return sorted(rows)


# --- serialization ------------------------------------------------------------


def graph_to_text(graph: CodeGraph) -> str:
    lines = [f"codegraph {graph.num_nodes} {FEATURE_DIM}"]
    for node in graph.nodes:
        slot = node.template_slot if node.template_slot is not None else "-"
        if node.feature is None:
            lines.append(f"{node.kind} {slot} null")
        else:
            feat = " ".join(repr(float(v)) for v in node.feature)
            lines.append(f"{node.kind} {slot} {feat}")
    for s, d in graph.edges:
        lines.append(f"edge {s} {d}")
    if graph.label is not None:
        lines.append(f"label {repr(float(graph.label))}")
    return "\n".join(lines) + "\n"


def graph_from_text(text: str) -> CodeGraph:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("codegraph "):
        raise DomainError("not a codegraph document")
    header = lines[0].split()
    num_nodes, fdim = int(header[1]), int(header[2])
    if fdim != FEATURE_DIM:
        raise DomainError(f"feature dim {fdim} unsupported (want {FEATURE_DIM})")
    if len(lines) < 1 + num_nodes:
        raise DomainError("truncated codegraph document")
    nodes = []
    for ln in lines[1 : 1 + num_nodes]:
        parts = ln.split()
        kind, slot = parts[0], parts[1]
        slot = None if slot == "-" else slot
        if parts[2] == "null":
            nodes.append(GraphNode(kind, template_slot=slot))
        else:
            vals = np.array([float(v) for v in parts[2:]])
            if vals.shape != (FEATURE_DIM,):
                raise DomainError("bad feature row length")
            nodes.append(GraphNode(kind, feature=vals, template_slot=slot))
    edges = []
    label = None
    for ln in lines[1 + num_nodes :]:
        parts = ln.split()
        if parts[0] == "edge":
            edges.append((int(parts[1]), int(parts[2])))
        elif parts[0] == "label":
            label = float(parts[1])
        else:
            raise DomainError(f"unexpected line {ln!r}")
    return CodeGraph(nodes=nodes, edges=edges, label=label)
