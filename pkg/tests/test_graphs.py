"""Loop-nest graphs, super-graph augmentation, and tensorization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kerntune.errors import DomainError
from kerntune.graphs import (
    FEATURE_DIM,
    CodeGraph,
    GraphNode,
    ast_to_graph,
    augment_to_super,
    batch_layout,
    build_super_template,
    config_graph,
    encode_batch,
    feature_multiset,
    graph_from_text,
    graph_to_tensors,
    graph_to_text,
    template_graph_skeleton,
)
from kerntune.kernels import (
    AXES_BY_OP,
    OP_TYPES,
    KernelSpec,
    LoopNest,
    AstNode,
    build_knob_space,
    index_config,
    lower_to_loop_nest,
    sample_configs,
)
from kerntune.util import rng_from


def nest_of(extents, **ann):
    loops = [
        AstNode(kind="for_loop", axis_name=f"a{i}_outer", extent=e,
                annotations={"tile_level": 0, "reduction": False, "unrolled": False, **ann})
        for i, e in enumerate(extents)
    ]
    for p, c in zip(loops, loops[1:]):
        p.children = [c]
    return LoopNest(AstNode(kind="seq", children=[loops[0]] if loops else []))


def conv_spec(op="conv2d"):
    return KernelSpec(op, 64, 32, 64, 3, 1, 1)


# --- ast_to_graph ---------------------------------------------------------------


def test_three_loop_graph_shape():
    g = ast_to_graph(nest_of([4, 2, 8]))
    assert g.num_nodes == 7  # root + 3 * (for, iterval)
    assert len(g.edges) == 6
    kinds = [n.kind for n in g.nodes]
    assert kinds == ["root"] + ["for_node", "iterval"] * 3
    # star from root to for_nodes, pendant itervals
    assert (0, 1) in g.edges and (1, 2) in g.edges and (0, 3) in g.edges


def test_empty_nest_graph():
    g = ast_to_graph(nest_of([]))
    assert g.num_nodes == 1 and g.edges == []


def test_feature_semantics():
    g = ast_to_graph(nest_of([4, 2, 8]))
    f0 = g.nodes[2].feature  # outermost loop
    f2 = g.nodes[6].feature  # innermost loop
    # extent, log2_extent
    assert f0[0] == 4.0 and f0[1] == 2.0
    assert f2[0] == 8.0 and f2[1] == 3.0
    # touched elements: product of strictly inner extents; innermost = 1
    assert f0[6] == 16.0 and f0[7] == 4.0
    assert f2[6] == 1.0 and f2[7] == 0.0
    # arithmetic = 2 * touched, log2 floored at 0
    assert f0[8] == 32.0 and f0[9] == 5.0
    assert f2[8] == 2.0 and f2[9] == 1.0
    # depth 1..n, position in [0,1]
    assert f0[10] == 1.0 and f2[10] == 3.0
    assert f0[11] == 0.0 and f2[11] == 1.0


# --- super-graph template --------------------------------------------------------


def test_template_is_axis_union_in_canonical_order():
    t = build_super_template(OP_TYPES)
    axes = [s.rsplit("_", 1)[0] for s in t.slots]
    assert axes == ["x", "y", "f", "rc", "rx", "ry"] * 2
    assert [s.rsplit("_", 1)[1] for s in t.slots[:6]] == ["outer"] * 6
    assert t.num_nodes == 1 + 2 * 12


def test_template_mapping_injective_per_op():
    t = build_super_template(OP_TYPES)
    for op in OP_TYPES:
        images = [t.mapping_table[(op, s)] for s in
                  [k[1] for k in t.mapping_table if k[0] == op]]
        assert len(images) == len(set(images))
        assert len(images) == 2 * len(AXES_BY_OP[op])


def test_template_rejects_unknown_op():
    with pytest.raises(DomainError):
        build_super_template(("conv2d", "gemm"))
    with pytest.raises(DomainError):
        build_super_template(())


def test_augmentation_identity_when_axes_match():
    # conv2d uses every axis, so augmentation to the conv2d-only template is
    # a structural no-op: same features at the same iterval positions
    spec = conv_spec()
    space = build_knob_space(spec)
    g = config_graph(spec, index_config(space, 7777), space)
    t = build_super_template(("conv2d",))
    aug = augment_to_super(g, t, "conv2d")
    assert aug.num_nodes == g.num_nodes
    for a, b in zip(g.nodes, aug.nodes):
        if a.kind == "iterval":
            assert np.array_equal(a.feature, b.feature)


def test_augmentation_places_by_slot():
    spec = conv_spec("conv1d")  # no y axes
    space = build_knob_space(spec)
    g = config_graph(spec, index_config(space, 123), space)
    t = build_super_template(OP_TYPES)
    aug = augment_to_super(g, t, "conv1d")
    assert aug.num_nodes == t.num_nodes
    filled = {t.slots[(i - 2) // 2] for i, n in enumerate(aug.nodes)
              if n.kind == "iterval" and n.feature is not None}
    assert filled == {f"{a}_{lvl}" for a in AXES_BY_OP["conv1d"] for lvl in ("outer", "inner")}


def test_augmentation_missing_mapping_raises():
    t = build_super_template(("conv1d",))
    g = CodeGraph(nodes=[GraphNode("root"),
                         GraphNode("for_node", template_slot="y_outer"),
                         GraphNode("iterval", feature=np.zeros(FEATURE_DIM),
                                   template_slot="y_outer")],
                  edges=[(0, 1), (1, 2)])
    with pytest.raises(DomainError):
        augment_to_super(g, t, "conv1d")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(OP_TYPES), st.integers(0, 10**9))
def test_augmentation_preserves_feature_multiset(op, raw):
    spec = conv_spec(op)
    space = build_knob_space(spec)
    g = config_graph(spec, index_config(space, raw % space.size), space)
    aug = augment_to_super(g, build_super_template(OP_TYPES), op)
    before = feature_multiset(g)
    after = feature_multiset(aug)
    assert sorted(map(tuple, before)) == sorted(map(tuple, after))


def test_all_ops_share_augmented_adjacency():
    t = build_super_template(OP_TYPES)
    mats = []
    for op in OP_TYPES:
        spec = conv_spec(op)
        space = build_knob_space(spec)
        g = config_graph(spec, index_config(space, 42), space)
        mats.append(graph_to_tensors(augment_to_super(g, t, op)).normalized_adjacency)
    for m in mats[1:]:
        assert m.tobytes() == mats[0].tobytes()


# --- tensors ---------------------------------------------------------------------


def test_single_node_adjacency():
    g = CodeGraph(nodes=[GraphNode("root")], edges=[])
    t = graph_to_tensors(g)
    assert t.normalized_adjacency.tolist() == [[1.0]]
    assert not t.feature_mask.any()


def test_two_node_path_adjacency():
    g = CodeGraph(nodes=[GraphNode("root"), GraphNode("for_node")], edges=[(0, 1)])
    a = graph_to_tensors(g).normalized_adjacency
    assert np.allclose(a, np.full((2, 2), 0.5))


def test_adjacency_symmetric_and_bounded():
    spec = conv_spec()
    space = build_knob_space(spec)
    g = config_graph(spec, index_config(space, 31337), space,
                     template=build_super_template(OP_TYPES))
    a = graph_to_tensors(g).normalized_adjacency
    assert np.array_equal(a, a.T)
    eigs = np.linalg.eigvalsh(a)
    assert eigs.max() <= 1.0 + 1e-9


def test_feature_shape_guard():
    g = CodeGraph(nodes=[GraphNode("iterval", feature=np.zeros(3))], edges=[])
    with pytest.raises(DomainError):
        graph_to_tensors(g)


def test_encode_batch_matches_per_graph_path():
    spec = conv_spec("winograd")
    space = build_knob_space(spec)
    template = build_super_template(OP_TYPES)
    configs = sample_configs(space, 5, rng_from("enc", 0))
    layout = batch_layout(spec, template)
    x = encode_batch(spec, space, configs, layout)
    for j, c in enumerate(configs):
        g = config_graph(spec, c, space, template=template)
        t = graph_to_tensors(g)
        assert np.array_equal(x[j], t.feature_matrix)
        assert np.array_equal(layout.feature_mask, t.feature_mask)
        assert np.array_equal(layout.adjacency, t.normalized_adjacency)


# --- text format -------------------------------------------------------------


def test_text_round_trip():
    spec = conv_spec()
    space = build_knob_space(spec)
    g = config_graph(spec, index_config(space, 2024), space, label=123.456)
    back = graph_from_text(graph_to_text(g))
    assert back.num_nodes == g.num_nodes
    assert back.edges == g.edges
    assert back.label == g.label
    for a, b in zip(g.nodes, back.nodes):
        assert a.kind == b.kind and a.template_slot == b.template_slot
        if a.feature is None:
            assert b.feature is None
        else:
            assert np.array_equal(a.feature, b.feature)


def test_text_goldens_stable(golden_dir):
    spec = KernelSpec(op_type="conv1d", input_size=200, in_channels=64,
                      out_channels=128, kernel_size=3)
    space = build_knob_space(spec)
    c = index_config(space, 123456)
    raw = graph_to_text(config_graph(spec, c, space))
    sup = graph_to_text(config_graph(spec, c, space,
                                     template=build_super_template(OP_TYPES)))
    assert raw == (golden_dir / "graph_conv1d_raw.txt").read_text()
    assert sup == (golden_dir / "graph_conv1d_super.txt").read_text()
