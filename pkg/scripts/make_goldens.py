#!/usr/bin/env python3
"""Regenerate the golden files under tests/golden/.

Everything here is deterministic, so reruns must be byte-identical; the test
suite treats any drift in these files as a regression in the oracle or the
graph encoding, not as something to re-bless casually.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from kerntune.graphs import build_super_template, config_graph, graph_to_text
from kerntune.harness import enumerate_space, toy_kernel, toy_space
from kerntune.kernels import OP_TYPES, KernelSpec, build_knob_space, index_config
from kerntune.oracle import get_profile
from kerntune.util import write_csv


def write_toy_enumeration(out_dir: str, profile_name: str) -> None:
    spec = toy_kernel()
    space = toy_space(spec)
    rows = enumerate_space(spec, space, get_profile(profile_name))
    path = os.path.join(out_dir, f"toy256_{profile_name}.csv")
    write_csv(path, ("config_index", "gflops", "feasible"), [(i, g, int(f)) for i, g, f in rows])
    best = max(rows, key=lambda r: r[1])
    feasible = sum(1 for r in rows if r[2])
    print(f"{path}: {len(rows)} configs, {feasible} feasible, argmax {best[0]} ({best[1]:.3f} GFLOPS)")


def write_graph_goldens(out_dir: str) -> None:
    spec = KernelSpec(op_type="conv1d", input_size=200, in_channels=64, out_channels=128, kernel_size=3)
    space = build_knob_space(spec)
    config = index_config(space, 123456)
    raw = config_graph(spec, config, space)
    with open(os.path.join(out_dir, "graph_conv1d_raw.txt"), "w", encoding="utf-8") as f:
        f.write(graph_to_text(raw))
    template = build_super_template(OP_TYPES)
    aug = config_graph(spec, config, space, template)
    with open(os.path.join(out_dir, "graph_conv1d_super.txt"), "w", encoding="utf-8") as f:
        f.write(graph_to_text(aug))
    print(f"graph goldens: raw {raw.num_nodes} nodes, super {aug.num_nodes} nodes")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out",
        default=os.path.join(os.path.dirname(__file__), "..", "tests", "golden"),
    )
    args = parser.parse_args()
    out_dir = os.path.abspath(args.out)
    os.makedirs(out_dir, exist_ok=True)
    write_toy_enumeration(out_dir, "platform-A")
    write_toy_enumeration(out_dir, "platform-B")
    write_graph_goldens(out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
