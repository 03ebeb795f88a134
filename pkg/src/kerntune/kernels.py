"""Kernel specs, knob spaces, and lowering to annotated loop nests.

A kernel spec names an operator instance (conv2d with given sizes); its knob
space enumerates the discrete scheduling choices (tile sizes per axis, unroll
settings).  Lowering turns (spec, config) into a loop-nest AST whose shape
depends only on the op_type, which is what lets graphs of one type share a
template downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError, DomainError
from .util import stable_digest

OP_TYPES = ("conv1d", "transpose1d", "conv2d", "transpose2d", "winograd", "depthwise")

# canonical axis order; every op uses the subset below in this order
AXIS_ORDER = ("x", "y", "f", "rc", "rx", "ry")
REDUCTION_AXES = frozenset({"rc", "rx", "ry"})

AXES_BY_OP = {
    "conv1d": ("x", "f", "rc", "rx"),
    "transpose1d": ("x", "f", "rc", "rx"),
    "conv2d": ("x", "y", "f", "rc", "rx", "ry"),
    "transpose2d": ("x", "y", "f", "rc", "rx", "ry"),
    "winograd": ("x", "y", "f", "rc", "rx", "ry"),
    "depthwise": ("x", "y", "f", "rx", "ry"),
}

# Table 1 cardinalities, keyed by knob family
TILE_CARDINALITY = {
    "tile_x": 140,
    "tile_y": 140,
    "tile_f": 120,
    "tile_rc": 8,
    "tile_rx": 2,
    "tile_ry": 2,
}
AUTO_UNROLL_VALUES = (0, 512, 1500)
UNROLL_EXPLICIT_VALUES = (0, 1)


@dataclass(frozen=True)
class KernelSpec:
    op_type: str
    input_size: int
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 3
    padding: int = 1

    def __post_init__(self):
        if self.op_type not in OP_TYPES:
            raise DomainError(f"unknown op_type {self.op_type!r}")
        for name in ("input_size", "in_channels", "out_channels", "kernel_size", "stride"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise DomainError(f"padding must be non-negative, got {self.padding}")

    def signature(self) -> str:
        """Class identity used for meta-task sampling and held-out checks."""
        return (
            f"{self.op_type}/{self.input_size}/{self.in_channels}"
            f"/{self.out_channels}/{self.kernel_size}/{self.stride}"
        )

    def key_parts(self) -> tuple:
        return (
            self.op_type,
            self.input_size,
            self.in_channels,
            self.out_channels,
            self.kernel_size,
            self.stride,
            self.padding,
        )


@dataclass(frozen=True)
class KnobDef:
    name: str
    values: tuple

    def __post_init__(self):
        if not self.values:
            raise DomainError(f"knob {self.name}: empty value list")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise DomainError(f"knob {self.name}: values must be strictly increasing")


@dataclass(frozen=True)
class KnobSpace:
    knobs: tuple

    @property
    def size(self) -> int:
        n = 1
        for k in self.knobs:
            n *= len(k.values)
        return n

    @property
    def cardinalities(self) -> tuple:
        return tuple(len(k.values) for k in self.knobs)

    def knob_index(self, name: str) -> int:
        for i, k in enumerate(self.knobs):
            if k.name == name:
                return i
        raise DomainError(f"no knob named {name!r}")

    def content_hash(self) -> str:
        parts = []
        for k in self.knobs:
            parts.append(k.name)
            parts.append(tuple(int(v) for v in k.values))
        return stable_digest("knob-space", tuple(parts))


@dataclass(frozen=True)
class KnobConfig:
    choices: tuple

    def __post_init__(self):
        if any(c < 0 for c in self.choices):
            raise DomainError("negative choice index")


@dataclass
class AstNode:
    kind: str  # "seq" or "for_loop"
    axis_name: str = ""
    extent: int = 1
    annotations: dict = field(default_factory=dict)
    children: list = field(default_factory=list)


@dataclass
class LoopNest:
    root: AstNode

    def loops(self) -> list:
        """All for_loop nodes in pre-order (the nest is a single chain)."""
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.kind == "for_loop":
                out.append(node)
            stack.extend(reversed(node.children))
        return out


def conv_out(spec: KernelSpec) -> int:
    return max((spec.input_size + 2 * spec.padding - spec.kernel_size) // spec.stride + 1, 1)


def transpose_out(spec: KernelSpec) -> int:
    return max((spec.input_size - 1) * spec.stride - 2 * spec.padding + spec.kernel_size, 1)


def axis_extents(spec: KernelSpec) -> dict:
    """Loop extent per axis, before tiling."""
    op = spec.op_type
    if op in ("conv1d", "conv2d", "depthwise"):
        sx = sy = conv_out(spec)
    elif op in ("transpose1d", "transpose2d"):
        sx = sy = transpose_out(spec)
    elif op == "winograd":
        # 2x2 output tiles over a 4x4 input transform window
        sx = sy = max(math.ceil(conv_out(spec) / 2), 1)
    else:  # pragma: no cover - op_type validated upstream
        raise DomainError(f"unknown op_type {op!r}")
    ext = {"x": sx, "y": sy, "f": spec.out_channels}
    if op == "winograd":
        ext.update(rc=spec.in_channels, rx=4, ry=4)
    elif op == "depthwise":
        ext.update(rx=spec.kernel_size, ry=spec.kernel_size)
    else:
        ext.update(rc=spec.in_channels, rx=spec.kernel_size, ry=spec.kernel_size)
    return {a: ext[a] for a in AXES_BY_OP[op]}


def _divisors(n: int) -> list:
    small, large = [], []
    d = 1
    while d * d <= n:
        if n % d == 0:
            small.append(d)
            if d != n // d:
                large.append(n // d)
        d += 1
    return small + large[::-1]


def _spread_indices(n_avail: int, count: int) -> list:
    """count distinct indices into range(n_avail), evenly spread, endpoints kept."""
    if count >= n_avail:
        return list(range(n_avail))
    picked, used = [], set()
    for i in range(count):
        j = round(i * (n_avail - 1) / (count - 1)) if count > 1 else 0
        while j in used:  # rounding collision: slide to the next free slot
            j += 1
        used.add(j)
        picked.append(j)
    return picked


def tile_values(extent: int, count: int) -> tuple:
    """Admissible tile sizes for an axis: factors of the extent, thinned or
    padded to exactly `count` strictly increasing values.

    Padding appends values past the extent; lowering clamps them back, so a
    padded choice behaves like the full-extent tile while keeping the value
    list duplicate-free.
    """
    divs = _divisors(extent)
    if len(divs) >= count:
        return tuple(divs[i] for i in _spread_indices(len(divs), count))
    pad = [extent + i + 1 for i in range(count - len(divs))]
    return tuple(divs + pad)


def build_knob_space(spec: KernelSpec, caps: dict | None = None) -> KnobSpace:
    """Knob space for the spec's op_type (Table 1 cardinalities).

    `caps` optionally limits per-knob cardinality (name -> max count), used to
    carve small fully-enumerable subspaces for tests and demos.  A capped tile
    knob re-derives its value list at the smaller count, so the survivors are
    spread over real divisors instead of the padded tail.
    """
    caps = caps or {}
    ext = axis_extents(spec)
    knobs = []
    for axis in AXES_BY_OP[spec.op_type]:
        name = f"tile_{axis}"
        count = TILE_CARDINALITY[name]
        cap = caps.get(name)
        if cap is not None and cap < count:
            count = cap
        values = tile_values(ext[axis], count)
        knobs.append(KnobDef(name, values))
    auto = AUTO_UNROLL_VALUES
    cap = caps.get("auto_unroll_max_step")
    if cap is not None and cap < len(auto):
        auto = tuple(auto[i] for i in _spread_indices(len(auto), cap))
    knobs.append(KnobDef("auto_unroll_max_step", auto))
    ue = UNROLL_EXPLICIT_VALUES
    cap = caps.get("unroll_explicit")
    if cap is not None and cap < len(ue):
        ue = tuple(ue[i] for i in _spread_indices(len(ue), cap))
    knobs.append(KnobDef("unroll_explicit", ue))
    return KnobSpace(tuple(knobs))


def config_index(space: KnobSpace, config: KnobConfig) -> int:
    """Mixed-radix encoding; knob 0 is the most significant digit."""
    if len(config.choices) != len(space.knobs):
        raise DomainError(
            f"config has {len(config.choices)} choices, space has {len(space.knobs)} knobs"
        )
    idx = 0
    for choice, knob in zip(config.choices, space.knobs):
        card = len(knob.values)
        if choice >= card:
            raise DomainError(f"choice {choice} out of range for knob {knob.name} ({card})")
        idx = idx * card + choice
    return idx


def index_config(space: KnobSpace, i: int) -> KnobConfig:
    if not 0 <= i < space.size:
        raise DomainError(f"index {i} out of range for space of size {space.size}")
    choices = []
    for knob in reversed(space.knobs):
        card = len(knob.values)
        choices.append(i % card)
        i //= card
    return KnobConfig(tuple(reversed(choices)))


def sample_configs(space: KnobSpace, n: int, rng) -> list:
    """n configs uniform over the index space, without replacement while the
    space allows it; any surplus beyond space.size is drawn with replacement.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    size = space.size
    if n >= size:
        indices = list(range(size))
        indices += [int(v) for v in rng.integers(0, size, size=n - size)]
        return [index_config(space, i) for i in indices]
    if n * 2 >= size:
        perm = rng.permutation(size)[:n]
        return [index_config(space, int(i)) for i in perm]
    seen: set = set()
    picked = []
    while len(picked) < n:
        draw = rng.integers(0, size, size=n - len(picked))
        for v in draw:
            i = int(v)
            if i not in seen:
                seen.add(i)
                picked.append(i)
                if len(picked) == n:
                    break
    return [index_config(space, i) for i in picked]


def knob_value_map(space: KnobSpace, config: KnobConfig) -> dict:
    if len(config.choices) != len(space.knobs):
        raise DomainError("config does not belong to this space")
    out = {}
    for knob, choice in zip(space.knobs, config.choices):
        if choice >= len(knob.values):
            raise DomainError(f"choice {choice} out of range for knob {knob.name}")
        out[knob.name] = knob.values[choice]
    return out


def resolved_tiles(spec: KernelSpec, values: dict) -> dict:
    """Per-axis (outer, inner) extents after the ceiling split.

    Tile values exceeding the axis extent (padding artifacts) clamp to the
    extent; absent tile knobs (restricted spaces) default to tile 1.
    """
    out = {}
    for axis, ext in axis_extents(spec).items():
        t = int(values.get(f"tile_{axis}", 1))
        t = max(min(t, ext), 1)
        out[axis] = (math.ceil(ext / t), t)
    return out


def lower_to_loop_nest(spec: KernelSpec, config: KnobConfig, space: KnobSpace | None = None) -> LoopNest:
    """Lower (spec, config) to the op_type's template nest.

    Structure is a single chain: all tiled outer loops in canonical axis
    order, then all inner loops.  Loops of extent 1 are kept so every config
    of a type yields the same tree shape.
    """
    if space is None:
        space = build_knob_space(spec)
    values = knob_value_map(space, config)
    tiles = resolved_tiles(spec, values)
    auto = int(values.get("auto_unroll_max_step", 0))
    explicit = bool(values.get("unroll_explicit", 0))

    axes = AXES_BY_OP[spec.op_type]
    loops = []
    for level, suffix in ((0, "outer"), (1, "inner")):
        for axis in axes:
            extent = tiles[axis][level]
            unrolled = level == 1 and explicit and 0 < extent <= auto
            loops.append(
                AstNode(
                    kind="for_loop",
                    axis_name=f"{axis}_{suffix}",
                    extent=extent,
                    annotations={
                        "tile_level": level,
                        "unrolled": unrolled,
                        "reduction": axis in REDUCTION_AXES,
                    },
                )
            )
    for parent, child in zip(loops, loops[1:]):
        parent.children = [child]
    root = AstNode(kind="seq", children=[loops[0]] if loops else [])
    return LoopNest(root)


def tree_shape_hash(nest: LoopNest) -> str:
    """Hash of the nest's structure (kinds, axis names, arities), not extents."""
    def walk(node):
        return (node.kind, node.axis_name, tuple(walk(c) for c in node.children))

    return stable_digest("tree-shape", _flatten(walk(nest.root)))


def _flatten(t) -> tuple:
    out = []
    stack = [t]
    while stack:
        v = stack.pop()
        if isinstance(v, tuple):
            stack.extend(reversed(v))
            out.append("(")
        else:
            out.append(str(v))
    return tuple(out)


# --- serialization ---------------------------------------------------------


def kernel_to_dict(spec: KernelSpec) -> dict:
    return {
        "op_type": spec.op_type,
        "input_size": spec.input_size,
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "kernel_size": spec.kernel_size,
        "stride": spec.stride,
        "padding": spec.padding,
    }


def kernel_from_dict(d: dict) -> KernelSpec:
    try:
        return KernelSpec(
            op_type=str(d["op_type"]),
            input_size=int(d["input_size"]),
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            kernel_size=int(d["kernel_size"]),
            stride=int(d.get("stride", 3)),
            padding=int(d.get("padding", 1)),
        )
    except KeyError as e:
        raise ConfigError(f"kernel spec missing field {e.args[0]!r}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"malformed kernel spec: {e}") from e


def space_to_dict(space: KnobSpace) -> dict:
    return {
        "knobs": [{"name": k.name, "values": [int(v) for v in k.values]} for k in space.knobs],
        "content_hash": space.content_hash(),
    }


def config_to_dict(space: KnobSpace, config: KnobConfig) -> dict:
    return {"index": config_index(space, config), "space_hash": space.content_hash()}


def config_from_dict(space: KnobSpace, d: dict) -> KnobConfig:
    if d.get("space_hash") != space.content_hash():
        raise DomainError("config was produced for a different knob space")
    return index_config(space, int(d["index"]))


def kernels_to_yaml(specs: list) -> str:
    return yaml.safe_dump([kernel_to_dict(s) for s in specs], sort_keys=True)


def kernels_from_yaml(text: str) -> list:
    data = yaml.safe_load(text)
    if not isinstance(data, list):
        raise ConfigError("kernel file must be a list of specs")
    return [kernel_from_dict(d) for d in data]
