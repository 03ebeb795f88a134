"""Deterministic synthetic performance oracle standing in for hardware.

GFLOPS for a (kernel, config, platform) tuple is a product of saturating
terms: block-level parallelism against an occupancy knee, a cache score from
the tile working set, per-block work efficiency, reduction reuse, an unroll
bonus, and a kernel-level arithmetic-intensity scale, times deterministic
lognormal noise.  Feasibility holes come from a hash (plus a hard working-set
limit), so the searchers see the same failure modes real measurement does.

All of it is keyed by knob VALUES, not indices, so restricted subspaces of the
same kernel measure identically to the full space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import yaml

from .errors import ConfigError, DomainError
from .kernels import (
    KernelSpec,
    KnobConfig,
    KnobSpace,
    axis_extents,
    build_knob_space,
    knob_value_map,
    resolved_tiles,
)
from .util import rng_from

# structural constants of the synthetic machine (platform-independent)
WORK_HALF = 16.0  # block work (flops) at which work efficiency reaches 1/2
AI_HALF = 8.0  # arithmetic intensity at which the kernel scale reaches 1/2
REUSE_GAIN = 0.15
UNROLL_HALF = 16.0

OP_FACTOR = {
    "conv2d": 1.0,
    "transpose2d": 0.95,
    "winograd": 1.15,
    "depthwise": 0.6,
    "conv1d": 0.8,
    "transpose1d": 0.75,
}


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    peak_gflops: float
    l1_capacity: int  # elements
    shared_capacity: int  # elements
    occupancy_knee: int
    unroll_benefit: float
    infeasible_fraction: float
    noise_std_rel: float
    seed: int

    def __post_init__(self):
        if self.peak_gflops <= 0 or self.l1_capacity <= 0 or self.shared_capacity <= 0:
            raise DomainError("capacities and peak must be positive")
        if self.occupancy_knee <= 0:
            raise DomainError("occupancy_knee must be positive")
        if self.unroll_benefit < 0 or self.noise_std_rel < 0:
            raise DomainError("unroll_benefit and noise_std_rel must be >= 0")
        if not 0.0 <= self.infeasible_fraction < 1.0:
            raise DomainError("infeasible_fraction must be in [0, 1)")


@dataclass(frozen=True)
class Measurement:
    gflops: float
    feasible: bool


BUILTIN_PROFILES = {
    "platform-A": PlatformProfile(
        name="platform-A",
        peak_gflops=9000.0,
        l1_capacity=16384,
        shared_capacity=98304,
        occupancy_knee=96,
        unroll_benefit=0.15,
        infeasible_fraction=0.05,
        noise_std_rel=0.05,
        seed=1001,
    ),
    "platform-B": PlatformProfile(
        name="platform-B",
        peak_gflops=12000.0,
        l1_capacity=6144,
        shared_capacity=49152,
        occupancy_knee=768,
        unroll_benefit=0.05,
        infeasible_fraction=0.05,
        noise_std_rel=0.05,
        seed=2002,
    ),
}


def get_profile(name: str) -> PlatformProfile:
    try:
        return BUILTIN_PROFILES[name]
    except KeyError:
        raise ConfigError(
            f"unknown platform profile {name!r}; built-ins: {sorted(BUILTIN_PROFILES)}"
        ) from None


def profile_to_dict(p: PlatformProfile) -> dict:
    return asdict(p)


def profile_from_dict(d: dict) -> PlatformProfile:
    try:
        return PlatformProfile(
            name=str(d["name"]),
            peak_gflops=float(d["peak_gflops"]),
            l1_capacity=int(d["l1_capacity"]),
            shared_capacity=int(d["shared_capacity"]),
            occupancy_knee=int(d["occupancy_knee"]),
            unroll_benefit=float(d["unroll_benefit"]),
            infeasible_fraction=float(d["infeasible_fraction"]),
            noise_std_rel=float(d["noise_std_rel"]),
            seed=int(d["seed"]),
        )
    except KeyError as e:
        raise ConfigError(f"platform profile missing field {e.args[0]!r}") from e


def profile_from_yaml(text: str) -> PlatformProfile:
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("profile document must be a mapping")
    return profile_from_dict(data)


# --- the analytic performance surface ---------------------------------------------


def kernel_work_flops(spec: KernelSpec) -> float:
    """Total multiply-accumulate flops of the whole kernel (2 flops per MAC)."""
    w = 2.0
    for e in axis_extents(spec).values():
        w *= e
    return w


def _kernel_scale(spec: KernelSpec) -> float:
    ext = dict(axis_extents(spec))
    tx, ty = ext["x"], ext.get("y", 1)
    trc = ext.get("rc", 1)
    trx, try_ = ext.get("rx", 1), ext.get("ry", 1)
    f = ext["f"]
    in_x = (tx - 1) * spec.stride + spec.kernel_size
    in_y = (ty - 1) * spec.stride + spec.kernel_size if "y" in ext else 1
    data = in_x * in_y * trc + trx * try_ * trc * f + tx * ty * f
    ai = kernel_work_flops(spec) / data
    return ai / (ai + AI_HALF) * OP_FACTOR[spec.op_type]


def _tile_terms(spec: KernelSpec, values: dict, p: PlatformProfile) -> tuple:
    """(base gflops before noise, footprint) for resolved knob values."""
    tiles = resolved_tiles(spec, values)
    inner = {a: t for a, (_, t) in tiles.items()}
    tx = inner.get("x", 1)
    ty = inner.get("y", 1)
    tf = inner.get("f", 1)
    trc = inner.get("rc", 1)
    trx = inner.get("rx", 1)
    try_ = inner.get("ry", 1)

    # parallelism: blocks = product of non-reduction outer extents
    blocks = 1
    for axis in ("x", "y", "f"):
        if axis in tiles:
            blocks *= tiles[axis][0]
    util = blocks / (blocks + p.occupancy_knee)

    # working set of one block (elements)
    in_x = (tx - 1) * spec.stride + spec.kernel_size
    in_y = (ty - 1) * spec.stride + spec.kernel_size if "y" in tiles else 1
    footprint = in_x * in_y * trc + trx * try_ * trc * tf + tx * ty * tf
    cache = p.l1_capacity / (p.l1_capacity + footprint)

    work = 2.0 * tx * ty * tf * trc * trx * try_
    work_eff = work / (work + WORK_HALF)

    reuse = 1.0 + REUSE_GAIN * math.log(1.0 + trc * trx * try_)

    auto = int(values.get("auto_unroll_max_step", 0))
    explicit = bool(values.get("unroll_explicit", 0))
    span = 1.0
    if explicit and auto > 0:
        for t in (tx, ty, tf, trc, trx, try_):
            if t <= auto:
                span *= t
    unroll = 1.0 + p.unroll_benefit * (span - 1.0) / (span - 1.0 + UNROLL_HALF)

    base = p.peak_gflops * util * cache * work_eff * reuse * unroll * _kernel_scale(spec)
    return base, footprint


def _noise_factor(p: PlatformProfile, key_parts: tuple) -> float:
    if p.noise_std_rel == 0.0:
        return 1.0
    sigma = math.sqrt(math.log(1.0 + p.noise_std_rel**2))
    z = float(rng_from("oracle-noise", p.seed, *key_parts).standard_normal())
    # mean-one lognormal
    return math.exp(sigma * z - 0.5 * sigma * sigma)


def measure(
    spec: KernelSpec,
    config: KnobConfig,
    p: PlatformProfile,
    space: KnobSpace | None = None,
) -> Measurement:
    """Deterministic GFLOPS for the tuple; infeasibility is a value, not an error."""
    if space is None:
        space = build_knob_space(spec)
    values = knob_value_map(space, config)
    # identity of the measurement: semantic knob values, not encoding indices
    key = (spec.key_parts(), tuple(sorted((k, int(v)) for k, v in values.items())))
    base, footprint = _tile_terms(spec, values, p)
    if footprint > p.shared_capacity:
        return Measurement(gflops=0.0, feasible=False)
    if p.infeasible_fraction > 0.0:
        u = float(rng_from("oracle-feasible", p.seed, *key).random())
        if u < p.infeasible_fraction:
            return Measurement(gflops=0.0, feasible=False)
    return Measurement(gflops=base * _noise_factor(p, key), feasible=True)


def batch_measure(spec: KernelSpec, configs: list, p: PlatformProfile, space: KnobSpace | None = None) -> list:
    if space is None:
        space = build_knob_space(spec)
    return [measure(spec, c, p, space) for c in configs]
