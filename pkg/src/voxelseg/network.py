"""Config-driven construction of deeply supervised encoder-decoder networks.

A :class:`NetworkConfig` is an ordered, acyclic list of nodes (standalone
convolutions, plain/residual blocks, nearest-neighbor upsampling, feature
concatenation) plus six auxiliary heads and one final head. Blocks use
pre-activation ordering (BN, ReLU, conv, twice) and residual blocks add a
center-cropped identity skip. Heads are BN, ReLU, then a biased 1x1x1
convolution to a single logit map; auxiliary heads are upsampled and cropped
onto the final output grid so every head shares one label grid.

The same walker that builds the layer graph also computes, per node, the
receptive field, the output-grid stride (jump), concrete extents and the
input-grid alignment offset, rejecting configurations whose junctions would
need asymmetric crops.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractViolationError, FormatError, ShapeError
from .layers import (
    BNState,
    ConvParams,
    activation,
    batchnorm,
    concat_features,
    conv3d_valid,
    crop_center,
    dropout,
    upsample_nn,
)
from .tensor import Tensor, add

INPUT_ID = "input"
NUM_AUX_HEADS = 6

DROPOUT_POSITIONS = ("none", "pre_conv1", "pre_conv2", "pre_add")
DROPOUT_VARIANTS = ("element", "spatial")
BLOCK_KINDS = ("plain", "residual")

CHECKPOINT_MAGIC = b"VSEGCKPT1\n"


# ---------------------------------------------------------------------------
# Config model
# ---------------------------------------------------------------------------

@dataclass
class DropoutSpec:
    position: str = "none"
    p: float = 0.0
    variant: str = "element"

    def validate(self, where: str) -> None:
        if self.position not in DROPOUT_POSITIONS:
            raise ConfigError(f"{where}: unknown dropout position {self.position!r}")
        if self.variant not in DROPOUT_VARIANTS:
            raise ConfigError(f"{where}: unknown dropout variant {self.variant!r}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"{where}: dropout p must be in [0, 1), got {self.p}")
        if self.position != "none" and self.p == 0.0:
            raise ConfigError(f"{where}: dropout position set but p == 0")


@dataclass
class NodeSpec:
    """One element of the layer graph.

    op "conv": standalone convolution (features, kernel, stride, preact).
    op "block": two-conv plain or residual block (always stride 1).
    op "upsample": nearest-neighbor replication by ``factors``.
    op "concat": feature concatenation of exactly two inputs (auto center-crop).
    """

    id: str
    op: str
    inputs: list[str]
    features: int = 0
    kernel: tuple[int, int, int] = (1, 1, 1)
    stride: tuple[int, int, int] = (1, 1, 1)
    preact: bool = True
    kind: str = "plain"
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    factors: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        self.kernel = tuple(int(k) for k in self.kernel)
        self.stride = tuple(int(s) for s in self.stride)
        self.factors = tuple(int(f) for f in self.factors)
        if isinstance(self.dropout, dict):
            self.dropout = DropoutSpec(**self.dropout)


@dataclass
class NetworkConfig:
    name: str
    in_features: int
    nodes: list[NodeSpec]
    final_head: str
    aux_heads: list[str]

    def __post_init__(self):
        self.nodes = [
            NodeSpec(**n) if isinstance(n, dict) else n for n in self.nodes
        ]

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            name=d["name"],
            in_features=int(d["in_features"]),
            nodes=d["nodes"],
            final_head=d["final_head"],
            aux_heads=list(d["aux_heads"]),
        )

    @classmethod
    def from_json(cls, path) -> "NetworkConfig":
        with open(path, "r", encoding="utf-8") as f:
            cfg = cls.from_dict(json.load(f))
        cfg.validate()
        return cfg

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    # -- validation ---------------------------------------------------------

    def node_map(self) -> dict[str, NodeSpec]:
        return {n.id: n for n in self.nodes}

    def validate(self) -> None:
        if self.in_features < 1:
            raise ConfigError("in_features must be >= 1")
        seen: set[str] = {INPUT_ID}
        for n in self.nodes:
            where = f"node {n.id!r}"
            if not n.id or n.id == INPUT_ID:
                raise ConfigError(f"{where}: invalid id")
            if n.id in seen:
                raise ConfigError(f"{where}: duplicate id")
            if n.op not in ("conv", "block", "upsample", "concat"):
                raise ConfigError(f"{where}: unknown op {n.op!r}")
            expected_inputs = 2 if n.op == "concat" else 1
            if len(n.inputs) != expected_inputs:
                raise ConfigError(
                    f"{where}: {n.op} takes {expected_inputs} input(s), "
                    f"got {len(n.inputs)}"
                )
            for src in n.inputs:
                if src not in seen:
                    raise ConfigError(
                        f"{where}: input {src!r} is not defined before use"
                    )
            if n.op in ("conv", "block"):
                if n.features < 1:
                    raise ConfigError(f"{where}: features must be >= 1")
                if any(k < 1 for k in n.kernel):
                    raise ConfigError(f"{where}: kernel extents must be >= 1")
                if any(s < 1 for s in n.stride):
                    raise ConfigError(f"{where}: strides must be >= 1")
            if n.op == "block":
                if n.kind not in BLOCK_KINDS:
                    raise ConfigError(f"{where}: unknown block kind {n.kind!r}")
                if n.stride != (1, 1, 1):
                    raise ConfigError(f"{where}: blocks must have unit stride")
                n.dropout.validate(where)
            if n.op == "upsample" and any(f < 1 for f in n.factors):
                raise ConfigError(f"{where}: upsample factors must be >= 1")
            seen.add(n.id)

        if self.final_head not in seen or self.final_head == INPUT_ID:
            raise ConfigError(f"final_head {self.final_head!r} is not a node")
        if len(self.aux_heads) != NUM_AUX_HEADS:
            raise ConfigError(
                f"exactly {NUM_AUX_HEADS} auxiliary heads are required, "
                f"got {len(self.aux_heads)}"
            )
        if len(set(self.aux_heads)) != NUM_AUX_HEADS:
            raise ConfigError("auxiliary head attachment points must be distinct")
        for a in self.aux_heads:
            if a not in seen or a == INPUT_ID:
                raise ConfigError(f"aux head source {a!r} is not a node")

        used = self._reachable()
        for n in self.nodes:
            if n.id not in used:
                raise ConfigError(f"node {n.id!r} feeds no head")

        # grid arithmetic sanity (raises on residual feature mismatch,
        # non-integer jumps etc.)
        walk_grid(self)

    def _reachable(self) -> set[str]:
        nm = self.node_map()
        used: set[str] = set()
        stack = [self.final_head, *self.aux_heads]
        while stack:
            nid = stack.pop()
            if nid == INPUT_ID or nid in used:
                continue
            used.add(nid)
            stack.extend(nm[nid].inputs)
        return used


# ---------------------------------------------------------------------------
# Grid arithmetic (receptive field, jump, extent, alignment offset)
# ---------------------------------------------------------------------------

@dataclass
class GridInfo:
    """Per-node geometry on the input voxel grid.

    rf: receptive field per axis. jump: grid spacing in input voxels. extent:
    concrete spatial shape (None when no input size was given). off2: twice
    the coordinate of output voxel 0's window center (kept doubled so it stays
    integral for even kernels).
    """

    rf: tuple[int, int, int]
    jump: tuple[int, int, int]
    features: int
    extent: Optional[tuple[int, int, int]] = None
    off2: tuple[int, int, int] = (0, 0, 0)


def _conv_grid(g: GridInfo, kernel, stride, features, where: str) -> GridInfo:
    rf = tuple(r + (k - 1) * j for r, k, j in zip(g.rf, kernel, g.jump))
    off2 = tuple(o + (k - 1) * j for o, k, j in zip(g.off2, kernel, g.jump))
    jump = tuple(j * s for j, s in zip(g.jump, stride))
    extent = None
    if g.extent is not None:
        extent = []
        for ax, (n, k, s) in enumerate(zip(g.extent, kernel, stride)):
            if n < k:
                raise ShapeError(
                    f"{where}: {('depth','height','width')[ax]} extent {n} "
                    f"is smaller than kernel {k}"
                )
            extent.append((n - k) // s + 1)
        extent = tuple(extent)
    return GridInfo(rf=rf, jump=jump, features=features, extent=extent, off2=off2)


def _align_crop(g: GridInfo, target_extent, where: str) -> GridInfo:
    """Geometry after center-cropping a node's output to ``target_extent``."""
    if g.extent is None:
        return GridInfo(g.rf, g.jump, g.features, None, g.off2)
    off2 = list(g.off2)
    for ax, (n, t) in enumerate(zip(g.extent, target_extent)):
        m = n - t
        if m < 0:
            raise ShapeError(f"{where}: crop target exceeds extent on axis {ax}")
        if m % 2 != 0:
            raise ConfigError(
                f"{where}: junction needs an asymmetric crop "
                f"({n} -> {t} on axis {ax})"
            )
        off2[ax] += m * g.jump[ax]
    return GridInfo(g.rf, g.jump, g.features, tuple(target_extent), tuple(off2))


def walk_grid(
    cfg: NetworkConfig, in_spatial: Optional[tuple[int, int, int]] = None
) -> dict[str, GridInfo]:
    """Propagate grid geometry through every node and both kinds of head.

    Returns a map from node id to :class:`GridInfo`; the final head's grid is
    stored under ``"__output__"``. Junctions whose operands disagree on jump or
    alignment raise :class:`ConfigError`.
    """
    grids: dict[str, GridInfo] = {
        INPUT_ID: GridInfo(
            rf=(1, 1, 1),
            jump=(1, 1, 1),
            features=cfg.in_features,
            extent=tuple(in_spatial) if in_spatial is not None else None,
        )
    }
    for n in cfg.nodes:
        where = f"node {n.id!r}"
        if n.op == "conv":
            g = _conv_grid(grids[n.inputs[0]], n.kernel, n.stride, n.features, where)
        elif n.op == "block":
            gin = grids[n.inputs[0]]
            if n.kind == "residual" and gin.features != n.features:
                raise ConfigError(
                    f"{where}: residual block must preserve features "
                    f"({gin.features} in, {n.features} requested)"
                )
            g = _conv_grid(gin, n.kernel, (1, 1, 1), n.features, where)
            g = _conv_grid(g, n.kernel, (1, 1, 1), n.features, where)
            if n.kind == "residual" and gin.extent is not None:
                skip = _align_crop(gin, g.extent, where)
                if skip.off2 != g.off2:
                    raise ConfigError(f"{where}: residual skip is misaligned")
        elif n.op == "upsample":
            gin = grids[n.inputs[0]]
            jump = []
            for ax, (j, f) in enumerate(zip(gin.jump, n.factors)):
                if j % f != 0:
                    raise ConfigError(
                        f"{where}: upsample factor {f} does not divide the "
                        f"accumulated stride {j} on axis {ax}"
                    )
                jump.append(j // f)
            extent = (
                tuple(e * f for e, f in zip(gin.extent, n.factors))
                if gin.extent is not None
                else None
            )
            g = GridInfo(gin.rf, tuple(jump), gin.features, extent, gin.off2)
        elif n.op == "concat":
            ga, gb = (grids[src] for src in n.inputs)
            if ga.jump != gb.jump:
                raise ConfigError(
                    f"{where}: concat operands live on different grids "
                    f"{ga.jump} vs {gb.jump}"
                )
            rf = tuple(max(x, y) for x, y in zip(ga.rf, gb.rf))
            extent = None
            off2 = ga.off2
            if ga.extent is not None and gb.extent is not None:
                extent = tuple(min(x, y) for x, y in zip(ga.extent, gb.extent))
                ca = _align_crop(ga, extent, where)
                cb = _align_crop(gb, extent, where)
                if ca.off2 != cb.off2:
                    raise ConfigError(f"{where}: concat operands are misaligned")
                off2 = ca.off2
            g = GridInfo(rf, ga.jump, ga.features + gb.features, extent, off2)
        else:  # pragma: no cover - guarded by validate()
            raise ConfigError(f"{where}: unknown op {n.op!r}")
        grids[n.id] = g

    final = grids[cfg.final_head]
    # the head's 1x1x1 conv leaves geometry unchanged
    grids["__output__"] = GridInfo(
        final.rf, final.jump, 1, final.extent, final.off2
    )

    for aux_id in cfg.aux_heads:
        ga = grids[aux_id]
        for ax in range(3):
            if ga.jump[ax] % final.jump[ax] != 0:
                raise ConfigError(
                    f"aux head at {aux_id!r}: grid stride {ga.jump} is not a "
                    f"multiple of the output stride {final.jump}"
                )
        if ga.extent is not None and final.extent is not None:
            factors = tuple(ja // jf for ja, jf in zip(ga.jump, final.jump))
            up_extent = tuple(e * f for e, f in zip(ga.extent, factors))
            up = GridInfo(ga.rf, final.jump, 1, up_extent, ga.off2)
            cropped = _align_crop(up, final.extent, f"aux head at {aux_id!r}")
            if cropped.off2 != final.off2:
                raise ConfigError(f"aux head at {aux_id!r} is misaligned")
    return grids


def receptive_field(cfg: NetworkConfig) -> tuple[int, int, int]:
    """Receptive field of the final output, per axis (depth, height, width)."""
    return walk_grid(cfg)["__output__"].rf


def output_shape(
    cfg: NetworkConfig, in_spatial: tuple[int, int, int]
) -> tuple[int, int, int]:
    """Spatial extent of the final head's output for a given input size."""
    rf = receptive_field(cfg)
    for ax, (n, r) in enumerate(zip(in_spatial, rf)):
        if n < r:
            raise ShapeError(
                f"input extent {n} on axis {ax} is below the receptive field {r}"
            )
    return walk_grid(cfg, in_spatial)["__output__"].extent


@dataclass
class GridAlignment:
    """Mapping from the final output grid onto input voxel coordinates."""

    out_extent: tuple[int, int, int]
    jump: tuple[int, int, int]
    offset: tuple[int, int, int]

    def label_slices(self) -> tuple[slice, slice, slice]:
        return tuple(
            slice(o, o + (e - 1) * j + 1, j)
            for o, j, e in zip(self.offset, self.jump, self.out_extent)
        )

    def is_symmetric(self, in_spatial) -> bool:
        for n, e, j, o in zip(in_spatial, self.out_extent, self.jump, self.offset):
            right = n - (o + (e - 1) * j + 1)
            if right != o:
                return False
        return True


def grid_alignment(cfg: NetworkConfig, in_spatial) -> GridAlignment:
    g = walk_grid(cfg, tuple(in_spatial))["__output__"]
    if any(o % 2 != 0 for o in g.off2):
        raise ConfigError("output grid offset is not voxel-aligned")
    return GridAlignment(
        out_extent=g.extent,
        jump=g.jump,
        offset=tuple(o // 2 for o in g.off2),
    )


# ---------------------------------------------------------------------------
# Realized network
# ---------------------------------------------------------------------------

class Network:
    """Parameter tensors and batch-norm states bound to a NetworkConfig."""

    def __init__(self, config: NetworkConfig, dtype=np.float32, seed: int = 0):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BNState] = {}
        self._build(np.random.default_rng(self.seed))

    # -- construction -------------------------------------------------------

    def _new_conv(self, rng, name, in_f, out_f, kernel) -> None:
        fan_in = in_f * int(np.prod(kernel))
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(out_f, in_f) + tuple(kernel))
        self.params[name] = Tensor(w.astype(self.dtype), requires_grad=True)

    def _new_bias(self, rng, name, out_f) -> None:
        self.params[name] = Tensor(
            np.zeros(out_f, dtype=self.dtype), requires_grad=True
        )

    def _new_bn(self, name, features) -> None:
        state = BNState.create(features, dtype=self.dtype)
        self.bn[name] = state
        self.params[f"{name}.gamma"] = state.gamma
        self.params[f"{name}.beta"] = state.beta

    def _build(self, rng) -> None:
        cfg = self.config
        feats = {INPUT_ID: cfg.in_features}
        for n in cfg.nodes:
            if n.op == "conv":
                cin = feats[n.inputs[0]]
                if n.preact:
                    self._new_bn(f"{n.id}.bn", cin)
                self._new_conv(rng, f"{n.id}.w", cin, n.features, n.kernel)
                feats[n.id] = n.features
            elif n.op == "block":
                cin = feats[n.inputs[0]]
                self._new_bn(f"{n.id}.bn1", cin)
                self._new_conv(rng, f"{n.id}.c1.w", cin, n.features, n.kernel)
                self._new_bn(f"{n.id}.bn2", n.features)
                self._new_conv(rng, f"{n.id}.c2.w", n.features, n.features, n.kernel)
                feats[n.id] = n.features
            elif n.op == "upsample":
                feats[n.id] = feats[n.inputs[0]]
            elif n.op == "concat":
                feats[n.id] = sum(feats[src] for src in n.inputs)
        for i, src in enumerate(cfg.aux_heads):
            self._new_bn(f"aux{i}.bn", feats[src])
            self._new_conv(rng, f"aux{i}.w", feats[src], 1, (1, 1, 1))
            self._new_bias(rng, f"aux{i}.b", 1)
        src = cfg.final_head
        self._new_bn("head.bn", feats[src])
        self._new_conv(rng, "head.w", feats[src], 1, (1, 1, 1))
        self._new_bias(rng, "head.b", 1)

    # -- bookkeeping ---------------------------------------------------------

    def parameter_names(self) -> list[str]:
        return list(self.params.keys())

    def num_parameters(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())

    def receptive_field(self) -> tuple[int, int, int]:
        return receptive_field(self.config)

    # -- forward -------------------------------------------------------------

    def _run_block(self, n: NodeSpec, x: Tensor, mode: str, rng) -> Tensor:
        drop = n.dropout

        def maybe_drop(t: Tensor, position: str) -> Tensor:
            if drop.position == position and drop.p > 0.0:
                return dropout(t, drop.p, mode, variant=drop.variant, rng=rng)
            return t

        h = batchnorm(x, self.bn[f"{n.id}.bn1"], mode)
        h = activation(h, "relu")
        h = maybe_drop(h, "pre_conv1")
        h = conv3d_valid(h, ConvParams(weights=self.params[f"{n.id}.c1.w"]))
        h = batchnorm(h, self.bn[f"{n.id}.bn2"], mode)
        h = activation(h, "relu")
        h = maybe_drop(h, "pre_conv2")
        h = conv3d_valid(h, ConvParams(weights=self.params[f"{n.id}.c2.w"]))
        h = maybe_drop(h, "pre_add")
        if n.kind == "residual":
            skip = crop_center(x, h.shape[1:])
            h = add(skip, h)
        return h

    def _head(self, prefix: str, x: Tensor, mode: str) -> Tensor:
        h = batchnorm(x, self.bn[f"{prefix}.bn"], mode)
        h = activation(h, "relu")
        return conv3d_valid(
            h,
            ConvParams(
                weights=self.params[f"{prefix}.w"], bias=self.params[f"{prefix}.b"]
            ),
        )

    def forward_logits(
        self, patch: Tensor, mode: str, rng=None
    ) -> tuple[Tensor, list[Tensor]]:
        """Main and auxiliary logit maps, all on the final output grid."""
        cfg = self.config
        if patch.data.ndim != 4 or patch.shape[0] != cfg.in_features:
            raise ShapeError(
                f"patch must be ({cfg.in_features}, D, H, W), got {patch.shape}"
            )
        rf = self.receptive_field()
        if any(n < r for n, r in zip(patch.shape[1:], rf)):
            raise ShapeError(
                f"patch spatial extent {patch.shape[1:]} is below the "
                f"receptive field {rf}"
            )
        if mode == "train" and rng is None:
            needs = any(
                n.op == "block" and n.dropout.position != "none" for n in cfg.nodes
            )
            if needs:
                raise ContractViolationError(
                    "train-mode forward through dropout needs a random generator"
                )

        grids = walk_grid(cfg, patch.shape[1:])
        acts: dict[str, Tensor] = {INPUT_ID: patch}
        for n in cfg.nodes:
            if n.op == "conv":
                h = acts[n.inputs[0]]
                if n.preact:
                    h = batchnorm(h, self.bn[f"{n.id}.bn"], mode)
                    h = activation(h, "relu")
                h = conv3d_valid(
                    h,
                    ConvParams(weights=self.params[f"{n.id}.w"], stride=n.stride),
                )
            elif n.op == "block":
                h = self._run_block(n, acts[n.inputs[0]], mode, rng)
            elif n.op == "upsample":
                h = upsample_nn(acts[n.inputs[0]], n.factors)
            elif n.op == "concat":
                a, b = (acts[src] for src in n.inputs)
                common = tuple(
                    min(x, y) for x, y in zip(a.shape[1:], b.shape[1:])
                )
                a = crop_center(a, common)
                b = crop_center(b, common)
                h = concat_features(a, b)
            acts[n.id] = h

        final_extent = grids["__output__"].extent
        final_jump = grids["__output__"].jump
        main_logit = self._head("head", acts[cfg.final_head], mode)

        aux_logits: list[Tensor] = []
        for i, src in enumerate(cfg.aux_heads):
            logit = self._head(f"aux{i}", acts[src], mode)
            factors = tuple(
                ja // jf for ja, jf in zip(grids[src].jump, final_jump)
            )
            if factors != (1, 1, 1):
                logit = upsample_nn(logit, factors)
            logit = crop_center(logit, final_extent)
            aux_logits.append(logit)
        return main_logit, aux_logits

    def forward(
        self, patch: Tensor, mode: str = "eval", rng=None
    ) -> tuple[Tensor, list[Tensor]]:
        """Probability maps of the main and six auxiliary heads."""
        main, aux = self.forward_logits(patch, mode, rng)
        return (
            activation(main, "sigmoid"),
            [activation(a, "sigmoid") for a in aux],
        )


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network(cfg, dtype=dtype, seed=seed)


def forward(net: Network, patch: Tensor, mode: str = "eval", rng=None):
    return net.forward(patch, mode, rng)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _dtype_tag(dt: np.dtype) -> str:
    return {"float32": "<f4", "float64": "<f8"}[np.dtype(dt).name]


def save_checkpoint(
    net: Network,
    path,
    epoch: int = 0,
    rng_state: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> None:
    """Write header (config, epoch, rng state, layout) + raw parameter buffers.

    Buffers are little-endian and appear in parameter declaration order, then
    running mean/variance per batch-norm layer in declaration order.
    """
    header = {
        "format_version": 1,
        "config": net.config.to_dict(),
        "config_hash": net.config.config_hash(),
        "dtype": np.dtype(net.dtype).name,
        "seed": net.seed,
        "epoch": int(epoch),
        "rng_state": rng_state,
        "params": [
            {"name": k, "shape": list(v.shape)} for k, v in net.params.items()
        ],
        "bn": [
            {
                "name": k,
                "features": int(s.gamma.data.size),
                "momentum": s.momentum,
                "eps": s.eps,
                "batches_seen": int(s.batches_seen),
            }
            for k, s in net.bn.items()
        ],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tag = _dtype_tag(net.dtype)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for t in net.params.values():
            f.write(np.ascontiguousarray(t.data, dtype=tag).tobytes())
        for s in net.bn.values():
            f.write(np.ascontiguousarray(s.running_mean, dtype=tag).tobytes())
            f.write(np.ascontiguousarray(s.running_var, dtype=tag).tobytes())


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild a Network from a checkpoint; returns (network, header)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (hlen,) = (int.from_bytes(f.read(8), "little"),)
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg = NetworkConfig.from_dict(header["config"])
        net = Network(cfg, dtype=np.dtype(header["dtype"]), seed=header["seed"])
        if header["config_hash"] != cfg.config_hash():
            raise FormatError(f"{path}: config hash mismatch")
        tag = _dtype_tag(net.dtype)
        itemsize = np.dtype(tag).itemsize
        declared = [p["name"] for p in header["params"]]
        if declared != list(net.params.keys()):
            raise FormatError(f"{path}: parameter layout mismatch")
        for meta in header["params"]:
            t = net.params[meta["name"]]
            shape = tuple(meta["shape"])
            if shape != t.shape:
                raise FormatError(
                    f"{path}: parameter {meta['name']} has shape {shape}, "
                    f"expected {t.shape}"
                )
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * itemsize)
            if len(raw) != n * itemsize:
                raise FormatError(
                    f"{path}: truncated buffer for {meta['name']}: expected "
                    f"{n * itemsize} bytes, got {len(raw)}"
                )
            t.data = np.frombuffer(raw, dtype=tag).reshape(shape).astype(
                net.dtype
            )
        for meta in header["bn"]:
            s = net.bn[meta["name"]]
            nf = meta["features"]
            for attr in ("running_mean", "running_var"):
                raw = f.read(nf * itemsize)
                if len(raw) != nf * itemsize:
                    raise FormatError(f"{path}: truncated {attr} for {meta['name']}")
                setattr(
                    s, attr, np.frombuffer(raw, dtype=tag).astype(net.dtype)
                )
            s.momentum = meta["momentum"]
            s.eps = meta["eps"]
            s.batches_seen = meta["batches_seen"]
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after parameter buffers")
    return net, header
