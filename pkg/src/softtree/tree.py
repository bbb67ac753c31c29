"""Soft-routed full binary tree with attention edges and leaf classifiers.

Topology and indexing: nodes live at (level k, position i) with k in
[1, h] and i in [1, 2^(k-1)]; the children of (k, i) are (k+1, 2i-1) on
the left and (k+1, 2i) on the right.  Internal nodes carry a routing gate
g in [0, 1]; g is the probability of the LEFT child and 1-g of the right,
so sibling path probabilities always sum to their parent's.  Every leaf
emits a class distribution and the final prediction is the r-weighted sum
of leaf distributions, itself a distribution.

In asymmetric mode each left edge stacks two attention transformers while
each right edge carries one, giving the two branches different receptive
field growth; symmetric mode uses one per edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import DEFAULT_DTYPE, Tensor, as_tensor, reshape, tsum
from .backbone import FeatureExtractor
from .errors import ConfigError, NumericError
from .nn import BatchNorm2d, Conv2d, LayerNorm2d, Linear, Module

DESK_DILATIONS = (1, 2, 3, 4)
LARGE_MAP_DILATIONS = (1, 6, 12, 18)  # meaningful once feature maps reach 19px
BOTTLENECK_RATIO = 4
GATE_TOL = 1e-6
LEAF_SUM_TOL = 1e-6


@dataclass(frozen=True)
class TreeConfig:
    height: int
    num_classes: int
    channels: tuple[int, ...]
    dilations: tuple[int, ...] = DESK_DILATIONS
    edge_mode: str = "asymmetric"
    routing_pool: str = "gap"
    gc_block: bool = True
    attention: bool = True
    aspp: bool = True

    def __post_init__(self):
        if self.height < 1:
            raise ConfigError(f"tree height must be >= 1, got {self.height}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.channels) != self.height or min(self.channels) < 1:
            raise ConfigError(
                f"channels must list one positive width per level "
                f"(height {self.height}), got {self.channels}"
            )
        if len(set(self.dilations)) != len(self.dilations) or min(self.dilations) < 1:
            raise ConfigError(f"dilation rates must be distinct and >= 1: {self.dilations}")
        if self.edge_mode not in ("asymmetric", "symmetric"):
            raise ConfigError(f"edge_mode must be asymmetric|symmetric, got {self.edge_mode}")
        if self.routing_pool not in ("gap", "gmp"):
            raise ConfigError(f"routing_pool must be gap|gmp, got {self.routing_pool}")

    @property
    def num_nodes(self) -> int:
        return 2 ** self.height - 1

    @property
    def num_edges(self) -> int:
        return 2 ** self.height - 2

    @property
    def num_leaves(self) -> int:
        return 2 ** (self.height - 1)


class GlobalContextBlock(Module):
    """Spatial-softmax context pooling with a bottleneck transform, fused
    back onto the input by broadcast addition."""

    def __init__(self, channels, rng, dtype=DEFAULT_DTYPE):
        hidden = max(1, channels // BOTTLENECK_RATIO)
        self.attn = Conv2d(channels, 1, 1, rng=rng, dtype=dtype)
        self.squeeze = Conv2d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.norm = LayerNorm2d(hidden, dtype=dtype)
        self.expand = Conv2d(hidden, channels, 1, rng=rng, dtype=dtype)

    def __call__(self, x):
        n, c, h, w = x.shape
        weights = ops.softmax(reshape(self.attn(x), (n, h * w)), axis=1)
        ctx = tsum(reshape(x, (n, c, h * w)) * reshape(weights, (n, 1, h * w)), axis=2)
        ctx = reshape(ctx, (n, c, 1, 1))
        ctx = self.expand(ops.relu(self.norm(self.squeeze(ctx))))
        return x + ctx


class RoutingUnit(Module):
    """Gate head: 1x1 conv, optional global context, pooling, signed-sqrt
    L2 conditioning, and a sigmoid-activated scalar output.  The post-
    context feature map is shared with both child edges."""

    def __init__(self, channels, pool: str, gc_block: bool, rng, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.gc = GlobalContextBlock(channels, rng, dtype=dtype) if gc_block else None
        self.pool = pool
        self.fc = Linear(channels, 1, rng=rng, dtype=dtype)

    def __call__(self, x, training: bool):
        z = self.conv(x)
        if self.gc is not None:
            z = self.gc(z)
        pooled = ops.global_avg_pool(z) if self.pool == "gap" else ops.global_max_pool(z)
        s = ops.signed_sqrt_l2norm(pooled)
        gate = reshape(ops.sigmoid(self.fc(s)), (x.shape[0],))
        return gate, z


class AttentionTransformer(Module):
    """Edge operation: parallel dilated 3x3 convolutions fused by a 1x1
    convolution, then a channel attention scale derived from the fused map
    (BN -> GAP -> FC -> relu -> FC -> sigmoid).  With ``aspp`` off the
    multi-rate pyramid collapses to a single 3x3 convolution; with
    ``attention`` off the scaling stage is the identity."""

    def __init__(self, in_channels, out_channels, dilations, attention: bool,
                 aspp: bool, rng, dtype=DEFAULT_DTYPE):
        if aspp:
            self.branches = [
                Conv2d(in_channels, out_channels, 3, padding=r, dilation=r,
                       rng=rng, dtype=dtype)
                for r in dilations
            ]
            self.fuse = Conv2d(out_channels * len(dilations), out_channels, 1,
                               rng=rng, dtype=dtype)
        else:
            self.single = Conv2d(in_channels, out_channels, 3, padding=1,
                                 rng=rng, dtype=dtype)
        self.aspp = aspp
        if attention:
            hidden = max(1, out_channels // BOTTLENECK_RATIO)
            self.bn = BatchNorm2d(out_channels, dtype=dtype)
            self.fc1 = Linear(out_channels, hidden, rng=rng, dtype=dtype)
            self.fc2 = Linear(hidden, out_channels, rng=rng, dtype=dtype)
        self.attention = attention

    def __call__(self, x, training: bool):
        if self.aspp:
            fused = self.fuse(ops.concat_channels([b(x) for b in self.branches]))
        else:
            fused = self.single(x)
        if not self.attention:
            return fused
        pooled = ops.global_avg_pool(self.bn(fused, training))
        scale = ops.sigmoid(self.fc2(ops.relu(self.fc1(pooled))))
        return ops.scale_channels(fused, scale)


class LeafHead(Module):
    """BN -> 1x1 conv -> global max pool -> signed-sqrt/L2 -> FC -> softmax."""

    def __init__(self, channels, num_classes, rng, dtype=DEFAULT_DTYPE):
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.conv = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.fc = Linear(channels, num_classes, rng=rng, dtype=dtype)

    def __call__(self, x, training: bool):
        z = self.conv(self.bn(x, training))
        s = ops.signed_sqrt_l2norm(ops.global_max_pool(z))
        return ops.softmax(self.fc(s), axis=1)


@dataclass
class Prediction:
    """Per-sample routing state and class distributions from one forward."""

    gates: dict          # (k, i) -> Tensor[N], internal nodes only
    path_probs: dict     # (k, i) -> Tensor[N], every node, root = 1
    leaf_probs: list     # Tensor[N, K] per leaf, in position order
    final: Tensor        # Tensor[N, K]
    maps: dict = field(default_factory=dict)  # site -> feature map entering the node

    def leaf_path_probs(self) -> list:
        h = max(k for k, _ in self.path_probs)
        return [self.path_probs[(h, i)] for i in range(1, 2 ** (h - 1) + 1)]

    def predicted_class(self) -> np.ndarray:
        # argmax takes the lowest class index on ties
        return np.argmax(self.final.data, axis=1)


def accumulate_path_probabilities(gates: dict, height: int, num_samples=None,
                                  dtype=DEFAULT_DTYPE):
    """Root-to-node products of gate probabilities for every node.

    r(root) = 1, r(left child) = r(parent) * g, r(right child) =
    r(parent) * (1 - g); consequently siblings sum to their parent and the
    leaf values sum to one.
    """
    for key, g in gates.items():
        if np.any(g.data < -GATE_TOL) or np.any(g.data > 1.0 + GATE_TOL):
            raise NumericError(f"gate {key} outside [0,1]: range "
                               f"[{g.data.min()}, {g.data.max()}]")
    if gates:
        first = next(iter(gates.values()))
        num_samples, dtype = first.shape[0], first.dtype
    elif num_samples is None:
        raise ConfigError("num_samples required when there are no gates (h=1)")

    r = {(1, 1): Tensor(np.ones(num_samples, dtype=dtype))}
    for k in range(1, height):
        for i in range(1, 2 ** (k - 1) + 1):
            g = gates[(k, i)]
            r[(k + 1, 2 * i - 1)] = r[(k, i)] * g
            r[(k + 1, 2 * i)] = r[(k, i)] * (1.0 - g)
    return r


def aggregate(leaf_probs, leaf_r) -> Tensor:
    """Final distribution: sum of leaf distributions weighted by leaf path
    probabilities.  Requires the weights to sum to 1 per sample."""
    if len(leaf_probs) != len(leaf_r) or not leaf_probs:
        raise ConfigError("leaf probability/weight lists must align and be non-empty")
    total = np.zeros_like(leaf_r[0].data)
    for r in leaf_r:
        total = total + r.data
    if np.any(np.abs(total - 1.0) > LEAF_SUM_TOL):
        raise NumericError(f"leaf path probabilities sum to {total}, expected 1")
    n = leaf_probs[0].shape[0]
    out = None
    for p, r in zip(leaf_probs, leaf_r):
        term = p * reshape(r, (n, 1))
        out = term if out is None else out + term
    return out


class TreeModel(Module):
    def __init__(self, config: TreeConfig, backbone: FeatureExtractor, rng,
                 dtype=DEFAULT_DTYPE):
        c_bb = backbone.out_shape()[0]
        if config.channels[0] != c_bb:
            raise ConfigError(
                f"level-1 channel width {config.channels[0]} != backbone output {c_bb}"
            )
        self.config = config
        self.backbone = backbone
        h = config.height
        self.routing = {}
        self.edges = {}
        for k in range(1, h):
            c_here, c_child = config.channels[k - 1], config.channels[k]
            for i in range(1, 2 ** (k - 1) + 1):
                self.routing[f"{k}_{i}"] = RoutingUnit(
                    c_here, config.routing_pool, config.gc_block, rng, dtype=dtype)
                for side, count in (("left", 2 if config.edge_mode == "asymmetric" else 1),
                                    ("right", 1)):
                    chain = [AttentionTransformer(
                        c_here if t == 0 else c_child, c_child, config.dilations,
                        config.attention, config.aspp, rng, dtype=dtype)
                        for t in range(count)]
                    self.edges[f"{k}_{i}_{side}"] = chain
        self.leaves = [LeafHead(config.channels[h - 1], config.num_classes, rng,
                                dtype=dtype)
                       for _ in range(config.num_leaves)]

    @property
    def height(self) -> int:
        return self.config.height

    def transformer_count(self, k: int, i: int, side: str) -> int:
        return len(self.edges[f"{k}_{i}_{side}"])

    def forward(self, images, training: bool = False,
                collect_maps: bool = False) -> Prediction:
        images = as_tensor(images)
        h = self.config.height
        feat = self.backbone.forward(images, training=training)
        maps = {(1, 1): feat}
        gates = {}
        for k in range(1, h):
            for i in range(1, 2 ** (k - 1) + 1):
                gate, passed = self.routing[f"{k}_{i}"](maps[(k, i)], training)
                gates[(k, i)] = gate
                for side, child in (("left", 2 * i - 1), ("right", 2 * i)):
                    z = passed
                    for transformer in self.edges[f"{k}_{i}_{side}"]:
                        z = transformer(z, training)
                    maps[(k + 1, child)] = z
        r = accumulate_path_probabilities(gates, h, num_samples=images.shape[0],
                                          dtype=feat.dtype)
        n_leaves = self.config.num_leaves
        leaf_probs = [self.leaves[i - 1](maps[(h, i)], training)
                      for i in range(1, n_leaves + 1)]
        leaf_r = [r[(h, i)] for i in range(1, n_leaves + 1)]
        final = aggregate(leaf_probs, leaf_r)
        pred = Prediction(gates=gates, path_probs=r, leaf_probs=leaf_probs, final=final)
        if collect_maps:
            pred.maps = maps
        return pred


def build_tree(config: TreeConfig, backbone: FeatureExtractor, seed,
               dtype=DEFAULT_DTYPE) -> TreeModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return TreeModel(config, backbone, rng, dtype=dtype)
