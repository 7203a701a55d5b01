"""Descriptor encoder: grouped ring convolutions plus global aggregation.

A feature layer turns per-point features into per-kernel inputs (Gaussian
neighbor averages concatenated with the geometric channels), convolves
each sign group with one shared circular kernel, and pools the 3K kernels
back to a per-point vector by order-free summation and maximum.

Sharing the convolution weights across the two sign groups is what makes
the whole encoder exactly invariant to normal sign flips: flipping every
normal swaps the group tensors as an index permutation, and identical
weights map swapped inputs to swapped outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ParameterError
from .features import (CloudGeometry, ScaleSet, build_geometry,
                       extract_adapted, group_slot_tables)
from .kernels import order_below
from .pointcloud import PointCloud

# re-exported primitives (the convolution op lives with the graph engine)
ring_conv = ad.ring_conv
grad_check = ad.grad_check


@dataclass
class EncoderConfig:
    """Architecture and geometry knobs of the descriptor encoder."""

    kernels_per_ring: int = 6
    knn: int = 10
    sigma: float = 0.15
    scales: tuple[float, ...] = ()        # multiscale sizes (scale adaptation)
    scale_adapt: bool = False
    scale_blend: bool = False             # blend per-scale grids instead of re-extracting
    scale_hidden: int = 16
    scale_net: str = "flat"               # "flat" | "pooled" weight-net input
    conv_mode: str = "circular"           # "circular" | "channelwise"
    conv_hidden: bool = False             # extra channelwise layer after the conv
    widths: tuple[int, ...] = (16, 32, 32, 64)
    descriptor_dim: int = 128
    global_context: bool = True
    global_bandwidth: float = 0.5
    bandwidth_mode: str = "per_kernel"
    azimuth: float = 0.0                  # tangent-azimuth test hook
    k_azimuth: int = 16

    def __post_init__(self):
        if self.conv_mode not in ("circular", "channelwise"):
            raise ParameterError(f"unknown conv_mode {self.conv_mode!r}")
        if self.scale_net not in ("flat", "pooled"):
            raise ParameterError(f"unknown scale_net {self.scale_net!r}")
        if (self.scale_adapt or self.scale_blend) and len(self.scales) < 2:
            raise ParameterError("scale adaptation needs at least 2 scales")

    @property
    def local_width(self) -> int:
        return 2 * sum(self.widths)

    @property
    def scale_set(self) -> ScaleSet | None:
        return ScaleSet(np.asarray(self.scales)) if self.scales else None


def encoder_geometry(cloud: PointCloud, cfg: EncoderConfig) -> CloudGeometry:
    """Parameter-free per-cloud precomputation for the encoder."""
    return build_geometry(
        cloud, K=cfg.kernels_per_ring, knn_k=cfg.knn, sigma=cfg.sigma,
        bandwidth_mode=cfg.bandwidth_mode, azimuth=cfg.azimuth,
        k_azimuth=cfg.k_azimuth,
        global_bandwidth=cfg.global_bandwidth if cfg.global_context else None,
        scales=cfg.scale_set)


class RingConvLayer:
    """Shared-weight circular convolution over (group layer, ring position).

    fan_in includes the kernel count that the downstream sum aggregation
    folds together, so descriptors keep unit-scale activations at init.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 agg_kernels: int = 1):
        self.c_in = c_in
        self.c_out = c_out
        self.weights = store.create(name, (3, 3, c_in, c_out),
                                    fan_in=9 * c_in * agg_kernels)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.ring_conv(x, self.weights)


class ChannelwiseLayer:
    """1x1x1 convolution: a per-kernel linear map with no ring adjacency."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 agg_kernels: int = 1):
        self.c_in = c_in
        self.c_out = c_out
        self.weights = store.create(name, (c_in, c_out),
                                    fan_in=c_in * agg_kernels)

    def __call__(self, x: Tensor) -> Tensor:
        n, L, K, _ = x.data.shape
        flat = ad.reshape(x, (n * L * K, self.c_in))
        return ad.reshape(ad.matmul(flat, self.weights), (n, L, K, self.c_out))


def combine_groups(above_out: Tensor, below_out: Tensor, K: int) -> Tensor:
    """Merge group conv outputs into compact (N, 3, K, C) ring order.

    The below group's ring axis follows its traversal order; it is mapped
    back to raw ring positions, and the shared in-plane ring is the mean
    of its two group outputs.
    """
    ob = order_below(K)  # self-inverse permutation
    upper = ad.narrow(above_out, 1, 0, 1)
    mid_a = ad.narrow(above_out, 1, 1, 1)
    lower = take_ring(ad.narrow(below_out, 1, 0, 1), ob)
    mid_b = take_ring(ad.narrow(below_out, 1, 1, 1), ob)
    middle = ad.mul(ad.add(mid_a, mid_b), 0.5)
    return ad.concat([upper, middle, lower], axis=1)


def take_ring(x: Tensor, idx: np.ndarray) -> Tensor:
    """Reorder the ring axis (axis 2) of an (N, 1, K, C) tensor."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            for o, s in enumerate(idx):
                full[:, :, s] += g[:, :, o]
            x._accumulate(full)

    return ad.make_op(x.data[:, :, idx], (x,), backward)


def group_convolve(above: Tensor | np.ndarray, below: Tensor | np.ndarray,
                   layer) -> Tensor:
    """Apply one shared conv layer to both sign groups and recombine.

    The groups are stacked along the batch axis so both run in a single
    matrix multiply; weight sharing between them is what the sign
    invariance rests on.
    """
    above = ad.as_tensor(above)
    below = ad.as_tensor(below)
    n, _, K, _ = above.data.shape
    both = layer(ad.concat([above, below], axis=0))
    return combine_groups(ad.narrow(both, 0, 0, n),
                          ad.narrow(both, 0, n, n), K)


def group_convolve_grid(grid, layer) -> Tensor:
    """Convenience: group convolution straight from a KernelFeatureGrid."""
    above, below = grid.group_tensors()
    return group_convolve(ad.constant(above), ad.constant(below), layer)


def kernel_aggregate(x: Tensor | np.ndarray) -> Tensor:
    """Concatenate channelwise sum and max over all 3K kernels.

    The summation sorts values first, so the result is bit-identical
    under any permutation of the kernels (ring shifts, group exchange).
    """
    x = ad.as_tensor(x)
    n = x.data.shape[0]
    c = x.data.shape[-1]
    return ad.sum_max_pool(ad.reshape(x, (n, -1, c)))


def global_context(features: Tensor | np.ndarray, points: np.ndarray,
                   bandwidth: float) -> Tensor:
    """Gaussian-distance-weighted average of every point's features."""
    from .features import global_context_weights

    order, W = global_context_weights(points, bandwidth)
    return global_context_from(ad.as_tensor(features), order, W)


def global_context_from(features: Tensor, order: np.ndarray,
                        W: np.ndarray) -> Tensor:
    inv = np.argsort(order)
    gathered = ad.gather_rows(features, order)
    mixed = ad.matmul(ad.constant(W), gathered)
    return ad.gather_rows(mixed, inv)


class FeatureLayer:
    """One feature-extraction stage: average, convolve, pool."""

    def __init__(self, store: ParamStore, name: str, cfg: EncoderConfig,
                 c_in_points: int, c_out: int):
        self.cfg = cfg
        self.c_in_points = c_in_points
        c_in = c_in_points + 4
        agg = 3 * cfg.kernels_per_ring
        if cfg.conv_mode == "circular":
            self.conv = RingConvLayer(store, f"{name}.conv", c_in, c_out, agg)
        else:
            self.conv = ChannelwiseLayer(store, f"{name}.conv", c_in, c_out, agg)
        self.conv2 = None
        if cfg.conv_hidden:
            self.conv2 = ChannelwiseLayer(store, f"{name}.conv2", c_out, c_out)
        self.c_out = c_out

    def forward(self, geom: CloudGeometry, point_feats: Tensor | None,
                geo_above: Tensor, geo_below: Tensor,
                dyn_weights: Tensor | None = None,
                dyn_ids: np.ndarray | None = None) -> Tensor:
        n = geom.n_points
        K = geom.K
        if point_feats is None:
            above_in, below_in = geo_above, geo_below
        else:
            if dyn_weights is not None:
                avg = ad.neighbor_average_dyn(point_feats, dyn_weights, dyn_ids)
            else:
                avg = ad.neighbor_average(point_feats, geom.canon_order,
                                          geom.nbr_matrix, 3 * K)
            c = self.c_in_points
            avg_above = ad.reshape(ad.take_axis1(avg, geom.above_slots),
                                   (n, 2, K, c))
            avg_below = ad.reshape(ad.take_axis1(avg, geom.below_slots),
                                   (n, 2, K, c))
            above_in = ad.concat([avg_above, geo_above], axis=3)
            below_in = ad.concat([avg_below, geo_below], axis=3)
        out = group_convolve(above_in, below_in, self.conv)
        out = ad.relu(out)
        if self.conv2 is not None:
            out = ad.relu(self.conv2(out))
        return kernel_aggregate(out)


class Encoder:
    """Four feature layers, shortcut concatenation, global context, 1x1 head."""

    def __init__(self, cfg: EncoderConfig, store: ParamStore, prefix: str = "enc"):
        self.cfg = cfg
        self.store = store
        self.layers: list[FeatureLayer] = []
        c_prev = 0
        for i, w in enumerate(cfg.widths):
            layer = FeatureLayer(store, f"{prefix}.layer{i}", cfg, c_prev, w)
            self.layers.append(layer)
            c_prev = 2 * w
        local = cfg.local_width
        head_in = 2 * local if cfg.global_context else local
        self.head_w = store.create(f"{prefix}.head.w",
                                   (head_in, cfg.descriptor_dim), fan_in=head_in)
        self.head_b = store.create(f"{prefix}.head.b",
                                   (cfg.descriptor_dim,), fan_in=head_in)
        self.scale_w1 = None
        if cfg.scale_adapt or cfg.scale_blend:
            S = len(cfg.scales)
            K = cfg.kernels_per_ring
            in_dim = S * 3 * K * 4 if cfg.scale_net == "flat" else 8 * S
            h = cfg.scale_hidden
            self.scale_w1 = store.create(f"{prefix}.scale.w1", (in_dim, h), fan_in=in_dim)
            self.scale_b1 = store.create(f"{prefix}.scale.b1", (h,), fan_in=in_dim)
            self.scale_w2 = store.create(f"{prefix}.scale.w2", (h, S), fan_in=h)
            self.scale_b2 = store.create(f"{prefix}.scale.b2", (S,), fan_in=h)

    # -- scale adaptation -------------------------------------------------

    def _scale_net_input(self, geom: CloudGeometry) -> np.ndarray:
        stack = geom.scale_stack  # (N, S, 3, K, 4)
        n, S = stack.shape[:2]
        if self.cfg.scale_net == "flat":
            return stack.reshape(n, -1)
        # pooled: per scale, mean and max over all slots of the four channels,
        # with f4 folded to |f4 - 0.5| so the summary is sign/azimuth-safe
        safe = stack.copy()
        safe[..., 3] = np.abs(safe[..., 3] - 0.5)
        flat = safe.reshape(n, S, -1, 4)
        return np.concatenate([flat.mean(axis=2), flat.max(axis=2)],
                              axis=2).reshape(n, -1)

    def _scale_logits(self, geom: CloudGeometry) -> Tensor:
        x = ad.constant(self._scale_net_input(geom))
        h = ad.relu(ad.add(ad.matmul(x, self.scale_w1), self.scale_b1))
        return ad.add(ad.matmul(h, self.scale_w2), self.scale_b2)

    def _adapted_inputs(self, geom: CloudGeometry):
        """(geo_above, geo_below, dyn_weights, dyn_ids) at the adapted scale."""
        cfg = self.cfg
        sigmas = np.asarray(cfg.scales)
        logits = self._scale_logits(geom)
        probs = ad.softmax(logits, axis=1)
        sigma_star = ad.reshape(
            ad.matmul(probs, ad.constant(sigmas.reshape(-1, 1))), (-1,))
        if cfg.scale_blend:
            return self._blended_inputs(geom, probs)
        n = geom.n_points
        K = cfg.kernels_per_ring
        k = geom.neighbor_ids.shape[-1]
        holder: dict = {}

        def forward_pack(sig: np.ndarray):
            ext = extract_adapted(geom.cloud, geom.index, sig, geom.bases,
                                  K, cfg.knn, cfg.bandwidth_mode)
            holder["ext"] = ext
            return ext

        ext = forward_pack(sigma_star.data)
        packed_val = ext.packed()
        packed_dot = ext.packed_dot()

        def backward(g):
            if sigma_star.requires_grad:
                sigma_star._accumulate((g * packed_dot).sum(axis=1))

        packed = ad.make_op(packed_val, (sigma_star,), backward)
        geo_len = 2 * K * 4
        above = ad.reshape(ad.narrow(packed, 1, 0, geo_len), (n, 2, K, 4))
        below = ad.reshape(ad.narrow(packed, 1, geo_len, geo_len), (n, 2, K, 4))
        weights = ad.reshape(ad.narrow(packed, 1, 2 * geo_len, 3 * K * k),
                             (n, 3 * K, k))
        return above, below, weights, ext.ids, sigma_star

    def _blended_inputs(self, geom: CloudGeometry, probs: Tensor):
        """Convex blend of the per-scale grids (no re-extraction)."""
        from .features import build_layout, build_frames, project_features
        cfg = self.cfg
        n = geom.n_points
        K = cfg.kernels_per_ring
        aboves, belows = [], []
        for s in cfg.scales:
            layout = build_layout(float(s), K)
            frames = build_frames(geom.cloud, geom.index, layout,
                                  azimuth=cfg.azimuth, k_azimuth=cfg.k_azimuth)
            grid = project_features(geom.cloud, frames, geom.index, cfg.knn,
                                    bandwidth_mode=cfg.bandwidth_mode)
            a, b = grid.group_tensors()
            aboves.append(a)
            belows.append(b)
        above_c = ad.constant(np.stack(aboves, axis=1))  # (N, S, 2, K, 4)
        below_c = ad.constant(np.stack(belows, axis=1))
        w = ad.reshape(probs, (n, -1, 1, 1, 1))
        above = ad.reduce_sum(ad.mul(w, above_c), axis=1)
        below = ad.reduce_sum(ad.mul(w, below_c), axis=1)
        sigma_star = ad.reshape(
            ad.matmul(probs, ad.constant(np.asarray(cfg.scales).reshape(-1, 1))),
            (-1,))
        return above, below, None, None, sigma_star

    # -- main forward ------------------------------------------------------

    def forward(self, geom: CloudGeometry) -> Tensor:
        cfg = self.cfg
        dyn_weights = dyn_ids = None
        if cfg.scale_adapt or cfg.scale_blend:
            geo_above, geo_below, dyn_weights, dyn_ids, _ = \
                self._adapted_inputs(geom)
        else:
            geo_above = ad.constant(geom.above_geo)
            geo_below = ad.constant(geom.below_geo)
        feats = None
        outputs = []
        for layer in self.layers:
            feats = layer.forward(geom, feats, geo_above, geo_below,
                                  dyn_weights, dyn_ids)
            outputs.append(feats)
        local = ad.concat(outputs, axis=1)
        if cfg.global_context:
            ctx = global_context_from(local, geom.canon_order, geom.global_W)
            local = ad.concat([local, ctx], axis=1)
        return ad.add(ad.matmul(local, self.head_w), self.head_b)

    def descriptors(self, geom: CloudGeometry) -> np.ndarray:
        """Inference path: forward without recording gradients."""
        with ad.no_grad():
            return self.forward(geom).data


def compute_descriptors(cloud: PointCloud, cfg: EncoderConfig,
                        store: ParamStore | None = None,
                        encoder: Encoder | None = None) -> np.ndarray:
    """Convenience wrapper: geometry + encoder forward in inference mode."""
    if encoder is None:
        if store is None:
            store = ParamStore(seed=0)
        encoder = Encoder(cfg, store)
    geom = encoder_geometry(cloud, cfg)
    return encoder.descriptors(geom)


class ClassifierHead:
    """Channelwise max-pool over points, then a two-layer perceptron."""

    def __init__(self, store: ParamStore, n_classes: int, in_dim: int,
                 hidden: int = 128, prefix: str = "cls"):
        self.w1 = store.create(f"{prefix}.w1", (in_dim, hidden), fan_in=in_dim)
        self.b1 = store.create(f"{prefix}.b1", (hidden,), fan_in=in_dim)
        self.w2 = store.create(f"{prefix}.w2", (hidden, n_classes), fan_in=hidden)
        self.b2 = store.create(f"{prefix}.b2", (n_classes,), fan_in=hidden)

    def forward(self, descriptors: Tensor) -> Tensor:
        pooled = ad.reduce_max(descriptors, axis=0)
        h = ad.relu(ad.add(ad.matmul(ad.reshape(pooled, (1, -1)), self.w1),
                           self.b1))
        return ad.reshape(ad.add(ad.matmul(h, self.w2), self.b2), (-1,))


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    """Numerically stable -log softmax(logits)[label] for a single example."""
    m = ad.reduce_max(logits, axis=0, keepdims=True)
    z = ad.sub(logits, m)
    lse = ad.add(ad.log(ad.reduce_sum(ad.exp(z), axis=0, keepdims=True)), m)
    picked = ad.narrow(logits, 0, int(label), 1)
    return ad.reshape(ad.sub(lse, picked), ())
