"""Network building blocks: conv stack, spatial pyramid pooling, recurrence,
and the two-way attentive temporal pooling head.

All forwards take an explicit Graph so the same code serves training and
gradient-free extraction. Frame inputs may carry a leading time axis; the
per-frame convolutional work is then batched through single tape ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, ShapeError, Tensor

CONV_CHANNELS = (16, 32, 32)
CONV_KERNEL = 5
CONV_PAD = 4
CONV_STRIDE = 1
POOL_WINDOW = (2, 2)
DEFAULT_BINS = ((8, 8), (4, 4), (2, 2), (1, 1))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], the classic small-net init."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


@dataclass
class ConvStackParams:
    """Kernels and biases for the three tanh conv layers.

    Layer shapes are fixed: 16x(Cin)x5x5, 32x16x5x5, 32x32x5x5, all with
    padding 4 and stride 1; 2x2/2x2 max pooling follows the first two layers
    only.
    """

    kernels: list[Tensor]
    biases: list[Tensor]

    @property
    def out_channels(self) -> int:
        return self.kernels[-1].shape[0]


def init_conv_stack(rng: np.random.Generator, in_channels: int = 5) -> ConvStackParams:
    kernels, biases = [], []
    cin = in_channels
    for cout in CONV_CHANNELS:
        fan_in = cin * CONV_KERNEL * CONV_KERNEL
        kernels.append(uniform_init(rng, (cout, cin, CONV_KERNEL, CONV_KERNEL), fan_in))
        biases.append(uniform_init(rng, (cout,), fan_in))
        cin = cout
    return ConvStackParams(kernels, biases)


def conv_out_extent(extent: int, kernel: int = CONV_KERNEL, pad: int = CONV_PAD,
                    stride: int = CONV_STRIDE) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def pool_out_extent(extent: int, window: int = 2, stride: int = 2) -> int:
    return (extent - window) // stride + 1


def conv_stack_output_hw(hw: tuple[int, int]) -> tuple[int, int]:
    """Spatial extents after conv+pool, conv+pool, conv."""
    h, w = hw
    h = pool_out_extent(conv_out_extent(h))
    w = pool_out_extent(conv_out_extent(w))
    h = pool_out_extent(conv_out_extent(h))
    w = pool_out_extent(conv_out_extent(w))
    return conv_out_extent(h), conv_out_extent(w)


def conv_stack_forward(graph: Graph, frames: Tensor, params: ConvStackParams) -> Tensor:
    """Run (T,Cin,H,W) or (Cin,H,W) input through conv/tanh(/pool) x3."""
    h = frames
    for i in range(3):
        h = graph.tanh(graph.conv2d(h, params.kernels[i], params.biases[i],
                                    pad=CONV_PAD, stride=CONV_STRIDE))
        if i < 2:
            h = graph.maxpool2d(h, POOL_WINDOW, POOL_WINDOW)
    return h


@dataclass(frozen=True)
class SppConfig:
    """Pyramid bin grid sizes, coarsest to finest order preserved in output."""

    bins: tuple[tuple[int, int], ...] = DEFAULT_BINS

    @property
    def cells_per_channel(self) -> int:
        return sum(mw * mh for mw, mh in self.bins)

    def output_length(self, channels: int) -> int:
        return channels * self.cells_per_channel


def _cell_bounds(extent: int, cells: int) -> list[tuple[int, int]]:
    # cell i covers [floor(i*extent/cells), ceil((i+1)*extent/cells))
    return [
        (i * extent // cells, ((i + 1) * extent + cells - 1) // cells)
        for i in range(cells)
    ]


def spp_forward(graph: Graph, fmap: Tensor, cfg: SppConfig = SppConfig()) -> Tensor:
    """Spatial pyramid max pooling to a fixed-length descriptor.

    For each bin grid the map is partitioned into cells, each cell max-pooled,
    and the results flattened channel-major; levels are concatenated in bin
    order. A (C,H,W) map yields a vector of length C * sum(mw*mh); batched
    (T,C,H,W) input yields one descriptor per row.
    """
    shape = fmap.shape
    if len(shape) not in (3, 4):
        raise ShapeError(f"spp_forward needs a (C,H,W) or (T,C,H,W) map, got {shape}")
    h, w = shape[-2], shape[-1]
    parts = []
    for mw, mh in cfg.bins:
        if h < mw or w < mh:
            raise ShapeError(f"spp bin {(mw, mh)} needs a map of at least {mw}x{mh}, got {h}x{w}")
        regions = [
            (r0, r1, c0, c1)
            for r0, r1 in _cell_bounds(h, mw)
            for c0, c1 in _cell_bounds(w, mh)
        ]
        parts.append(graph.region_maxpool(fmap, regions))
    return graph.concat(parts, axis=0 if len(shape) == 3 else 1)


@dataclass
class RnnParams:
    """Input projection and recurrent weights; the initial state is zero."""

    u_in: Tensor
    w_rec: Tensor

    @property
    def feature_dim(self) -> int:
        return self.u_in.shape[0]

    @property
    def input_dim(self) -> int:
        return self.u_in.shape[1]


def init_rnn(rng: np.random.Generator, input_dim: int, feature_dim: int) -> RnnParams:
    return RnnParams(
        u_in=uniform_init(rng, (feature_dim, input_dim), input_dim),
        w_rec=uniform_init(rng, (feature_dim, feature_dim), feature_dim),
    )


def rnn_forward(graph: Graph, reps, params: RnnParams, output: str = "pre_tanh") -> Tensor:
    """Run per-frame descriptors through the recurrence.

    reps is a (T, L) Tensor (or a list of length-L vectors, which is stacked
    first). Each step computes o_t = U_in r_t + W_rec s_{t-1} with
    s_t = tanh(o_t) and s_0 = 0. Returns a (T, N) matrix whose row t is o_t,
    or s_t when output="post_tanh".
    """
    if output not in ("pre_tanh", "post_tanh"):
        raise ValueError(f"unknown rnn output mode {output!r}")
    if isinstance(reps, (list, tuple)):
        reps = graph.stack(list(reps))
    if reps.data.ndim != 2:
        raise ShapeError(f"rnn_forward needs a (T, L) input, got {reps.shape}")
    if reps.shape[1] != params.input_dim:
        raise ShapeError(
            f"rnn input rows of length {reps.shape[1]} do not match u_in {params.u_in.shape}"
        )
    n_steps = reps.shape[0]
    state = Tensor(np.zeros(params.feature_dim))
    rows = []
    for t in range(n_steps):
        r_t = graph.take_row(reps, t)
        o_t = graph.add(graph.matvec(params.u_in, r_t), graph.matvec(params.w_rec, state))
        state = graph.tanh(o_t)
        rows.append(o_t if output == "pre_tanh" else state)
    return graph.stack(rows)


@dataclass
class AttentionParams:
    """Shared bilinear matrix scoring probe rows against gallery rows."""

    u_att: Tensor

    @property
    def feature_dim(self) -> int:
        return self.u_att.shape[0]


def init_attention(rng: np.random.Generator, feature_dim: int) -> AttentionParams:
    return AttentionParams(u_att=uniform_init(rng, (feature_dim, feature_dim), feature_dim))


def attention_matrix(graph: Graph, probe_seq: Tensor, gallery_seq: Tensor,
                     params: AttentionParams) -> Tensor:
    """tanh(P U G^T): pairwise frame affinities, probe rows by gallery columns."""
    n = params.u_att.shape[0]
    if probe_seq.data.ndim != 2 or probe_seq.shape[1] != n:
        raise ShapeError(f"probe rows {probe_seq.shape} do not match u_att {params.u_att.shape}")
    if gallery_seq.data.ndim != 2 or gallery_seq.shape[1] != n:
        raise ShapeError(
            f"gallery rows {gallery_seq.shape} do not match u_att {params.u_att.shape}"
        )
    scores = graph.matmul(graph.matmul(probe_seq, params.u_att), graph.transpose(gallery_seq))
    return graph.tanh(scores)


def temporal_weights(graph: Graph, affinity: Tensor) -> tuple[Tensor, Tensor]:
    """Row-wise max for the probe side, column-wise max for the gallery side."""
    return graph.max_along(affinity, 1), graph.max_along(affinity, 0)


def attentive_summary(graph: Graph, probe_seq: Tensor, gallery_seq: Tensor,
                      params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Jointly pool both sequences: softmax the temporal weights from the
    affinity matrix and form attention-weighted sums of the rows."""
    affinity = attention_matrix(graph, probe_seq, gallery_seq, params)
    t_p, t_g = temporal_weights(graph, affinity)
    a_p = graph.softmax(t_p)
    a_g = graph.softmax(t_g)
    v_p = graph.matvec(graph.transpose(probe_seq), a_p)
    v_g = graph.matvec(graph.transpose(gallery_seq), a_g)
    return v_p, v_g
