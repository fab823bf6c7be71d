"""Image encoders: conv/pool feature stacks plus per-row recurrent
encoding into the fine grid V and the optional coarse grid V'.

Two presets ship: `paper` is the full published stack (six fine
conv stages pooling 8x down, 512 channels, 256 hidden per direction),
`toy` is a two-stage /4 stack sized so a full training run takes
minutes on one core. The top fine conv of the published table lists
zero padding, which would shave the grid to 2x14 on a 32x128 input;
every conv here pads (1,1) so the documented 512x4x16 geometry holds.

The row encoder runs a bidirectional LSTM along each row of the grid,
starting both directions from trainable per-row initial states (the
positional embeddings); switching it off exposes the raw conv features,
and switching positional embeddings off starts rows from zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2dSpec, ConvLayer, LSTMCell, conv_out_dims, maxpool
from .tensor import ShapeError, Tensor

__all__ = [
    "Stage", "EncoderPreset", "PRESETS", "EncoderOutput",
    "PositionalEmbeddings", "RowEncoder", "Encoder",
]


@dataclass(frozen=True)
class Stage:
    conv: Conv2dSpec
    pool: tuple[tuple[int, int], tuple[int, int]] | None = None  # window, stride


@dataclass(frozen=True)
class EncoderPreset:
    name: str
    fine: tuple[Stage, ...]
    coarse: tuple[Stage, ...]
    enc_hidden: int      # per direction, fine row encoder
    coarse_hidden: int   # per direction, coarse row encoder
    downsample: tuple[int, int]  # total fine-stack pooling (h, w)


def _c(filters, padding=(1, 1), bn=False):
    return Conv2dSpec(filters, (3, 3), (1, 1), padding, batchnorm=bn)


PAPER_PRESET = EncoderPreset(
    name="paper",
    fine=(
        Stage(_c(64), (((2, 2), (2, 2)))),
        Stage(_c(128), ((2, 2), (2, 2))),
        Stage(_c(256, bn=True), None),
        Stage(_c(256), ((1, 2), (1, 2))),
        Stage(_c(512, bn=True), ((2, 1), (2, 1))),
        Stage(_c(512, bn=True), None),
    ),
    coarse=(
        Stage(_c(512, bn=True), ((4, 4), (4, 4))),
        Stage(_c(512, bn=True), None),
    ),
    enc_hidden=256,
    coarse_hidden=256,
    downsample=(8, 8),
)

TOY_PRESET = EncoderPreset(
    name="toy",
    fine=(
        Stage(_c(32, bn=True), ((2, 2), (2, 2))),
        Stage(_c(64, bn=True), ((2, 2), (2, 2))),
    ),
    coarse=(
        Stage(_c(64, bn=True), ((4, 4), (4, 4))),
    ),
    enc_hidden=32,
    coarse_hidden=32,
    downsample=(4, 4),
)

PRESETS = {"paper": PAPER_PRESET, "toy": TOY_PRESET}


@dataclass
class EncoderOutput:
    fine: Tensor            # (B, H, W, Dv), channels last for attention
    coarse: Tensor | None   # (B, H', W', Dc)
    geometry: tuple[int, int, int, int]  # (H, W, H', W'); 0s when no coarse


class ConvStack:
    def __init__(self, in_channels: int, stages: tuple[Stage, ...],
                 rng: np.random.Generator):
        self.stages = stages
        self.layers = []
        c = in_channels
        for st in stages:
            self.layers.append(ConvLayer(c, st.conv, rng))
            c = st.conv.filters
        self.out_channels = c

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out

    def bn_stats(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.bn is not None and layer.bn.running_mean is not None:
                out[f"{i}.mean"] = layer.bn.running_mean
                out[f"{i}.var"] = layer.bn.running_var
        return out

    def load_bn_stats(self, stats: dict[str, np.ndarray], prefix: str) -> None:
        for i, layer in enumerate(self.layers):
            if layer.bn is not None and f"{prefix}{i}.mean" in stats:
                layer.bn.running_mean = stats[f"{prefix}{i}.mean"].copy()
                layer.bn.running_var = stats[f"{prefix}{i}.var"].copy()

    def out_dims(self, h: int, w: int) -> tuple[int, int]:
        for st in self.stages:
            h, w = conv_out_dims(h, w, st.conv.kernel, st.conv.stride,
                                 st.conv.padding)
            if st.pool is not None:
                h, w = conv_out_dims(h, w, st.pool[0], st.pool[1], (0, 0))
        return h, w

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        for st, layer in zip(self.stages, self.layers):
            x = layer(x, mode)
            if st.pool is not None:
                x = maxpool(x, st.pool[0], st.pool[1])
        return x


class PositionalEmbeddings:
    """Trainable per-row initial LSTM states, one slot per grid row."""

    def __init__(self, max_rows: int, hidden: int, rng: np.random.Generator,
                 scale: float = 0.1):
        self.max_rows = max_rows
        self.tables = {
            name: Tensor(rng.normal(0.0, scale, size=(max_rows, hidden)),
                         requires_grad=True)
            for name in ("fwd_h0", "fwd_c0", "bwd_h0", "bwd_c0")
        }

    def params(self) -> dict[str, Tensor]:
        return dict(self.tables)

    def lookup(self, rows: np.ndarray) -> dict[str, Tensor]:
        if rows.size and rows.max() >= self.max_rows:
            raise IndexError(
                f"grid row {int(rows.max())} exceeds the positional table "
                f"({self.max_rows} rows)")
        return {k: T.gather_rows(v, rows) for k, v in self.tables.items()}


class RowEncoder:
    """Bidirectional LSTM along each grid row; directions concatenated."""

    def __init__(self, in_channels: int, hidden: int, max_rows: int,
                 rng: np.random.Generator, pos_embed: bool = True):
        self.hidden = hidden
        self.fwd = LSTMCell(in_channels, hidden, rng)
        self.bwd = LSTMCell(in_channels, hidden, rng)
        self.pos = PositionalEmbeddings(max_rows, hidden, rng) if pos_embed \
            else None

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, cell in (("fwd", self.fwd), ("bwd", self.bwd)):
            for k, v in cell.params().items():
                out[f"{name}.{k}"] = v
        if self.pos is not None:
            for k, v in self.pos.params().items():
                out[f"pos.{k}"] = v
        return out

    def __call__(self, vt: Tensor) -> Tensor:
        """(B, D, H, W) conv features -> (B, H, W, 2*hidden)."""
        b, d, h, w = vt.data.shape
        grid = T.reshape(T.transpose(vt, (0, 2, 3, 1)), (b * h, w, d))
        rows = np.tile(np.arange(h), b)
        if self.pos is not None:
            init = self.pos.lookup(rows)
        else:
            zero = Tensor(np.zeros((b * h, self.hidden)))
            init = {k: zero for k in ("fwd_h0", "fwd_c0", "bwd_h0", "bwd_c0")}

        cols = [grid[:, k, :] for k in range(w)]
        hs_f, cs_f = init["fwd_h0"], init["fwd_c0"]
        out_f = []
        for k in range(w):
            hs_f, cs_f = self.fwd.step(cols[k], hs_f, cs_f)
            out_f.append(hs_f)
        hs_b, cs_b = init["bwd_h0"], init["bwd_c0"]
        out_b = [None] * w
        for k in reversed(range(w)):
            hs_b, cs_b = self.bwd.step(cols[k], hs_b, cs_b)
            out_b[k] = hs_b
        both = T.concat([T.stack(out_f, axis=1), T.stack(out_b, axis=1)],
                        axis=2)
        return T.reshape(both, (b, h, w, 2 * self.hidden))


class Encoder:
    """The full image side: fine conv stack, row encoder, coarse branch."""

    def __init__(self, preset: EncoderPreset, max_image_height: int,
                 rng: np.random.Generator, row_encoder: bool = True,
                 pos_embed: bool = True, coarse: bool = False):
        self.preset = preset
        self.use_row_encoder = row_encoder
        self.use_coarse = coarse
        self.fine_stack = ConvStack(1, preset.fine, rng)

        max_fine_rows = max_image_height // preset.downsample[0]
        if row_encoder:
            self.fine_rnn = RowEncoder(self.fine_stack.out_channels,
                                       preset.enc_hidden, max_fine_rows, rng,
                                       pos_embed)
            self.fine_channels = 2 * preset.enc_hidden
        else:
            self.fine_rnn = None
            self.fine_channels = self.fine_stack.out_channels

        self.coarse_stack = None
        self.coarse_rnn = None
        self.coarse_channels = 0
        if coarse:
            self.coarse_stack = ConvStack(self.fine_stack.out_channels,
                                          preset.coarse, rng)
            if row_encoder:
                self.coarse_rnn = RowEncoder(
                    self.coarse_stack.out_channels, preset.coarse_hidden,
                    max(max_fine_rows // 4, 1), rng, pos_embed)
                self.coarse_channels = 2 * preset.coarse_hidden
            else:
                self.coarse_channels = self.coarse_stack.out_channels

    def params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, piece in (("fine_conv", self.fine_stack),
                              ("fine_rnn", self.fine_rnn),
                              ("coarse_conv", self.coarse_stack),
                              ("coarse_rnn", self.coarse_rnn)):
            if piece is not None:
                for k, v in piece.params().items():
                    out[f"{prefix}.{k}"] = v
        return out

    def bn_stats(self) -> dict[str, np.ndarray]:
        out = {f"fine_conv.{k}": v for k, v in self.fine_stack.bn_stats().items()}
        if self.coarse_stack is not None:
            out.update({f"coarse_conv.{k}": v
                        for k, v in self.coarse_stack.bn_stats().items()})
        return out

    def load_bn_stats(self, stats: dict[str, np.ndarray]) -> None:
        self.fine_stack.load_bn_stats(stats, "fine_conv.")
        if self.coarse_stack is not None:
            self.coarse_stack.load_bn_stats(stats, "coarse_conv.")

    def extract_features(self, images: Tensor, mode: str = "train") -> Tensor:
        """(B, 1, H_img, W_img) pages -> conv grid (B, D, H, W)."""
        _, _, hi, wi = images.data.shape
        dh, dw = self.preset.downsample
        if hi % dh or wi % dw:
            raise ShapeError(
                f"image {hi}x{wi} not divisible by the {dh}x{dw} pool factor; "
                "pad via bucketing first")
        return self.fine_stack(images, mode)

    def row_encode(self, vt: Tensor) -> Tensor:
        if self.fine_rnn is None:
            raise RuntimeError("row encoder disabled for this model")
        return self.fine_rnn(vt)

    def coarse_branch(self, vt: Tensor, mode: str = "train") -> Tensor:
        if self.coarse_stack is None:
            raise RuntimeError("coarse branch disabled for this model")
        _, _, h, w = vt.data.shape
        if h % 4 or w % 4:
            raise ShapeError(f"fine grid {h}x{w} not divisible by 4")
        vtc = self.coarse_stack(vt, mode)
        if self.coarse_rnn is not None:
            return self.coarse_rnn(vtc)
        return T.transpose(vtc, (0, 2, 3, 1))

    def encode(self, images: Tensor, mode: str = "train") -> EncoderOutput:
        vt = self.extract_features(images, mode)
        if self.fine_rnn is not None:
            fine = self.fine_rnn(vt)
        else:
            fine = T.transpose(vt, (0, 2, 3, 1))
        h, w = fine.data.shape[1], fine.data.shape[2]
        coarse = None
        hc = wc = 0
        if self.coarse_stack is not None:
            coarse = self.coarse_branch(vt, mode)
            hc, wc = coarse.data.shape[1], coarse.data.shape[2]
        return EncoderOutput(fine=fine, coarse=coarse,
                             geometry=(h, w, hc, wc))
