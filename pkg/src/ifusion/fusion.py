"""Interconnected fusion: the grid of attention views and its compressor.

Stage 2 crosses every pair of branch features: view (i, j) attends with
queries projected from branch j against keys/values from branch i, so the
diagonal holds plain self-attention views.  The resulting grid is compressed
per token by a small convolutional stack that treats the grid positions as a
tiny image with one channel per embedding dimension:

    grid-norm -> conv 3x3 (pad 1) -> conv 1x1 -> GELU -> +grid-norm -> conv g x g (pad 0)

The layer norm runs over the g*g grid positions for each (token, channel)
pair, with one gamma/beta per grid cell.  Tokens never mix inside this stack.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attention import (
    AttentionMap,
    EncoderBlockWeights,
    FfnWeights,
    LayerNormWeights,
    block_batched,
)
from .errors import ShapeError
from .tensor import (
    ParamStore,
    Parameter,
    Tensor,
    add,
    concat,
    conv2d,
    gelu,
    layer_norm,
    linear,
    reshape,
)


@dataclass
class BranchFeatures:
    """Stage-1 outputs for the three branches, each (T, D)."""

    h1: Tensor
    h2: Tensor
    l: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.h1, self.h2, self.l]

    def validate(self) -> None:
        shapes = {t.shape for t in self.as_list()}
        if len(shapes) != 1 or self.h1.ndim != 2:
            raise ShapeError(f"branch features must share one (T, D) shape, got {shapes}")


@dataclass
class FusionMatrix:
    """Grid of views; views[i][j] used kv from branch i and q from branch j."""

    views: list[list[Tensor]]
    attn: list[list[AttentionMap]]

    @property
    def grid(self) -> int:
        return len(self.views)


@dataclass
class IntegratedFeature:
    z_f: Tensor


@dataclass
class FeatureFusionWeights:
    """Parameters of the grid compressor for a g x g fusion matrix."""

    ln: LayerNormWeights
    conv1_w: Parameter
    conv1_b: Parameter
    conv2_w: Parameter
    conv2_b: Parameter
    conv3_w: Parameter
    conv3_b: Parameter
    grid: int

    @classmethod
    def build(cls, store: ParamStore, prefix: str, dim: int, grid: int = 3) -> "FeatureFusionWeights":
        return cls(
            ln=LayerNormWeights.build(store, f"{prefix}.ln", grid * grid),
            conv1_w=store.xavier_conv(f"{prefix}.conv1.weight", dim, dim, 3, 3),
            conv1_b=store.zeros(f"{prefix}.conv1.bias", dim),
            conv2_w=store.xavier_conv(f"{prefix}.conv2.weight", dim, dim, 1, 1),
            conv2_b=store.zeros(f"{prefix}.conv2.bias", dim),
            conv3_w=store.xavier_conv(f"{prefix}.conv3.weight", dim, dim, grid, grid),
            conv3_b=store.zeros(f"{prefix}.conv3.bias", dim),
            grid=grid,
        )


def build_views_batched(
    branches: list[Tensor], blocks: list[list[EncoderBlockWeights]]
) -> tuple[list[list[Tensor]], list[list[Tensor]]]:
    """Cross every branch pair: views[i][j] = block(kv=branch i, q=branch j)."""
    n = len(branches)
    views = [[None] * n for _ in range(n)]
    attn = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            views[i][j], attn[i][j] = block_batched(branches[i], branches[j], blocks[i][j])
    return views, attn


def compress_batched(views: list[list[Tensor]], w: FeatureFusionWeights) -> Tensor:
    """Collapse the view grid to one (B, T, D) feature, token by token."""
    g = w.grid
    b, t, d = views[0][0].shape
    cells = [reshape(views[i][j], (b, t, d, 1)) for i in range(g) for j in range(g)]
    flat = reshape(concat(cells, axis=3), (b * t, d, g * g))
    x0 = layer_norm(flat, w.ln.gamma.value, w.ln.beta.value)
    img0 = reshape(x0, (b * t, d, g, g))
    h = conv2d(img0, w.conv1_w.value, w.conv1_b.value, stride=1, padding=1)
    h = conv2d(h, w.conv2_w.value, w.conv2_b.value, stride=1, padding=0)
    h = add(gelu(h), img0)
    z = conv2d(h, w.conv3_w.value, w.conv3_b.value, stride=1, padding=0)
    return reshape(z, (b, t, d))


def ffn_update_batched(z_hat: Tensor, ffn: FfnWeights) -> Tensor:
    """Residual FFN refresh of the integrated feature (no extra layer norm)."""
    h = linear(z_hat, ffn.w1.value, ffn.b1.value)
    h = linear(gelu(h), ffn.w2.value, ffn.b2.value)
    return add(z_hat, h)


def concat_fusion_batched(views: list[list[Tensor]], proj: Parameter, bias: Parameter) -> Tensor:
    """Ablation: row-major concat of the views projected straight back to D."""
    g = len(views)
    cat = concat([views[i][j] for i in range(g) for j in range(g)], axis=2)
    return linear(cat, proj.value, bias.value)


# ---------------------------------------------------------------------------
# single-sample surface


def _batch_views(m: FusionMatrix) -> list[list[Tensor]]:
    g = m.grid
    return [[reshape(m.views[i][j], (1,) + m.views[i][j].shape) for j in range(g)] for i in range(g)]


def build_views(b: BranchFeatures, blocks: list[list[EncoderBlockWeights]]) -> FusionMatrix:
    b.validate()
    branches = [reshape(z, (1,) + z.shape) for z in b.as_list()]
    views, attn = build_views_batched(branches, blocks)
    n = len(branches)
    return FusionMatrix(
        views=[[reshape(views[i][j], views[i][j].shape[1:]) for j in range(n)] for i in range(n)],
        attn=[[AttentionMap(attn[i][j].array[0].copy()) for j in range(n)] for i in range(n)],
    )


def compress(m: FusionMatrix, w: FeatureFusionWeights) -> Tensor:
    out = compress_batched(_batch_views(m), w)
    return reshape(out, out.shape[1:])


def ffn_update(z_hat: Tensor, ffn: FfnWeights) -> IntegratedFeature:
    out = ffn_update_batched(reshape(z_hat, (1,) + z_hat.shape), ffn)
    return IntegratedFeature(reshape(out, out.shape[1:]))


def concat_fusion_ablation(m: FusionMatrix, proj: Parameter, bias: Parameter) -> Tensor:
    out = concat_fusion_batched(_batch_views(m), proj, bias)
    return reshape(out, out.shape[1:])
