"""End-to-end network: tokenization, staged encoders, fusion, classifier.

A sample window covers 3s x 3s pixels and is cut into a 3 x 3 grid of s x s
patches, giving nine tokens plus one learnable cls token per branch.  The
three branches are the HSI window, its center patch tiled back to window
size, and the LiDAR window.  Depth is split as: M encoder blocks per branch
(stage 1), the fusion grid (stage 2), and N - M - 1 blocks on the integrated
feature (stage 3); the classifier reads the cls position after a final layer
norm.

Parameters are created in a fixed, documented order (embeddings, cls, pos,
stage-1 blocks branch-major, stage-2 view blocks row-major, fusion stack,
stage-3 blocks, head), all drawn from one splitmix64 stream, so a (config,
seed) pair fully determines the model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .attention import EncoderBlockWeights, FfnWeights, LayerNormWeights, block_batched
from .errors import (
    ConfigError,
    ContractError,
    MagicError,
    ManifestError,
    NonFiniteError,
    ShapeError,
    TruncatedError,
)
from .fusion import (
    FeatureFusionWeights,
    build_views_batched,
    compress_batched,
    concat_fusion_batched,
    ffn_update_batched,
)
from .tensor import (
    ParamStore,
    Parameter,
    Tensor,
    add_bias,
    broadcast_leading,
    concat,
    layer_norm,
    linear,
    reshape,
    slice_axis,
)

TOKENS = 10  # 9 patches + cls

STRATEGIES = ("early", "middle", "late")
_STRATEGY_DEPTH = {"early": 0, "middle": 1, "late": 2}
ABLATIONS = ("none", "no_context", "concat_fusion", "hsi_only")

CHECKPOINT_MAGIC = b"IFM1"


@dataclass
class IfConfig:
    """Architecture hyperparameters; ``window_side`` pixels = 3 * patch_side."""

    patch_side: int = 1
    hsi_bands: int = 12
    lidar_bands: int = 1
    embed_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    total_depth: int = 3
    stage1_depth: int | None = None
    num_classes: int = 4
    strategy: str | None = None
    ablation: str = "none"
    positional: bool = True

    def __post_init__(self):
        if self.patch_side < 1 or self.hsi_bands < 1 or self.lidar_bands < 1:
            raise ConfigError("patch_side and band counts must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.strategy is not None:
            if self.strategy not in STRATEGIES:
                raise ConfigError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
            if self.total_depth != 3:
                raise ConfigError("strategy shorthand requires total_depth == 3")
            mapped = _STRATEGY_DEPTH[self.strategy]
            if self.stage1_depth is not None and self.stage1_depth != mapped:
                raise ConfigError(
                    f"strategy {self.strategy!r} implies stage1_depth {mapped}, got {self.stage1_depth}"
                )
            self.stage1_depth = mapped
        if self.stage1_depth is None:
            raise ConfigError("set stage1_depth or a strategy")
        if not 0 <= self.stage1_depth <= self.total_depth - 1:
            raise ConfigError(
                f"need 0 <= stage1_depth <= total_depth - 1, got {self.stage1_depth}/{self.total_depth}"
            )

    @property
    def window_side(self) -> int:
        return 3 * self.patch_side

    @property
    def stage3_depth(self) -> int:
        return self.total_depth - self.stage1_depth - 1

    @property
    def branches(self) -> tuple[str, ...]:
        if self.ablation == "hsi_only":
            return ("h1",)
        if self.ablation == "no_context":
            return ("h1", "l")
        return ("h1", "h2", "l")

    def branch_bands(self, branch: str) -> int:
        return self.lidar_bands if branch == "l" else self.hsi_bands


@dataclass
class SampleWindow:
    """One training/eval sample; x_h2 is the tiled center patch of x_h1."""

    x_h1: np.ndarray
    x_h2: np.ndarray
    x_l: np.ndarray
    label: int

    def check_tiling(self) -> bool:
        return np.array_equal(self.x_h2, make_center_input(self.x_h1))


@dataclass
class Logits:
    scores: np.ndarray

    def argmax(self) -> int:
        # np.argmax takes the first maximum: lowest class index wins ties
        return int(np.argmax(self.scores))


@dataclass
class ForwardResult:
    logits: Logits
    attn: list[list[np.ndarray]] | None
    integrated: np.ndarray | None
    branches: tuple[str, ...]


@dataclass
class _BatchOut:
    logits: Tensor
    attn: list[list[np.ndarray]] | None = None
    integrated: np.ndarray | None = None


def make_center_input(x_h1: np.ndarray) -> np.ndarray:
    """Tile the center s x s patch of a (bands, 3s, 3s) window over the window."""
    x_h1 = np.asarray(x_h1)
    side = x_h1.shape[-1]
    if x_h1.ndim != 3 or x_h1.shape[-2] != side or side % 3:
        raise ContractError(f"expected (bands, 3s, 3s) window, got {x_h1.shape}")
    s = side // 3
    center = x_h1[:, s:2 * s, s:2 * s]
    return np.tile(center, (1, 3, 3))


def _flatten_patches(x: np.ndarray, s: int) -> np.ndarray:
    """(N, C, 3s, 3s) -> (N, 9, C*s*s); patches row-major, band-major within."""
    n, c = x.shape[:2]
    return np.ascontiguousarray(
        x.reshape(n, c, 3, s, 3, s).transpose(0, 2, 4, 1, 3, 5)
    ).reshape(n, 9, c * s * s)


def tokenize(x, weight: Parameter, bias: Parameter, cls: Parameter, pos: Parameter | None) -> Tensor:
    """Embed one (bands, 3s, 3s) window into a (10, D) token sequence."""
    arr = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    s = arr.shape[-1] // 3
    out = _tokenize_batched(arr[None], s, weight, bias, cls, pos)
    return reshape(out, out.shape[1:])


def _tokenize_batched(
    x: np.ndarray, s: int, weight: Parameter, bias: Parameter, cls: Parameter, pos: Parameter | None
) -> Tensor:
    n = x.shape[0]
    d = weight.shape[1]
    patches = Tensor(_flatten_patches(x, s))
    tok = linear(patches, weight.value, bias.value)
    cls_row = broadcast_leading(reshape(cls.value, (1, d)), n)
    seq = concat([cls_row, tok], axis=1)
    if pos is not None:
        seq = add_bias(seq, pos.value)
    return seq


class IfModel:
    """The staged fusion classifier; (cfg, seed) fully determines all weights."""

    def __init__(self, cfg: IfConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.store = ParamStore(seed)
        self._build()

    # -- construction -------------------------------------------------------

    def _block(self, prefix: str) -> EncoderBlockWeights:
        c = self.cfg
        return EncoderBlockWeights.build(self.store, prefix, c.embed_dim, c.heads, c.ffn_dim)

    def _build(self) -> None:
        c = self.cfg
        st = self.store
        d = c.embed_dim
        s2 = c.patch_side * c.patch_side

        self.embed: dict[str, tuple[Parameter, Parameter]] = {}
        for b in c.branches:
            self.embed[b] = (
                st.xavier(f"embed.{b}.weight", s2 * c.branch_bands(b), d),
                st.zeros(f"embed.{b}.bias", d),
            )
        self.cls = {b: st.zeros(f"cls.{b}", d) for b in c.branches}
        self.pos = (
            {b: st.zeros(f"pos.{b}", TOKENS, d) for b in c.branches} if c.positional else None
        )

        if c.ablation == "hsi_only":
            self.encoder = [self._block(f"encoder.block{k}") for k in range(c.total_depth)]
        else:
            self.stage1 = {
                b: [self._block(f"stage1.{b}.block{k}") for k in range(c.stage1_depth)]
                for b in c.branches
            }
            n = len(c.branches)
            self.view_blocks = [
                [self._block(f"stage2.views.v{i + 1}{j + 1}") for j in range(n)] for i in range(n)
            ]
            if c.ablation == "concat_fusion":
                self.concat_w = st.xavier("stage2.concat.weight", n * n * d, d)
                self.concat_b = st.zeros("stage2.concat.bias", d)
            else:
                self.fuse = FeatureFusionWeights.build(st, "stage2.fuse", d, grid=n)
                self.fuse_ffn = FfnWeights.build(st, "stage2.ffn", d, c.ffn_dim)
            self.stage3 = [self._block(f"stage3.block{k}") for k in range(c.stage3_depth)]

        self.head_ln = LayerNormWeights.build(st, "head.ln", d)
        self.head_w = st.xavier("head.linear.weight", d, c.num_classes)
        self.head_b = st.zeros("head.linear.bias", c.num_classes)

    def parameters(self) -> list[Parameter]:
        return self.store.parameters()

    def zero_grads(self) -> None:
        self.store.zero_grads()

    # -- forward -------------------------------------------------------------

    def _branch_tokens(self, branch: str, x: np.ndarray) -> Tensor:
        w, b = self.embed[branch]
        pos = self.pos[branch] if self.pos is not None else None
        return _tokenize_batched(x, self.cfg.patch_side, w, b, self.cls[branch], pos)

    def _check_inputs(self, name: str, x: np.ndarray, bands: int, n: int) -> None:
        side = self.cfg.window_side
        if x.shape != (n, bands, side, side):
            raise ShapeError(f"{name}: expected {(n, bands, side, side)}, got {x.shape}")

    def forward_batch(
        self, x_h1: np.ndarray, x_h2: np.ndarray, x_l: np.ndarray, capture: bool = False
    ) -> _BatchOut:
        c = self.cfg
        n = x_h1.shape[0]
        self._check_inputs("x_h1", x_h1, c.hsi_bands, n)
        if "h2" in c.branches:
            self._check_inputs("x_h2", x_h2, c.hsi_bands, n)
        if "l" in c.branches:
            self._check_inputs("x_l", x_l, c.lidar_bands, n)
        inputs = {"h1": x_h1, "h2": x_h2, "l": x_l}

        attn_grid = None
        integrated = None
        if c.ablation == "hsi_only":
            z = self._branch_tokens("h1", x_h1)
            for blk in self.encoder:
                z, _ = block_batched(z, z, blk)
        else:
            feats = []
            for b in c.branches:
                z = self._branch_tokens(b, inputs[b])
                for blk in self.stage1[b]:
                    z, _ = block_batched(z, z, blk)
                feats.append(z)
            views, attn = build_views_batched(feats, self.view_blocks)
            if c.ablation == "concat_fusion":
                z = concat_fusion_batched(views, self.concat_w, self.concat_b)
            else:
                z = ffn_update_batched(compress_batched(views, self.fuse), self.fuse_ffn)
            if capture:
                g = len(c.branches)
                attn_grid = [[attn[i][j].array for j in range(g)] for i in range(g)]
                integrated = z.array
            for blk in self.stage3:
                z, _ = block_batched(z, z, blk)

        normed = layer_norm(z, self.head_ln.gamma.value, self.head_ln.beta.value)
        cls_tok = reshape(slice_axis(normed, 1, 0, 1), (n, c.embed_dim))
        logits = linear(cls_tok, self.head_w.value, self.head_b.value)
        return _BatchOut(logits=logits, attn=attn_grid, integrated=integrated)

    def forward(self, sample: SampleWindow) -> ForwardResult:
        out = self.forward_batch(
            sample.x_h1[None], sample.x_h2[None], sample.x_l[None], capture=True
        )
        return ForwardResult(
            logits=Logits(out.logits.array[0].copy()),
            attn=out.attn,
            integrated=out.integrated[0] if out.integrated is not None else None,
            branches=self.cfg.branches,
        )


def param_count(cfg: IfConfig) -> int:
    """Closed-form parameter count for a config.

    Building blocks (D = embed_dim, F = ffn_dim, h heads, K classes, T = 10
    tokens, g = fusion grid side, p_b = patch_side^2 * bands(branch)):

        block(D, F)   = 4*D^2 + 2*D*F + 5*D + F
        embed(branch) = p_b * D + D
        branch extras = D (cls) + T*D (pos, if enabled)
        fuse(g, D)    = 2*g^2 + D^2 * (10 + g^2) + 3*D
        ffn_update    = 2*D*F + F + D
        head          = 2*D + D*K + K

    Stage depths contribute len(branches)*M + g^2 + (N-M-1) blocks for the
    fusion variants, N blocks for hsi_only, and concat_fusion swaps
    fuse + ffn_update for g^2*D^2 + D.
    """
    d, f = cfg.embed_dim, cfg.ffn_dim
    m, n_depth, k = cfg.stage1_depth, cfg.total_depth, cfg.num_classes
    block = 4 * d * d + 2 * d * f + 5 * d + f
    branches = cfg.branches
    g = len(branches)

    total = 0
    for b in branches:
        total += cfg.patch_side**2 * cfg.branch_bands(b) * d + d  # embedding
        total += d  # cls
        if cfg.positional:
            total += TOKENS * d
    if cfg.ablation == "hsi_only":
        total += n_depth * block
    else:
        total += g * m * block
        total += g * g * block
        if cfg.ablation == "concat_fusion":
            total += g * g * d * d + d
        else:
            total += 2 * g * g + d * d * (10 + g * g) + 3 * d  # fusion conv stack
            total += 2 * d * f + f + d  # post-compress ffn
        total += (n_depth - m - 1) * block
    total += 2 * d + d * k + k  # head
    return total


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 manifest length, JSON manifest, f64 payload


def checkpoint_save(model: IfModel, path) -> None:
    """Write all parameters; identical models produce identical bytes."""
    params = sorted(model.parameters(), key=lambda p: p.name)
    manifest = []
    offset = 0
    for p in params:
        manifest.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += p.size * 8
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(mjson)))
        fh.write(mjson)
        for p in params:
            fh.write(p.value.array.astype("<f8").tobytes())


def _read_header(path) -> tuple[list[dict], bytes]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != CHECKPOINT_MAGIC:
            raise MagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}")
        (mlen,) = struct.unpack("<I", head[4:8])
        mjson = fh.read(mlen)
        if len(mjson) < mlen:
            raise TruncatedError(f"{path}: manifest cut short")
        payload = fh.read()
    try:
        manifest = json.loads(mjson.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, list):
        raise ManifestError(f"{path}: manifest must be a JSON list")
    last_end = 0
    for entry in manifest:
        if not isinstance(entry, dict) or {"name", "shape", "offset"} - set(entry):
            raise ManifestError(f"{path}: manifest entries need name/shape/offset")
        if entry["offset"] != last_end:
            raise ManifestError(
                f"{path}: offsets must be contiguous and increasing, got {entry['offset']}"
            )
        last_end = entry["offset"] + int(np.prod(entry["shape"])) * 8
    return manifest, payload


def read_manifest(path) -> list[dict]:
    """Parse and validate a checkpoint header without touching a model."""
    return _read_header(path)[0]


def checkpoint_load(model: IfModel, path) -> None:
    """Load parameters into ``model``, validating names and shapes."""
    manifest, payload = _read_header(path)
    params = model.store.params
    listed = {e["name"] for e in manifest}
    missing = sorted(set(params) - listed)
    extra = sorted(listed - set(params))
    if missing or extra:
        raise ManifestError(
            f"{path}: parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for entry in manifest:
        p = params[entry["name"]]
        if tuple(entry["shape"]) != p.shape:
            raise ManifestError(
                f"{path}: tensor {entry['name']!r} has shape {entry['shape']}, model expects {list(p.shape)}"
            )
    expected = sum(int(np.prod(e["shape"])) * 8 for e in manifest)
    if len(payload) < expected:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, manifest needs {expected}")
    if len(payload) > expected:
        raise ManifestError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    for entry in manifest:
        p = params[entry["name"]]
        vals = np.frombuffer(payload, dtype="<f8", count=p.size, offset=entry["offset"]).reshape(p.shape)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError(f"{path}: tensor {entry['name']!r} holds non-finite values")
        p.value.array[...] = vals
