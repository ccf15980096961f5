"""Cross-entropy training with Adam, evaluation, and experiment grids.

Everything is seed-deterministic: the epoch-e shuffle order comes from
``SplitMix64(derive(seed, e))`` and nothing else, and models are built from
``derive(seed, cell_index)`` inside the grids, so a (config, seed, data)
triple reproduces runs bit-for-bit on one platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Cube, LabelMap, SplitSpec, prepare_samples
from .errors import ConfigError, ContractError, NonFiniteError, TrainingAbort
from .model import IfConfig, IfModel, SampleWindow
from .rng import SplitMix64, derive
from .tensor import Graph, backward, cross_entropy

# Full-scale Houston benchmarks, for context next to desk-scale synthetic
# runs (which use different data and are not comparable in magnitude).
HOUSTON_GRID_REFERENCE_OA = {
    ("early", 3): 85.67, ("early", 6): 94.36, ("early", 9): 96.37, ("early", 12): 97.50,
    ("middle", 3): 84.82, ("middle", 6): 94.02, ("middle", 9): 95.95, ("middle", 12): 96.38,
    ("late", 3): 82.74, ("late", 6): 94.78, ("late", 9): 93.69, ("late", 12): 97.03,
}
HOUSTON_ABLATION_REFERENCE_OA = {
    "if": 97.50, "no_context": 96.41, "concat_fusion": 91.35, "hsi_only": 90.31,
}

ABLATION_ROWS = ("if", "no_context", "concat_fusion", "hsi_only")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 32
    seed: int = 7
    clip_norm: float | None = None
    early_stop_loss: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ContractError(f"confusion matrix must be square, got {self.counts.shape}")
        if self.counts.min() < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Metrics:
    """OA/AA/Kappa as fractions; per_class holds recalls (None if no truth)."""

    oa: float
    aa: float
    kappa: float
    per_class: list[float | None]
    excluded: list[int] = field(default_factory=list)

    def row_pairs(self) -> list[tuple[str, float]]:
        rows = [
            (f"class_{i + 1}", (0.0 if r is None else r) * 100.0)
            for i, r in enumerate(self.per_class)
        ]
        rows += [("oa", self.oa * 100.0), ("aa", self.aa * 100.0), ("kappa", self.kappa * 100.0)]
        return rows


def metrics(cm: ConfusionMatrix) -> Metrics:
    """OA = trace/total; AA = mean recall over non-empty classes;
    Kappa = (p_o - p_e) / (1 - p_e), defined as 0 when p_e = 1."""
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise ContractError("metrics over an empty confusion matrix")
    oa = float(np.trace(counts)) / total
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    per_class: list[float | None] = []
    excluded = []
    recalls = []
    for c in range(counts.shape[0]):
        if row[c] == 0:
            per_class.append(None)
            excluded.append(c)
        else:
            r = float(counts[c, c]) / float(row[c])
            per_class.append(r)
            recalls.append(r)
    aa = float(np.mean(recalls)) if recalls else 0.0
    p_e = float((row * col).sum()) / (total * total)
    kappa = 0.0 if p_e == 1.0 else (oa - p_e) / (1.0 - p_e)
    return Metrics(oa=oa, aa=aa, kappa=kappa, per_class=per_class, excluded=excluded)


# ---------------------------------------------------------------------------
# training


class Adam:
    """Bias-corrected Adam over a model's parameter store."""

    def __init__(self, params, tc: TrainConfig):
        self.params = list(params)
        self.tc = tc
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        tc = self.tc
        self.t += 1
        bc1 = 1.0 - tc.beta1**self.t
        bc2 = 1.0 - tc.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= tc.beta1
            m += (1.0 - tc.beta1) * g
            v *= tc.beta2
            v += (1.0 - tc.beta2) * g * g
            p.value.array -= tc.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + tc.eps)


def _stack_samples(samples: list[SampleWindow]):
    x1 = np.stack([s.x_h1 for s in samples])
    x2 = np.stack([s.x_h2 for s in samples])
    xl = np.stack([s.x_l for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x1, x2, xl, y


def _clip_grads(params, max_norm: float) -> None:
    sq = 0.0
    for p in params:
        sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        f = max_norm / norm
        for p in params:
            p.grad *= f


def train(model: IfModel, samples: list[SampleWindow], tc: TrainConfig) -> list[dict]:
    """Mini-batch Adam on mean cross-entropy; returns one log dict per epoch."""
    if not samples:
        raise ContractError("empty training set")
    x1, x2, xl, y = _stack_samples(samples)
    n = len(samples)
    opt = Adam(model.parameters(), tc)
    logs: list[dict] = []
    for epoch in range(tc.epochs):
        order = list(range(n))
        SplitMix64(derive(tc.seed, epoch)).shuffle(order)
        loss_sum = 0.0
        correct = 0
        for lo in range(0, n, tc.batch_size):
            idx = order[lo:lo + tc.batch_size]
            try:
                with Graph() as g:
                    out = model.forward_batch(x1[idx], x2[idx], xl[idx])
                    loss = cross_entropy(out.logits, y[idx])
                model.zero_grads()
                backward(loss, g)
            except NonFiniteError as exc:
                norms = {p.name: float(np.linalg.norm(p.value.array)) for p in model.parameters()}
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch}: {exc}",
                    param_norms=norms,
                    batch_indices=idx,
                ) from exc
            if tc.clip_norm is not None:
                _clip_grads(model.parameters(), tc.clip_norm)
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((np.argmax(out.logits.array, axis=1) == y[idx]).sum())
        epoch_loss = loss_sum / n
        logs.append({"epoch": epoch, "loss": epoch_loss, "train_oa": correct / n})
        if tc.early_stop_loss is not None and epoch_loss < tc.early_stop_loss:
            break
    return logs


def evaluate(model: IfModel, samples: list[SampleWindow], batch_size: int = 128) -> ConfusionMatrix:
    """Tally argmax predictions (first index wins ties) against true labels."""
    if not samples:
        raise ContractError("empty evaluation set")
    x1, x2, xl, y = _stack_samples(samples)
    k = model.cfg.num_classes
    counts = np.zeros((k, k), dtype=np.int64)
    for lo in range(0, len(samples), batch_size):
        sl = slice(lo, lo + batch_size)
        out = model.forward_batch(x1[sl], x2[sl], xl[sl])
        preds = np.argmax(out.logits.array, axis=1)
        for t, p in zip(y[sl], preds):
            counts[t, p] += 1
    return ConfusionMatrix(counts)


# ---------------------------------------------------------------------------
# experiment grids


@dataclass
class GridCell:
    strategy: str
    patch_px: int
    metrics: Metrics


@dataclass
class AblationRow:
    variant: str
    metrics: Metrics


def _train_eval(
    cfg: IfConfig,
    tc: TrainConfig,
    model_seed: int,
    hsi: Cube,
    lidar: Cube,
    labels: LabelMap,
    split: SplitSpec,
) -> tuple[IfModel, Metrics, list[dict]]:
    train_set, test_set, _, _ = prepare_samples(hsi, lidar, labels, split, cfg)
    model = IfModel(cfg, seed=model_seed)
    logs = train(model, train_set, tc)
    return model, metrics(evaluate(model, test_set)), logs


def run_grid(
    base_cfg: IfConfig,
    tc: TrainConfig,
    hsi: Cube,
    lidar: Cube,
    labels: LabelMap,
    split: SplitSpec,
    patch_sides: tuple[int, ...] = (1, 2, 3, 4),
    strategies: tuple[str, ...] = ("early", "middle", "late"),
) -> list[GridCell]:
    """Train one model per (strategy, patch size) cell on shared data."""
    cells = []
    for si, strategy in enumerate(strategies):
        for pi, s in enumerate(patch_sides):
            cfg = IfConfig(
                **{
                    **_cfg_dict(base_cfg),
                    "patch_side": s,
                    "strategy": strategy,
                    "stage1_depth": None,
                }
            )
            seed = derive(tc.seed, si, pi)
            _, m, _ = _train_eval(cfg, tc, seed, hsi, lidar, labels, split)
            cells.append(GridCell(strategy=strategy, patch_px=3 * s, metrics=m))
    return cells


def run_ablations(
    base_cfg: IfConfig,
    tc: TrainConfig,
    hsi: Cube,
    lidar: Cube,
    labels: LabelMap,
    split: SplitSpec,
) -> list[AblationRow]:
    """Four runs (full, no_context, concat_fusion, hsi_only), same data/seed."""
    variant_cfg = {
        "if": "none",
        "no_context": "no_context",
        "concat_fusion": "concat_fusion",
        "hsi_only": "hsi_only",
    }
    rows = []
    for variant in ABLATION_ROWS:
        cfg = IfConfig(**{**_cfg_dict(base_cfg), "ablation": variant_cfg[variant]})
        _, m, _ = _train_eval(cfg, tc, tc.seed, hsi, lidar, labels, split)
        rows.append(AblationRow(variant=variant, metrics=m))
    return rows


def _cfg_dict(cfg: IfConfig) -> dict:
    return {
        "patch_side": cfg.patch_side,
        "hsi_bands": cfg.hsi_bands,
        "lidar_bands": cfg.lidar_bands,
        "embed_dim": cfg.embed_dim,
        "heads": cfg.heads,
        "ffn_dim": cfg.ffn_dim,
        "total_depth": cfg.total_depth,
        "stage1_depth": cfg.stage1_depth,
        "num_classes": cfg.num_classes,
        "strategy": cfg.strategy,
        "ablation": cfg.ablation,
        "positional": cfg.positional,
    }


# ---------------------------------------------------------------------------
# table emission (CSV + aligned text); floats use shortest repr


def _fmt(v: float) -> str:
    return repr(float(v))


def metrics_csv(m: Metrics) -> str:
    lines = ["row,value_pct"]
    lines += [f"{name},{_fmt(val)}" for name, val in m.row_pairs()]
    return "\n".join(lines) + "\n"


def metrics_text(m: Metrics) -> str:
    width = max(len(name) for name, _ in m.row_pairs())
    lines = [f"{name:<{width}}  {val:8.2f}" for name, val in m.row_pairs()]
    if m.excluded:
        lines.append(f"(classes with no test truth excluded from AA: {[c + 1 for c in m.excluded]})")
    return "\n".join(lines) + "\n"


def grid_csv(cells: list[GridCell]) -> str:
    lines = ["strategy,patch_px,oa_pct,aa_pct,kappa_pct,houston_full_scale_oa_pct"]
    for cell in cells:
        ref = HOUSTON_GRID_REFERENCE_OA.get((cell.strategy, cell.patch_px), "")
        m = cell.metrics
        lines.append(
            f"{cell.strategy},{cell.patch_px},{_fmt(m.oa * 100)},{_fmt(m.aa * 100)},"
            f"{_fmt(m.kappa * 100)},{ref}"
        )
    return "\n".join(lines) + "\n"


def grid_text(cells: list[GridCell]) -> str:
    header = f"{'strategy':<9} {'patch':>5} {'OA%':>8} {'AA%':>8} {'Kappa%':>8} {'Houston ref OA%':>16}"
    lines = [header, "-" * len(header)]
    for cell in cells:
        m = cell.metrics
        ref = HOUSTON_GRID_REFERENCE_OA.get((cell.strategy, cell.patch_px))
        lines.append(
            f"{cell.strategy:<9} {cell.patch_px:>4}px {m.oa * 100:>8.2f} {m.aa * 100:>8.2f}"
            f" {m.kappa * 100:>8.2f} {ref if ref is not None else '':>16}"
        )
    return "\n".join(lines) + "\n"


def ablations_csv(rows: list[AblationRow]) -> str:
    lines = ["variant,oa_pct,aa_pct,kappa_pct,houston_full_scale_oa_pct"]
    for row in rows:
        m = row.metrics
        ref = HOUSTON_ABLATION_REFERENCE_OA.get(row.variant, "")
        lines.append(
            f"{row.variant},{_fmt(m.oa * 100)},{_fmt(m.aa * 100)},{_fmt(m.kappa * 100)},{ref}"
        )
    return "\n".join(lines) + "\n"


def ablations_text(rows: list[AblationRow]) -> str:
    header = f"{'variant':<14} {'OA%':>8} {'AA%':>8} {'Kappa%':>8} {'Houston ref OA%':>16}"
    lines = [header, "-" * len(header)]
    for row in rows:
        m = row.metrics
        ref = HOUSTON_ABLATION_REFERENCE_OA.get(row.variant)
        lines.append(
            f"{row.variant:<14} {m.oa * 100:>8.2f} {m.aa * 100:>8.2f} {m.kappa * 100:>8.2f}"
            f" {ref if ref is not None else '':>16}"
        )
    return "\n".join(lines) + "\n"
