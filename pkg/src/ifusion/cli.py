"""Command-line surface: synth, train, eval, grid, ablate, export-attn.

A run config is one JSON document with strict keys:

    {
      "model":  {IfConfig fields},
      "train":  {TrainConfig fields},
      "data":   {"hsi": path, "lidar": path | [path, path], "labels": path,
                 "split": path}            -- or --  {"synth": {SynthSpec fields}},
      "output": {"dir": path}
    }

Unknown keys anywhere are rejected.  The environment variable ``IF_SEED``
overrides both the training seed and an inline synth seed (logged when used).
Exit codes: 0 success, 2 configuration/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Cube,
    LabelMap,
    NormStats,
    SplitSpec,
    SynthSpec,
    concat_lidar,
    extract_window,
    gen_synth,
    load_cube,
    load_labels,
    load_split,
    normalize,
    prepare_samples,
    save_cube,
    save_labels,
    save_split,
)
from .errors import ConfigError, FormatError, IfusionError, NonFiniteError, TrainingAbort
from .model import (
    IfConfig,
    IfModel,
    SampleWindow,
    checkpoint_load,
    checkpoint_save,
    make_center_input,
)
from .train import (
    TrainConfig,
    ablations_csv,
    ablations_text,
    evaluate,
    grid_csv,
    grid_text,
    metrics,
    metrics_csv,
    metrics_text,
    run_ablations,
    run_grid,
    train,
)

_MODEL_KEYS = {
    "patch_side", "hsi_bands", "lidar_bands", "embed_dim", "heads", "ffn_dim",
    "total_depth", "stage1_depth", "num_classes", "strategy", "ablation", "positional",
}
_TRAIN_KEYS = {
    "learning_rate", "beta1", "beta2", "eps", "epochs", "batch_size", "seed",
    "clip_norm", "early_stop_loss",
}
_DATA_KEYS = {"hsi", "lidar", "labels", "split", "synth"}
_SYNTH_KEYS = {
    "classes", "height", "width", "hsi_bands", "lidar_bands", "signatures",
    "altitudes", "noise_std", "seed", "train_per_class", "test_per_class",
}


def _strict(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


@dataclass
class RunConfig:
    model: IfConfig
    train: TrainConfig
    data: dict
    out_dir: Path


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def parse_synth_spec(doc: dict, where: str = "synth spec") -> SynthSpec:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    _strict(doc, _SYNTH_KEYS, where)
    missing = sorted(_SYNTH_KEYS - {"test_per_class"} - set(doc))
    if missing:
        raise ConfigError(f"{where} is missing keys: {missing}")
    try:
        return SynthSpec(**doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    _strict(doc, {"model", "train", "data", "output"}, "run config")
    for key in ("model", "train", "data", "output"):
        if key not in doc:
            raise ConfigError(f"{path}: missing section {key!r}")

    _strict(doc["model"], _MODEL_KEYS, "model section")
    try:
        model_cfg = IfConfig(**doc["model"])
    except TypeError as exc:
        raise ConfigError(f"model section: {exc}") from exc

    _strict(doc["train"], _TRAIN_KEYS, "train section")
    try:
        train_cfg = TrainConfig(**doc["train"])
    except TypeError as exc:
        raise ConfigError(f"train section: {exc}") from exc

    data = doc["data"]
    _strict(data, _DATA_KEYS, "data section")
    if "synth" in data:
        if set(data) != {"synth"}:
            raise ConfigError("data section uses either inline 'synth' or file paths, not both")
        parse_synth_spec(data["synth"])
    else:
        needed = {"hsi", "lidar", "labels", "split"}
        missing = sorted(needed - set(data))
        if missing:
            raise ConfigError(f"data section missing keys: {missing}")
        paths = [data["hsi"], data["labels"], data["split"]]
        paths += data["lidar"] if isinstance(data["lidar"], list) else [data["lidar"]]
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"data path does not exist: {p}")

    _strict(doc["output"], {"dir"}, "output section")
    if "dir" not in doc["output"]:
        raise ConfigError("output section needs a 'dir'")

    cfg = RunConfig(
        model=model_cfg,
        train=train_cfg,
        data=data,
        out_dir=Path(doc["output"]["dir"]),
    )
    _apply_seed_env(cfg)
    return cfg


def _apply_seed_env(cfg: RunConfig) -> None:
    env = os.environ.get("IF_SEED")
    if env is None:
        return
    try:
        seed = int(env)
    except ValueError as exc:
        raise ConfigError(f"IF_SEED must be an integer, got {env!r}") from exc
    print(f"IF_SEED={seed} overrides configured seeds")
    cfg.train.seed = seed
    if "synth" in cfg.data:
        cfg.data["synth"]["seed"] = seed


def load_dataset(cfg: RunConfig) -> tuple[Cube, Cube, LabelMap, SplitSpec]:
    data = cfg.data
    if "synth" in data:
        return gen_synth(parse_synth_spec(data["synth"]))
    hsi = load_cube(data["hsi"])
    if isinstance(data["lidar"], list):
        cubes = [load_cube(p) for p in data["lidar"]]
        lidar = cubes[0]
        for extra in cubes[1:]:
            lidar = concat_lidar(lidar, extra)
    else:
        lidar = load_cube(data["lidar"])
    labels = load_labels(data["labels"])
    split = load_split(data["split"])
    split.validate_labels(labels)
    return hsi, lidar, labels, split


def _check_dims(cfg: RunConfig, hsi: Cube, lidar: Cube) -> None:
    if hsi.bands != cfg.model.hsi_bands:
        raise ConfigError(f"config says {cfg.model.hsi_bands} HSI bands, cube has {hsi.bands}")
    if lidar.bands != cfg.model.lidar_bands:
        raise ConfigError(f"config says {cfg.model.lidar_bands} LiDAR bands, cube has {lidar.bands}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = parse_synth_spec(_load_json(args.spec))
    env = os.environ.get("IF_SEED")
    if env is not None:
        try:
            spec.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"IF_SEED must be an integer, got {env!r}") from exc
        print(f"IF_SEED={spec.seed} overrides synth seed")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hsi, lidar, labels, split = gen_synth(spec)
    save_cube(hsi, out / "hsi.ifc")
    save_cube(lidar, out / "lidar.ifc")
    save_labels(labels, out / "labels.ifl")
    save_split(split, out / "split.json")
    print(
        f"wrote {out}/hsi.ifc ({hsi.bands}x{hsi.height}x{hsi.width}), lidar.ifc, labels.ifl, "
        f"split.json ({split.train_count()} train / {split.test_count()} test)"
    )
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    hsi, lidar, labels, split = load_dataset(cfg)
    _check_dims(cfg, hsi, lidar)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    train_set, test_set, _, _ = prepare_samples(hsi, lidar, labels, split, cfg.model)
    model = IfModel(cfg.model, seed=cfg.train.seed)
    logs = train(model, train_set, cfg.train)
    checkpoint_save(model, cfg.out_dir / "model.ifm")
    with open(cfg.out_dir / "log.jsonl", "w", encoding="utf-8") as fh:
        for entry in logs:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    m = metrics(evaluate(model, test_set))
    (cfg.out_dir / "metrics.csv").write_text(metrics_csv(m), encoding="utf-8")
    print(metrics_text(m), end="")
    print(f"checkpoint: {cfg.out_dir / 'model.ifm'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    hsi, lidar, labels, split = load_dataset(cfg)
    _check_dims(cfg, hsi, lidar)
    _, test_set, _, _ = prepare_samples(hsi, lidar, labels, split, cfg.model)
    model = IfModel(cfg.model, seed=cfg.train.seed)
    checkpoint_load(model, args.checkpoint)
    m = metrics(evaluate(model, test_set))
    print(metrics_text(m), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(m), encoding="utf-8")
    return 0


def cmd_grid(args) -> int:
    cfg = load_run_config(args.config)
    hsi, lidar, labels, split = load_dataset(cfg)
    _check_dims(cfg, hsi, lidar)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cells = run_grid(cfg.model, cfg.train, hsi, lidar, labels, split)
    (cfg.out_dir / "grid.csv").write_text(grid_csv(cells), encoding="utf-8")
    (cfg.out_dir / "grid.txt").write_text(grid_text(cells), encoding="utf-8")
    print(grid_text(cells), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    hsi, lidar, labels, split = load_dataset(cfg)
    _check_dims(cfg, hsi, lidar)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_ablations(cfg.model, cfg.train, hsi, lidar, labels, split)
    (cfg.out_dir / "ablations.csv").write_text(ablations_csv(rows), encoding="utf-8")
    (cfg.out_dir / "ablations.txt").write_text(ablations_text(rows), encoding="utf-8")
    print(ablations_text(rows), end="")
    return 0


def _fmt_float(v: float) -> str:
    return repr(float(v))


def cmd_export_attn(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.model.ablation == "hsi_only":
        raise ConfigError("export-attn needs a fusion variant (hsi_only has no view grid)")
    try:
        r, c = (int(v) for v in args.pixel.split(","))
    except ValueError as exc:
        raise ConfigError(f"--pixel wants 'row,col', got {args.pixel!r}") from exc
    hsi, lidar, labels, split = load_dataset(cfg)
    _check_dims(cfg, hsi, lidar)

    train_px = [px for cls in split.classes for px in cls.train]
    hsi_n = normalize(hsi, NormStats.from_pixels(hsi, train_px))
    lidar_n = normalize(lidar, NormStats.from_pixels(lidar, train_px))
    side = cfg.model.window_side
    x_h1 = extract_window(hsi_n, r, c, side)
    sample = SampleWindow(
        x_h1=x_h1,
        x_h2=make_center_input(x_h1),
        x_l=extract_window(lidar_n, r, c, side),
        label=0,
    )

    model = IfModel(cfg.model, seed=cfg.train.seed)
    checkpoint_load(model, args.checkpoint)
    res = model.forward(sample)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = len(res.branches)
    for i in range(g):
        for j in range(g):
            amap = res.attn[i][j][0]  # (heads, T, T)
            _write_csv(out / f"attn_{i + 1}_{j + 1}.csv", amap.mean(axis=0))
            if args.per_head:
                for h in range(amap.shape[0]):
                    _write_csv(out / f"attn_{i + 1}_{j + 1}_head{h}.csv", amap[h])
    _write_csv(out / "integrated.csv", res.integrated)
    meta = {
        "branches": {str(i + 1): name for i, name in enumerate(res.branches)},
        "pixel": [r, c],
        "tokens": res.integrated.shape[0],
        "predicted_class": res.logits.argmax() + 1,
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
    print(f"wrote {g * g} attention maps, integrated.csv and meta.json under {out}")
    return 0


def _write_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix:
            fh.write(",".join(_fmt_float(v) for v in row) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene from a spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint/metrics/logs")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grid", help="fusion-strategy x patch-size experiment table")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("ablate", help="full/no-context/concat/hsi-only comparison")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("export-attn", help="dump the view-grid attention maps at a pixel")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pixel", required=True, metavar="R,C")
    p.add_argument("--out", required=True)
    p.add_argument("--per-head", action="store_true")
    p.set_defaults(fn=cmd_export_attn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, TrainingAbort) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if isinstance(exc, TrainingAbort) and exc.param_norms:
            worst = sorted(exc.param_norms.items(), key=lambda kv: -kv[1])[:5]
            for name, norm in worst:
                print(f"  |{name}| = {norm:.3e}", file=sys.stderr)
            print(f"  last batch indices: {exc.batch_indices[:8]}", file=sys.stderr)
        return 3
    except IfusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
