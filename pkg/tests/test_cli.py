import json

import numpy as np
import pytest

from ifusion.cli import main
from ifusion.model import read_manifest

SYNTH_SPEC = {
    "classes": 3,
    "height": 12,
    "width": 12,
    "hsi_bands": 4,
    "lidar_bands": 1,
    "signatures": [[1, 0, 0, 0], [0, 1, 0, 0], [0, 1, 0, 0]],
    "altitudes": [0.0, 0.0, 1.0],
    "noise_std": 0.1,
    "seed": 99,
    "train_per_class": 10,
    "test_per_class": [12, 12, 12],
}


def run_config(tmp_path, name="run.json", **over):
    doc = {
        "model": {
            "patch_side": 1,
            "hsi_bands": 4,
            "lidar_bands": 1,
            "embed_dim": 8,
            "heads": 2,
            "ffn_dim": 8,
            "total_depth": 3,
            "strategy": "middle",
            "num_classes": 3,
            "ablation": "none",
        },
        "train": {"epochs": 2, "batch_size": 8, "seed": 5, "learning_rate": 0.002},
        "data": {"synth": dict(SYNTH_SPEC)},
        "output": {"dir": str(tmp_path / "out")},
    }
    for key, val in over.items():
        section, _, leaf = key.partition(".")
        if leaf:
            doc[section][leaf] = val
        else:
            doc[section] = val
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class TestSynthCommand:
    def test_deterministic_bytes(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(SYNTH_SPEC))
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "a")]) == 0
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "b")]) == 0
        for name in ("hsi.ifc", "lidar.ifc", "labels.ifl", "split.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_split_totals_match_spec(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(SYNTH_SPEC))
        main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "d")])
        split = json.loads((tmp_path / "d" / "split.json").read_text())
        assert sum(len(c["train"]) for c in split["classes"]) == 30
        assert sum(len(c["test"]) for c in split["classes"]) == 36

    def test_capacity_error_exit_2(self, tmp_path, capsys):
        bad = dict(SYNTH_SPEC, classes=30, signatures=[[1, 0, 0, 0]] * 30, altitudes=list(range(30)))
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(bad))
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "x")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(dict(SYNTH_SPEC, wibble=1)))
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "x")]) == 2

    def test_bad_if_seed_env_exit_2(self, tmp_path, monkeypatch, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(SYNTH_SPEC))
        monkeypatch.setenv("IF_SEED", "not-a-number")
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "x")]) == 2
        assert "IF_SEED" in capsys.readouterr().err


class TestTrainCommand:
    def test_outputs_and_depth_allocation(self, tmp_path):
        cfg = run_config(tmp_path, **{"model.strategy": "early"})
        assert main(["train", "--config", str(cfg)]) == 0
        out = tmp_path / "out"
        names = {e["name"] for e in read_manifest(out / "model.ifm")}
        assert not any(n.startswith("stage1.") and ".block" in n for n in names)
        assert any(n.startswith("stage3.block0.") for n in names)
        assert any(n.startswith("stage3.block1.") for n in names)
        assert (out / "metrics.csv").exists()
        log_lines = (out / "log.jsonl").read_text().strip().splitlines()
        assert len(log_lines) == 2
        assert set(json.loads(log_lines[0])) == {"epoch", "loss", "train_oa"}

    def test_late_strategy_blocks(self, tmp_path):
        cfg = run_config(tmp_path, **{"model.strategy": "late"})
        assert main(["train", "--config", str(cfg)]) == 0
        names = {e["name"] for e in read_manifest(tmp_path / "out" / "model.ifm")}
        for branch in ("h1", "h2", "l"):
            assert any(n.startswith(f"stage1.{branch}.block1.") for n in names)
        assert not any(n.startswith("stage3.block") for n in names)

    def test_rerun_identical_outputs(self, tmp_path):
        cfg1 = run_config(tmp_path, name="run1.json", output={"dir": str(tmp_path / "r1")})
        cfg2 = run_config(tmp_path, name="run2.json", output={"dir": str(tmp_path / "r2")})
        assert main(["train", "--config", str(cfg1)]) == 0
        assert main(["train", "--config", str(cfg2)]) == 0
        for name in ("model.ifm", "metrics.csv", "log.jsonl"):
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        cfg = run_config(tmp_path, **{"train.momentum": 0.9})
        assert main(["train", "--config", str(cfg)]) == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_missing_data_path_exit_2(self, tmp_path):
        cfg = run_config(
            tmp_path,
            data={"hsi": "/nope.ifc", "lidar": "/nope2.ifc", "labels": "/n.ifl", "split": "/s.json"},
        )
        assert main(["train", "--config", str(cfg)]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort_exit_3(self, tmp_path, capsys):
        cfg = run_config(tmp_path, **{"train.learning_rate": 1e150})
        assert main(["train", "--config", str(cfg)]) == 3
        err = capsys.readouterr().err
        assert "numeric failure" in err

    def test_if_seed_env_override(self, tmp_path, monkeypatch, capsys):
        cfg1 = run_config(tmp_path, name="run1.json", output={"dir": str(tmp_path / "e1")})
        monkeypatch.setenv("IF_SEED", "123")
        assert main(["train", "--config", str(cfg1)]) == 0
        assert "IF_SEED=123" in capsys.readouterr().out
        monkeypatch.delenv("IF_SEED")
        cfg2 = run_config(tmp_path, name="run2.json", output={"dir": str(tmp_path / "e2")})
        assert main(["train", "--config", str(cfg2)]) == 0
        assert (tmp_path / "e1" / "model.ifm").read_bytes() != (
            tmp_path / "e2" / "model.ifm"
        ).read_bytes()


class TestEvalCommand:
    def test_eval_reproduces_train_metrics(self, tmp_path, capsys):
        cfg = run_config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == 0
        train_metrics = (tmp_path / "out" / "metrics.csv").read_text()
        capsys.readouterr()
        assert main([
            "eval", "--config", str(cfg),
            "--checkpoint", str(tmp_path / "out" / "model.ifm"),
            "--out", str(tmp_path / "eval_out"),
        ]) == 0
        assert (tmp_path / "eval_out" / "metrics.csv").read_text() == train_metrics
        printed = capsys.readouterr().out
        assert "oa" in printed and "kappa" in printed

    def test_per_class_row_count(self, tmp_path):
        cfg = run_config(tmp_path)
        main(["train", "--config", str(cfg)])
        rows = (tmp_path / "out" / "metrics.csv").read_text().strip().splitlines()
        class_rows = [r for r in rows if r.startswith("class_")]
        assert len(class_rows) == 3

    def test_checkpoint_from_other_dims_exit_2(self, tmp_path, capsys):
        cfg = run_config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == 0
        other = run_config(
            tmp_path, name="other.json", **{"model.embed_dim": 16}, output={"dir": str(tmp_path / "o2")}
        )
        assert main([
            "eval", "--config", str(other),
            "--checkpoint", str(tmp_path / "out" / "model.ifm"),
        ]) == 2
        assert "shape" in capsys.readouterr().err


class TestExportAttn:
    def _train(self, tmp_path, **over):
        cfg = run_config(tmp_path, **over)
        assert main(["train", "--config", str(cfg)]) == 0
        return cfg

    def test_nine_files_and_row_sums(self, tmp_path):
        cfg = self._train(tmp_path)
        out = tmp_path / "attn"
        assert main([
            "export-attn", "--config", str(cfg),
            "--checkpoint", str(tmp_path / "out" / "model.ifm"),
            "--pixel", "5,5", "--out", str(out),
        ]) == 0
        files = sorted(p.name for p in out.glob("attn_*.csv"))
        assert len(files) == 9
        for f in files:
            rows = [[float(v) for v in line.split(",")] for line in (out / f).read_text().splitlines()]
            arr = np.array(rows)
            assert arr.shape == (10, 10)
            np.testing.assert_allclose(arr.sum(axis=1), 1.0, atol=1e-6)
        integrated = (out / "integrated.csv").read_text().strip().splitlines()
        assert len(integrated) == 10 and len(integrated[0].split(",")) == 8
        meta = json.loads((out / "meta.json").read_text())
        assert meta["branches"] == {"1": "h1", "2": "h2", "3": "l"}

    def test_no_context_exports_four(self, tmp_path):
        cfg = self._train(tmp_path, **{"model.ablation": "no_context"})
        out = tmp_path / "attn"
        assert main([
            "export-attn", "--config", str(cfg),
            "--checkpoint", str(tmp_path / "out" / "model.ifm"),
            "--pixel", "3,4", "--out", str(out),
        ]) == 0
        assert len(list(out.glob("attn_*.csv"))) == 4
        meta = json.loads((out / "meta.json").read_text())
        assert meta["branches"] == {"1": "h1", "2": "l"}

    def test_per_head_flag(self, tmp_path):
        cfg = self._train(tmp_path)
        out = tmp_path / "attn_heads"
        assert main([
            "export-attn", "--config", str(cfg),
            "--checkpoint", str(tmp_path / "out" / "model.ifm"),
            "--pixel", "0,0", "--out", str(out), "--per-head",
        ]) == 0
        assert len(list(out.glob("attn_1_1_head*.csv"))) == 2

    def test_out_of_bounds_pixel_exit_2(self, tmp_path):
        cfg = self._train(tmp_path)
        assert main([
            "export-attn", "--config", str(cfg),
            "--checkpoint", str(tmp_path / "out" / "model.ifm"),
            "--pixel", "99,0", "--out", str(tmp_path / "x"),
        ]) == 2

    def test_hsi_only_rejected(self, tmp_path):
        cfg = self._train(tmp_path, **{"model.ablation": "hsi_only"})
        assert main([
            "export-attn", "--config", str(cfg),
            "--checkpoint", str(tmp_path / "out" / "model.ifm"),
            "--pixel", "1,1", "--out", str(tmp_path / "x"),
        ]) == 2


class TestFileBasedData:
    def test_synth_files_then_train(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(SYNTH_SPEC))
        main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "d")])
        cfg = run_config(
            tmp_path,
            data={
                "hsi": str(tmp_path / "d" / "hsi.ifc"),
                "lidar": str(tmp_path / "d" / "lidar.ifc"),
                "labels": str(tmp_path / "d" / "labels.ifl"),
                "split": str(tmp_path / "d" / "split.json"),
            },
        )
        assert main(["train", "--config", str(cfg)]) == 0

    def test_lidar_list_concatenation(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(SYNTH_SPEC))
        main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "d")])
        cfg = run_config(
            tmp_path,
            data={
                "hsi": str(tmp_path / "d" / "hsi.ifc"),
                "lidar": [str(tmp_path / "d" / "lidar.ifc"), str(tmp_path / "d" / "lidar.ifc")],
                "labels": str(tmp_path / "d" / "labels.ifl"),
                "split": str(tmp_path / "d" / "split.json"),
            },
            **{"model.lidar_bands": 2},
        )
        assert main(["train", "--config", str(cfg)]) == 0
