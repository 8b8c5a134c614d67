"""CLI: config plumbing, command dispatch, exit codes, artifacts."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from latentbridge.cli import DEFAULTS, dump_toml, load_config, main
from latentbridge.data import read_png, write_png


def _tree_hashes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*.png"))
    }


class TestConfig:
    def test_toml_round_trip(self, tmp_path):
        try:
            import tomllib as toml_reader
        except ModuleNotFoundError:
            import tomli as toml_reader

        text = dump_toml(DEFAULTS)
        parsed = toml_reader.loads(text)
        assert parsed["schedule"]["steps"] == DEFAULTS["schedule"]["steps"]
        assert parsed["sweep"]["fractions"] == DEFAULTS["sweep"]["fractions"]

    def test_config_file_overrides_defaults(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text('seed = 42\n[translate]\nfraction = 0.5\n')
        cfg = load_config(str(path))
        assert cfg["seed"] == 42
        assert cfg["translate"]["fraction"] == 0.5
        assert cfg["translate"]["cfg_scale"] == DEFAULTS["translate"]["cfg_scale"]


class TestExitCodes:
    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--bogus-flag"])
        assert exc.value.code == 2

    def test_missing_checkpoint_exits_1(self, tmp_path, capsys):
        write_png(tmp_path / "in.png", np.zeros((32, 32, 3)) - 0.8)
        code = main(
            [
                "--ckpt-dir", str(tmp_path / "none"),
                "--out-dir", str(tmp_path / "out"),
                "translate", "--in", str(tmp_path / "in.png"), "--class", "0",
            ]
        )
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_missing_data_root_exits_1(self, tmp_path, capsys):
        code = main(
            [
                "--data-root", str(tmp_path / "missing"),
                "--ckpt-dir", str(tmp_path / "none"),
                "train", "codec",
            ]
        )
        assert code == 1


class TestGenData:
    def test_same_seed_twice_gives_identical_trees(self, tmp_path):
        for sub in ("a", "b"):
            code = main(
                [
                    "--data-root", str(tmp_path / sub),
                    "--out-dir", str(tmp_path / f"out-{sub}"),
                    "--seed", "7",
                    "gen-data", "--train", "12", "--test", "6",
                ]
            )
            assert code == 0
        assert _tree_hashes(tmp_path / "a") == _tree_hashes(tmp_path / "b")

    def test_effective_config_echoed(self, tmp_path):
        main(
            [
                "--data-root", str(tmp_path / "d"),
                "--out-dir", str(tmp_path / "out"),
                "gen-data", "--train", "6", "--test", "6",
            ]
        )
        eff = tmp_path / "out" / "gen-data" / "effective.toml"
        assert eff.exists()
        assert "train_per_domain = 6" in eff.read_text()
        hashes = json.loads((tmp_path / "out" / "gen-data" / "hashes.json").read_text())
        assert any(k.endswith("manifest.jsonl") for k in hashes)


class TestVerifyCommand:
    def test_verify_without_checkpoints_passes_fast_checks(self, tmp_path, capsys):
        code = main(
            [
                "--data-root", str(tmp_path / "none"),
                "--ckpt-dir", str(tmp_path / "none"),
                "verify",
            ]
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "[PASS]" in out and "[SKIP]" in out
        assert "[FAIL]" not in out

    def test_verify_with_trained_checkpoints_all_pass(self, trained_stack, capsys):
        code = main(
            [
                "--data-root", str(trained_stack.manifest.root),
                "--ckpt-dir", str(trained_stack.ckpt_dir),
                "verify",
            ]
        )
        out = capsys.readouterr().out
        assert code == 0, out
        assert "[FAIL]" not in out
        assert "[SKIP]" not in out


class TestTranslateCommand:
    def test_translate_writes_png_and_logs_resolved_step(self, trained_stack, tmp_path, capsys):
        src_rec = trained_stack.manifest.select(domain="skeleton", split="test")[0]
        src = Path(trained_stack.manifest.root) / src_rec.path
        out_png = tmp_path / "translated.png"
        code = main(
            [
                "--data-root", str(trained_stack.manifest.root),
                "--ckpt-dir", str(trained_stack.ckpt_dir),
                "--out-dir", str(tmp_path / "out"),
                "translate",
                "--in", str(src),
                "--class", str(src_rec.class_id),
                "--fraction", "0.95",
                "--cfg-scale", "7.5",
                "--out", str(out_png),
            ]
        )
        assert code == 0
        assert out_png.exists()
        logged = capsys.readouterr().out
        assert "k=95" in logged
        img = read_png(out_png)
        assert img.shape == (32, 32, 3)

    def test_generic_template_needs_no_class(self, trained_stack, tmp_path):
        src_rec = trained_stack.manifest.select(domain="skeleton", split="test")[0]
        src = Path(trained_stack.manifest.root) / src_rec.path
        code = main(
            [
                "--ckpt-dir", str(trained_stack.ckpt_dir),
                "--out-dir", str(tmp_path / "out"),
                "translate",
                "--in", str(src),
                "--template", "generic",
                "--fraction", "0.5",
                "--out", str(tmp_path / "g.png"),
            ]
        )
        assert code == 0

    def test_missing_class_for_class_template_exits_1(self, trained_stack, tmp_path):
        src_rec = trained_stack.manifest.select(domain="skeleton", split="test")[0]
        src = Path(trained_stack.manifest.root) / src_rec.path
        code = main(
            [
                "--ckpt-dir", str(trained_stack.ckpt_dir),
                "--out-dir", str(tmp_path / "out"),
                "translate", "--in", str(src),
            ]
        )
        assert code == 1


class TestEvalCommand:
    def test_eval_scores_prediction_directory(self, trained_stack, tmp_path, capsys):
        # score the creature test images named after the skeleton test ids:
        # a perfect-translation stand-in that must earn a finite metrics row
        pred_dir = tmp_path / "preds"
        test = trained_stack.skeleton_test
        ref = trained_stack.creature_test
        for i, stem in enumerate(test.ids):
            write_png(pred_dir / f"{stem}.png", ref.images[i % len(ref)])
        code = main(
            [
                "--data-root", str(trained_stack.manifest.root),
                "--ckpt-dir", str(trained_stack.ckpt_dir),
                "--out-dir", str(tmp_path / "out"),
                "eval", "--pred-dir", str(pred_dir),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "axis_value,fid,kid,all_at1,class_at1,orient_agree" in out
        assert (tmp_path / "out" / "eval" / "metrics.csv").exists()

    def test_missing_prediction_exits_1(self, trained_stack, tmp_path):
        code = main(
            [
                "--data-root", str(trained_stack.manifest.root),
                "--ckpt-dir", str(trained_stack.ckpt_dir),
                "--out-dir", str(tmp_path / "out"),
                "eval", "--pred-dir", str(tmp_path / "empty"),
            ]
        )
        assert code == 1
