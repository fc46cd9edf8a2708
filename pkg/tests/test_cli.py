import json

import pytest

from evimark.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


WORLD_SPEC = {"vocab_size": 64, "dim": 24, "n_entities": 8, "n_scenes": 3,
              "entities_per_scene": 2, "n_determiners": 4, "n_nouns": 12,
              "n_adjectives": 8, "seed": 9}


@pytest.fixture()
def world_dir(tmp_path, capsys):
    cfg = tmp_path / "world.json"
    cfg.write_text(json.dumps(WORLD_SPEC))
    out = tmp_path / "world"
    code, stdout, _ = run_cli(capsys, "world", "build", "--config", str(cfg),
                              "--out", str(out))
    assert code == 0
    assert json.loads(stdout)["vocab_size"] == 64
    return out


class TestCliPipeline:
    def test_world_build_artifacts(self, world_dir):
        for name in ("toylm.bin", "captions.txt", "scenes.json",
                     "synonyms.txt", "world_spec.json"):
            assert (world_dir / name).exists()

    def test_prefix_train(self, world_dir, tmp_path, capsys):
        out = tmp_path / "prefix"
        code, stdout, _ = run_cli(capsys, "prefix", "train", "--world",
                                  str(world_dir), "--scene", "0",
                                  "--steps", "40", "--lr", "0.5",
                                  "--out", str(out))
        assert code == 0
        info = json.loads(stdout)
        assert info["steps"] == 40
        assert (out / "prefix.txt").exists()
        assert (out / "trace.csv").exists()

    def test_generate_detect_attack_roundtrip(self, world_dir, tmp_path, capsys):
        runs = tmp_path / "runs.jsonl"
        toks = tmp_path / "tokens.txt"
        code, stdout, _ = run_cli(
            capsys, "generate", "--world", str(world_dir), "--texts", "4",
            "--max-tokens", "150", "--key", "cli-key", "--seed", "5",
            "--out", str(runs), "--tokens-out", str(toks))
        assert code == 0
        lines = runs.read_text().strip().splitlines()
        metas = [json.loads(l) for l in lines if json.loads(l)["type"] == "run_meta"]
        assert len(metas) == 4
        assert b"cli-key" not in runs.read_bytes()

        rep = tmp_path / "detect.jsonl"
        code, stdout, _ = run_cli(
            capsys, "detect", "--tokens", str(toks), "--key", "cli-key",
            "--vocab-size", "64", "--threshold", "2.0", "--out", str(rep))
        assert code == 0
        info = json.loads(stdout)
        assert info["texts"] == 4
        assert info["mean_z"] > 2.0
        assert info["watermarked"] >= 2

        attacked = tmp_path / "attacked.txt"
        code, stdout, _ = run_cli(
            capsys, "attack", "--tokens", str(toks), "--world", str(world_dir),
            "--kind", "delete", "--rate", "0.05", "--out", str(attacked))
        assert code == 0
        out_lines = attacked.read_text().strip().splitlines()
        assert len(out_lines) == 4
        assert len(out_lines[0].split()) == 143

    def test_wrong_key_scores_low(self, world_dir, tmp_path, capsys):
        toks = tmp_path / "tokens.txt"
        run_cli(capsys, "generate", "--world", str(world_dir), "--texts", "4",
                "--max-tokens", "150", "--key", "cli-key", "--seed", "5",
                "--out", str(tmp_path / "r.jsonl"), "--tokens-out", str(toks))
        rep = tmp_path / "detect2.jsonl"
        code, stdout, _ = run_cli(
            capsys, "detect", "--tokens", str(toks), "--key", "other-key",
            "--vocab-size", "64", "--out", str(rep))
        assert code == 0
        assert abs(json.loads(stdout)["mean_z"]) < 2.0

    def test_eval_run(self, tmp_path, capsys):
        cfg = {"world": WORLD_SPEC,
               "train": {"learning_rate": 0.5, "steps": 60},
               "texts_per_condition": 5, "tokens_per_text": 50,
               "master_seed": 2,
               "attacks": [{"kind": "insert", "rate": 0.05, "seed": 1}]}
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "eval"
        code, stdout, _ = run_cli(capsys, "eval", "run", "--config",
                                  str(cfg_path), "--out", str(out))
        assert code == 0
        assert (out / "report.json").exists()
        info = json.loads(stdout)
        assert 0.0 <= info["baseline_auc"] <= 1.0

    def test_eval_ablate_adds_conditions(self, tmp_path, capsys):
        cfg = {"world": WORLD_SPEC,
               "train": {"learning_rate": 0.5, "steps": 60},
               "texts_per_condition": 4, "tokens_per_text": 40, "master_seed": 3}
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "ablate"
        code, stdout, _ = run_cli(capsys, "eval", "ablate", "--config",
                                  str(cfg_path), "--out", str(out))
        assert code == 0
        conds = json.loads(stdout)["conditions"]
        for name in ("disable_swap", "disable_calibration", "uniform_bias",
                     "fixed_entropy", "baseline"):
            assert name in conds

    def test_bench(self, tmp_path, capsys):
        cfg = {"world": {"vocab_size": 128, "dim": 32, "n_entities": 8,
                         "n_scenes": 2, "entities_per_scene": 2,
                         "n_determiners": 4, "n_nouns": 12, "n_adjectives": 8},
               "train": {"learning_rate": 0.5, "steps": 40},
               "lengths": [40, 80], "repeats_per_length": 4,
               "probe_vocab_sizes": [256, 512], "probe_steps": 20,
               "accounting_world": {"vocab_size": 256, "dim": 32, "n_entities": 8,
                                    "n_scenes": 1, "entities_per_scene": 2,
                                    "n_determiners": 4, "n_nouns": 12,
                                    "n_adjectives": 8},
               "accounting_steps": 60, "accounting_repeats": 2}
        cfg_path = tmp_path / "bench.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "bench"
        code, stdout, _ = run_cli(capsys, "bench", "--config", str(cfg_path),
                                  "--out", str(out))
        assert code == 0
        report = json.loads((out / "timing.json").read_text())
        assert "nlogn_fit_r2" in report

    def test_failure_emits_error_record(self, tmp_path, capsys):
        code, stdout, stderr = run_cli(
            capsys, "detect", "--tokens", str(tmp_path / "missing.txt"),
            "--key", "k", "--vocab-size", "64",
            "--out", str(tmp_path / "out.jsonl"))
        assert code == 1
        record = json.loads(stderr.strip())
        assert record["error"] == "FileNotFoundError"
        assert "message" in record
