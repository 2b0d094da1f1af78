import json
import time

import numpy as np
import pytest

from movla.cli import main

from conftest import SMOKE_FAMILY, SMOKE_WORLD


def run(*argv):
    return main(list(argv))


class TestDispatch:
    def test_help_exits_zero(self, capsys):
        assert run("--help") == 0
        assert "gen-data" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self, capsys):
        assert run("gen-data", "--bogus-flag", "1", "--count", "1", "--out", "x") == 2
        err = capsys.readouterr().err
        assert "--bogus-flag" in err

    def test_unknown_subcommand_exits_two(self):
        assert run("frobnicate") == 2

    def test_runtime_failure_exits_one(self, tmp_path, capsys):
        assert run("train-vq", "--data", str(tmp_path / "missing"), "--out",
                   str(tmp_path / "vq.mvc")) == 1
        assert "error:" in capsys.readouterr().err


class TestGenData:
    def test_generates_dataset_and_manifest(self, tmp_path):
        out = tmp_path / "ds"
        assert run("gen-data", "--count", "3", "--seed", "5", "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["count"] == 3
        assert (out / "ep_00000.bin").exists()
        assert (out / "run_manifest.json").exists()

    def test_write_once_refused(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert run("gen-data", "--count", "1", "--out", str(out)) == 0
        assert run("gen-data", "--count", "1", "--out", str(out)) == 1
        assert "write-once" in capsys.readouterr().err

    def test_task_spec_file(self, tmp_path):
        spec = tmp_path / "tasks.json"
        spec.write_text(json.dumps({
            "family": {"kinds": ["push"], "directions": ["left", "right"],
                       "colors": [0, 1, 2, 3],
                       "regions": ["left", "right", "top", "bottom", "center"],
                       "n_objects": 2},
            "world": {"frame_hw": 16},
        }))
        out = tmp_path / "ds"
        assert run("gen-data", "--tasks", str(spec), "--count", "2", "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["family"]["kinds"] == ["push"]
        assert manifest["world"]["frame_hw"] == 16
        assert all("push" in e["instruction"] for e in manifest["episodes"])

    def test_run_manifest_fields(self, tmp_path):
        out = tmp_path / "ds"
        run("gen-data", "--count", "1", "--seed", "9", "--out", str(out))
        rm = json.loads((out / "run_manifest.json").read_text())
        assert rm["seed"] == 9
        assert rm["command"][0] == "movla"
        assert "dataset_hash" in rm and "git_revision" in rm and "wall_time_s" in rm


class TestMicroPipeline:
    def test_full_pipeline_smoke(self, tmp_path, micro_world):
        """gen-data -> train-vq -> train-acttok -> train-lme -> extract-motion ->
        pretrain -> finetune -> eval -> diagnose leakage, end to end via the CLI."""
        t0 = time.monotonic()
        data = tmp_path / "data"
        spec = tmp_path / "tasks.json"
        spec.write_text(json.dumps({
            "family": {"kinds": ["place", "push"], "colors": [0, 1, 2, 3],
                       "regions": ["left", "right", "top", "bottom", "center"],
                       "directions": ["left", "right", "up", "down"],
                       "n_objects": 2, "lattice": 5},
            "world": SMOKE_WORLD.__dict__,
        }))
        assert run("gen-data", "--tasks", str(spec), "--count", "25", "--seed", "1",
                   "--out", str(data)) == 0
        vq = tmp_path / "vq.mvc"
        assert run("train-vq", "--data", str(data), "--out", str(vq), "--codebook", "16",
                   "--steps", "60", "--max-frames", "300") == 0
        assert vq.exists() and vq.with_suffix(".loss.csv").exists()
        tok = tmp_path / "acttok.mvc"
        assert run("train-acttok", "--data", str(data), "--la", "4", "--out", str(tok)) == 0
        lme = tmp_path / "lme.mvc"
        assert run("train-lme", "--data", str(data), "--out", str(lme), "--steps", "40") == 0
        cache = tmp_path / "cache.mvc"
        assert run("extract-motion", "--data", str(data), "--lme", str(lme),
                   "--window", "8", "--out", str(cache)) == 0
        pre = tmp_path / "pre"
        assert run("pretrain", "--data", str(data), "--vq", str(vq), "--acttok", str(tok),
                   "--lme", str(lme), "--out", str(pre),
                   "--set", "steps=4", "--set", "batch_size=4", "--set", "width=32",
                   "--set", "layers=1", "--set", "max_len=96") == 0
        ft = tmp_path / "ft"
        assert run("finetune", "--data", str(data), "--vq", str(vq), "--acttok", str(tok),
                   "--lme", str(lme), "--out", str(ft), "--init", str(pre / "pretrain.mvc"),
                   "--set", "steps=4", "--set", "batch_size=4", "--set", "width=32",
                   "--set", "layers=1", "--set", "max_len=96") == 0
        ev = tmp_path / "eval"
        assert run("eval", "--ckpt", str(ft / "cofinetune.mvc"), "--vq", str(vq),
                   "--acttok", str(tok), "--suite", str(spec), "--episodes", "2",
                   "--seeds", "0,1", "--out", str(ev)) == 0
        report = json.loads((ev / "success.json").read_text())
        assert 0.0 <= report["mean"] <= 1.0
        assert (ev / "success.csv").exists()
        dg = tmp_path / "leak"
        assert run("diagnose", "leakage", "--ckpt", str(ft / "cofinetune.mvc"),
                   "--probes", "5", "--out", str(dg)) == 0
        assert json.loads((dg / "leakage.json").read_text())["passed"]
        assert time.monotonic() - t0 < 1800  # the documented half-hour pipeline bound

    def test_diagnose_cross_recon_and_clusters(self, tmp_path, micro_world):
        spec = tmp_path / "tasks.json"
        spec.write_text(json.dumps({
            "family": {"kinds": ["place", "push"], "colors": [0, 1, 2, 3],
                       "regions": ["left", "right", "top", "bottom", "center"],
                       "directions": ["left", "right", "up", "down"],
                       "n_objects": 2, "lattice": 0},
            "world": SMOKE_WORLD.__dict__,
        }))
        cr = tmp_path / "cr"
        assert run("diagnose", "cross-recon", "--lme", str(micro_world["lme_path"]),
                   "--suite", str(spec), "--pairs", "2", "--plots", "--out", str(cr)) == 0
        assert (cr / "cross_recon.json").exists()
        assert (cr / "heat_max_1.pgm").exists()
        cl = tmp_path / "cl"
        assert run("diagnose", "clusters", "--lme", str(micro_world["lme_path"]),
                   "--data", str(micro_world["dataset_dir"]), "--k", "2",
                   "--out", str(cl)) == 0
        assert json.loads((cl / "clusters.json").read_text())["clusters"]

    def test_sweep_cli(self, tmp_path, micro_world):
        out = tmp_path / "sweep"
        spec = tmp_path / "tasks.json"
        spec.write_text(json.dumps({
            "family": {"kinds": ["place"], "colors": [0, 1, 2, 3],
                       "regions": ["center"], "directions": ["left"],
                       "n_objects": 2, "lattice": 5},
            "world": SMOKE_WORLD.__dict__,
        }))
        assert run(
            "sweep", "--axis", "lambda1", "--values", "0.0,0.1", "--seeds", "0,1,2",
            "--data", str(micro_world["dataset_dir"]), "--vq", str(micro_world["vq_path"]),
            "--acttok", str(micro_world["acttok_path"]), "--lme", str(micro_world["lme_path"]),
            "--suite", str(spec), "--episodes", "2", "--pre-steps", "2",
            "--set", "steps=2", "--set", "batch_size=4", "--set", "width=32",
            "--set", "layers=1", "--set", "max_len=96",
            "--out", str(out),
        ) == 0
        report = json.loads((out / "sweep.json").read_text())
        assert len(report["rows"]) == 2
        assert all(r["n_seeds"] == 3 for r in report["rows"])
