import json
import subprocess
import sys

import pytest
import yaml

from wsnas import search
from wsnas.cli import main
from wsnas.config import ConfigError, load_config

SMALL = {
    "space": {"num_layers": 3, "num_ops": 3, "hidden": 8},
    "task": {"vocab": 12, "seq_len": 8},
    "train": {"steps": 12, "steps_per_epoch": 4, "batch_size": 4, "warmup_steps": 2, "probe_pool": 4,
              "val_batches": 1, "val_batch_size": 4},
    "standalone": {"steps": 10, "batch_size": 4, "warmup_steps": 2, "val_batches": 1, "val_batch_size": 4},
    "analysis": {"m_max": 2, "repeats": 2, "batch_size": 4, "sweep_layers": [1, 2]},
    "rank": {"children": 3, "val_batches": 1, "val_batch_size": 4},
    "search": {"probe_paths": 4, "val_batches": 1, "val_batch_size": 4, "deletions_per_epoch": 1},
    "mixing": {"t_max": 10},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return str(path)


def run(tmp_path, *argv):
    return main(["--out", str(tmp_path / "runs"), *argv])


def artifacts(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if not p.name.endswith(".meta.json")}


def test_load_config_rules(config):
    cfg = load_config(config, ["train.method=magic_at", "train.align.lam=0.25"], require_method=True)
    assert cfg.train.align.lam == 0.25 and cfg.train.method == "magic_at"
    assert cfg.space.num_layers == 3
    with pytest.raises(ConfigError, match="unknown"):
        load_config(config, ["train.lamda=0.1"])
    with pytest.raises(ConfigError, match="method"):
        load_config(config, [], require_method=True)
    with pytest.raises(ConfigError):
        load_config(config, ["train.method=magic_a", "train.align.lam=-1"])


def test_train_requires_method(tmp_path, config):
    assert run(tmp_path, "train", "--config", config) == 2


def test_unknown_key_exit_code(tmp_path, config):
    assert run(tmp_path, "train", "--config", config, "--method", "spos", "--set", "train.stepz=3") == 2


def test_bad_arguments_exit_code(tmp_path):
    assert run(tmp_path, "bogus") == 2
    assert run(tmp_path, "standalone", "--child", "0,x") == 2


def test_mixing_periodic_configuration_refused(tmp_path, config):
    assert run(tmp_path, "mixing", "--config", config, "--set", "mixing.num_ops=2") == 2
    assert run(tmp_path, "mixing", "--config", config, "--set", "mixing.num_ops=2",
               "--set", "mixing.lazy=true", "--set", "output=lazy") == 0


def test_mixing_csv_rows(tmp_path, config):
    assert run(tmp_path, "mixing", "--config", config) == 0
    lines = (tmp_path / "runs" / "run" / "mixing_N4_C3_k1_strict.csv").read_text().splitlines()
    assert len(lines) == 1 + 11


def test_divergence_exit_code(tmp_path, config):
    code = run(tmp_path, "train", "--config", config, "--method", "spos", "--set", "train.divergence_threshold=0.1")
    assert code == 3
    assert (tmp_path / "runs" / "run" / "diverged.json").exists()


def test_train_analyze_rank_pipeline_is_byte_identical(tmp_path, config):
    outs = []
    for root in ("a", "b"):
        argv = ["--out", str(tmp_path / root)]
        assert main([*argv, "train", "--config", config, "--method", "magic_at"]) == 0
        ck = str(tmp_path / root / "run" / "supernet")
        assert main([*argv, "analyze", "--config", config, "--checkpoint", ck]) == 0
        assert main([*argv, "rank", "--config", config, "--checkpoint", ck]) == 0
        assert main([*argv, "standalone", "--config", config, "--child", "0,1,2"]) == 0
        outs.append(artifacts(tmp_path / root / "run"))
    a, b = outs
    assert set(a) >= {"supernet.json", "supernet.bin", "train_log.jsonl", "anchor_log.jsonl", "config.json",
                      "similarity_m1.csv", "m_curve.csv", "og_sweep.csv", "rank_report.json",
                      "standalone_0-1-2.json"}
    assert a == b
    assert (tmp_path / "a" / "run" / "train.meta.json").exists()


def test_analyze_rejects_mismatched_checkpoint(tmp_path, config):
    assert run(tmp_path, "train", "--config", config, "--method", "spos") == 0
    ck = str(tmp_path / "runs" / "run" / "supernet")
    assert run(tmp_path, "analyze", "--config", config, "--checkpoint", ck, "--set", "space.hidden=16") == 2
    assert run(tmp_path, "analyze", "--config", config, "--checkpoint", ck + "_missing") == 2


def test_search_resume_matches_uninterrupted(tmp_path, config, monkeypatch):
    assert run(tmp_path, "search", "--config", config, "--method", "magic_at", "--set", "output=full") == 0
    full = artifacts(tmp_path / "runs" / "full")

    real, calls = search.score_slots, []

    def flaky(*a, **kw):
        calls.append(1)
        if len(calls) == 4:
            raise RuntimeError("interrupted")
        return real(*a, **kw)

    monkeypatch.setattr(search, "score_slots", flaky)
    assert run(tmp_path, "search", "--config", config, "--method", "magic_at", "--set", "output=part") == 3
    monkeypatch.setattr(search, "score_slots", real)
    assert len(json.loads("[" + ",".join((tmp_path / "runs" / "part" / "search_trace.jsonl")
                                         .read_text().splitlines()) + "]")) == 3
    assert run(tmp_path, "search", "--config", config, "--method", "magic_at", "--set", "output=part",
               "--resume") == 0
    part = artifacts(tmp_path / "runs" / "part")
    assert part == full
    result = json.loads(full["final_child.json"])
    assert result["deletions"] == 6 and len(result["child"]) == 3


def test_module_entry_point(tmp_path, config):
    proc = subprocess.run([sys.executable, "-m", "wsnas", "--out", str(tmp_path), "mixing", "--config", config],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["coupling_bound_holds"] is True
