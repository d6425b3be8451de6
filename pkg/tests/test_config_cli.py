import json
import subprocess
import sys

import pytest

from wififlow.cli import main
from wififlow.config import ConfigError, PipelineConfig, load_config, parse_config_text

# Constants of the method; the defaults must equal these exactly.
METHOD_CONSTANTS = {
    "coalesce_gap": 180,
    "merge_threshold": 21600,
    "min_span": 300,
    "max_stay": 57600,
    "time_k": 4,
    "person_k": 8,
    "dominant_threshold": 0.55,
    "windows": "Morning=6-10,Midday=11-14,Evening=18-22",
    "restarts": 20,
    "hac_input": "dissimilarity",
}


def test_defaults_equal_method_constants():
    cfg = PipelineConfig()
    for k, v in METHOD_CONSTANTS.items():
        assert getattr(cfg, k) == v, k
    assert cfg.window_table() == {"Morning": (6, 10), "Midday": (11, 14), "Evening": (18, 22)}


def test_library_defaults_agree_with_config():
    from wififlow import bylocation, byperson, bytime, cluster, ingest, preprocess

    cfg = PipelineConfig()
    assert ingest.COALESCE_GAP == cfg.coalesce_gap
    assert preprocess.MERGE_THRESHOLD == cfg.merge_threshold
    assert (preprocess.MIN_SPAN, preprocess.MAX_STAY) == (cfg.min_span, cfg.max_stay)
    assert bytime.TIME_K == cfg.time_k and byperson.PERSON_K == cfg.person_k
    assert bylocation.DOMINANT_THRESHOLD == cfg.dominant_threshold
    assert bylocation.WINDOWS == cfg.window_table()
    assert cluster.DEFAULT_RESTARTS == cfg.restarts


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("# comment\nseed = 4\nperson-k = 6   # trailing\npre_coalesced = yes\n\n")
    cfg = load_config(p, {"person_k": "5", "seed": None})
    assert (cfg.seed, cfg.person_k, cfg.pre_coalesced) == (4, 5, True)


@pytest.mark.parametrize("text", ["nokey\n", "bogus = 1\n", "time-k = x\n", "time-k = 0\n",
                                  "dominant-threshold = 1.5\n", "windows = Morning=10-6\n",
                                  "hac-input = other\n", "start-date = 2024-13-01\n", "kmeans-init = x\n"])
def test_bad_config_rejected(tmp_path, text):
    p = tmp_path / "c.conf"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_digest_ignores_threads():
    a, b = PipelineConfig(threads=1), PipelineConfig(threads=8)
    assert a.digest() == b.digest() != PipelineConfig(time_k=5).digest()
    assert parse_config_text("a = b = c") == {"a": "b = c"}


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("synth", "ingest", "preprocess", "cluster-time", "cluster-person", "cluster-location",
                "report", "all"):
        assert cmd in out


def _run(*args):
    return subprocess.run([sys.executable, "-m", "wififlow", *args], capture_output=True, text=True)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    r = _run("synth", "--seed", "1", "--devices", "150", "--days", "7", "--out", str(d / "data"))
    assert r.returncode == 0, r.stderr
    assert r.stdout.strip().endswith("probes.csv")
    return d


def _args(tiny, out, *extra):
    data = tiny / "data"
    return ("--input", str(data / "probes.csv"), "--calendar", str(data / "calendar.csv"),
            "--registry", str(data / "registry.csv"), "--out", str(out), *extra)


def _artifacts(out):
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()
            and p.name != "manifest.json"}


def test_all_happy_path_and_rerun(tiny):
    out = tiny / "run1"
    r = _run("all", "--seed", "0", *_args(tiny, out))
    assert r.returncode == 0, r.stderr
    assert r.stdout == ""
    files = _artifacts(out)
    for f in ("trajectories.jsonl", "time/summary.json", "person/person_assignments.csv",
              "location/summary.json", "report.txt"):
        assert f in files
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["stages"]) == {"ingest", "preprocess", "cluster-time", "cluster-person",
                                  "cluster-location", "report"}
    assert man["seed"] == 0 and len(man["config_hash"]) == 64
    # rerun into the same directory: artifacts and manifest (without timings) unchanged
    r = _run("all", "--seed", "0", *_args(tiny, out))
    assert r.returncode == 0, r.stderr
    assert _artifacts(out) == files
    man2 = json.loads((out / "manifest.json").read_text())
    for m in (man, man2):
        for s in m["stages"].values():
            s.pop("seconds")
    assert man == man2


def test_stage_rerun_touches_only_its_outputs(tiny):
    out = tiny / "run2"
    assert _run("all", "--seed", "0", *_args(tiny, out)).returncode == 0
    before = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file()}
    assert _run("cluster-location", *_args(tiny, out)).returncode == 0
    changed = {p for p in out.rglob("*") if p.is_file() and p.stat().st_mtime_ns != before.get(p)}
    assert {p.relative_to(out).parts[0] for p in changed} <= {"location", "manifest.json"}


def test_dependency_error_names_missing_file(tiny):
    out = tiny / "empty"
    r = _run("cluster-time", "--seed", "0", *_args(tiny, out))
    assert r.returncode == 1
    assert "trajectories.jsonl" in r.stderr


def test_seed_required_for_clustering(tiny):
    r = _run("cluster-person", *_args(tiny, tiny / "noseed"))
    assert r.returncode == 1 and "--seed" in r.stderr
    r = _run("synth", "--out", str(tiny / "x"))
    assert r.returncode == 1


def test_bad_flag_value_fails(tiny):
    r = _run("ingest", "--time-k", "zero", *_args(tiny, tiny / "bad"))
    assert r.returncode == 1 and "time-k" in r.stderr
    r = _run("ingest", "--input", str(tiny / "missing.csv"), "--out", str(tiny / "bad"))
    assert r.returncode == 1
