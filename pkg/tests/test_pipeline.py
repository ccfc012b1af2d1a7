import json
import shutil

import numpy as np
import pytest

from ckba import io
from ckba.pipeline import ConfigError, STAGES, StageError, config_hash, resolve, run_stage
from ckba.pipeline.cli import main
from ckba.pipeline.experiment import synthesize
from ckba.pipeline.stages import MANIFEST, run_all

SMALL = {"grid": {"nx": 12, "ny": 12}, "n_xi": 12, "n_y": [10, 20],
         "wells": {"n_u": 6, "n_diagnostic": 3},
         "ensemble": {"q_train": 60, "q_test": 40}, "ba": {"level": 3}}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = resolve(SMALL)
    run_all(cfg, out)
    return cfg, out


def _report_bytes(out):
    root = out / "report"
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_hash_stable_under_key_order():
    a = resolve({"seed": 3, "n_xi": 10, "grid": {"nx": 8, "ny": 9}})
    b = resolve(json.loads(json.dumps({"grid": {"ny": 9, "nx": 8}, "n_xi": 10, "seed": 3})))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(resolve({"seed": 4, "n_xi": 10, "grid": {"nx": 8, "ny": 9}}))


def test_validation_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        resolve({"seed": 1, "bogus": 2, "grid": {"nx": 0}, "n_y": [50, 25],
                 "ba": {"variants": ["3q"]}, "noise": {"sigma_u": -1}})
    text = "\n".join(info.value.errors)
    for needle in ("bogus", "grid.nx", "n_y", "3q", "sigma_u"):
        assert needle in text
    assert len(info.value.errors) >= 5


def test_defaults_are_desk_scale():
    cfg = resolve({})
    assert (cfg["grid"]["nx"], cfg["grid"]["ny"], cfg["n_xi"]) == (32, 32, 128)
    assert cfg["ensemble"]["q_train"] == 1000 and cfg["n_y"] == [25, 50, 100, 200]
    assert (cfg["ba"]["degree"], cfg["ba"]["level"], cfg["ba"]["tau"]) == (3, 5, 0.01)
    assert cfg["inversion"]["gamma_conditional"] == 1e-6
    assert cfg["inversion"]["gamma_unconditional"] == 0.1


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_deterministic_and_nested():
    cfg = resolve(SMALL)
    a, b = synthesize(cfg), synthesize(cfg)
    assert a["y_ref"].tobytes() == b["y_ref"].tobytes()
    assert a["u_obs"].tobytes() == b["u_obs"].tobytes()
    small, big = a["field_sets"][10][0], a["field_sets"][20][0]
    assert set(small) <= set(big)


def test_synth_exact_field_data_without_noise():
    cfg = resolve({**SMALL, "noise": {"sigma_y": 0.0}, "inversion": {"unconditional": False}})
    s = synthesize(cfg)
    for cells, vals in s["field_sets"].values():
        np.testing.assert_array_equal(vals, s["y_ref"][cells])


def test_synth_files_byte_identical(tmp_path):
    cfg = resolve(SMALL)
    run_stage(cfg, "synth", tmp_path / "a")
    run_stage(cfg, "synth", tmp_path / "b")
    for p in sorted((tmp_path / "a" / "synth").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "synth" / p.name).read_bytes()


# ---------------------------------------------------------------------------
# full small run
# ---------------------------------------------------------------------------

def test_manifest_complete(small_run):
    cfg, out = small_run
    m = io.read_json(out / MANIFEST)
    assert set(m["stages"]) == set(STAGES)
    for stage, entry in m["stages"].items():
        assert entry["config_hash"] and entry["tool_version"]
        assert entry["wall_clock_s"] >= 0
        for rel, sha in entry["files"].items():
            assert io.file_sha256(out / rel) == sha
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*")
               if p.is_file() and p.name != MANIFEST}
    recorded = {rel for e in m["stages"].values() for rel in e["files"]}
    assert on_disk == recorded


def test_rmse_rows_ordered_by_n_y(small_run):
    cfg, out = small_run
    lines = (out / "report" / "rmse_conditional.csv").read_text().splitlines()
    n_y = [int(l.split(",")[0]) for l in lines[1:]]
    assert n_y == sorted(n_y)
    assert len(lines) - 1 == len(cfg["n_y"]) * len(cfg["ba"]["variants"])


def test_one_surrogate_per_variant(small_run):
    cfg, out = small_run
    for n in cfg["n_y"]:
        got = sorted(p.name for p in (out / "train" / f"cond{n}").iterdir())
        assert got == sorted(cfg["ba"]["variants"])


def test_query_accounting(small_run):
    cfg, out = small_run
    m = io.read_json(out / MANIFEST)
    q = cfg["ensemble"]["q_train"]
    # level 3 in one and two dimensions: 3 and 3 + 13 nodes
    per_stage = {"1D": 3, "2x1D": 6, "2D": 3 + 13}
    lines = (out / "report" / "queries.csv").read_text().splitlines()[1:]
    for line in lines:
        basis, variant, well, q_train, nodes, total = line.split(",")
        assert int(q_train) == q and int(total) == q + int(nodes)
        assert int(nodes) <= per_stage[variant]
    for name, per_variant in m["stages"]["train"]["queries"].items():
        for v, rec in per_variant.items():
            assert rec["per_observable"] == [q + k for k in rec["node_queries"]]
    assert m["stages"]["ensemble"]["queries"]["unc"] == q + cfg["ensemble"]["q_test"]


def test_rerun_is_idempotent(small_run, tmp_path):
    cfg, out = small_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    before = _report_bytes(copy)
    run_stage(cfg, "report", copy)
    assert _report_bytes(copy) == before


def test_stale_upstream_detected(small_run, tmp_path):
    cfg, out = small_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    changed = resolve({**SMALL, "ba": {"level": 3, "tau": 0.02}})
    with pytest.raises(StageError, match="train.*stale"):
        run_stage(changed, "uq", copy)
    # downstream of an untouched stage still runs
    run_stage(changed, "train", copy)
    run_stage(changed, "uq", copy)
    # the old configuration now sees the retrained stages as stale
    with pytest.raises(StageError, match="stale"):
        run_stage(cfg, "report", copy)


def test_tampered_artifact_detected(small_run, tmp_path):
    cfg, out = small_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    target = copy / "ensemble" / "xi_train.bin"
    target.write_bytes(target.read_bytes()[:-8] + b"\0" * 8)
    with pytest.raises(StageError, match="checksum"):
        run_stage(cfg, "train", copy)


def test_missing_upstream(tmp_path):
    with pytest.raises(StageError, match="synth"):
        run_stage(resolve(SMALL), "eigs", tmp_path)


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "c.json"
    good.write_text(json.dumps(SMALL))
    assert main(["synth", "--config", str(good), "--out", str(tmp_path / "r"), "-q"]) == 0
    assert main(["train", "--config", str(good), "--out", str(tmp_path / "r"), "-q"]) == 1
    assert "has not been run" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_xi": -1, "extra": 1}))
    assert main(["synth", "--config", str(bad), "-q"]) == 1
    err = capsys.readouterr().err
    assert "n_xi" in err and "extra" in err
    assert main(["synth", "--config", str(tmp_path / "none.json"), "-q"]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert main(["synth", "--config", str(tmp_path / "broken.json"), "-q"]) == 1
    with pytest.raises(SystemExit):
        main(["nope", "--config", str(good)])


def test_cli_numerical_failure_exit_code(tmp_path):
    # a single distinct head value makes every observable constant
    cfg = {**SMALL, "bvp": {"head": {"left": 1.0, "right": 1.0}}}
    path = tmp_path / "flat.json"
    path.write_text(json.dumps(cfg))
    out = str(tmp_path / "r")
    for stage in ("synth", "eigs", "ensemble"):
        assert main([stage, "--config", str(path), "--out", out, "-q"]) == 0
    assert main(["train", "--config", str(path), "--out", out, "-q"]) == 2
