import json
import subprocess
import sys

import pytest

from koopman_mpc import cli
from koopman_mpc import experiment as ex
from koopman_mpc.neural_mass import DoubleColumnParams

from conftest import ROOT

QUICK = ROOT / "configs" / "quick.yaml"
PIPELINE = ("simulate", "train", "predict", "evaluate", "control", "plot")


# -- configuration


@pytest.mark.parametrize("case", ex.CASES)
def test_config_roundtrip(case):
    cfg = ex.from_dict(ex.default_dict(case))
    assert ex.from_dict(ex.to_dict(cfg)) == cfg
    assert ex.load_config(None, ex.to_dict(cfg)) == cfg


def test_shipped_configs_load():
    single = ex.load_config(ROOT / "configs" / "single.yaml")
    double = ex.load_config(ROOT / "configs" / "double.yaml")
    assert single.plant.A == 7.8 and single.lifting.latent_dim == 40
    assert isinstance(double.plant, DoubleColumnParams)
    assert double.plant.col1.A == 7.8 and double.plant.col2.A == 7.0
    assert double.lifting.n_channels == 2 and double.gru.n_outputs == 2
    assert ex.load_config(QUICK).split.train == 500


def test_include_and_override_precedence(tmp_path):
    (tmp_path / "a.yaml").write_text("seed: 1\nlifting: {epochs: 7, window: 30}\n")
    (tmp_path / "b.yaml").write_text("include: a.yaml\nlifting: {epochs: 9}\n")
    cfg = ex.load_config(tmp_path / "b.yaml", {"seed": 4})
    assert (cfg.seed, cfg.lifting.epochs, cfg.lifting.window) == (4, 9, 30)


def test_include_cycle_is_rejected(tmp_path):
    (tmp_path / "a.yaml").write_text("include: b.yaml\n")
    (tmp_path / "b.yaml").write_text("include: a.yaml\n")
    with pytest.raises(ex.ConfigError, match="cycle"):
        ex.load_config(tmp_path / "a.yaml")


@pytest.mark.parametrize("bad", [
    {"lifting": {"widnow": 10}},
    {"bogus": 1},
    {"case": "triple"},
    {"split": {"train": 1900, "test": 1000}},
    {"mpc": {"control_start": 2.5}},
    {"control": {"window": [5.0, 30.0]}},
    {"simulate": {"step": 0.003}},
    {"lifting": {"n_channels": 2}},
    {"mpc": {"control_horizon": 40}},
])
def test_invalid_configs(bad):
    with pytest.raises(ex.ConfigError):
        ex.from_dict(ex.deep_merge(ex.default_dict(), bad))


def test_parse_assignment():
    assert ex.parse_assignment("lifting.epochs=50") == {"lifting": {"epochs": 50}}
    assert ex.parse_assignment("control.window=[4, 9]") == {"control": {"window": [4, 9]}}
    for bad in ("noequals", "a..b=1"):
        with pytest.raises(ex.ConfigError):
            ex.parse_assignment(bad)


def test_seed_changes_only_seeded_sections():
    cfg = ex.load_config(QUICK)
    other = cfg.with_seed(5)
    assert other.lifting.seed == 5 and other.gru.seed == 5
    assert other.plant == cfg.plant and other.simulate == cfg.simulate


# -- staged pipeline


def _run_pipeline(out):
    cfg = ex.load_config(QUICK, {"out": str(out)})
    return cfg, [
        ex.run_simulate(cfg), ex.run_train(cfg), ex.run_predict(cfg), ex.run_evaluate(cfg),
        ex.run_control(cfg), ex.run_plot(cfg),
    ]


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    cfg, results = _run_pipeline(a)
    return a, cfg, results


def test_pipeline_writes_manifests(pipeline):
    root, cfg, results = pipeline
    assert all(r.computed for r in results)
    for r in results:
        man = json.loads((r.path / "manifest.json").read_text())
        assert man["config_hash"] == r.hash and man["seed"] == cfg.seed
        for name in man["files"]:
            assert (r.path / name).is_file()
    assert {p.name for p in (root / "plot").rglob("*.svg")} == {"trace.svg", "prediction.svg", "psd.svg",
                                                                 "control.svg"}


def test_rerun_is_a_no_op(pipeline):
    root, _, _ = pipeline
    before = {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file()}
    _, again = _run_pipeline(root)
    assert not any(r.computed for r in again)
    assert {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file()} == before


def test_fresh_rerun_is_byte_identical(pipeline, tmp_path):
    root, _, _ = pipeline
    _run_pipeline(tmp_path)
    assert _snapshot(tmp_path) == _snapshot(root)


def test_svg_has_no_timestamp(pipeline):
    root, _, _ = pipeline
    for svg in (root / "plot").rglob("*.svg"):
        text = svg.read_text()
        assert text.startswith("<?xml") and "<dc:date>" not in text


def test_missing_upstream_is_an_artifact_error(tmp_path):
    cfg = ex.load_config(QUICK, {"out": str(tmp_path)})
    with pytest.raises(ex.ArtifactError):
        ex.run_train(cfg)
    with pytest.raises(ex.ArtifactError):
        ex.run_plot(cfg)


def test_tampered_manifest_is_detected(pipeline, tmp_path):
    cfg = ex.load_config(QUICK, {"out": str(tmp_path)})
    res = ex.run_simulate(cfg)
    man = res.path / "manifest.json"
    data = json.loads(man.read_text())
    data["config_hash"] = "0" * 16
    man.write_text(json.dumps(data))
    with pytest.raises(ex.ArtifactError, match="mismatch"):
        ex.run_simulate(cfg)


# -- command line


def _cli(*args):
    return cli.main([str(a) for a in args])


def test_cli_exit_codes(tmp_path, capsys):
    common = ("--config", QUICK, "--out", tmp_path)
    assert _cli("train", *common) == cli.EXIT_ARTIFACT
    assert _cli("simulate", *common, "--set", "lifting.bogus=1") == cli.EXIT_VALIDATION
    assert _cli("simulate", "--config", tmp_path / "missing.yaml") == cli.EXIT_VALIDATION
    with pytest.raises(SystemExit) as err:
        _cli("simulate", "--no-such-flag")
    assert err.value.code == cli.EXIT_VALIDATION
    assert _cli("simulate", *common, "--set", "plots=false") == cli.EXIT_OK
    assert "simulate:" in capsys.readouterr().out


def test_cli_flags_before_or_after_command(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _cli("--config", QUICK, "--out", a, "--seed", 3, "simulate", "--A", 7.0) == 0
    assert _cli("simulate", "--config", QUICK, "--out", b, "--seed", 3, "--A", 7.0) == 0
    assert _snapshot(a) == _snapshot(b)
    trace = ex.load_simulated(ex.load_config(QUICK, {"out": str(a), "plant": {"A": 7.0}}))
    assert float(trace.eeg.max() - trace.eeg.min()) < 1.0  # resting state


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "koopman_mpc", "evaluate", "--config", str(QUICK),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == cli.EXIT_ARTIFACT
    assert "run `" in proc.stderr
