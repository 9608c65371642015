"""Declarative experiment configs and the staged, cached pipeline.

Every stage writes into ``<out>/<stage>/<hash>/`` where ``hash`` covers the
config fields the stage depends on plus the hashes of its upstream stages.
A stage whose directory already holds a manifest is not recomputed. The
manifest is written last, so an interrupted stage is simply redone.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import yaml

from . import evaluation, gru, koopman, mpc
from .gru import AblationSpec, GruConfig
from .koopman import LiftingConfig
from .mpc import MpcConfig
from .neural_mass import (DoubleColumnParams, JansenRitParams, SimTrace, _atomic_write,
                          generate_trace, load_trace, save_trace)

log = logging.getLogger(__name__)

CASES = ("single", "double")
VARIANTS = ("full", "model2", "model3", "model4", "model5", "gru")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class ArtifactError(RuntimeError):
    """Missing, unreadable or inconsistent upstream artifact."""


# --------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class SimSettings:
    duration: float = 42.0
    sample_rate: float = 50.0
    burn_in: float = 2.0
    step: float = 1e-3
    noise: bool = False


@dataclass(frozen=True)
class SplitSettings:
    train: int = 1000
    test: int = 1000


@dataclass(frozen=True)
class ControlSettings:
    duration: float = 12.0
    window: tuple = (5.0, 10.0)
    excitation_duration: float = 20.0


@dataclass(frozen=True)
class EvalSettings:
    segment: int = 256
    band: tuple = (1.0, 20.0)


@dataclass(frozen=True)
class AblationSettings:
    runs: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    case: str = "single"
    seed: int = 0
    out: str = "runs"
    plots: bool = True
    timing: bool = False
    plant: object = field(default_factory=JansenRitParams)
    simulate: SimSettings = field(default_factory=SimSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    lifting: LiftingConfig = field(default_factory=LiftingConfig)
    gru: GruConfig = field(default_factory=GruConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    control: ControlSettings = field(default_factory=ControlSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)

    @property
    def n_channels(self) -> int:
        return 2 if self.case == "double" else 1

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return from_dict(deep_merge(to_dict(self), {"seed": int(seed)}))

    def to_dict(self) -> dict:
        return to_dict(self)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# fields set from the top level rather than by the user
_DERIVED = {"lifting": ("n_channels", "seed"), "gru": ("n_outputs", "seed", "rate")}


def to_dict(cfg: ExperimentConfig) -> dict:
    d = _plain(cfg)
    for section, names in _DERIVED.items():
        for name in names:
            d[section].pop(name, None)
    return d


def default_dict(case: str = "single") -> dict:
    if case not in CASES:
        raise ConfigError(f"case must be one of {CASES}, got {case!r}")
    base = to_dict(ExperimentConfig())
    if case == "double":
        base["case"] = "double"
        base["plant"] = _plain(DoubleColumnParams())
        base["plant"]["a_d"] = None
        base["lifting"]["refit_period"] = 10
    return base


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _check_keys(given: dict, allowed: dict, where: str) -> None:
    for key, val in given.items():
        if key not in allowed:
            raise ConfigError(f"unknown key '{where}{key}' (allowed: {', '.join(sorted(allowed))})")
        if isinstance(allowed[key], dict) and allowed[key] and isinstance(val, dict):
            _check_keys(val, allowed[key], f"{where}{key}.")


def _build(cls, section: str, values: dict, **extra):
    try:
        return cls(**{**values, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def from_dict(d: dict) -> ExperimentConfig:
    """Validate a (possibly partial) nested dict and build the config."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    case = d.get("case", "single")
    base = default_dict(case)
    _check_keys(d, base, "")
    raw = deep_merge(base, d)

    if case == "double":
        p = raw["plant"]
        plant = _build(DoubleColumnParams, "plant",
                       {k: v for k, v in p.items() if k not in ("col1", "col2")},
                       col1=_build(JansenRitParams, "plant.col1", p["col1"]),
                       col2=_build(JansenRitParams, "plant.col2", p["col2"]))
    else:
        plant = _build(JansenRitParams, "plant", raw["plant"])

    try:
        seed = int(raw["seed"])
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {raw['seed']!r}") from None
    n = 2 if case == "double" else 1
    sim = _build(SimSettings, "simulate", raw["simulate"])
    mpc_raw = dict(raw["mpc"])
    if isinstance(mpc_raw.get("q_y"), list):
        mpc_raw["q_y"] = tuple(tuple(r) if isinstance(r, list) else r for r in mpc_raw["q_y"])
    cfg = ExperimentConfig(
        case=case,
        seed=seed,
        out=str(raw["out"]),
        plots=bool(raw["plots"]),
        timing=bool(raw["timing"]),
        plant=plant,
        simulate=sim,
        split=_build(SplitSettings, "split", raw["split"]),
        lifting=_build(LiftingConfig, "lifting", raw["lifting"], n_channels=n, seed=seed),
        gru=_build(GruConfig, "gru", raw["gru"], n_outputs=n, seed=seed, rate=sim.sample_rate),
        mpc=_build(MpcConfig, "mpc", mpc_raw),
        control=_build(ControlSettings, "control",
                       {**raw["control"], "window": tuple(raw["control"]["window"])}),
        evaluation=_build(EvalSettings, "evaluation",
                          {**raw["evaluation"], "band": tuple(raw["evaluation"]["band"])}),
        ablation=_build(AblationSettings, "ablation", raw["ablation"]),
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks, run before any work starts."""
    s = cfg.simulate
    if s.sample_rate <= 0 or s.step <= 0:
        raise ConfigError("simulate.sample_rate and simulate.step must be positive")
    ratio = 1.0 / (s.sample_rate * s.step)
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError(f"simulate.step={s.step} does not divide the sample period 1/{s.sample_rate}")
    if s.duration <= s.burn_in:
        raise ConfigError("simulate.duration must exceed simulate.burn_in")
    available = int(round(s.duration * s.sample_rate)) - int(round(s.burn_in * s.sample_rate))
    sp = cfg.split
    if sp.train < 1 or sp.test < 1:
        raise ConfigError("split.train and split.test must be positive")
    if sp.train + sp.test > available:
        raise ConfigError(f"split needs {sp.train + sp.test} samples but the trace has {available} "
                          f"after burn-in; raise simulate.duration")
    lc = cfg.lifting
    if sp.train < lc.window + lc.pred_steps + 1:
        raise ConfigError(f"split.train={sp.train} is shorter than lifting.window + pred_steps + 1")
    g = cfg.gru
    if sp.train < g.history + g.horizon + 1:
        raise ConfigError(f"split.train={sp.train} is too short for the GRU history plus horizon")
    c, m = cfg.control, cfg.mpc
    if c.duration <= s.burn_in:
        raise ConfigError("control.duration must exceed simulate.burn_in")
    if m.control_start < s.burn_in + lc.window / s.sample_rate - 1e-9:
        raise ConfigError(f"mpc.control_start={m.control_start} leaves less than one window "
                          f"({lc.window} samples) of logged data after burn-in")
    t0, t1 = c.window
    if not (m.control_start <= t0 < t1 <= c.duration - 1.0 / s.sample_rate + 1e-9):
        raise ConfigError(f"control.window {c.window} must satisfy control_start <= t0 < t1 < duration")
    if c.excitation_duration <= s.burn_in + lc.window / s.sample_rate:
        raise ConfigError("control.excitation_duration too short to identify the input gain")
    if cfg.evaluation.segment < 8:
        raise ConfigError("evaluation.segment must be >= 8")
    lo, hi = cfg.evaluation.band
    if not 0 <= lo < hi <= s.sample_rate / 2:
        raise ConfigError("evaluation.band must lie within [0, sample_rate/2]")
    if cfg.ablation.runs < 1:
        raise ConfigError("ablation.runs must be >= 1")
    if cfg.gru.n_inputs != 1:
        raise ConfigError("gru.n_inputs must be 1 (the plant has one control channel)")


def _read_yaml(path: Path, seen=()) -> dict:
    path = Path(path).resolve()
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    includes = data.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged = deep_merge(merged, _read_yaml(path.parent / inc, seen + (path,)))
    return deep_merge(merged, data)


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read a YAML (or JSON) config, resolving ``include`` files first.

    Included files are merged in order; the including file wins, and
    ``overrides`` win over everything.
    """
    raw = _read_yaml(Path(path)) if path is not None else {}
    if overrides:
        raw = deep_merge(raw, overrides)
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def parse_assignment(text: str) -> dict:
    """``a.b.c=value`` into ``{"a": {"b": {"c": value}}}``; value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        node = yaml.safe_load(value)
    except yaml.YAMLError:
        raise ConfigError(f"cannot parse override value {value!r}") from None
    for part in reversed(parts):
        node = {part: node}
    return node


# --------------------------------------------------------------------------
# stage machinery


def digest(payload) -> str:
    text = json.dumps(_plain(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def versions() -> dict:
    import matplotlib
    import scipy

    try:
        from importlib.metadata import version

        pkg = version("artifact")
    except Exception:  # not installed as a distribution
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__, "pyyaml": yaml.__version__, "package": pkg}


@dataclass
class StageResult:
    stage: str
    hash: str
    path: Path
    computed: bool


def _stage_dir(cfg: ExperimentConfig, stage: str, h: str) -> Path:
    return Path(cfg.out) / stage / h


def _read_manifest(path: Path, h: str) -> Optional[dict]:
    man = path / "manifest.json"
    if not man.exists():
        return None
    try:
        data = json.loads(man.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"unreadable manifest {man}: {exc}") from None
    if data.get("config_hash") != h:
        raise ArtifactError(f"config hash mismatch in {man}: expected {h}, found {data.get('config_hash')}")
    return data


def _run_stage(cfg: ExperimentConfig, stage: str, payload: dict, inputs: Dict[str, str],
               build: Callable[[Path], List[str]]) -> StageResult:
    h = digest({"stage": stage, "payload": payload, "inputs": inputs})
    path = _stage_dir(cfg, stage, h)
    if _read_manifest(path, h) is not None:
        log.info("%s %s: up to date", stage, h)
        return StageResult(stage, h, path, False)
    log.info("%s %s: running", stage, h)
    path.mkdir(parents=True, exist_ok=True)
    files = build(path)
    manifest = {"stage": stage, "config_hash": h, "seed": cfg.seed, "case": cfg.case,
                "inputs": inputs, "payload": _plain(payload), "files": sorted(files),
                "versions": versions()}
    _atomic_write(path / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return StageResult(stage, h, path, True)


def _locate(cfg: ExperimentConfig, stage: str, payload: dict, inputs: Dict[str, str],
            hint: str) -> StageResult:
    h = digest({"stage": stage, "payload": payload, "inputs": inputs})
    path = _stage_dir(cfg, stage, h)
    if _read_manifest(path, h) is None:
        raise ArtifactError(f"missing {stage} artifact {path}; run `{hint}` first")
    return StageResult(stage, h, path, False)


# -- payloads: exactly what each stage depends on


def _sim_payload(cfg):
    p = {"case": cfg.case, "plant": _plain(cfg.plant), "simulate": _plain(cfg.simulate)}
    if cfg.simulate.noise:
        p["noise_seed"] = cfg.seed
    return p


def _train_payload(cfg, variant):
    model_cfg = cfg.gru if variant == "gru" else cfg.lifting
    return {"variant": variant, "train": cfg.split.train, "model": _plain(model_cfg)}


def _predict_payload(cfg, variant):
    p = {"variant": variant, "train": cfg.split.train, "test": cfg.split.test}
    if variant != "gru":
        p["refit_period"] = cfg.lifting.refit_period
        p["refit_length"] = cfg.lifting.refit_length
    return p


def _eval_payload(cfg, variant):
    return {"variant": variant, "evaluation": _plain(cfg.evaluation)}


def _control_payload(cfg):
    return {"mpc": _plain(cfg.mpc), "control": _plain(cfg.control), "seed": cfg.seed,
            "timing": cfg.timing}


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")


def _label(variant: str) -> str:
    return "GRU" if variant == "gru" else AblationSpec(variant).label


# -- stages


def run_simulate(cfg: ExperimentConfig) -> StageResult:
    def build(path: Path):
        s = cfg.simulate
        trace = generate_trace(cfg.plant, s.duration, s.sample_rate, burn_in=s.burn_in, step=s.step,
                               noise_seed=cfg.seed if s.noise else None)
        save_trace(trace, path / "trace.csv", case=cfg.case)
        return ["trace.csv", "trace.json"]

    return _run_stage(cfg, "simulate", _sim_payload(cfg), {}, build)


def _upstream_sim(cfg):
    return _locate(cfg, "simulate", _sim_payload(cfg), {}, "simulate")


def _load_trace(res: StageResult) -> SimTrace:
    try:
        return load_trace(res.path / "trace.csv")
    except (OSError, ValueError, KeyError) as exc:
        raise ArtifactError(f"unreadable trace in {res.path}: {exc}") from None


def run_train(cfg: ExperimentConfig, variant: str = "full") -> StageResult:
    _check_variant(variant)
    sim = _upstream_sim(cfg)

    def build(path: Path):
        trace = _load_trace(sim).segment(0, cfg.split.train)
        if variant == "gru":
            gru.save_gru(gru.train_gru(trace, cfg.gru), path / "model.json")
        else:
            model = gru.train_ablation(trace, cfg.lifting, AblationSpec(variant))
            koopman.save_model(model, path / "model.json")
        return ["model.json"]

    return _run_stage(cfg, "train", _train_payload(cfg, variant), {"simulate": sim.hash}, build)


def _upstream_train(cfg, variant):
    sim = _upstream_sim(cfg)
    return _locate(cfg, "train", _train_payload(cfg, variant), {"simulate": sim.hash},
                   f"train --variant {variant}")


def _load_any_model(res: StageResult):
    try:
        d = json.loads((res.path / "model.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"unreadable model in {res.path}: {exc}") from None
    return gru.gru_from_dict(d) if d.get("kind") == "gru" else koopman.model_from_dict(d)


def run_predict(cfg: ExperimentConfig, variant: str = "full") -> StageResult:
    _check_variant(variant)
    sim = _upstream_sim(cfg)
    tr = _upstream_train(cfg, variant)

    def build(path: Path):
        trace = _load_trace(sim)
        model = _load_any_model(tr)
        start, n = cfg.split.train - 1, cfg.split.test
        if variant == "gru":
            pred = gru.predict_gru(model, trace, start, n)
        else:
            pred = koopman.rolling_forecast(model, trace.eeg, start, start + n, cfg.lifting.refit_period)
        truth = trace.eeg[start + 1:start + 1 + n]
        t = trace.t[start + 1:start + 1 + n]
        _write_prediction(path / "prediction.csv", t, truth, pred)
        return ["prediction.csv"]

    return _run_stage(cfg, "predict", _predict_payload(cfg, variant),
                      {"simulate": sim.hash, "train": tr.hash}, build)


def _write_prediction(path: Path, t, truth, pred) -> None:
    n = truth.shape[1]
    header = ["t"] + [f"truth_ch{i}" for i in range(n)] + [f"pred_ch{i}" for i in range(n)]
    rows = np.column_stack([t, truth, pred])
    lines = [",".join(header)] + [",".join(repr(float(v)) for v in r) for r in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_prediction(path):
    """``(t, truth, prediction)`` from a prediction CSV."""
    path = Path(path)
    try:
        header = path.read_text().split("\n", 1)[0].split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"unreadable prediction {path}: {exc}") from None
    n = sum(h.startswith("truth_") for h in header)
    return data[:, 0], data[:, 1:1 + n], data[:, 1 + n:1 + 2 * n]


def _upstream_predict(cfg, variant):
    sim = _upstream_sim(cfg)
    tr = _upstream_train(cfg, variant)
    return _locate(cfg, "predict", _predict_payload(cfg, variant),
                   {"simulate": sim.hash, "train": tr.hash}, f"predict --variant {variant}")


def run_evaluate(cfg: ExperimentConfig, variant: str = "full") -> StageResult:
    _check_variant(variant)
    pr = _upstream_predict(cfg, variant)

    def build(path: Path):
        _, truth, pred = read_prediction(pr.path / "prediction.csv")
        rep = evaluation.evaluate_prediction(
            truth, pred, cfg.simulate.sample_rate, cfg.case, _label(variant), seed=cfg.seed,
            config_hash=pr.hash, segment=cfg.evaluation.segment, band=cfg.evaluation.band)
        _atomic_write(path / "report.json", rep.to_json())
        return ["report.json"]

    return _run_stage(cfg, "evaluate", _eval_payload(cfg, variant), {"predict": pr.hash}, build)


def _upstream_evaluate(cfg, variant):
    pr = _upstream_predict(cfg, variant)
    return _locate(cfg, "evaluate", _eval_payload(cfg, variant), {"predict": pr.hash},
                   f"evaluate --variant {variant}")


def read_report(res: StageResult) -> evaluation.EvalReport:
    try:
        return evaluation.EvalReport.from_json((res.path / "report.json").read_text())
    except (OSError, ValueError, TypeError) as exc:
        raise ArtifactError(f"unreadable report in {res.path}: {exc}") from None


def run_control(cfg: ExperimentConfig) -> StageResult:
    sim = _upstream_sim(cfg)
    tr = _upstream_train(cfg, "full")

    def build(path: Path):
        model = _load_any_model(tr)
        s, c = cfg.simulate, cfg.control
        ident, _ = mpc.identify_input_gain(model, cfg.plant, cfg.mpc, c.excitation_duration,
                                           seed=cfg.seed, sample_rate=s.sample_rate, burn_in=s.burn_in)
        res = mpc.closed_loop(cfg.plant, ident, cfg.mpc, c.duration, s.sample_rate, s.burn_in)
        mpc.save_control(res, cfg.mpc, path, c.window, timing=cfg.timing)
        save_trace(res.controlled, path / "controlled.csv", case=cfg.case)
        save_trace(res.uncontrolled, path / "uncontrolled.csv", case=cfg.case)
        koopman.save_model(ident, path / "identified_model.json")
        return ["control_log.csv", "control_summary.json", "controlled.csv", "controlled.json",
                "uncontrolled.csv", "uncontrolled.json", "identified_model.json"]

    return _run_stage(cfg, "control", _control_payload(cfg), {"simulate": sim.hash, "train": tr.hash},
                      build)


def _upstream_control(cfg):
    sim = _upstream_sim(cfg)
    tr = _upstream_train(cfg, "full")
    return _locate(cfg, "control", _control_payload(cfg), {"simulate": sim.hash, "train": tr.hash},
                   "control")


@dataclass
class AblationResult:
    stage: StageResult
    rows: List[evaluation.TableRow]
    reports: List[evaluation.EvalReport]


def run_ablate(cfg: ExperimentConfig, variants=VARIANTS) -> AblationResult:
    """Train, predict and evaluate every variant for ``ablation.runs`` seeds
    (``seed``, ``seed + 1``, ...), then tabulate mean and sd."""
    for v in variants:
        _check_variant(v)
    run_simulate(cfg)
    evals = []
    for i in range(cfg.ablation.runs):
        sub = cfg.with_seed(cfg.seed + i)
        for v in variants:
            run_train(sub, v)
            run_predict(sub, v)
            evals.append(run_evaluate(sub, v))
    reports = [read_report(e) for e in evals]
    order = {_label(v): i for i, v in enumerate(variants)}
    reports_sorted = sorted(reports, key=lambda r: order[r.model])
    rows = evaluation.comparison_table(reports_sorted)

    def build(path: Path):
        _atomic_write(path / "table.csv", evaluation.table_csv(rows))
        _atomic_write(path / "table.txt", evaluation.table_text(rows))
        return ["table.csv", "table.txt"]

    stage = _run_stage(cfg, "ablate", {"runs": cfg.ablation.runs, "variants": list(variants)},
                       {f"evaluate/{r.model}/{r.seed}": e.hash for r, e in zip(reports, evals)}, build)
    return AblationResult(stage, rows, reports)


def run_plot(cfg: ExperimentConfig) -> StageResult:
    """Render SVG figures for every upstream artifact that exists."""
    from . import plotting

    sources: Dict[str, StageResult] = {}
    for name, finder in (("simulate", lambda: _upstream_sim(cfg)),
                         ("predict", lambda: _upstream_predict(cfg, "full")),
                         ("evaluate", lambda: _upstream_evaluate(cfg, "full")),
                         ("control", lambda: _upstream_control(cfg))):
        try:
            sources[name] = finder()
        except ArtifactError:
            continue
    if not sources:
        raise ArtifactError("nothing to plot; run `simulate` first")

    def build(path: Path):
        files = []
        if "simulate" in sources:
            plotting.plot_trace(_load_trace(sources["simulate"]), path / "trace.svg",
                                title=f"{cfg.case} column EEG")
            files.append("trace.svg")
        if "predict" in sources:
            t, truth, pred = read_prediction(sources["predict"].path / "prediction.csv")
            plotting.plot_prediction(t, truth, pred, path / "prediction.svg",
                                     title=f"{cfg.case} column, held-out prediction")
            files.append("prediction.svg")
        if "evaluate" in sources:
            rep = read_report(sources["evaluate"])
            if rep.psd_freqs:
                plotting.plot_psd(rep.psd_freqs, rep.psd_truth, rep.psd_pred, path / "psd.svg",
                                  title=f"{cfg.case} column PSD")
                files.append("psd.svg")
        if "control" in sources:
            d = sources["control"].path
            try:
                ctl, unc = load_trace(d / "controlled.csv"), load_trace(d / "uncontrolled.csv")
            except (OSError, ValueError, KeyError) as exc:
                raise ArtifactError(f"unreadable control traces in {d}: {exc}") from None
            plotting.plot_control(ctl, unc, path / "control.svg", onset=cfg.mpc.control_start,
                                  title=f"{cfg.case} column, closed loop")
            files.append("control.svg")
        return files

    return _run_stage(cfg, "plot", {"case": cfg.case}, {k: v.hash for k, v in sources.items()}, build)


def load_simulated(cfg: ExperimentConfig) -> SimTrace:
    """Trace written by an earlier ``simulate`` stage."""
    return _load_trace(_upstream_sim(cfg))


def load_trained(cfg: ExperimentConfig, variant: str = "full"):
    """Model written by an earlier ``train`` stage."""
    _check_variant(variant)
    return _load_any_model(_upstream_train(cfg, variant))
