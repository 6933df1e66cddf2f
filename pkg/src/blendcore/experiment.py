"""JSON experiment configs, single runs and ablation sweeps.

Config schema (every section and key optional, defaults shown)::

    {
      "dataset": {"seed": 0, "n_train": 200, "n_val": 50, "overlap_fraction": 0.5},
      "train":   {"iterations": 2000, "batch_size": 4, "lr": 0.05, "momentum": 0.9, "seed": 0},
      "blend":   {"abbrev": "56_4_14", "merge_mode": "blender",
                  "top_interp": "bilinear", "bottom_sampling": "bilinear"},
      "out": "runs/default"
    }

``blend`` may instead give ``R``, ``K``, ``M`` explicitly, or be a bare
``"R_K_M"`` string.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import subprocess
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import synthdata as SD
from .blender import BlendConfig, ConfigError, parse_abbrev
from .metrics import EvalReport, evaluate, overlap_disagreement, write_reports
from .trainer import TrainConfig, ModelParams, save_checkpoint, train, write_curve


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SD.DatasetSpec = field(default_factory=SD.DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs/default"

    @property
    def blend(self) -> BlendConfig:
        return self.train.blend

    def with_blend(self, cfg: BlendConfig) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, blend=cfg))

    def to_dict(self) -> dict:
        d = asdict(self.dataset)
        d["classes"] = list(d["classes"])
        t = asdict(self.train)
        blend = t.pop("blend")
        return {"dataset": d, "train": t, "blend": blend, "out": self.out}

    def digest(self) -> str:
        payload = self.to_dict()
        payload.pop("out")
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# parsing with key-level diagnostics

_DATASET_KEYS = {"seed": int, "n_train": int, "n_val": int, "overlap_fraction": float, "classes": list, "size": int, "noise": float}
_TRAIN_KEYS = {"iterations": int, "batch_size": int, "lr": float, "momentum": float, "seed": int}
_BLEND_KEYS = {"abbrev": str, "R": int, "K": int, "M": int, "merge_mode": str, "top_interp": str, "bottom_sampling": str}


def _typed(section: str, raw: dict, schema: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object")
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"{section}.{key}: unknown key")
        want = schema[key]
        ok = isinstance(value, want) and not isinstance(value, bool)
        if want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if not ok:
            raise ConfigError(f"{section}.{key}: expected {want.__name__}, got {value!r}")
        out[key] = tuple(value) if want is list else value
    return out


def _wrap(section: str, fn, **kw):
    try:
        return fn(**kw)
    except ConfigError as e:
        raise ConfigError(f"{section}.{_key_in(str(e), kw)}: {e}") from None
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{section}.{_key_in(str(e), kw)}: {e}") from None


def _key_in(message: str, kw: dict) -> str:
    """The config key mentioned earliest in a validation message."""
    hits = [(message.find(f"{k}="), k) for k in kw if f"{k}=" in message]
    hits += [(message.find(k), k) for k in kw if not hits and k in message]
    return min(hits)[1] if hits else "?"


def parse_dataset(raw) -> SD.DatasetSpec:
    return _wrap("dataset", SD.DatasetSpec, **_typed("dataset", raw, _DATASET_KEYS))


def parse_blend(raw) -> BlendConfig:
    if isinstance(raw, str):
        raw = {"abbrev": raw}
    kw = _typed("blend", raw, _BLEND_KEYS)
    abbrev = kw.pop("abbrev", None)
    if abbrev is not None:
        if any(k in kw for k in ("R", "K", "M")):
            raise ConfigError("blend.abbrev: give either abbrev or R/K/M, not both")
        try:
            kw["R"], kw["K"], kw["M"] = parse_abbrev(abbrev)
        except ConfigError as e:
            raise ConfigError(f"blend.abbrev: {e}") from None
    return _wrap("blend", BlendConfig, **kw)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = set(raw) - {"dataset", "train", "blend", "out"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    dataset = parse_dataset(raw.get("dataset", {}))
    blend = parse_blend(raw.get("blend", {}))
    train_kw = _typed("train", raw.get("train", {}), _TRAIN_KEYS)
    tcfg = _wrap("train", TrainConfig, blend=blend, **train_kw)
    out = raw.get("out", "runs/default")
    if not isinstance(out, str):
        raise ConfigError("out: expected a string path")
    return ExperimentConfig(dataset, tcfg, out)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return parse_config(raw)


# --------------------------------------------------------------------------
# provenance


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpus": os.cpu_count(),
    }


def write_run_json(out_dir, command: str, cfg: ExperimentConfig | None, extra: dict | None = None) -> None:
    record = {
        "command": command,
        "config": cfg.to_dict() if cfg else None,
        "config_hash": cfg.digest() if cfg else None,
        "seed": {"dataset": cfg.dataset.seed, "train": cfg.train.seed} if cfg else None,
        "git_describe": git_describe(),
        "machine": machine_descriptor(),
    }
    record.update(extra or {})
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# running


def generate_dataset(spec: SD.DatasetSpec, threads: int = 1):
    """Scenes generated by index, optionally on a thread pool; order is fixed."""
    if threads <= 1:
        return SD.generate(spec)
    out = []
    with ThreadPoolExecutor(threads) as pool:
        for split in ("train", "val"):
            n = spec.n_train if split == "train" else spec.n_val
            chosen = SD.overlap_indices(spec, split, n)
            out.append(list(pool.map(lambda i: SD.make_scene(spec, split, i, i in chosen), range(n))))
    return out[0], out[1]


@dataclass
class RunResult:
    params: ModelParams
    curve: list
    report: EvalReport
    disagreement: float


def run_cell(cfg: ExperimentConfig, data=None) -> RunResult:
    """Train and evaluate one configuration single-threaded."""
    with threadpool_limits(1):
        train_set, val_set = data if data is not None else SD.generate(cfg.dataset)
        params, curve = train(train_set, cfg.train)
        report = evaluate(params, val_set)
        dis = overlap_disagreement(params, [s for s in val_set if s.overlap])
    return RunResult(params, curve, report, dis)


def run_experiment(cfg: ExperimentConfig, threads: int = 1, out_dir=None) -> RunResult:
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(1):
        data = generate_dataset(cfg.dataset, threads)
    result = run_cell(cfg, data)
    ckpt = save_checkpoint(result.params, out / "checkpoint")
    ds = cfg.to_dict()["dataset"]
    (ckpt / "dataset.json").write_text(json.dumps(ds, sort_keys=True) + "\n")
    write_curve(out / "curve.csv", result.curve)
    write_reports(out / "report.csv", [result.report])
    write_run_json(out, "run", cfg)
    return result


# --------------------------------------------------------------------------
# ablations

AXES = ("merge_mode", "R_M", "K", "top_interp", "bottom_sampling")


def ablation_cells(base: BlendConfig, axis: str) -> list[BlendConfig]:
    if axis == "merge_mode":
        return [
            base.with_(M=1, merge_mode="weighted_sum"),
            base.with_(K=16, M=4, merge_mode="assembler"),
            base.with_(merge_mode="blender"),
        ]
    if axis == "R_M":
        return [base.with_(R=R, M=M, merge_mode="blender") for R, Ms in ((28, (2, 4, 7)), (56, (4, 7, 14))) for M in Ms]
    if axis == "K":
        return [
            base.with_(K=K, merge_mode="single_basis_sigmoid" if K == 1 else "blender") for K in (1, 2, 4, 8)
        ]
    if axis == "top_interp":
        return [base.with_(top_interp=m) for m in ("nearest", "bilinear")]
    if axis == "bottom_sampling":
        return [base.with_(bottom_sampling=m) for m in ("nearest", "bilinear")]
    raise ConfigError(f"axis: expected one of {AXES}, got {axis!r}")


def cell_label(cfg: BlendConfig, axis: str) -> str:
    if axis in ("top_interp", "bottom_sampling"):
        return f"{cfg.label}/{getattr(cfg, axis)}"
    return cfg.label


def _cell_job(args):
    cfg, data = args
    res = run_cell(cfg, data)
    return res.report.ious, res.disagreement


def run_ablation(cfg: ExperimentConfig, axis: str, threads: int = 1, out_dir=None):
    """Every cell shares the same dataset bytes; returns [(label, ious, disagreement)]."""
    cells = ablation_cells(cfg.blend, axis)
    with threadpool_limits(1):
        data = generate_dataset(cfg.dataset, threads)
    jobs = [(cfg.with_blend(c), data) for c in cells]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            outs = list(pool.map(_cell_job, jobs))
    else:
        outs = [_cell_job(j) for j in jobs]
    rows = [(cell_label(c, axis), ious, dis) for c, (ious, dis) in zip(cells, outs)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_reports(out / f"ablation_{axis}.csv", [EvalReport(label, ious) for label, ious, _ in rows])
        write_run_json(out, f"ablate:{axis}", cfg, {"disagreement": {label: d for label, _, d in rows}})
    return rows
