"""Experiment configs, pruning sweeps, FLOPs reports and attention analysis runs."""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import multiprocessing as mp
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .flops import Composition, FlopsReport, PRESETS, run_flops
from .model import ModelConfig, forward, load_checkpoint, save_checkpoint
from .numerics import OpCounter
from .pruning import PruneSchedule
from .sampler import GenerationConfig
from .sequence import AttentionRecord
from .training import GridTask, TrainConfig, eval_accuracy, train

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    K: list[int] = field(default_factory=lambda: [6, 1])
    # a number, or "ring" for the task's known-irrelevant border fraction
    R: list = field(default_factory=lambda: ["ring"])
    strategy: list[str] = field(default_factory=lambda: ["attention", "random"])
    T: list[int] = field(default_factory=lambda: [2])
    points: list[dict] | None = None


@dataclass(frozen=True)
class AnalyzeSpec:
    layers: list[int] | None = None
    top_frac: float = 0.05
    mode: str = "bidirectional"
    n_samples: int = 16
    sample_seed: int = 0
    causal_checkpoint: str | None = None


@dataclass(frozen=True)
class FlopsSpec:
    preset: str | None = None
    K: list[int] = field(default_factory=lambda: [3, 15])
    R: list = field(default_factory=lambda: [0.5, 0.7])
    T: list[int] | None = None
    composition: dict | None = None
    include_minor: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    task: GridTask = GridTask()
    train: TrainConfig = TrainConfig()
    generation: dict = field(default_factory=lambda: {"steps": 2})
    sweep: SweepSpec = SweepSpec()
    analyze: AnalyzeSpec = AnalyzeSpec()
    flops: FlopsSpec = FlopsSpec()
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_size: int = 1000
    checkpoint: str = "results/reference/checkpoint.jsonl"
    out: str = "results/out"
    workers: int = 1
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if not self.seeds:
            raise ConfigError("seeds list must be nonempty")
        if self.eval_size <= 0 or self.workers <= 0:
            raise ConfigError("eval_size and workers must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


_NESTED = {
    "model": ModelConfig,
    "task": GridTask,
    "train": TrainConfig,
    "sweep": SweepSpec,
    "analyze": AnalyzeSpec,
    "flops": FlopsSpec,
}


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    if "version" not in d:
        raise ConfigError("config needs an explicit 'version' field")
    if "model" not in d:
        raise ConfigError("config needs a 'model' section")
    kw = dict(d)
    try:
        for key, cls in _NESTED.items():
            if key in kw:
                kw[key] = _strict(cls, kw[key], key)
        return _strict(ExperimentConfig, kw, "config")
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    return config_from_dict(data)


def task_composition(task: GridTask) -> Composition:
    lay = task.layout
    return Composition(n_img=lay.count("image"), n_txt=len(lay) - lay.count("image") - task.gen_len,
                       gen_len=task.gen_len)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- training ----------------------------------------------------------------


def run_train(cfg: ExperimentConfig, out: Path | None = None, progress=None) -> dict:
    """Train the configured model and write checkpoint + metrics log."""
    ckpt = Path(cfg.checkpoint)
    metrics_path = ckpt.with_name("metrics.jsonl")
    params, metrics, opt = train(cfg.train, cfg.task, cfg.model, metrics_path, progress)
    gcfg = GenerationConfig(cfg.task.gen_len, cfg.generation.get("steps", 2), seed=cfg.train.seed)
    split = cfg.task.split(cfg.train.seed, cfg.eval_size, stream="heldout")
    acc = eval_accuracy(cfg.model, params, cfg.task, split, gcfg)
    extra = {
        "train": asdict(cfg.train),
        "task": asdict(cfg.task),
        "updates": cfg.train.updates,
        "heldout_accuracy": acc,
        "heldout_size": len(split),
    }
    save_checkpoint(ckpt, cfg.model, params, extra)
    summary = {"checkpoint": str(ckpt), "metrics": str(metrics_path), "heldout_accuracy": acc}
    _atomic_write(ckpt.with_name("train_summary.json"), _dumps({**summary, **extra}))
    return summary


def _require_checkpoint(path: str):
    if not Path(path).exists():
        raise MissingArtifact(
            f"checkpoint {path} not found; run `diffprune train --config <cfg>` "
            "or pass --retrain to build it first"
        )
    return load_checkpoint(path)


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class GridPoint:
    K: int | None
    R: float
    strategy: str
    T: int

    @property
    def label(self) -> str:
        if self.strategy == "none":
            return f"baseline_T{self.T}"
        return f"{self.strategy}_K{self.K}_R{self.R:.4f}_T{self.T}"

    def schedule(self) -> PruneSchedule | None:
        if self.strategy == "none":
            return None
        return PruneSchedule(K=self.K, R=self.R, strategy=self.strategy)


def _resolve_ratio(r, task: GridTask) -> float:
    if r == "ring":
        return task.ring_fraction
    if isinstance(r, (int, float)):
        return float(r)
    raise ConfigError(f"prune ratio must be a number or 'ring', got {r!r}")


def grid_points(cfg: ExperimentConfig) -> tuple[list[GridPoint], list[str]]:
    """Expand the sweep grid; invalid points are dropped with a warning string."""
    spec = cfg.sweep
    if spec.points is not None:
        raw = [(p.get("K"), p.get("R"), p.get("strategy", "attention"), p.get("T")) for p in spec.points]
    else:
        raw = list(itertools.product(spec.K, spec.R, spec.strategy, spec.T))
    points, warnings, seen = [], [], set()
    for T in sorted({t for *_, t in raw}):
        try:
            GenerationConfig(cfg.task.gen_len, T)
        except (ValueError, TypeError):
            continue
        points.append(GridPoint(None, 0.0, "none", T))
    for K, R, strategy, T in raw:
        try:
            ratio = _resolve_ratio(R, cfg.task)
            pt = GridPoint(K, ratio, strategy, T)
            PruneSchedule(K=K, R=ratio, strategy=strategy).check_layers(cfg.model.layers)
            GenerationConfig(cfg.task.gen_len, T)
        except (ValueError, TypeError) as e:
            msg = f"skipped grid point K={K} R={R} strategy={strategy} T={T}: {e}"
            log.warning(msg)
            warnings.append(msg)
            continue
        if pt not in seen:
            seen.add(pt)
            points.append(pt)
    return points, warnings


_WORKER: dict = {}


def _init_worker(ckpt_path: str):
    _WORKER["ckpt"] = load_checkpoint(ckpt_path)


def _eval_job(job):
    point, seed, task, eval_size = job
    mcfg, params, _ = _WORKER["ckpt"]
    counter = OpCounter()
    gcfg = GenerationConfig(task.gen_len, point.T, seed=seed, prune=point.schedule())
    split = task.split(seed, eval_size)
    acc = eval_accuracy(mcfg, params, task, split, gcfg, counter=counter)
    return {"accuracy": acc, "mul_adds": counter.block_mul_adds(), "eval_size": len(split)}


def _quartiles(values: list[float]) -> dict:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1)}


def run_sweep(cfg: ExperimentConfig, out=None, workers: int | None = None) -> dict:
    """Evaluate every (grid point, seed) pair and write the merged report.

    Files under ``out``: ``points/<label>.json`` (one per grid point, written
    atomically), ``sweep_report.json``, ``sweep_table.csv`` and
    ``sweep_chart.svg``. The merged report depends only on the config, never
    on the worker count.
    """
    out = Path(out or cfg.out)
    _require_checkpoint(cfg.checkpoint)
    mcfg, _, _ = load_checkpoint(cfg.checkpoint)
    if mcfg != cfg.model:
        raise ConfigError("checkpoint model config differs from the experiment config")
    points, warnings = grid_points(cfg)
    jobs = [(p, s, cfg.task, cfg.eval_size) for p in points for s in cfg.seeds]
    workers = workers or cfg.workers
    if workers == 1:
        _init_worker(cfg.checkpoint)
        results = [_eval_job(j) for j in jobs]
    else:
        ctx = mp.get_context("spawn")
        with ctx.Pool(workers, initializer=_init_worker, initargs=(cfg.checkpoint,)) as pool:
            results = pool.map(_eval_job, jobs, chunksize=1)

    comp = task_composition(cfg.task)
    by_point = {}
    it = iter(results)
    for p in points:
        per_seed = {str(s): next(it) for s in cfg.seeds}
        flops = run_flops(mcfg, comp, p.T, p.schedule())
        for r in per_seed.values():
            r["remaining_flops_pct"] = flops.remaining_pct
            r["reconciled"] = 2 * r["mul_adds"] == flops.pruned_total * r["eval_size"]
        entry = {
            "label": p.label,
            "K": p.K,
            "R": p.R,
            "strategy": p.strategy,
            "T": p.T,
            "remaining_flops_pct": flops.remaining_pct,
            "seeds": per_seed,
            "accuracy": _quartiles([r["accuracy"] for r in per_seed.values()]),
        }
        by_point[p] = entry
        _atomic_write(out / "points" / f"{p.label}.json", _dumps(entry))

    baseline = {p.T: by_point[p]["accuracy"]["median"] for p in points if p.strategy == "none"}
    for p, entry in by_point.items():
        base = baseline[p.T]
        entry["retention"] = entry["accuracy"]["median"] / base if base > 0 else None

    # run-local settings stay out so reports compare across worker counts and dirs
    shared = {k: v for k, v in cfg.to_dict().items() if k not in ("workers", "out")}
    report = {
        "config": shared,
        "composition": asdict(comp),
        "points": [by_point[p] for p in points],
        "warnings": warnings,
    }
    _atomic_write(out / "sweep_report.json", _dumps(report))
    _atomic_write(out / "sweep_table.csv", _sweep_csv(report))
    _atomic_write(out / "sweep_chart.svg", _bar_chart(report))
    return report


def _sweep_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["label", "strategy", "K", "R", "T", "median_accuracy", "q1", "q3",
                "retention", "remaining_flops_pct"])
    for e in report["points"]:
        a = e["accuracy"]
        w.writerow([e["label"], e["strategy"], e["K"] if e["K"] is not None else "",
                    repr(e["R"]), e["T"], repr(a["median"]), repr(a["q1"]), repr(a["q3"]),
                    repr(e["retention"]) if e["retention"] is not None else "",
                    repr(e["remaining_flops_pct"])])
    return buf.getvalue()


def _bar_chart(report: dict) -> str:
    pts = report["points"]
    bar, gap, h, top = 46, 22, 220, 30
    width = gap + len(pts) * (bar + gap)
    height = top + h + 70
    colors = {"none": "#7f7f7f", "attention": "#1f77b4", "random": "#ff7f0e"}
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        f'<line x1="{gap // 2}" y1="{top + h}" x2="{width - gap // 2}" y2="{top + h}" stroke="#000000"/>',
    ]
    for i, e in enumerate(pts):
        x = gap + i * (bar + gap)
        acc = e["accuracy"]["median"]
        bh = round(h * acc, 2)
        label = "baseline" if e["strategy"] == "none" else f"{e['strategy']} K={e['K']}"
        out.append(f'<rect x="{x}" y="{round(top + h - bh, 2)}" width="{bar}" height="{bh}" '
                   f'fill="{colors[e["strategy"]]}"/>')
        out.append(f'<text x="{x + bar / 2}" y="{round(top + h - bh - 4, 2)}" text-anchor="middle">'
                   f'{100 * acc:.2f}</text>')
        out.append(f'<text x="{x + bar / 2}" y="{top + h + 14}" text-anchor="middle">{label}</text>')
        out.append(f'<text x="{x + bar / 2}" y="{top + h + 28}" text-anchor="middle">'
                   f'R={e["R"]:.2f} T={e["T"]}</text>')
        out.append(f'<text x="{x + bar / 2}" y="{top + h + 42}" text-anchor="middle">'
                   f'{e["remaining_flops_pct"]:.1f}% FLOPs</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- FLOPs reports -----------------------------------------------------------


def run_flops_report(cfg: ExperimentConfig | None = None, preset: str | None = None, out=None) -> list[FlopsReport]:
    """FLOPs reports for the configured grid (or a named preset), plus the
    unpruned baseline. Writes ``flops_report.json`` when ``out`` is given."""
    spec = cfg.flops if cfg is not None else FlopsSpec()
    preset = preset or spec.preset
    notes: list[str] = []
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        pre = PRESETS[preset]
        mcfg, comp, steps = pre["model"], pre["composition"], [pre["steps"]]
        notes = list(pre["notes"])
    else:
        if cfg is None:
            raise ConfigError("need a config or a preset")
        mcfg = cfg.model
        comp = Composition(**spec.composition) if spec.composition else task_composition(cfg.task)
        steps = [cfg.generation.get("steps", 2)]
    if spec.T:
        steps = list(spec.T)
    reports = []
    for T in steps:
        base = run_flops(mcfg, comp, T, None, spec.include_minor, preset)
        base.notes = notes
        reports.append(base)
        for K, R in itertools.product(spec.K, spec.R):
            ratio = (_resolve_ratio(R, cfg.task) if cfg else float(R))
            try:
                sched = PruneSchedule(K=K, R=ratio)
                sched.check_layers(mcfg.layers)
            except ValueError as e:
                log.warning("skipped flops point K=%s R=%s: %s", K, R, e)
                continue
            rep = run_flops(mcfg, comp, T, sched, spec.include_minor, preset)
            rep.notes = notes
            reports.append(rep)
    if out is not None:
        payload = [r.to_dict() for r in reports]
        _atomic_write(Path(out) / "flops_report.json", _dumps(payload))
    return reports


# -- attention analysis ------------------------------------------------------


def default_layers(n_layers: int, count: int = 4) -> list[int]:
    return sorted({int(round(v)) for v in np.linspace(1, n_layers, count)})


def _mean_records(mcfg, params, task, prompts, layers) -> list[AttentionRecord]:
    acc = None
    for prompt in prompts:
        _, recs = forward(mcfg, params, prompt, task.layout, capture_layers=layers)
        acc = [r.weights.copy() for r in recs] if acc is None else [a + r.weights for a, r in zip(acc, recs)]
    live = tuple(range(task.seq_len))
    return [AttentionRecord(l, a / len(prompts), live) for l, a in zip(sorted(layers), acc)]


def run_analyze(cfg: ExperimentConfig, out=None) -> dict:
    """Allocation/efficiency profiles and concentration-vs-layer for both
    attention modes, plus heatmaps of the configured mode.

    Outputs in ``out``: ``allocation.json``, ``efficiency.json``,
    ``concentration_by_layer.csv``, ``heatmap_layer<l>.svg`` (CSVs of the raw
    matrices go to ``heatmaps_csv/``).
    """
    out = Path(out or cfg.out)
    spec = cfg.analyze
    mcfg, params, _ = _require_checkpoint(cfg.checkpoint)
    if spec.causal_checkpoint:
        causal_cfg, causal_params, _ = _require_checkpoint(spec.causal_checkpoint)
    else:
        causal_cfg, causal_params = mcfg.with_mode("causal"), params
    models = {
        "bidirectional": (mcfg.with_mode("bidirectional"), params),
        "causal": (causal_cfg.with_mode("causal"), causal_params),
    }
    task = cfg.task
    prompts = [p for p, _ in task.split(spec.sample_seed, spec.n_samples, stream="analyze")]
    all_layers = list(range(1, mcfg.layers + 1))
    alloc, eff, conc = {}, {}, {}
    records_by_mode = {}
    for mode, (mc, pr) in models.items():
        recs = _mean_records(mc, pr, task, prompts, all_layers)
        records_by_mode[mode] = recs
        prof = analysis.allocation_by_role(recs, task.layout)
        alloc[mode] = prof.to_dict()
        eff[mode] = analysis.attention_efficiency(prof).to_dict()
        conc[mode] = [analysis.aggregation_concentration(r, task.layout, spec.top_frac) for r in recs]

    _atomic_write(out / "allocation.json", _dumps(alloc))
    _atomic_write(out / "efficiency.json", _dumps(eff))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["layer", "bidirectional", "causal"])
    for l, b, c in zip(all_layers, conc["bidirectional"], conc["causal"]):
        w.writerow([l, repr(b), repr(c)])
    _atomic_write(out / "concentration_by_layer.csv", buf.getvalue())

    layers = spec.layers or default_layers(mcfg.layers)
    heatmaps = []
    for rec in records_by_mode[spec.mode]:
        if rec.layer in layers:
            _, svg = analysis.export_heatmap(
                rec, out / f"heatmap_layer{rec.layer}", task.layout, csv_dir=out / "heatmaps_csv"
            )
            heatmaps.append(str(svg))
    return {"allocation": alloc, "efficiency": eff, "concentration": conc, "heatmaps": heatmaps}
