"""``brainage`` command line: gen-data, train, eval, attribute, bench, report.

Every command reads one JSON run config; environment variables of the form
``OPENMAP_<SECTION>__<FIELD>=<json>`` override individual fields (for
example ``OPENMAP_TRAIN__EPOCHS=5``), and ``OPENMAP_RUN_DIR`` overrides the
run directory.  Outputs land under the run directory and are recorded with
their sha256 in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from html import escape
from pathlib import Path
from typing import Any

import numpy as np

from . import svg
from .analytics import AgePrediction, build_report, predictions_from, write_report_tables
from .attribution import NOTICE, corpus_gradient_map, rank_regions, ranking_svg, write_ranking_csv
from .benchmark import BenchConfig, run_bench, write_bench_csv
from .errors import BrainAgeError, ConfigError, ContractError, DataError
from .model import BrainAgeModel, ModelConfig, load_checkpoint, model_flops, save_checkpoint
from .numcore.tensorio import file_sha256, write_tensor
from .synthcorpus import PLANTED_REGIONS, CorpusConfig, build_corpus, load_corpus, reference_phantom, region_volumes
from .trainer import TrainConfig, fit, predict_records, stats_from_corpus, write_log_csv

ENV_PREFIX = "OPENMAP_"
SECTIONS = {"corpus": CorpusConfig, "model": ModelConfig, "train": TrainConfig, "bench": BenchConfig}


@dataclass
class RunConfig:
    run_dir: str = "runs/desk"
    corpus_dir: str | None = None
    eval_split: str = "test"
    attribution_batch: int = 16
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def root(self) -> Path:
        return Path(self.run_dir)

    @property
    def corpus_root(self) -> Path:
        return Path(self.corpus_dir) if self.corpus_dir else self.root / "corpus"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoints" / "best"

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("run_dir", "corpus_dir", "eval_split", "attribution_batch")}
        for name in SECTIONS:
            out[name] = getattr(self, name).to_dict()
        return out


def _section(name: str, cls, raw: Any, bad: list[str]):
    if raw is None:
        return RunConfig.__dataclass_fields__[name].default_factory()
    if not isinstance(raw, dict):
        bad.append(name)
        return None
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        bad.extend(f"{name}.{u}" for u in unknown)
        return None
    base = RunConfig.__dataclass_fields__[name].default_factory().to_dict()
    base.update(raw)
    try:
        obj = cls.from_dict(base)
        if hasattr(obj, "validate"):
            obj.validate()
    except ConfigError as exc:
        bad.extend(f"{name}.{f}" for f in (exc.fields or ["?"]))
        return None
    except (TypeError, ValueError) as exc:
        bad.append(f"{name} ({exc})")
        return None
    return obj


def run_config_from_dict(raw: dict) -> RunConfig:
    """Validate every section and raise one ConfigError listing all violated fields."""
    bad: list[str] = []
    top = {f.name for f in dataclasses.fields(RunConfig)}
    bad.extend(sorted(k for k in raw if k not in top))
    sections = {name: _section(name, cls, raw.get(name), bad) for name, cls in SECTIONS.items()}
    cfg = RunConfig()
    for key in ("run_dir", "corpus_dir", "eval_split", "attribution_batch"):
        if key in raw:
            setattr(cfg, key, raw[key])
    if cfg.eval_split not in ("train", "valid", "test"):
        bad.append("eval_split")
    if not isinstance(cfg.attribution_batch, int) or cfg.attribution_batch < 1:
        bad.append("attribution_batch")
    if sections["model"] is not None and sections["corpus"] is not None:
        m, c = sections["model"], sections["corpus"]
        if tuple(m.chunk_shape) != tuple(c.chunk_shape):
            bad.append("model.chunk_shape")
        if m.n_regions != c.n_regions:
            bad.append("model.n_regions")
    if bad:
        raise ConfigError(f"invalid run config: {bad}", bad)
    for name, obj in sections.items():
        setattr(cfg, name, obj)
    try:
        cfg.root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"run_dir is not creatable: {exc}", ["run_dir"]) from None
    return cfg


def apply_env_overrides(raw: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    raw = json.loads(json.dumps(raw))
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = json.loads(environ[key])
        except json.JSONDecodeError:
            value = environ[key]
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return raw


def load_run_config(path, seed: int | None = None, environ=None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text()) if path else {}
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", ["config"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}", ["config"]) from None
    raw = apply_env_overrides(raw, environ)
    if seed is not None:
        # --seed selects the training run: model init and training streams
        raw.setdefault("model", {})["seed"] = seed
        raw.setdefault("train", {})["seed"] = seed
    return run_config_from_dict(raw)


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

def _config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def update_manifest(cfg: RunConfig, command: str, outputs: list[Path]) -> Path:
    root = cfg.root
    path = root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"files": {}, "commands": {}}
    for p in outputs:
        for f in sorted(p.rglob("*")) if p.is_dir() else [p]:
            if f.is_file():
                manifest["files"][os.path.relpath(f, root)] = file_sha256(f)
    manifest["commands"][command] = {"config_sha256": _config_digest(cfg), "config": cfg.to_dict()}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_corpus(cfg: RunConfig):
    if not (cfg.corpus_root / "manifest.json").exists():
        raise DataError(f"no corpus at {cfg.corpus_root}; run gen-data first")
    return load_corpus(cfg.corpus_root)


def _load_model(cfg: RunConfig) -> BrainAgeModel:
    if not (cfg.checkpoint / "manifest.json").exists():
        raise ContractError(f"no checkpoint at {cfg.checkpoint}; run train first")
    return load_checkpoint(cfg.checkpoint)


def cmd_gen_data(cfg: RunConfig) -> dict:
    corpus = build_corpus(cfg.corpus, cfg.corpus_root)
    counts = {s: len(corpus.split(s)) for s in ("train", "valid", "test")}
    update_manifest(cfg, "gen-data", [cfg.corpus_root / "manifest.json"])
    return {"corpus": str(cfg.corpus_root), "scans": len(corpus.records), "splits": counts}


def cmd_train(cfg: RunConfig) -> dict:
    corpus = _load_corpus(cfg)
    model = BrainAgeModel(cfg.model, stats_from_corpus(corpus))
    result = fit(model, corpus, cfg.train)
    extra = {"train_config": cfg.train.to_dict(), "best_epoch": result.best_epoch,
             "best_valid_mae": result.best_valid_mae if result.best_epoch is not None else None}
    save_checkpoint(model, cfg.checkpoint, extra)
    log_path = cfg.root / "tables" / "train_log.csv"
    write_log_csv(result.log, log_path)
    update_manifest(cfg, "train", [cfg.checkpoint, log_path])
    return {"checkpoint": str(cfg.checkpoint), "epochs": len(result.log), **extra}


def _scatter_figures(preds: list[AgePrediction], fig_dir: Path) -> list[Path]:
    fig_dir.mkdir(parents=True, exist_ok=True)
    groups = sorted({p.group for p in preds}, key=lambda g: ("CN", "MCI", "AD").index(g) if g in ("CN", "MCI", "AD") else 9)
    out = []
    for g in groups:
        rows = [p for p in preds if p.group == g]
        path = fig_dir / f"scatter_{g}.svg"
        path.write_text(svg.scatter({g: ([p.y for p in rows], [p.y_hat for p in rows])},
                                    f"{g}: predicted vs chronological age", "age (years)", "predicted age (years)",
                                    identity_line=True))
        out.append(path)
    path = fig_dir / "bag_histogram.svg"
    path.write_text(svg.histogram({g: [p.bag for p in preds if p.group == g] for g in groups},
                                  "Brain age gap by group", "BAG (years)"))
    out.append(path)
    return out


def cmd_eval(cfg: RunConfig) -> dict:
    corpus = _load_corpus(cfg)
    model = _load_model(cfg)
    records = corpus.split(cfg.eval_split)
    if not records:
        raise DataError(f"split {cfg.eval_split!r} is empty")
    preds = predictions_from(records, predict_records(model, corpus, records))
    report = build_report(preds)
    written = write_report_tables(report, preds, cfg.root)
    written += _scatter_figures(preds, cfg.root / "figures")
    update_manifest(cfg, "eval", written)
    return {"split": cfg.eval_split, "n": report.n, "mae": report.mae, "pearson_r": report.pearson_r}


def cmd_attribute(cfg: RunConfig) -> dict:
    corpus = _load_corpus(cfg)
    model = _load_model(cfg)
    records = corpus.split("test", ["CN"])
    if not records:
        raise DataError("attribution needs CN scans in the test split")
    views = np.stack([corpus.chunks(r) for r in records])
    vols = np.stack([r.region_volumes for r in records])
    ages = np.array([r.age for r in records])
    fused = corpus_gradient_map(model, views, vols, ages, corpus.crop, cfg.attribution_batch)
    ref = reference_phantom(corpus.geometry, corpus.age_mean)
    ref_vols = region_volumes(ref.label_map, corpus.config.n_regions, corpus.geometry.voxel_volume)
    ranking = rank_regions(fused.volume, ref.label_map, ref_vols, corpus.geometry.voxel_volume)
    out_dir = cfg.root / "attribution"
    gbar_path = out_dir / "gbar.tensor"
    write_tensor(gbar_path, fused.volume, "f64")
    csv_path = cfg.root / "tables" / "region_ranking.csv"
    write_ranking_csv(ranking, csv_path)
    fig_path = cfg.root / "figures" / "region_ranking.svg"
    fig_path.parent.mkdir(parents=True, exist_ok=True)
    fig_path.write_text(ranking_svg(ranking, highlight=PLANTED_REGIONS))
    summary = {"n_samples": fused.count, "reference_age": corpus.age_mean, "notice": NOTICE,
               "top": [dataclasses.asdict(r) for r in ranking[:15]]}
    sum_path = out_dir / "attribution.json"
    sum_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    update_manifest(cfg, "attribute", [gbar_path, csv_path, fig_path, sum_path])
    return {"n_samples": fused.count, "top3": [r.region_id for r in ranking[:3]]}


def cmd_bench(cfg: RunConfig) -> dict:
    result = run_bench(cfg.bench)
    csv_path = cfg.root / "tables" / "bench.csv"
    write_bench_csv(result, csv_path)
    desk = cfg.model
    summary = {
        "slopes": result.slopes,
        "model_flops": {"n_tokens": desk.tokens_per_view, "desk_model": model_flops(desk)},
        "note": "wall_ns is the best of the configured repetitions; timings are machine dependent",
    }
    json_path = cfg.root / "bench.json"
    json_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    fig_path = cfg.root / "figures" / "bench.svg"
    fig_path.parent.mkdir(parents=True, exist_ok=True)
    series = {}
    for comp in result.slopes:
        rows = [r for r in result.rows if r.component == comp]
        series[f"{comp} (slope {result.slopes[comp]:.2f})"] = (
            [float(np.log2(r.n)) for r in rows], [float(np.log10(r.wall_ns)) for r in rows])
    fig_path.write_text(svg.scatter(series, "Wall time scaling", "log2 n", "log10 wall ns"))
    update_manifest(cfg, "bench", [csv_path, json_path, fig_path])
    return summary


def cmd_report(cfg: RunConfig) -> dict:
    root = cfg.root
    metrics_path = root / "metrics.json"
    if not metrics_path.exists():
        raise DataError(f"no metrics.json in {root}; run eval first")
    metrics = json.loads(metrics_path.read_text())
    parts = ["<!doctype html>", "<html><head><meta charset='utf-8'><title>brain age run report</title></head><body>",
             f"<h1>Run report: {escape(str(root))}</h1>",
             f"<p>N = {metrics['n']}, MAE = {metrics['mae']:.3f} years, Pearson r = "
             f"{metrics['pearson_r'] if metrics['pearson_r'] is None else round(metrics['pearson_r'], 4)}</p>",
             f"<p>{escape(metrics['ci_method'])}</p>",
             "<h2>Brain age gap by group</h2><table border='1' cellpadding='3'>"
             "<tr><th>group</th><th>n</th><th>BAG mean</th><th>95% CI</th><th>MAE</th><th>r</th></tr>"]
    for g, s in sorted(metrics["groups"].items()):
        ci = "n/a" if s["bag_ci95_low"] is None else f"({s['bag_ci95_low']:.2f}, {s['bag_ci95_high']:.2f})"
        r = "n/a" if s["r"] is None else f"{s['r']:.3f}"
        parts.append(f"<tr><td>{escape(g)}</td><td>{s['n']}</td><td>{s['bag_mean']:.2f}</td><td>{ci}</td>"
                     f"<td>{s['mae']:.2f}</td><td>{r}</td></tr>")
    parts.append("</table><h2>Error and gap against cognitive score</h2><table border='1' cellpadding='3'>"
                 "<tr><th>group</th><th>|error| r</th><th>|error| p</th><th>BAG r</th><th>BAG p</th></tr>")
    for g in sorted(set(metrics["abs_error_vs_score"]) | set(metrics["bag_vs_score"])):
        a = metrics["abs_error_vs_score"].get(g)
        b = metrics["bag_vs_score"].get(g)
        cell = lambda c, k: "n/a" if c is None else f"{c[k]:.3g}"  # noqa: E731
        parts.append(f"<tr><td>{escape(g)}</td><td>{cell(a, 'r')}</td><td>{cell(a, 'p')}</td>"
                     f"<td>{cell(b, 'r')}</td><td>{cell(b, 'p')}</td></tr>")
    parts.append("</table>")
    for note in metrics.get("notices", []):
        parts.append(f"<p><em>{escape(note)}</em></p>")
    fig_dir = root / "figures"
    for fig in sorted(fig_dir.glob("*.svg")) if fig_dir.exists() else []:
        parts.append(f"<h3>{escape(fig.stem)}</h3>")
        parts.append(fig.read_text())
    parts.append("</body></html>")
    path = root / "report.html"
    path.write_text("\n".join(parts) + "\n")
    update_manifest(cfg, "report", [path])
    return {"report": str(path)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "attribute": cmd_attribute,
    "bench": cmd_bench,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brainage", description="Synthetic multiview brain-age pipeline")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="training seed; overrides model.seed and train.seed")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 guarantees bit-reproducibility")
    return p


def _error_json(exc: BaseException) -> str:
    body = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        body["fields"] = list(exc.fields or [])
    return json.dumps(body, sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1", ["threads"])
        cfg = load_run_config(args.config, args.seed)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            summary = COMMANDS[args.command](cfg)
    except (BrainAgeError, OSError) as exc:
        print(_error_json(exc), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
