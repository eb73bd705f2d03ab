"""End-to-end orchestration: train -> score -> evaluate -> report.

One model per (machine, section), trained on that section's training clips
only.  Output layout under ``out``::

    log.jsonl
    seed_<s>/models/{model,covariance,threshold}_<machine>_section_<NN>.*
    seed_<s>/scores/<mode>/{anomaly_score,decision_result}_*.csv, meta.json
    seed_<s>/report/<mode>/report.{csv,txt}, meta.json
    summary_<mode>.{csv,txt}
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autoencoder as ae
from . import evaluation as ev
from . import scoring as sc
from .dataset import (DatasetCatalog, DatasetError, load_wav, read_manifest, scan_dataset,
                      truth_from_catalog, validate_split)
from .features import FeatureConfig, clip_features
from .synthgen import MANIFEST_NAME


class ValidationFailure(DatasetError):
    """Input corpus or run configuration is not acceptable (exit code 2)."""


class FirstShotViolation(ValidationFailure):
    pass


@dataclass
class RunConfig:
    root: str = "data"
    out: str = "runs"
    test_root: str = ""
    manifest: str = ""
    profile: str = "development"
    mode: str = "simple"
    seeds: tuple[int, ...] = (0,)
    train_split: str = "train"
    # features
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 128
    frames: int = 5
    fmin: float = 0.0
    fmax: float = 8000.0
    # model / optimiser
    arch: str = ae.DEFAULT_ARCH
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = True
    # scoring / evaluation
    lam: float = 1e-3
    p: float = 0.1
    percentile: float = 0.9

    # keys that locate files rather than define the experiment
    PATH_KEYS = ("root", "out", "test_root", "manifest")

    def __post_init__(self):
        if self.mode not in sc.MODES:
            raise ValidationFailure(f"unknown mode '{self.mode}'")
        if not 0 < self.p <= 1:
            raise ValidationFailure("p must lie in (0, 1]")
        if not self.seeds:
            raise ValidationFailure("seed list is empty")
        if self.train_split != "train":
            raise FirstShotViolation(
                f"first-shot constraint: training may only use the 'train' split, not '{self.train_split}'")

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(n_fft=self.n_fft, hop=self.hop, n_mels=self.n_mels, frames=self.frames,
                             fmin=self.fmin, fmax=self.fmax)

    def train_config(self, seed: int) -> ae.TrainConfig:
        return ae.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, beta1=self.beta1,
                              beta2=self.beta2, eps=self.adam_eps, seed=seed, shuffle=self.shuffle)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "seeds":
                value = ",".join(map(str, value))
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        text = "\n".join(line for line in self.dumps().splitlines()
                         if line.split(" = ")[0] not in self.PATH_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def loads(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw: dict = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationFailure(f"config line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValidationFailure(f"config line {n}: unknown key '{key}'")
            kw[key] = value
        kw.update({k: v for k, v in overrides.items() if v is not None})
        for key, value in list(kw.items()):
            if not isinstance(value, str):
                continue
            t = types[key]
            try:
                if key == "seeds":
                    kw[key] = tuple(int(s) for s in value.replace(",", " ").split())
                elif t == "bool":
                    kw[key] = value.lower() in ("1", "true", "yes")
                elif t == "int":
                    kw[key] = int(value)
                elif t == "float":
                    kw[key] = float(value)
            except ValueError:
                raise ValidationFailure(f"config key '{key}': bad value '{value}'") from None
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"), **overrides)


class JsonLog:
    """JSON-lines event log; the only place wall-clock time is recorded."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, stage: str, **fields) -> None:
        if not self.path:
            return
        event = {"time": round(time.time(), 3), "stage": stage, **fields}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def corpus_fingerprint(test_names: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(sorted(test_names)).encode()).hexdigest()


def load_stacks(paths: Sequence[Path], feats: FeatureConfig) -> list[np.ndarray]:
    return [clip_features(load_wav(p), feats) for p in paths]


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out) / f"seed_{seed}"


def _model_paths(cfg: RunConfig, seed: int, machine: str, section: str) -> dict[str, Path]:
    base = _seed_dir(cfg, seed) / "models"
    tag = f"{machine}_section_{section}"
    return {"model": base / f"model_{tag}.asdm",
            "covariance": base / f"covariance_{tag}.asdc",
            "threshold": base / f"threshold_{tag}.json"}


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# -- stages ----------------------------------------------------------------

def fit_section(cfg: RunConfig, source: list[np.ndarray], target: list[np.ndarray], seed: int,
                log: JsonLog | None = None, machine: str = ""):
    """Train one model on pooled source+target rows and fit everything scoring needs."""
    feats = cfg.features
    arch = ae.Architecture.parse(cfg.arch, io_dim=feats.dim)
    model = ae.init_model(arch, seed)
    model.feature_fingerprint = feats.fingerprint()
    on_epoch = (lambda e, loss: log("train", machine=machine, seed=seed, epoch=e, loss=loss)) if log else None
    model, report = ae.train(model, source + target, cfg.train_config(seed), on_epoch)
    # one forward pass over the training clips serves the covariances and both thresholds
    res_s = [sc.residuals(model, s) for s in source]
    res_t = [sc.residuals(model, s) for s in target]
    covs = sc.covariance_from_residuals(res_s, res_t, cfg.lam)
    thresholds = {
        "simple": sc.fit_threshold([sc.simple_from_residuals(r) for r in res_s + res_t], cfg.percentile).value,
        "mahalanobis": sc.fit_threshold([sc.mahalanobis_from_residuals(r, covs) for r in res_s + res_t],
                                        cfg.percentile).value,
    }
    return model, covs, thresholds, report


def run_train(cfg: RunConfig, log: JsonLog | None = None) -> list[Path]:
    catalog = scan_dataset(cfg.root)
    violations = validate_split(catalog, cfg.profile)
    if violations:
        raise ValidationFailure("corpus failed validation:\n  " + "\n  ".join(map(str, violations)))
    written = []
    for machine, sections in sorted(catalog.machines.items()):
        for section, clips in sorted(sections.items()):
            if not clips.train_source or not clips.train_target:
                raise ValidationFailure(f"{machine}/section_{section}: needs source and target training clips")
            t0 = time.perf_counter()
            source = load_stacks([p for p, _ in clips.train_source], cfg.features)
            target = load_stacks([p for p, _ in clips.train_target], cfg.features)
            if log:
                log("features", machine=machine, section=section, clips=len(source) + len(target),
                    seconds=round(time.perf_counter() - t0, 3))
            for seed in cfg.seeds:
                model, covs, thresholds, report = fit_section(cfg, source, target, seed, log, machine)
                paths = _model_paths(cfg, seed, machine, section)
                paths["model"].parent.mkdir(parents=True, exist_ok=True)
                ae.save_model(paths["model"], model)
                sc.save_covariances(paths["covariance"], covs)
                _write_json(paths["threshold"], {"config_fingerprint": cfg.fingerprint(),
                                                 "percentile": cfg.percentile, "thresholds": thresholds})
                if log:
                    log("trained", machine=machine, section=section, seed=seed,
                        loss=report.final_loss, seconds=round(report.seconds, 3))
                written.append(paths["model"])
    return written


def _test_catalog(cfg: RunConfig) -> DatasetCatalog:
    return scan_dataset(cfg.test_root or cfg.root)


def run_score(cfg: RunConfig, log: JsonLog | None = None) -> list[Path]:
    catalog = _test_catalog(cfg)
    feats = cfg.features
    corpus_fp = corpus_fingerprint(catalog.test_names())
    written = []
    test_stacks = {}
    for machine, sections in sorted(catalog.machines.items()):
        for section, clips in sorted(sections.items()):
            if clips.test:
                test_stacks[(machine, section)] = (
                    [p.name for p, _ in clips.test], load_stacks([p for p, _ in clips.test], feats))
    for seed in cfg.seeds:
        out = _seed_dir(cfg, seed) / "scores" / cfg.mode
        out.mkdir(parents=True, exist_ok=True)
        for (machine, section), (names, stacks) in test_stacks.items():
            paths = _model_paths(cfg, seed, machine, section)
            if not paths["model"].exists():
                raise ValidationFailure(f"no trained model at {paths['model']}")
            model = ae.load_model(paths["model"])
            if model.feature_fingerprint != feats.fingerprint():
                raise ValidationFailure(f"{paths['model']} was trained on different feature settings")
            covs = sc.load_covariances(paths["covariance"]) if cfg.mode == "mahalanobis" else None
            phi = json.loads(paths["threshold"].read_text())["thresholds"][cfg.mode]
            records = [(n, sc.score_clip(model, s, cfg.mode, covs)) for n, s in zip(names, stacks)]
            sc.write_score_csv(out / sc.score_csv_name(machine, section), records)
            sc.write_decision_csv(out / sc.decision_csv_name(machine, section), records,
                                  sc.Threshold(phi))
            written.append(out / sc.score_csv_name(machine, section))
            if log:
                log("scored", machine=machine, section=section, seed=seed, mode=cfg.mode, clips=len(records))
        _write_json(out / "meta.json", {"config_fingerprint": cfg.fingerprint(), "corpus_fingerprint": corpus_fp,
                                        "feature_fingerprint": feats.fingerprint(), "mode": cfg.mode,
                                        "seed": seed})
    return written


def load_truth(cfg: RunConfig):
    root = Path(cfg.test_root or cfg.root)
    manifest = Path(cfg.manifest) if cfg.manifest else root / MANIFEST_NAME
    if manifest.exists():
        return read_manifest(manifest)
    return truth_from_catalog(scan_dataset(root))


def run_evaluate(cfg: RunConfig, log: JsonLog | None = None) -> list[ev.EvaluationReport]:
    truth = load_truth(cfg)
    expected_fp = corpus_fingerprint([r.filename for r in truth])
    cells = sorted({(r.machine, r.section) for r in truth})
    reports = []
    for seed in cfg.seeds:
        score_dir = _seed_dir(cfg, seed) / "scores" / cfg.mode
        meta_path = score_dir / "meta.json"
        if not meta_path.exists():
            raise ValidationFailure(f"no scores at {score_dir}")
        meta = json.loads(meta_path.read_text())
        if meta["corpus_fingerprint"] != expected_fp:
            raise ValidationFailure(f"{score_dir}: scores were produced for a different corpus than the manifest")
        report = ev.evaluate(truth, ev.collect_scores(score_dir, cells), cfg.p)
        out = _seed_dir(cfg, seed) / "report" / cfg.mode
        out.mkdir(parents=True, exist_ok=True)
        ev.write_report_csv(out / "report.csv", report)
        (out / "report.txt").write_text(ev.render_report(report, f"{cfg.mode} mode, seed {seed}"),
                                        encoding="utf-8")
        _write_json(out / "meta.json", {"config_fingerprint": meta["config_fingerprint"],
                                        "corpus_fingerprint": expected_fp, "mode": cfg.mode, "p": cfg.p,
                                        "seed": seed})
        if log:
            log("evaluated", seed=seed, mode=cfg.mode, official_score=report.official_score)
        reports.append(report)
    return reports


def run_report(report_csvs: Sequence[str | Path], out_prefix: str | Path | None = None,
               title: str = "", p: float = 0.1) -> str:
    """Mean ± std table across trial report CSVs; optionally written to <prefix>.{txt,csv}."""
    reports = [ev.read_report_csv(path, p) for path in report_csvs]
    if not reports:
        raise ValidationFailure("no trial reports given")
    text = ev.render_report(reports, title)
    if out_prefix:
        prefix = Path(out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".txt").write_text(text, encoding="utf-8")
        rows = ev.aggregate_reports(reports)
        omegas = np.array([r.official_score for r in reports])
        lines = ["machine,section,auc_source,auc_source_std,auc_target,auc_target_std,pauc,pauc_std"]
        fmt = lambda v: "" if v is None else repr(v)  # noqa: E731
        for r in rows:
            lines.append(",".join([r["machine"], r["section"]] + [fmt(r[k]) for k in
                                  ("auc_source", "auc_source_std", "auc_target", "auc_target_std",
                                   "pauc", "pauc_std")]))
        std = repr(float(omegas.std())) if len(reports) > 1 else ""
        lines.append(f"official_score,,{float(omegas.mean())!r},{std},,,,")
        prefix.with_suffix(".csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return text


def trial_reports(cfg: RunConfig) -> list[Path]:
    return [_seed_dir(cfg, s) / "report" / cfg.mode / "report.csv" for s in cfg.seeds]
