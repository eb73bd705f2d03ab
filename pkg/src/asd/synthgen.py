"""Seeded synthetic machine-sound corpora in the DCASE layout.

Each machine is a harmonic stack with slow amplitude modulation over coloured
background noise.  The target domain shifts the fundamental by a fixed ratio
and raises the noise floor; anomalies add a transient, distortion or band
noise component whose RMS is ``severity`` times the clean clip RMS.
"""
from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .dataset import (PROFILES, SAMPLE_RATE, ClipMetadata, DatasetCatalog, DatasetError, SplitCounts,
                      TruthRow, resolve_profile, scan_dataset, write_attributes, write_manifest, write_wav)

ANOMALY_KINDS = ("transient", "distortion", "band_noise")
# "easy" settings: a default autoencoder separates these from normal clips
EASY_SEVERITY = {"transient": 0.04, "distortion": 0.1, "band_noise": 0.06}
CLEAN_RMS = 0.1
MANIFEST_NAME = "ground_truth.csv"

# group ids used to derive per-clip generator streams
_GROUPS = {
    ("source", "train", "normal"): 0,
    ("target", "train", "normal"): 1,
    ("source", "test", "normal"): 2,
    ("target", "test", "normal"): 3,
    ("source", "test", "anomaly"): 4,
    ("target", "test", "anomaly"): 5,
}


@dataclass(frozen=True)
class MachineSpec:
    name: str
    base_hz: float = 150.0
    harmonics: tuple[float, ...] = (1.0, 0.6, 0.4, 0.25, 0.15, 0.1)
    noise_db: float = -15.0
    target_pitch_ratio: float = 1.15
    target_noise_delta_db: float = 6.0
    anomaly: str = "band_noise"
    severity: float | None = None  # None -> EASY_SEVERITY[anomaly]
    bursts: int = 4
    duration_s: float = 6.0
    jitter: float = 0.002
    counts: SplitCounts | None = None
    attributes_visible: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.anomaly not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind '{self.anomaly}'")
        if self.severity is None:
            object.__setattr__(self, "severity", EASY_SEVERITY[self.anomaly])
        if not self.severity > 0:
            raise ValueError("severity must be > 0")
        if not self.target_pitch_ratio > 0:
            raise ValueError("target_pitch_ratio must be > 0")
        if not self.base_hz > 0 or not self.harmonics:
            raise ValueError("need a positive fundamental and at least one harmonic")
        if "_" in self.name or "/" in self.name or not self.name:
            raise ValueError(f"bad machine name '{self.name}'")

    def fundamental(self, domain: str) -> float:
        return self.base_hz * (self.target_pitch_ratio if domain == "target" else 1.0)

    def noise_level_db(self, domain: str) -> float:
        return self.noise_db + (self.target_noise_delta_db if domain == "target" else 0.0)

    def attributes(self, domain: str) -> dict[str, str]:
        return {"f0": str(int(round(self.fundamental(domain)))),
                "snr": str(int(round(-self.noise_level_db(domain))))}


DEFAULT_MACHINES = (
    MachineSpec("fan", base_hz=180.0, anomaly="band_noise", seed=1),
    MachineSpec("gearbox", base_hz=95.0, harmonics=(1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1),
                noise_db=-12.0, target_pitch_ratio=0.95, target_noise_delta_db=3.0, anomaly="transient",
                attributes_visible=False, seed=2),
)


def seven_machine_specs() -> tuple[MachineSpec, ...]:
    """A development-like set with the seven machine names of the real task."""
    return (
        MachineSpec("fan", base_hz=180.0, anomaly="band_noise", seed=1),
        MachineSpec("gearbox", base_hz=95.0, target_pitch_ratio=0.95, target_noise_delta_db=3.0,
                    anomaly="transient", attributes_visible=False, seed=2),
        MachineSpec("bearing", base_hz=240.0, anomaly="distortion", seed=3),
        MachineSpec("slider", base_hz=60.0, anomaly="transient", attributes_visible=False, seed=4),
        MachineSpec("valve", base_hz=320.0, harmonics=(1.0, 0.3), anomaly="band_noise", seed=5),
        MachineSpec("ToyCar", base_hz=130.0, anomaly="distortion", seed=6),
        MachineSpec("ToyTrain", base_hz=75.0, anomaly="band_noise", attributes_visible=False, seed=7),
    )


def clip_rng(spec: MachineSpec, group: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, machine, group, clip index)."""
    return np.random.default_rng([spec.seed, zlib.crc32(spec.name.encode()), group, index])


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def clean_signal(spec: MachineSpec, domain: str, rng: np.random.Generator,
                 sr: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(spec.duration_s * sr))
    t = np.arange(n) / sr
    f0 = spec.fundamental(domain) * (1.0 + spec.jitter * rng.standard_normal())
    tone = np.zeros(n)
    for h, amp in enumerate(spec.harmonics, start=1):
        if h * f0 >= 0.95 * sr / 2:
            break
        gain = amp * (1.0 + 0.1 * rng.standard_normal())
        tone += gain * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    am_rate, am_phase = rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
    tone *= 1.0 + 0.1 * np.sin(2 * np.pi * am_rate * t + am_phase)
    tone *= CLEAN_RMS / _rms(tone)
    noise = signal.lfilter([1.0], [1.0, -0.7], rng.standard_normal(n))
    noise *= CLEAN_RMS * 10 ** (spec.noise_level_db(domain) / 20) / _rms(noise)
    return tone + noise


def inject_anomaly(clean: np.ndarray, kind: str, severity: float, rng: np.random.Generator,
                   bursts: int = 4, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Add an anomalous component scaled to ``severity`` x the clean RMS."""
    if not severity > 0:
        raise ValueError("severity must be > 0")
    clean = np.asarray(clean, dtype=np.float64)
    n = clean.size
    if kind == "transient":
        comp = np.zeros(n)
        blen = min(n, int(0.05 * sr))
        env = np.exp(-np.arange(blen) / (0.01 * sr))
        for start in rng.integers(0, n - blen + 1, size=bursts):
            comp[start:start + blen] += env * rng.standard_normal(blen)
    elif kind == "distortion":
        comp = clean * clean
        comp -= comp.mean()
    elif kind == "band_noise":
        centre = rng.uniform(1500.0, 5000.0)
        sos = signal.butter(4, [centre - 400.0, centre + 400.0], btype="bandpass", fs=sr, output="sos")
        comp = signal.sosfilt(sos, rng.standard_normal(n))
    else:
        raise ValueError(f"unknown anomaly kind '{kind}'")
    level = _rms(comp)
    if level == 0:
        return clean.copy()
    return clean + comp * (severity * _rms(clean) / level)


def make_clip(spec: MachineSpec, domain: str, split: str, condition: str, index: int) -> np.ndarray:
    rng = clip_rng(spec, _GROUPS[(domain, split, condition)], index)
    x = clean_signal(spec, domain, rng)
    if condition == "anomaly":
        x = inject_anomaly(x, spec.anomaly, spec.severity, rng, spec.bursts)
    return x


def _plan(spec: MachineSpec, counts: SplitCounts) -> list[tuple[str, str, str, int]]:
    """(domain, split, condition, index) for every clip, source before target."""
    plan = [("source", "train", "normal", i) for i in range(counts.train_source)]
    plan += [("target", "train", "normal", i) for i in range(counts.train_target)]
    for condition, total in (("normal", counts.test_normal), ("anomaly", counts.test_anomaly)):
        half = total // 2
        plan += [("source", "test", condition, i) for i in range(total - half)]
        plan += [("target", "test", condition, i) for i in range(half)]
    if counts.test_unlabeled:
        quarter = counts.test_unlabeled // 4
        sizes = [counts.test_unlabeled - 3 * quarter, quarter, quarter, quarter]
        for (domain, condition), k in zip([("source", "normal"), ("target", "normal"),
                                           ("source", "anomaly"), ("target", "anomaly")], sizes):
            plan += [(domain, "test", condition, i) for i in range(k)]
    return plan


def generate_corpus(specs: Sequence[MachineSpec], root: str | Path, profile: str = "development",
                    overwrite: bool = False) -> tuple[DatasetCatalog, list[TruthRow]]:
    """Write every machine's clips, attribute CSV and the ground-truth manifest."""
    profile = resolve_profile(profile)
    if not specs:
        raise DatasetError("no machine specs given")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise DatasetError(f"duplicate machine names in {names}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    truth: list[TruthRow] = []
    for spec in specs:
        mdir = root / spec.name
        if mdir.exists() and any(mdir.rglob("*.wav")) and not overwrite:
            raise DatasetError(f"{mdir} already holds clips; pass overwrite=True to regenerate")
        for sub in ("train", "test"):
            (mdir / sub).mkdir(parents=True, exist_ok=True)
            if overwrite:
                for old in (mdir / sub).glob("*.wav"):
                    old.unlink()
        counts = spec.counts or PROFILES[profile]
        plan = _plan(spec, counts)
        unlabeled = bool(counts.test_unlabeled)
        test_plan = [c for c in plan if c[1] == "test"]
        if unlabeled:
            # hide domain/condition behind a seeded shuffle of the test order
            order = np.random.default_rng([spec.seed, zlib.crc32(spec.name.encode()), 99]).permutation(len(test_plan))
            eval_index = {test_plan[j]: k for k, j in enumerate(order)}
        attr_rows = []
        for domain, split, condition, index in plan:
            if split == "test" and unlabeled:
                meta = ClipMetadata(section="00", split="test", condition="unknown",
                                    clip_index=eval_index[(domain, split, condition, index)])
            else:
                attrs = tuple(spec.attributes(domain).items()) if spec.attributes_visible else ()
                meta = ClipMetadata(section="00", split=split, condition=condition, clip_index=index,
                                    domain=domain, attributes=attrs, concealed=not spec.attributes_visible)
            name = meta.filename()
            write_wav(mdir / split / name, make_clip(spec, domain, split, condition, index))
            if split == "test":
                truth.append(TruthRow(f"{spec.name}/test/{name}", domain, condition))
            if spec.attributes_visible and meta.domain is not None:
                attr_rows.append((name, spec.attributes(domain)))
        if attr_rows:
            write_attributes(mdir / "attributes_00.csv", sorted(attr_rows))
    if truth:
        write_manifest(root / MANIFEST_NAME, truth)
    return scan_dataset(root), sorted(truth, key=lambda r: r.filename)


# -- spec files --------------------------------------------------------------

def _coerce(name: str, text: str):
    kind = {f.name: f.type for f in fields(MachineSpec)}[name]
    if name == "harmonics":
        return tuple(float(tok) for tok in text.replace(",", " ").split())
    if name == "attributes_visible":
        return text.strip().lower() in ("1", "true", "yes", "visible")
    if name == "counts":
        vals = [int(tok) for tok in text.replace(",", " ").split()]
        return SplitCounts(*vals)
    if "int" in str(kind):
        return int(text)
    if "float" in str(kind):
        return float(text)
    return text.strip()


def load_machine_specs(path: str | Path) -> tuple[MachineSpec, ...]:
    """Read ``[machine]`` sections of ``key = value`` lines."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path, encoding="utf-8"):
        raise DatasetError(f"cannot read machine spec file {path}")
    known = {f.name for f in fields(MachineSpec)} - {"name"}
    specs = []
    for section in parser.sections():
        kw = {}
        for key, value in parser[section].items():
            if key not in known:
                raise DatasetError(f"{path}: [{section}] unknown key '{key}'")
            kw[key] = _coerce(key, value)
        specs.append(MachineSpec(section, **kw))
    return tuple(specs)


def dump_machine_specs(specs: Sequence[MachineSpec]) -> str:
    out = []
    for spec in specs:
        out.append(f"[{spec.name}]")
        for f in fields(spec):
            if f.name == "name":
                continue
            value = getattr(spec, f.name)
            if value is None:
                continue
            if f.name == "harmonics":
                value = ", ".join(repr(v) for v in value)
            elif f.name == "counts":
                value = ", ".join(str(getattr(value, c.name)) for c in fields(value))
            elif f.name == "attributes_visible":
                value = "visible" if value else "concealed"
            out.append(f"{f.name} = {value}")
        out.append("")
    return "\n".join(out)
