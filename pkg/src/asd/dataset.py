"""Corpus ingestion for the DCASE task layout.

Directory layout::

    <root>/<machine_type>/train/*.wav
    <root>/<machine_type>/test/*.wav
    <root>/<machine_type>/attributes_00.csv   (optional)

Filename grammar::

    section_{NN}_{domain}_{split}_{condition}_{IIII}_{attr tokens}.wav
    section_{NN}_test_{IIII}.wav                 (evaluation profile, unlabeled)

Attribute tokens are alternating ``key_value`` pairs, or the single sentinel
``noAttributes`` when the attributes are concealed.
"""
from __future__ import annotations

import csv
import json
import logging
import wave
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
DOMAINS = ("source", "target")
SPLITS = ("train", "test")
CONDITIONS = ("normal", "anomaly", "unknown")
NO_ATTRIBUTES = "noAttributes"
DEFAULT_SECTIONS = ("00",)


class DatasetError(Exception):
    """Raised for malformed corpora, filenames or audio files."""


class FilenameError(DatasetError):
    pass


class WavFormatError(DatasetError):
    pass


class AttributeMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise WavFormatError(f"expected {SAMPLE_RATE} Hz, found {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise WavFormatError("clip must be a non-empty mono signal")
        if not np.all(np.isfinite(self.samples)):
            raise WavFormatError("clip contains non-finite samples")

    @property
    def length(self) -> int:
        return int(self.samples.size)


@dataclass(frozen=True)
class ClipMetadata:
    section: str
    split: str
    condition: str
    clip_index: int
    domain: str | None = None
    attributes: tuple[tuple[str, str], ...] = ()
    concealed: bool = False
    machine_type: str = ""

    def __post_init__(self):
        if self.split == "train" and self.condition != "normal":
            raise FilenameError(f"training clips must be normal, got condition '{self.condition}'")
        if self.concealed and self.attributes:
            raise FilenameError("concealed clips cannot carry attributes")

    @property
    def labeled(self) -> bool:
        return self.condition != "unknown"

    @property
    def attribute_map(self) -> dict[str, str]:
        return dict(self.attributes)

    def filename(self) -> str:
        """Render back to the canonical filename (inverse of parse_clip_filename)."""
        if self.domain is None:
            return f"section_{self.section}_{self.split}_{self.clip_index:04d}.wav"
        if self.concealed or not self.attributes:
            tail = NO_ATTRIBUTES
        else:
            tail = "_".join(f"{k}_{v}" for k, v in self.attributes)
        return (f"section_{self.section}_{self.domain}_{self.split}_{self.condition}"
                f"_{self.clip_index:04d}_{tail}.wav")


def parse_clip_filename(name: str, machine_type: str = "") -> ClipMetadata:
    """Parse a clip filename into its metadata.

    Raises FilenameError naming the offending segment.
    """
    base = Path(name).name
    if not base.endswith(".wav"):
        raise FilenameError(f"{base}: expected '.wav' extension")
    parts = base[:-4].split("_")
    if len(parts) < 2 or parts[0] != "section":
        raise FilenameError(f"{base}: expected leading 'section' segment")
    section = parts[1]
    if len(section) != 2 or not section.isdigit():
        raise FilenameError(f"{base}: bad section '{section}'")

    # Unlabeled evaluation form: section_NN_test_IIII
    if len(parts) == 4 and parts[2] == "test":
        return ClipMetadata(section=section, split="test", condition="unknown",
                            clip_index=_parse_index(base, parts[3]), machine_type=machine_type)

    if len(parts) < 7:
        raise FilenameError(f"{base}: too few segments ({len(parts)})")
    domain, split, condition, index = parts[2:6]
    if domain not in DOMAINS:
        raise FilenameError(f"unknown domain '{domain}'")
    if split not in SPLITS:
        raise FilenameError(f"unknown split '{split}'")
    if condition not in ("normal", "anomaly"):
        raise FilenameError(f"unknown condition '{condition}'")
    clip_index = _parse_index(base, index)

    tokens = parts[6:]
    if tokens == [NO_ATTRIBUTES]:
        attrs: tuple[tuple[str, str], ...] = ()
        concealed = True
    else:
        if len(tokens) % 2:
            raise FilenameError(f"{base}: unpaired attribute token '{tokens[-1]}'")
        attrs = tuple(zip(tokens[0::2], tokens[1::2]))
        concealed = False
        if any(not k or not v for k, v in attrs):
            raise FilenameError(f"{base}: empty attribute segment")
    return ClipMetadata(section=section, split=split, condition=condition, clip_index=clip_index,
                        domain=domain, attributes=attrs, concealed=concealed,
                        machine_type=machine_type)


def _parse_index(base: str, token: str) -> int:
    if len(token) != 4 or not token.isdigit():
        raise FilenameError(f"{base}: bad clip index '{token}'")
    return int(token)


# -- WAV I/O ---------------------------------------------------------------

def load_wav(path: str | Path) -> AudioClip:
    """Read a 16-bit mono 16 kHz PCM file, samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            comptype = w.getcomptype()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated file") from exc
    if comptype != "NONE":
        raise WavFormatError(f"{path}: expected uncompressed PCM, found {comptype}")
    if channels != 1:
        raise WavFormatError(f"expected 1 channel, found {channels}")
    if width != 2:
        raise WavFormatError(f"expected 16-bit samples, found {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"expected {SAMPLE_RATE} Hz, found {rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM (values outside are clipped)."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.astype("<i2").tobytes())


# -- catalog ---------------------------------------------------------------

@dataclass
class SectionClips:
    train_source: list[tuple[Path, ClipMetadata]] = field(default_factory=list)
    train_target: list[tuple[Path, ClipMetadata]] = field(default_factory=list)
    test: list[tuple[Path, ClipMetadata]] = field(default_factory=list)

    def train(self) -> list[tuple[Path, ClipMetadata]]:
        return self.train_source + self.train_target


@dataclass
class DatasetCatalog:
    root: Path
    machines: dict[str, dict[str, SectionClips]]
    rejects: list[tuple[Path, str]] = field(default_factory=list)
    sections: tuple[str, ...] = DEFAULT_SECTIONS

    def entries(self) -> Iterable[tuple[Path, ClipMetadata]]:
        for machine in sorted(self.machines):
            for section in sorted(self.machines[machine]):
                clips = self.machines[machine][section]
                yield from clips.train_source
                yield from clips.train_target
                yield from clips.test

    def test_names(self) -> list[str]:
        """Relative paths of every test clip, ``machine/test/name.wav``."""
        names = []
        for machine in sorted(self.machines):
            for section in sorted(self.machines[machine]):
                names += [f"{machine}/test/{p.name}" for p, _ in self.machines[machine][section].test]
        return names

    def to_json(self) -> str:
        doc = {
            "machines": {
                m: {
                    s: {
                        group: [p.relative_to(self.root).as_posix() for p, _ in getattr(c, group)]
                        for group in ("train_source", "train_target", "test")
                    }
                    for s, c in sorted(secs.items())
                }
                for m, secs in sorted(self.machines.items())
            },
            "rejects": [[p.relative_to(self.root).as_posix(), msg] for p, msg in self.rejects],
        }
        return json.dumps(doc, sort_keys=True, indent=1)


def scan_dataset(root: str | Path, sections: tuple[str, ...] = DEFAULT_SECTIONS) -> DatasetCatalog:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    machines: dict[str, dict[str, SectionClips]] = {}
    rejects: list[tuple[Path, str]] = []
    for machine_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        split_dirs = [machine_dir / s for s in SPLITS if (machine_dir / s).is_dir()]
        if not split_dirs:
            continue
        per_section: dict[str, SectionClips] = {}
        for split_dir in split_dirs:
            for path in sorted(split_dir.glob("*.wav")):
                try:
                    meta = parse_clip_filename(path.name, machine_dir.name)
                except FilenameError as exc:
                    rejects.append((path, str(exc)))
                    continue
                if meta.split != split_dir.name:
                    rejects.append((path, f"{split_dir.name} directory holds a '{meta.split}' clip"))
                    continue
                clips = per_section.setdefault(meta.section, SectionClips())
                if meta.split == "test":
                    clips.test.append((path, meta))
                elif meta.domain == "source":
                    clips.train_source.append((path, meta))
                else:
                    clips.train_target.append((path, meta))
        machines[machine_dir.name] = dict(sorted(per_section.items()))
    if not machines:
        raise DatasetError(f"no <machine_type>/{{train,test}} directories under {root}")
    for path, msg in rejects:
        log.warning("rejected %s: %s", path, msg)
    return DatasetCatalog(root=root, machines=machines, rejects=rejects, sections=sections)


# -- validation ------------------------------------------------------------

PROFILE_ALIASES = {"dev": "development", "add": "additional_training", "eval": "evaluation"}


@dataclass(frozen=True)
class SplitCounts:
    train_source: int
    train_target: int
    test_normal: int
    test_anomaly: int
    test_unlabeled: int


PROFILES: dict[str, SplitCounts] = {
    "development": SplitCounts(990, 10, 100, 100, 0),
    "additional_training": SplitCounts(990, 10, 0, 0, 0),
    "evaluation": SplitCounts(0, 0, 0, 0, 200),
    # reduced development-shaped profile for fast runs
    "ci": SplitCounts(20, 5, 10, 10, 0),
}


def resolve_profile(profile: str) -> str:
    name = PROFILE_ALIASES.get(profile, profile)
    if name not in PROFILES:
        raise DatasetError(f"unknown profile '{profile}'")
    return name


@dataclass(frozen=True)
class Violation:
    machine: str
    section: str
    message: str

    def __str__(self):
        return f"{self.machine}/section_{self.section}: {self.message}"


def validate_split(catalog: DatasetCatalog, profile: str) -> list[Violation]:
    """Check per-section clip counts and labeling rules; an empty list means valid."""
    expected = PROFILES[resolve_profile(profile)]
    out: list[Violation] = []
    for path, msg in catalog.rejects:
        machine = path.parent.parent.name
        detail = msg if path.name in msg else f"{path.name}: {msg}"
        out.append(Violation(machine, "??", f"unparseable file {detail}"))

    for machine, sections in sorted(catalog.machines.items()):
        for section in catalog.sections:
            if section not in sections:
                out.append(Violation(machine, section, "section missing"))
        for section, clips in sorted(sections.items()):
            v = lambda msg: out.append(Violation(machine, section, msg))  # noqa: E731
            if section not in catalog.sections:
                v(f"section {section} not in declared set {list(catalog.sections)}")
            _check_count(v, "train/source", expected.train_source, len(clips.train_source))
            _check_count(v, "train/target", expected.train_target, len(clips.train_target))

            tests = [m for _, m in clips.test]
            labeled = Counter(m.condition for m in tests if m.labeled)
            unlabeled = sum(1 for m in tests if not m.labeled)
            if expected.test_unlabeled:
                if labeled:
                    v("evaluation test clips must have condition=unknown")
                _check_count(v, "test", expected.test_unlabeled, len(tests))
            else:
                if unlabeled:
                    v(f"{unlabeled} unlabeled test clips; this profile requires labels")
                _check_count(v, "test/normal", expected.test_normal, labeled["normal"])
                _check_count(v, "test/anomaly", expected.test_anomaly, labeled["anomaly"])

            groups = Counter((m.split, m.domain, m.condition, m.clip_index)
                             for _, m in clips.train() + clips.test)
            for (split, domain, condition, idx), n in sorted(groups.items(), key=str):
                if n > 1:
                    v(f"duplicate clip index {idx:04d} in {split}/{domain}/{condition} ({n} files)")
    return out


def _check_count(v, label: str, expected: int, found: int) -> None:
    if expected != found:
        v(f"{label} expected {expected}, found {found}")


# -- attribute CSV ---------------------------------------------------------

def load_attributes(csv_path: str | Path) -> dict[str, dict[str, str]]:
    """Read ``file_name,key_1,value_1,...`` rows keyed by clip basename.

    Rows whose filename embeds attributes must agree with the CSV; every
    disagreeing clip is listed in the raised AttributeMismatchError.
    """
    out: dict[str, dict[str, str]] = {}
    bad: list[str] = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "file_name":
            raise DatasetError(f"{csv_path}: expected header starting with 'file_name'")
        for row in reader:
            if not row:
                continue
            name = Path(row[0]).name
            cells = row[1:]
            while cells and cells[-1] == "":
                cells.pop()
            if len(cells) % 2:
                raise DatasetError(f"{csv_path}: unpaired attribute cell for {name}")
            attrs = dict(zip(cells[0::2], cells[1::2]))
            out[name] = attrs
            try:
                meta = parse_clip_filename(name)
            except FilenameError:
                continue
            if meta.attributes and meta.attribute_map != attrs:
                bad.append(name)
    if bad:
        raise AttributeMismatchError(f"attribute CSV disagrees with filenames: {', '.join(bad)}")
    return out


def write_attributes(csv_path: str | Path, rows: list[tuple[str, dict[str, str]]]) -> None:
    width = max((len(a) for _, a in rows), default=0)
    header = ["file_name"]
    for i in range(1, width + 1):
        header += [f"attr_key_{i}", f"attr_value_{i}"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for name, attrs in rows:
            cells = [name]
            for k, val in attrs.items():
                cells += [k, val]
            w.writerow(cells + [""] * (len(header) - len(cells)))


# -- ground truth ----------------------------------------------------------

@dataclass(frozen=True)
class TruthRow:
    filename: str  # machine/test/name.wav
    domain: str
    condition: str

    @property
    def machine(self) -> str:
        return self.filename.split("/", 1)[0]

    @property
    def section(self) -> str:
        return Path(self.filename).name.split("_")[1]


def write_manifest(path: str | Path, rows: list[TruthRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "domain", "condition"])
        for r in sorted(rows, key=lambda r: r.filename):
            w.writerow([r.filename, r.domain, r.condition])


def read_manifest(path: str | Path) -> list[TruthRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["filename", "domain", "condition"]:
            raise DatasetError(f"{path}: bad manifest header {header}")
        rows = [TruthRow(*row) for row in reader if row]
    for r in rows:
        if r.domain not in DOMAINS or r.condition not in ("normal", "anomaly"):
            raise DatasetError(f"{path}: bad ground-truth row {r}")
    return rows


def truth_from_catalog(catalog: DatasetCatalog) -> list[TruthRow]:
    """Ground truth read off labeled test filenames (development-style corpora)."""
    rows = []
    for machine, sections in sorted(catalog.machines.items()):
        for clips in sections.values():
            for path, meta in clips.test:
                if not meta.labeled:
                    raise DatasetError(f"{path.name} carries no label; a manifest is required")
                rows.append(TruthRow(f"{machine}/test/{path.name}", meta.domain, meta.condition))
    return rows
