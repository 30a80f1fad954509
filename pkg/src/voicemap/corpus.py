"""Recording manifests, selection rules, stratified splits, synthetic corpus.

The synthetic corpus stands in for restricted clinical audio: a fixed
vowel-sequence phrase rendered by source-filter synthesis, where the
"pathological" class gets more cycle-to-cycle pitch perturbation (jitter),
amplitude perturbation (shimmer), and aspiration noise than the healthy class.
"""

import csv
from dataclasses import dataclass, field
import json
import math
import os
import wave
import zlib

import numpy as np
from scipy.signal import lfilter

MANIFEST_HEADER = ["id", "path", "speaker", "gender", "status", "pathologies"]
STATUS_ORDER = ("healthy", "organic", "inorganic")
GENDER_ORDER = ("female", "male")
_GENDER_FROM_TOKEN = {"m": "male", "f": "female"}
_TOKEN_FROM_GENDER = {"male": "m", "female": "f"}

# Pathology name -> broad category. A stand-in for clinical practice: review
# before running on real manifests. Unknown names are rejected loudly.
DEFAULT_CATEGORIES = {
    # structural tissue change
    "laryngitis": "organic",
    "leukoplakia": "organic",
    "reinke_edema": "organic",
    "recurrent_paralysis": "organic",
    "vocal_fold_polyp": "organic",
    "vocal_fold_carcinoma": "organic",
    "granuloma": "organic",
    "vocal_fold_cyst": "organic",
    "contact_pachydermia": "organic",
    "synthetic_phonotrauma": "organic",
    # no structural change
    "functional_dysphonia": "inorganic",
    "hyperfunctional_dysphonia": "inorganic",
    "hypofunctional_dysphonia": "inorganic",
    "psychogenic_dysphonia": "inorganic",
    "spasmodic_dysphonia": "inorganic",
    "vocal_fold_nodules": "inorganic",
    "synthetic_tension": "inorganic",
}


def load_categories(path) -> dict:
    """Editable pathology->category table: JSON object of name -> category."""
    with open(path) as f:
        table = json.load(f)
    for name, cat in table.items():
        if cat not in ("organic", "inorganic"):
            raise ValueError(f"{path}: {name!r} has category {cat!r}")
    return table


@dataclass
class RecordingMeta:
    id: str
    audio_path: str
    speaker_id: str
    gender: str
    pathology_labels: frozenset
    status: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("record id must be non-empty")
        if self.gender not in ("male", "female"):
            raise ValueError(f"{self.id}: gender {self.gender!r}")
        if self.status not in STATUS_ORDER:
            raise ValueError(f"{self.id}: status {self.status!r}")
        self.pathology_labels = frozenset(self.pathology_labels)
        if (self.status == "healthy") != (len(self.pathology_labels) == 0):
            raise ValueError(
                f"{self.id}: status {self.status} inconsistent with "
                f"{len(self.pathology_labels)} pathology labels")


@dataclass
class CorpusManifest:
    records: list
    source: str = "real"

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ValueError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    def __len__(self):
        return len(self.records)


def binary_label(record: RecordingMeta) -> int:
    """Healthy 0, any pathology 1."""
    return 0 if record.status == "healthy" else 1


def load_manifest(path) -> CorpusManifest:
    """Parse the manifest CSV; paths are resolved relative to the file."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected header") from None
        if header != MANIFEST_HEADER:
            raise ValueError(
                f"{path} line 1: header {header} != {MANIFEST_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"{path} line {lineno}: expected 6 fields, got {len(row)}")
            rec_id, rel, speaker, gender, status, pathologies = row
            if gender not in _GENDER_FROM_TOKEN:
                raise ValueError(f"{path} line {lineno}: gender token {gender!r}")
            labels = frozenset(p for p in pathologies.split(";") if p)
            try:
                rec = RecordingMeta(
                    id=rec_id,
                    audio_path=rel if os.path.isabs(rel) else os.path.join(base, rel),
                    speaker_id=speaker,
                    gender=_GENDER_FROM_TOKEN[gender],
                    pathology_labels=labels,
                    status=status,
                )
            except ValueError as e:
                raise ValueError(f"{path} line {lineno}: {e}") from None
            records.append(rec)
    return CorpusManifest(records)


def write_manifest(manifest: CorpusManifest, path) -> None:
    """Write CSV with paths relative to the output file where possible."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            rel = os.path.relpath(os.path.abspath(r.audio_path), base)
            writer.writerow([r.id, rel, r.speaker_id, _TOKEN_FROM_GENDER[r.gender],
                             r.status, ";".join(sorted(r.pathology_labels))])


def filter_records(manifest: CorpusManifest, categories: dict = None) -> CorpusManifest:
    """Drop records whose labels span both the organic and inorganic categories."""
    table = DEFAULT_CATEGORIES if categories is None else categories
    kept = []
    for r in manifest.records:
        cats = set()
        for label in r.pathology_labels:
            if label not in table:
                raise ValueError(f"{r.id}: unknown pathology {label!r}")
            cats.add(table[label])
        if cats >= {"organic", "inorganic"}:
            continue
        kept.append(r)
    return CorpusManifest(kept, source=manifest.source)


@dataclass
class SplitAssignment:
    assignment: dict       # id -> "train" | "dev" | "test"
    seed: int
    ratios: tuple
    warnings: list = field(default_factory=list)


SPLIT_NAMES = ("train", "dev", "test")


def stratified_split(manifest: CorpusManifest, ratios=(0.8, 0.1, 0.1),
                     seed: int = 0) -> SplitAssignment:
    """Largest-remainder allocation within each status-by-gender stratum."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("need three positive ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios sum to {sum(ratios)}, not 1")
    strata = {}
    for r in manifest.records:
        strata.setdefault((r.status, r.gender), []).append(r.id)
    rng = np.random.default_rng(seed)
    assignment = {}
    warnings = []
    ordered = sorted(strata, key=lambda k: (STATUS_ORDER.index(k[0]),
                                            GENDER_ORDER.index(k[1])))
    for key in ordered:
        ids = strata[key]
        n = len(ids)
        if n < 3:
            warnings.append(f"stratum {key[0]}/{key[1]}: only {n} record(s)")
        shuffled = [ids[i] for i in rng.permutation(n)]
        base = [math.floor(r * n) for r in ratios]
        remainder = [r * n - b for r, b in zip(ratios, base)]
        for i in sorted(range(3), key=lambda i: (-remainder[i], i))[:n - sum(base)]:
            base[i] += 1
        cursor = 0
        for split, count in zip(SPLIT_NAMES, base):
            for rec_id in shuffled[cursor:cursor + count]:
                assignment[rec_id] = split
            cursor += count
    return SplitAssignment(assignment, seed, ratios, warnings)


def split_records(manifest: CorpusManifest, split: SplitAssignment) -> dict:
    out = {name: [] for name in SPLIT_NAMES}
    for r in manifest.records:
        out[split.assignment[r.id]].append(r)
    return out


# -- synthesis ----------------------------------------------------------------

# vowel formant targets (Hz); "@" is the reduced mid vowel
VOWEL_FORMANTS = {
    "u": (320.0, 800.0, 2240.0),
    "e": (390.0, 2300.0, 2800.0),
    "o": (360.0, 640.0, 2240.0),
    "a": (730.0, 1090.0, 2440.0),
    "i": (270.0, 2290.0, 3010.0),
    "@": (500.0, 1500.0, 2500.0),
}
FORMANT_BANDWIDTHS = (80.0, 100.0, 140.0)

# fixed carrier phrase analog: vowel skeleton with duration fractions
PHRASE_SEGMENTS = (
    ("u", 0.14), ("@", 0.10), ("o", 0.16), ("@", 0.10),
    ("i", 0.14), ("e", 0.12), ("@", 0.10), ("i", 0.14),
)

# short triangular glottal pulse smooths the raw impulse train
_PULSE = np.array([0.2, 0.6, 1.0, 0.6, 0.2])


@dataclass(frozen=True)
class SynthConfig:
    healthy: int = 100
    pathological: int = 100
    seconds: float = 2.0
    sample_rate: int = 16000
    healthy_jitter: float = 0.003
    healthy_shimmer: float = 0.015
    healthy_noise: float = 0.004
    patho_jitter: float = 0.04
    patho_shimmer: float = 0.12
    patho_noise: float = 0.15

    def __post_init__(self):
        if self.healthy < 0 or self.pathological < 0:
            raise ValueError("class counts must be non-negative")
        if self.seconds <= 0 or self.sample_rate <= 0:
            raise ValueError("seconds and sample_rate must be positive")


def _resonator_coeffs(freq: float, bandwidth: float, rate: int):
    r = math.exp(-math.pi * bandwidth / rate)
    a1 = -2.0 * r * math.cos(2.0 * math.pi * freq / rate)
    a2 = r * r
    return [1.0 + a1 + a2], [1.0, a1, a2]  # unit gain at DC


def _render_voice(rng: np.random.Generator, f0: float, seconds: float, rate: int,
                  jitter: float, shimmer: float, noise_level: float) -> np.ndarray:
    n = int(round(seconds * rate))
    source = np.zeros(n)
    pos = 0.0
    while pos < n:
        k = int(pos)
        amp = 1.0 + shimmer * float(np.clip(rng.standard_normal(), -3, 3))
        source[k] += amp
        period = (rate / f0) * (1.0 + jitter * float(np.clip(rng.standard_normal(), -3, 3)))
        pos += max(period, 2.0)
    source = np.convolve(source, _PULSE)[:n]
    source += noise_level * rng.standard_normal(n)

    out = np.empty(n)
    # time-varying vocal tract: one resonator cascade, state carried across
    # segment boundaries to avoid clicks
    states = [np.zeros(2) for _ in FORMANT_BANDWIDTHS]
    start = 0
    bounds = _segment_bounds(seconds)
    for (label, t0, t1) in bounds:
        stop = n if t1 >= seconds else int(round(t1 * rate))
        chunk = source[start:stop]
        formants = VOWEL_FORMANTS[label]
        for i, (freq, bw) in enumerate(zip(formants, FORMANT_BANDWIDTHS)):
            b, a = _resonator_coeffs(freq, bw, rate)
            chunk, states[i] = lfilter(b, a, chunk, zi=states[i])
        out[start:stop] = chunk
        start = stop
    peak = np.abs(out).max()
    if peak > 0:
        out *= 0.3 / peak
    return out


def _segment_bounds(seconds: float):
    """(label, start, end) triples of the carrier phrase over `seconds`."""
    bounds = []
    t = 0.0
    for label, frac in PHRASE_SEGMENTS:
        end = t + frac * seconds
        bounds.append((label, t, end))
        t = end
    bounds[-1] = (bounds[-1][0], bounds[-1][1], seconds)
    return bounds


def _write_wav(path, samples: np.ndarray, rate: int) -> None:
    data = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(data.tobytes())


def _file_rng(seed: int, rec_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(rec_id.encode())])


def synth_corpus(config: SynthConfig, seed: int, out_dir) -> CorpusManifest:
    """Write WAVs, alignment JSONs, and manifest.csv; return the manifest.

    Deterministic in (config, seed): each file gets its own RNG stream derived
    from the seed and the record id.
    """
    os.makedirs(out_dir, exist_ok=True)
    records = []
    specs = [("h", "healthy", config.healthy),
             ("p", "pathological", config.pathological)]
    speaker = 0
    for prefix, kind, count in specs:
        for i in range(count):
            rec_id = f"{prefix}{i:04d}"
            gender = "male" if i % 2 == 0 else "female"
            if kind == "healthy":
                status, labels = "healthy", frozenset()
                jit, shim, noise = (config.healthy_jitter, config.healthy_shimmer,
                                    config.healthy_noise)
            else:
                if i % 4 < 2:
                    status, labels = "organic", frozenset({"synthetic_phonotrauma"})
                else:
                    status, labels = "inorganic", frozenset({"synthetic_tension"})
                jit, shim, noise = (config.patho_jitter, config.patho_shimmer,
                                    config.patho_noise)
            speaker += 1
            rng = _file_rng(seed, rec_id)
            f0 = (rng.uniform(100.0, 130.0) if gender == "male"
                  else rng.uniform(190.0, 230.0))
            samples = _render_voice(rng, f0, config.seconds, config.sample_rate,
                                    jit, shim, noise)
            wav_path = os.path.join(out_dir, f"{rec_id}.wav")
            _write_wav(wav_path, samples, config.sample_rate)
            intervals = [{"label": label, "start": round(t0, 6), "end": round(t1, 6)}
                         for label, t0, t1 in _segment_bounds(config.seconds)]
            with open(os.path.join(out_dir, f"{rec_id}.align.json"), "w") as f:
                json.dump(intervals, f, indent=2)
                f.write("\n")
            records.append(RecordingMeta(
                id=rec_id, audio_path=wav_path, speaker_id=f"spk{speaker:04d}",
                gender=gender, pathology_labels=labels, status=status))
    manifest = CorpusManifest(records, source="synthetic")
    write_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest
