"""Dataset ingestion (ESC-50 CSV layout) and the synthetic tone dataset.

A manifest maps every clip to (path, label id, label name, fold); folds 1-3
train, fold 4 validates, fold 5 tests. The synthetic generator emits clips
with known time-frequency signatures (pure tones at 500 Hz and 2 kHz, white
noise, an amplitude-modulated 1 kHz tone) so interpretation masks can be
checked against ground truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .audio import FrontendConfig, Waveform, load_wav, preprocess, save_wav

TRAIN_FOLDS = (1, 2, 3)
VAL_FOLD = 4
TEST_FOLD = 5

SYNTH_CLASSES = ("tone_500hz", "tone_2000hz", "white_noise", "am_tone_1000hz")
SYNTH_TONE_HZ = {"tone_500hz": 500.0, "tone_2000hz": 2000.0, "am_tone_1000hz": 1000.0}


@dataclass
class ClipRecord:
    path: str
    label: int
    label_name: str
    fold: int
    clip_id: str


@dataclass
class DatasetManifest:
    records: list
    num_classes: int
    sample_rate_hint: int | None = None

    def split(self, name: str) -> list:
        if name == "train":
            return [r for r in self.records if r.fold in TRAIN_FOLDS]
        if name == "val":
            return [r for r in self.records if r.fold == VAL_FOLD]
        if name == "test":
            return [r for r in self.records if r.fold == TEST_FOLD]
        raise ValueError(f"unknown split {name!r} (train/val/test)")

    def save(self, path) -> None:
        payload = {
            "num_classes": self.num_classes,
            "sample_rate_hint": self.sample_rate_hint,
            "records": [asdict(r) for r in self.records],
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            payload = json.load(f)
        return cls(
            records=[ClipRecord(**r) for r in payload["records"]],
            num_classes=payload["num_classes"],
            sample_rate_hint=payload.get("sample_rate_hint"),
        )


def ingest(dataset_root, meta_csv, num_classes: int = 50,
           sample_rate_hint: int | None = None) -> DatasetManifest:
    """Validate a metadata CSV (columns filename, fold, target, category)
    against the audio files under `dataset_root`/audio.

    Raises with a list of offending rows on missing files, duplicate
    filenames, out-of-range folds or labels.
    """
    root = Path(dataset_root)
    audio_dir = root / "audio" if (root / "audio").is_dir() else root
    problems = []
    records = []
    seen = set()
    with open(meta_csv, newline="") as f:
        reader = csv.DictReader(f)
        required = {"filename", "fold", "target", "category"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{meta_csv}: metadata must have columns {sorted(required)}")
        for i, row in enumerate(reader, start=2):  # header is line 1
            fname = row["filename"]
            fold = int(row["fold"])
            target = int(row["target"])
            if fname in seen:
                problems.append(f"line {i}: duplicate filename {fname}")
                continue
            seen.add(fname)
            if fold not in (1, 2, 3, 4, 5):
                problems.append(f"line {i}: fold {fold} outside 1..5")
            if not 0 <= target < num_classes:
                problems.append(f"line {i}: label {target} outside [0, {num_classes - 1}]")
            path = audio_dir / fname
            if not path.is_file():
                problems.append(f"line {i}: missing audio file {path}")
            records.append(ClipRecord(
                path=str(path), label=target, label_name=row["category"],
                fold=fold, clip_id=Path(fname).stem,
            ))
    if problems:
        raise ValueError("manifest validation failed:\n  " + "\n  ".join(problems))
    if not records:
        raise ValueError(f"{meta_csv}: no clips found")
    return DatasetManifest(records=records, num_classes=num_classes,
                           sample_rate_hint=sample_rate_hint)


def _synth_clip(label_name: str, rng: np.random.Generator, seconds: float,
                rate: int) -> np.ndarray:
    """One clip: mild random gain and phase, faint noise floor everywhere."""
    n = int(seconds * rate)
    t = np.arange(n) / rate
    gain = rng.uniform(0.25, 0.8)
    phase = rng.uniform(0, 2 * np.pi)
    floor = 1e-4 * rng.standard_normal(n)
    if label_name == "white_noise":
        sig = gain * 0.2 * rng.standard_normal(n)
    elif label_name == "am_tone_1000hz":
        rate_hz = rng.uniform(4.0, 16.0)
        envelope = 1.0 + 0.9 * np.sin(2 * np.pi * rate_hz * t)
        sig = gain * 0.5 * envelope * np.sin(2 * np.pi * 1000.0 * t + phase) / 1.9
    else:
        freq = SYNTH_TONE_HZ[label_name]
        sig = gain * np.sin(2 * np.pi * freq * t + phase)
    return np.clip(sig + floor, -1.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(out_root, clips_per_class: int = 100, seconds: float = 5.0,
                               sample_rate: int = 16000, seed: int = 0) -> DatasetManifest:
    """Write the 4-class synthetic tone dataset in the ESC-50 file layout
    (audio/ plus meta.csv) and return its validated manifest.

    Folds are assigned round-robin within each class, so every class appears
    in every fold.
    """
    out_root = Path(out_root)
    audio_dir = out_root / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, name in enumerate(SYNTH_CLASSES):
        for i in range(clips_per_class):
            rng = np.random.default_rng([seed, label, i])
            fold = (i % 5) + 1
            fname = f"{name}_{i:03d}.wav"
            save_wav(Waveform(_synth_clip(name, rng, seconds, sample_rate), sample_rate),
                     audio_dir / fname)
            rows.append((fname, fold, label, name))
    meta = out_root / "meta.csv"
    with open(meta, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "fold", "target", "category"])
        w.writerows(rows)
    manifest = ingest(out_root, meta, num_classes=len(SYNTH_CLASSES),
                      sample_rate_hint=sample_rate)
    manifest.save(out_root / "manifest.json")
    return manifest


def load_split(manifest: DatasetManifest, split_name: str, frontend: FrontendConfig,
               with_spectrograms: bool = False):
    """Preprocess one split into a training-ready ClipSet.

    Returns (clip_set, spectrograms); spectrograms is None unless requested
    (the interpretation metrics need them, plain training does not).
    """
    from .training import ClipSet

    records = manifest.split(split_name)
    inputs, labels, ids, specs = [], [], [], []
    for r in records:
        spec, x = preprocess(load_wav(r.path), frontend)
        inputs.append(x.data)
        labels.append(r.label)
        ids.append(r.clip_id)
        if with_spectrograms:
            specs.append(spec)
    clip_set = ClipSet(
        inputs=np.stack(inputs), labels=np.asarray(labels, dtype=np.int64), clip_ids=ids
    )
    return clip_set, (specs if with_spectrograms else None)
