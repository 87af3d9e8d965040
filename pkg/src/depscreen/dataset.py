"""Manifests, labeling, splitting, augmentation and the synthetic corpus."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer, write_wav
from .dsp import ImageTensor
from .errors import AlreadySplit, ManifestParseError, SingleClass

PHQ8_MAX = 24
DEPRESSED_THRESHOLD = 10

REQUIRED_COLUMNS = ("participant_id", "path", "phq8")
OPTIONAL_COLUMNS = ("split", "segment")


class Label(enum.IntEnum):
    NON_DEPRESSED = 0
    DEPRESSED = 1


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


def label_for(phq8: int) -> Label:
    return Label.DEPRESSED if phq8 >= DEPRESSED_THRESHOLD else Label.NON_DEPRESSED


@dataclass(frozen=True)
class SampleRecord:
    participant_id: str
    path: str
    phq8: int
    split: Split | None = None
    segment: int = 0

    @property
    def label(self) -> Label:
        return label_for(self.phq8)

    @property
    def key(self) -> tuple[str, int]:
        return (self.participant_id, self.segment)


@dataclass
class Manifest:
    records: list[SampleRecord]
    seed: int = 0
    root: Path | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def labels(self) -> np.ndarray:
        return np.array([int(r.label) for r in self.records], dtype=np.int64)

    def class_counts(self) -> dict[Label, int]:
        counts = {Label.NON_DEPRESSED: 0, Label.DEPRESSED: 0}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def subset(self, split: Split) -> "Manifest":
        return Manifest([r for r in self.records if r.split == split], self.seed, self.root)

    @property
    def has_split(self) -> bool:
        return any(r.split is not None for r in self.records)


def load_manifest(path) -> Manifest:
    """Parse a ``participant_id,path,phq8[,split][,segment]`` CSV.

    All malformed rows are collected and reported together, each with its
    line number.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestParseError(f"{path}: empty file") from None
        if tuple(header[:3]) != REQUIRED_COLUMNS or any(
            h not in OPTIONAL_COLUMNS for h in header[3:]
        ) or len(set(header)) != len(header):
            raise ManifestParseError(
                f"{path}:1: bad header {','.join(header)!r}; expected "
                "participant_id,path,phq8 with optional split,segment"
            )
        col = {name: i for i, name in enumerate(header)}
        records, problems, seen = [], [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                problems.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            pid, rel, raw_phq = (row[col[c]].strip() for c in REQUIRED_COLUMNS)
            try:
                phq8 = int(raw_phq)
            except ValueError:
                problems.append(f"line {lineno}: phq8 {raw_phq!r} is not an integer")
                continue
            if not 0 <= phq8 <= PHQ8_MAX:
                problems.append(f"line {lineno}: phq8 {phq8} outside 0-{PHQ8_MAX}")
                continue
            split = None
            if "split" in col and row[col["split"]].strip():
                try:
                    split = Split(row[col["split"]].strip().lower())
                except ValueError:
                    problems.append(f"line {lineno}: unknown split {row[col['split']]!r}")
                    continue
            segment = 0
            if "segment" in col:
                try:
                    segment = int(row[col["segment"]])
                except ValueError:
                    problems.append(f"line {lineno}: segment must be an integer")
                    continue
            if (pid, segment) in seen:
                problems.append(f"line {lineno}: duplicate participant/segment {pid}/{segment}")
                continue
            seen.add((pid, segment))
            records.append(SampleRecord(pid, rel, phq8, split, segment))
    if problems:
        raise ManifestParseError(f"{path}: " + "; ".join(problems))
    return Manifest(records, root=path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    header = list(REQUIRED_COLUMNS)
    if manifest.has_split:
        header.append("split")
    with_segment = any(r.segment for r in manifest.records)
    if with_segment:
        header.append("segment")
    lines = [",".join(header)]
    for r in manifest.records:
        if "," in r.path or "," in r.participant_id:
            raise ManifestParseError(f"commas are not allowed in paths or ids: {r.path!r}")
        row = [r.participant_id, r.path, str(r.phq8)]
        if manifest.has_split:
            row.append(r.split.value if r.split else "")
        if with_segment:
            row.append(str(r.segment))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(
    manifest: Manifest, test_fraction: float = 0.25, seed: int = 0, by_participant: bool = False
) -> tuple[Manifest, Manifest]:
    """Seeded random partition into (train, test).

    Per-record by default; ``by_participant`` keeps every segment of a
    participant on the same side.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if manifest.has_split:
        raise AlreadySplit("manifest already carries a split column")
    rng = np.random.default_rng(seed)
    recs = manifest.records
    if by_participant:
        pids = sorted({r.participant_id for r in recs})
        order = rng.permutation(len(pids))
        n_test = round_half_up(test_fraction * len(pids))
        test_ids = {pids[i] for i in order[:n_test]}
        is_test = [r.participant_id in test_ids for r in recs]
    else:
        order = rng.permutation(len(recs))
        n_test = round_half_up(test_fraction * len(recs))
        test_idx = set(order[:n_test].tolist())
        is_test = [i in test_idx for i in range(len(recs))]
    train = [replace(r, split=Split.TRAIN) for r, t in zip(recs, is_test) if not t]
    test = [replace(r, split=Split.TEST) for r, t in zip(recs, is_test) if t]
    return Manifest(train, seed, manifest.root), Manifest(test, seed, manifest.root)


def oversample_minority(train: Manifest, seed: int = 0) -> Manifest:
    """Duplicate minority-class records (with replacement) up to parity."""
    counts = train.class_counts()
    if min(counts.values()) == 0:
        raise SingleClass("oversampling needs both classes present")
    minority = min(counts, key=lambda k: (counts[k], k))
    deficit = max(counts.values()) - counts[minority]
    if deficit == 0:
        return Manifest(list(train.records), train.seed, train.root)
    pool = [r for r in train.records if r.label == minority]
    rng = np.random.default_rng(seed)
    extra = [pool[i] for i in rng.integers(0, len(pool), size=deficit)]
    return Manifest(list(train.records) + extra, train.seed, train.root)


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    time_shift_frac: float = 0.1
    time_mask_frac: float = 0.1
    freq_mask_frac: float = 0.1
    brightness_delta: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("time_shift_frac", "time_mask_frac", "freq_mask_frac", "brightness_delta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.5:
                raise ValueError(f"{name} must be in [0, 0.5], got {v}")


def augment_array(
    pixels: np.ndarray, spec: AugmentSpec, draw: int, channels_first: bool = False
) -> np.ndarray:
    """Augment an ``(H, W, C)`` array, or ``(C, H, W)`` with ``channels_first``."""
    if draw == 0:
        return pixels.copy()
    chw = channels_first
    img = pixels if chw else np.moveaxis(pixels, 2, 0)
    _, h, w = img.shape
    rng = np.random.default_rng([spec.rng_seed, draw])

    max_shift = int(spec.time_shift_frac * w)
    shift = int(rng.integers(-max_shift, max_shift + 1)) if max_shift else 0
    out = np.roll(img, shift, axis=2)

    t_len = int(rng.integers(0, int(spec.time_mask_frac * w) + 1))
    t_pos = int(rng.integers(0, w - t_len + 1))
    f_len = int(rng.integers(0, int(spec.freq_mask_frac * h) + 1))
    f_pos = int(rng.integers(0, h - f_len + 1))
    out[:, :, t_pos:t_pos + t_len] = 0
    out[:, f_pos:f_pos + f_len, :] = 0

    offset = rng.uniform(-spec.brightness_delta, spec.brightness_delta)
    out = np.clip(out + out.dtype.type(offset), 0, 1)
    return out if chw else np.moveaxis(out, 0, 2).copy()


def augment(image: ImageTensor, spec: AugmentSpec, draw: int) -> ImageTensor:
    """Seeded spectrogram augmentation; ``draw == 0`` is the identity.

    Circular time shift, one time mask, one frequency mask, then a
    brightness offset with the result clamped to [0, 1]. No flips: reversed
    speech is not speech.
    """
    return ImageTensor(augment_array(np.asarray(image.pixels), spec, draw))


# -- synthetic corpus ---------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    duration_s: float = 80.0
    sample_rate_hz: int = 16000
    n_harmonics: int = 6


def _synth_depressed(rng, t, p: SynthParams) -> np.ndarray:
    f0 = rng.uniform(100.0, 160.0)
    vib_rate, vib_depth = rng.uniform(0.3, 0.8), rng.uniform(0.10, 0.25)
    am_rate = rng.uniform(0.2, 0.6)
    phase = np.cumsum(f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t))) / p.sample_rate_hz
    sig = np.zeros_like(t)
    for k in range(1, p.n_harmonics + 1):
        sig += np.sin(2 * np.pi * k * phase + rng.uniform(0, 2 * np.pi)) / k
    env = 0.55 + 0.45 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    sig = sig * env + rng.normal(0.0, 0.003, size=t.shape)
    return sig


def _synth_control(rng, t, p: SynthParams) -> np.ndarray:
    f0 = rng.uniform(100.0, 160.0)
    sig = np.zeros_like(t)
    for k in range(1, p.n_harmonics + 1):
        sig += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
    return sig + rng.normal(0.0, rng.uniform(0.15, 0.3), size=t.shape)


def synth_recording(label: Label, seed: int, params: SynthParams = SynthParams()) -> np.ndarray:
    """One synthetic recording, peak-normalized to 0.8.

    Depressed-class proxies are harmonic tones with slow pitch and amplitude
    modulation; controls are steady tones buried in broadband noise.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(params.duration_s * params.sample_rate_hz))) / params.sample_rate_hz
    sig = _synth_depressed(rng, t, params) if label == Label.DEPRESSED else _synth_control(rng, t, params)
    return 0.8 * sig / np.max(np.abs(sig))


def generate_synthetic_corpus(
    n_per_class: int,
    seed: int,
    out_dir,
    params: SynthParams = SynthParams(),
    n_depressed: int | None = None,
    n_total: int | None = None,
) -> Manifest:
    """Write ``n_per_class`` WAVs per class plus ``manifest.csv`` to ``out_dir``.

    ``n_depressed`` and ``n_total`` override the default balanced
    ``n_per_class``/``2 * n_per_class`` counts for imbalanced corpora.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    total = 2 * n_per_class if n_total is None else n_total
    if total < 1:
        raise ValueError("n_total must be >= 1")
    n_dep = n_per_class if n_depressed is None else n_depressed
    if not 0 <= n_dep <= total:
        raise ValueError("n_depressed out of range")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    file_seeds = rng.integers(0, 2**31 - 1, size=total)
    records = []
    for i in range(total):
        label = Label.DEPRESSED if i < n_dep else Label.NON_DEPRESSED
        phq8 = int(rng.integers(10, 25) if label == Label.DEPRESSED else rng.integers(0, 10))
        pid = f"P{i:03d}"
        samples = synth_recording(label, int(file_seeds[i]), params)
        rel = f"wav/{pid}.wav"
        write_wav(out_dir / rel, AudioBuffer(samples, params.sample_rate_hz, pid))
        records.append(SampleRecord(pid, rel, phq8))
    manifest = Manifest(records, seed, out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


@dataclass
class ImageSet:
    """In-memory CNN inputs: ``images`` is (N, 3, H, W) float32."""

    images: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], [self.ids[i] for i in idx])


def load_image_set(manifest: Manifest) -> ImageSet:
    from .dsp import load_png

    if len(manifest) == 0:
        return ImageSet(np.zeros((0, 3, 1, 1), np.float32), np.zeros(0, np.int64), [])
    arrays = [load_png(manifest.resolve(r)).chw() for r in manifest.records]
    ids = [f"{r.participant_id}#{r.segment}" for r in manifest.records]
    return ImageSet(np.stack(arrays), manifest.labels(), ids)
