"""Dataset metadata, fold splits and the synthetic tone corpus."""

import csv
import io
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .audio import encode_wav
from .engine import derive_seed, make_rng
from .io_utils import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

URBANSOUND_COLUMNS = ("slice_file_name", "fold", "classID")
URBANSOUND_CLIPS = 8732
ESC10_CLIPS = 400
ESC10_PER_CLASS = 40
ESC10_CLASS_IDS = (0, 1, 10, 11, 12, 20, 21, 38, 40, 41)

_ESC_NAME = re.compile(r"^(\d+)-([0-9A-Za-z]+)-([A-Za-z])-(\d+)\.wav$")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClipRef:
    file: str
    label: int
    fold: int


@dataclass
class DatasetSpec:
    name: str
    root: str
    clips: list
    n_classes: int = 10
    clip_seconds: float = 4.0
    deviations: list = field(default_factory=list)

    @property
    def folds(self):
        return sorted({c.fold for c in self.clips})

    def path(self, clip):
        if self.name == "urbansound8k":
            return os.path.join(self.root, "audio", f"fold{clip.fold}", clip.file)
        if self.name == "esc10":
            return os.path.join(self.root, "audio", clip.file)
        return os.path.join(self.root, clip.file)

    def drop_missing(self):
        """Remove clips whose audio file is absent; each removal is logged."""
        kept = []
        for c in self.clips:
            p = self.path(c)
            if os.path.exists(p):
                kept.append(c)
            else:
                msg = f"missing audio file {p}"
                log.warning(msg)
                self.deviations.append(msg)
        self.clips = kept
        return self


@dataclass
class Split:
    train: list
    validation: list
    test: list


def read_metadata(metadata_csv):
    """(file, label, fold) rows from a CSV with the UrbanSound8K columns."""
    with open(metadata_csv, newline="") as fh:
        text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise DatasetError(f"{metadata_csv}: empty metadata file")
    missing = [c for c in URBANSOUND_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise DatasetError(f"{metadata_csv}: missing columns {missing}; found {reader.fieldnames}")
    clips = []
    for lineno, row in enumerate(reader, start=2):
        try:
            clips.append(ClipRef(row["slice_file_name"], int(row["classID"]), int(row["fold"])))
        except (TypeError, ValueError):
            raise DatasetError(f"{metadata_csv}:{lineno}: malformed row {row}") from None
    if not clips:
        raise DatasetError(f"{metadata_csv}: no clips listed")
    return clips


def load_urbansound8k(metadata_csv, root=None):
    """Parse the UrbanSound8K metadata CSV (slice_file_name, fold, classID)."""
    clips = read_metadata(metadata_csv)
    if root is None:
        root = os.path.dirname(os.path.dirname(os.path.abspath(metadata_csv)))
    spec = DatasetSpec("urbansound8k", root, clips, clip_seconds=4.0)
    if len(clips) != URBANSOUND_CLIPS:
        msg = f"expected {URBANSOUND_CLIPS} clips, metadata lists {len(clips)}"
        log.warning(msg)
        spec.deviations.append(msg)
    return spec


def parse_esc_name(filename):
    """'<fold>-<source>-<take>-<class>.wav' -> (fold, class)."""
    m = _ESC_NAME.match(os.path.basename(filename))
    if not m:
        raise DatasetError(f"unparseable ESC filename {filename!r}")
    return int(m.group(1)), int(m.group(4))


def load_esc10(file_list, root=""):
    """Build the ESC-10 spec from filenames.

    ESC-50 target ids are remapped to 0..9 when the ten ESC-10 ids are
    present; names already using 0..9 pass through unchanged.
    """
    seen = set()
    parsed = []
    for name in file_list:
        base = os.path.basename(name)
        if base in seen:
            raise DatasetError(f"duplicate filename {base!r}")
        seen.add(base)
        fold, cls = parse_esc_name(base)
        parsed.append((base, fold, cls))
    if not parsed:
        raise DatasetError("no ESC files given")
    ids = sorted({c for _, _, c in parsed})
    if max(ids) >= 10:
        remap = {c: i for i, c in enumerate(ESC10_CLASS_IDS)}
        unknown = [c for c in ids if c not in remap]
        if unknown:
            raise DatasetError(f"class ids {unknown} are not ESC-10 classes")
    else:
        remap = {c: c for c in ids}
    clips = [ClipRef(b, remap[c], f) for b, f, c in parsed]
    spec = DatasetSpec("esc10", root, clips, clip_seconds=5.0)
    counts = np.bincount([c.label for c in clips], minlength=10)
    if len(clips) != ESC10_CLIPS or np.any(counts != ESC10_PER_CLASS):
        msg = f"expected {ESC10_PER_CLASS} clips per class, got {counts.tolist()}"
        log.warning(msg)
        spec.deviations.append(msg)
    return spec


def load_esc10_dir(root):
    audio = os.path.join(root, "audio") if os.path.isdir(os.path.join(root, "audio")) else root
    names = sorted(n for n in os.listdir(audio) if n.endswith(".wav"))
    spec = load_esc10(names, root)
    if audio == root:
        spec.name = "esc10-flat"
    return spec


def make_split(spec, strict_holdout=False):
    """Fixed fold split.

    The last fold is both validation and test set; the rest train.  With
    ``strict_holdout`` the second-to-last fold becomes a separate validation
    set.
    """
    folds = spec.folds
    if len(folds) < 2:
        raise DatasetError(f"need at least two folds, got {folds}")
    last = folds[-1]
    idx_by_fold = {f: [i for i, c in enumerate(spec.clips) if c.fold == f] for f in folds}
    test = idx_by_fold[last]
    if strict_holdout:
        if len(folds) < 3:
            raise DatasetError("strict holdout needs at least three folds")
        val_fold = folds[-2]
        validation = idx_by_fold[val_fold]
        train = [i for i, c in enumerate(spec.clips) if c.fold not in (last, val_fold)]
    else:
        validation = list(test)
        train = [i for i, c in enumerate(spec.clips) if c.fold != last]
    return Split(train, validation, test)


def synthetic_clip(label, seconds, sample_rate, rng, snr_db=10.0):
    """Tone at 200 + 150*label Hz with random phase and amplitude, plus
    white noise at ``snr_db``."""
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    freq = 200.0 + 150.0 * label
    amp = rng.uniform(0.3, 0.8)
    phase = rng.uniform(0.0, 2 * np.pi)
    tone = amp * np.sin(2 * np.pi * freq * t + phase)
    noise_std = np.sqrt(amp * amp / 2.0 / 10 ** (snr_db / 10.0))
    x = tone + rng.normal(0.0, noise_std, n)
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return x


def synthetic_dataset(root, seed=0, n_classes=10, clips_per_class=2, clip_seconds=0.5,
                      folds=5, sample_rate=8000):
    """Write a deterministic tone corpus as 16-bit WAVs plus metadata.csv.

    Clip ``i`` (label-major order) goes to fold ``i % folds + 1``.
    """
    os.makedirs(root, exist_ok=True)
    clips = []
    i = 0
    for label in range(n_classes):
        for j in range(clips_per_class):
            rng = make_rng(derive_seed(seed, "synthetic", label, j))
            x = synthetic_clip(label, clip_seconds, sample_rate, rng)
            name = f"syn-{label:02d}-{j:04d}.wav"
            atomic_write_bytes(os.path.join(root, name), encode_wav(x, sample_rate))
            clips.append(ClipRef(name, label, i % folds + 1))
            i += 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(URBANSOUND_COLUMNS)
    for c in clips:
        w.writerow([c.file, c.fold, c.label])
    atomic_write_text(os.path.join(root, "metadata.csv"), buf.getvalue())
    return DatasetSpec("synthetic", root, clips, n_classes=n_classes, clip_seconds=clip_seconds)


def load_synthetic(root, clip_seconds):
    clips = read_metadata(os.path.join(root, "metadata.csv"))
    n_classes = max(c.label for c in clips) + 1
    return DatasetSpec("synthetic", root, clips, n_classes=n_classes, clip_seconds=clip_seconds)


def load_dataset(name, root, clip_seconds=None):
    if name == "urbansound8k":
        spec = load_urbansound8k(os.path.join(root, "metadata", "UrbanSound8K.csv"), root=root)
    elif name == "esc10":
        spec = load_esc10_dir(root)
    elif name == "synthetic":
        if clip_seconds is None:
            raise DatasetError("synthetic dataset needs clip_seconds")
        spec = load_synthetic(root, clip_seconds)
    else:
        raise DatasetError(f"unknown dataset {name!r}")
    if clip_seconds is not None:
        spec.clip_seconds = clip_seconds
    return spec
