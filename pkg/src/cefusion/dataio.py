"""Feature files, manifests, modality alignment and synthetic corpora.

Feature file layout (little-endian)::

    0..3    magic b"MMFE"
    4..7    version, u32 (= 1)
    8       modality code, u8 (0 vit, 1 resnet, 2 audio, 3 text)
    9..12   T, u32
    13..16  D, u32
    17..    T*D float32, row-major

Manifest: tab-separated text, one video per line, columns
``video_id vit_path resnet_path audio_path text_path label split``.
Paths are relative to the manifest's directory.  ``label`` is a class index,
``-`` for unlabeled, or the path of a frame-label file (one integer per line).
Lines starting with ``#`` and a header line starting with ``video_id`` are
skipped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import AlignmentError, CorruptionError, DimensionError, FormatError, ManifestError

MAGIC = b"MMFE"
VERSION = 1
MODALITIES = ("vit", "resnet", "audio", "text")
MODALITY_CODES = {name: code for code, name in enumerate(MODALITIES)}
MODALITY_DIMS = {"vit": 768, "resnet": 512, "audio": 128, "text": 768}

_HEADER = struct.Struct("<4sIBII")
MANIFEST_COLUMNS = ("video_id", "vit_path", "resnet_path", "audio_path", "text_path", "label", "split")


@dataclass
class FeatureSequence:
    modality: str
    data: np.ndarray  # T x D float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def validate(self, dims: Mapping[str, int] | None = None) -> None:
        dims = MODALITY_DIMS if dims is None else dims
        if self.modality not in MODALITY_CODES:
            raise FormatError(f"unknown modality {self.modality!r}")
        if self.data.ndim != 2:
            raise DimensionError(f"{self.modality}: expected T x D features, got shape {self.data.shape}")
        if self.frames < 1:
            raise DimensionError(f"{self.modality}: sequence has no frames")
        if self.dim != dims[self.modality]:
            raise DimensionError(
                f"{self.modality}: feature width {self.dim}, registry expects {dims[self.modality]}")
        if not np.isfinite(self.data).all():
            raise FormatError(f"{self.modality}: non-finite feature values")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (self.modality == other.modality and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


@dataclass
class ModalityBundle:
    video_id: str
    vit: FeatureSequence
    resnet: FeatureSequence
    audio: FeatureSequence
    text: FeatureSequence
    label: int | None = None
    frame_labels: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return self.vit.frames

    def sequences(self) -> tuple[FeatureSequence, ...]:
        return (self.vit, self.resnet, self.audio, self.text)

    def targets(self) -> np.ndarray | None:
        """Per-frame training targets: frame labels, else the broadcast video label."""
        if self.frame_labels is not None:
            return self.frame_labels
        if self.label is None:
            return None
        return np.full(self.frames, self.label, dtype=np.int64)


@dataclass
class ManifestEntry:
    video_id: str
    paths: dict[str, Path]
    label: int | None = None
    frame_label_path: Path | None = None
    split: str = "train"


@dataclass
class GoldLabels:
    label: int | None = None
    frame_labels: np.ndarray | None = None


# -- feature files -------------------------------------------------------------

def write_feature_file(seq: FeatureSequence, path, dims: Mapping[str, int] | None = None) -> None:
    seq.validate(dims)
    header = _HEADER.pack(MAGIC, VERSION, MODALITY_CODES[seq.modality], seq.frames, seq.dim)
    payload = seq.data.astype("<f4", copy=False).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write feature file {path}: {exc}") from exc


def read_feature_file(path, dims: Mapping[str, int] | None = None) -> FeatureSequence:
    dims = MODALITY_DIMS if dims is None else dims
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, code, T, D = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code >= len(MODALITIES):
        raise FormatError(f"{path}: unknown modality code {code}")
    modality = MODALITIES[code]
    if D != dims[modality]:
        raise DimensionError(f"{path}: {modality} width {D}, registry expects {dims[modality]}")
    expected = _HEADER.size + 4 * T * D
    if len(raw) != expected:
        raise CorruptionError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {4 * T * D}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, D).astype(np.float32)
    seq = FeatureSequence(modality, data)
    seq.validate(dims)
    return seq


def read_frame_labels(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        return np.array([int(x) for x in lines], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: frame-label file must hold one integer per line") from exc


def write_frame_labels(labels, path) -> None:
    Path(path).write_text("".join(f"{int(x)}\n" for x in labels))


# -- alignment -------------------------------------------------------------------

def nearest_index_map(source_frames: int, target_frames: int) -> np.ndarray:
    """Source frame used for each target frame: ``round(t * S / T)`` clamped to ``S - 1``.

    Halves round down, so ``S=4, T=8`` maps to ``[0, 0, 1, 1, 2, 2, 3, 3]``.
    Integer arithmetic only.
    """
    t = np.arange(target_frames, dtype=np.int64)
    num = 2 * t * source_frames - target_frames
    den = 2 * target_frames
    idx = -((-num) // den)  # ceil(t*S/T - 1/2)
    return np.clip(idx, 0, source_frames - 1)


def align_modalities(bundle: ModalityBundle) -> ModalityBundle:
    """Resample audio and text onto the visual frame axis."""
    for seq in bundle.sequences():
        if seq.frames < 1:
            raise AlignmentError(f"{bundle.video_id}: {seq.modality} has no frames")
    T = bundle.vit.frames
    if bundle.resnet.frames != T:
        raise AlignmentError(
            f"{bundle.video_id}: vit has {T} frames but resnet has {bundle.resnet.frames}")

    def resample(seq: FeatureSequence) -> FeatureSequence:
        if seq.frames == T:
            return seq
        if seq.frames == 1:
            return FeatureSequence(seq.modality, np.repeat(seq.data, T, axis=0))
        return FeatureSequence(seq.modality, seq.data[nearest_index_map(seq.frames, T)])

    if bundle.frame_labels is not None and len(bundle.frame_labels) != T:
        raise AlignmentError(
            f"{bundle.video_id}: {len(bundle.frame_labels)} frame labels for {T} visual frames")
    return replace(bundle, audio=resample(bundle.audio), text=resample(bundle.text))


# -- manifests -------------------------------------------------------------------

def _parse_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#") or line.startswith("video_id\t"):
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
        vid, label_col, split = cols[0], cols[5], cols[6]
        if vid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate video_id {vid!r}")
        seen.add(vid)
        paths = {m: root / p for m, p in zip(MODALITIES, cols[1:5])}
        label, frame_path = None, None
        if label_col not in ("", "-"):
            try:
                label = int(label_col)
            except ValueError:
                frame_path = root / label_col
        entries.append(ManifestEntry(vid, paths, label, frame_path, split))
    return entries


def write_manifest(entries: list[ManifestEntry], path) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for e in entries:
        rel = [str(Path(e.paths[m]).resolve().relative_to(root)) for m in MODALITIES]
        if e.frame_label_path is not None:
            label = str(Path(e.frame_label_path).resolve().relative_to(root))
        else:
            label = "-" if e.label is None else str(e.label)
        lines.append("\t".join([e.video_id, *rel, label, e.split]))
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path, split: str | None = None, dims: Mapping[str, int] | None = None) -> list[ModalityBundle]:
    """Load, align and validate every entry (optionally only one split)."""
    bundles = []
    for e in _parse_manifest(path):
        if split is not None and e.split != split:
            continue
        for m, p in e.paths.items():
            if not p.is_file():
                raise ManifestError(f"video {e.video_id!r}: missing {m} file {p}")
        if e.frame_label_path is not None and not e.frame_label_path.is_file():
            raise ManifestError(f"video {e.video_id!r}: missing frame-label file {e.frame_label_path}")
        seqs = {m: read_feature_file(p, dims) for m, p in e.paths.items()}
        frame_labels = read_frame_labels(e.frame_label_path) if e.frame_label_path else None
        bundles.append(align_modalities(ModalityBundle(e.video_id, **seqs, label=e.label,
                                                       frame_labels=frame_labels)))
    return bundles


def read_gold_labels(path, split: str | None = None) -> dict[str, GoldLabels]:
    """Labels only, without touching feature files."""
    gold = {}
    for e in _parse_manifest(path):
        if split is not None and e.split != split:
            continue
        if e.frame_label_path is not None:
            if not e.frame_label_path.is_file():
                raise ManifestError(f"video {e.video_id!r}: missing frame-label file {e.frame_label_path}")
            gold[e.video_id] = GoldLabels(frame_labels=read_frame_labels(e.frame_label_path))
        else:
            gold[e.video_id] = GoldLabels(label=e.label)
    return gold


# -- synthetic corpora -------------------------------------------------------------

@dataclass
class SynthResult:
    bundles: list[ModalityBundle]
    manifest: Path | None = None
    class_means: dict[str, np.ndarray] = field(default_factory=dict)


def _balanced_labels(rng: np.random.Generator, n: int, K: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % K)


def synth_dataset(
    seed: int,
    n_videos: int,
    T: int,
    K: int,
    separation: float,
    out_dir=None,
    val_videos: int = 0,
    text_frames: int = 1,
    dims: Mapping[str, int] | None = None,
) -> SynthResult:
    """Gaussian class-mean corpus standing in for real extracted features.

    Each modality has one mean vector per class, a random direction scaled to
    norm ``separation``; every frame is that mean plus unit Gaussian noise.
    Labels are balanced within each split (every class appears
    ``n // K`` or ``n // K + 1`` times) in random order.  Text gets
    ``text_frames`` rows per video, mimicking one utterance embedding.

    If ``out_dir`` is given the features, ``manifest.tsv`` and per-split
    ``train.tsv`` / ``val.tsv`` are written there.
    """
    if K < 2:
        raise ValueError(f"synth_dataset needs K >= 2, got {K}")
    dims = MODALITY_DIMS if dims is None else dims
    rng = np.random.default_rng(seed)
    means = {}
    for m in MODALITIES:
        directions = rng.standard_normal((K, dims[m]))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means[m] = directions * separation

    splits = [("train", n_videos), ("val", val_videos)]
    bundles, split_tags = [], []
    for split, n in splits:
        for i, c in enumerate(_balanced_labels(rng, n, K)):
            seqs = {}
            for m in MODALITIES:
                frames = text_frames if m == "text" else T
                noise = rng.standard_normal((frames, dims[m]))
                seqs[m] = FeatureSequence(m, (means[m][c] + noise).astype(np.float32))
            bundles.append(ModalityBundle(f"{split}_{i:04d}", **seqs, label=int(c)))
            split_tags.append(split)

    manifest = None
    if out_dir is not None:
        out = Path(out_dir)
        feat_dir = out / "features"
        feat_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for b, split in zip(bundles, split_tags):
            paths = {}
            for seq in b.sequences():
                p = feat_dir / f"{b.video_id}.{seq.modality}.mmfe"
                write_feature_file(seq, p, dims)
                paths[seq.modality] = p
            entries.append(ManifestEntry(b.video_id, paths, b.label, None, split))
        manifest = out / "manifest.tsv"
        write_manifest(entries, manifest)
        for split, n in splits:
            if n:
                write_manifest([e for e in entries if e.split == split], out / f"{split}.tsv")

    return SynthResult([align_modalities(b) for b in bundles], manifest, means)
