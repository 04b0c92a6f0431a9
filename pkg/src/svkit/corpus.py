"""Synthetic speaker corpora, feature archives, manifests, and batching.

Features live on disk in a little-endian binary archive ("FARC"):
a 4-byte magic, a u32 format version, then one record per utterance of
[u32 key-length, UTF-8 key, u32 T, u32 D, T*D float32 frames]. The key
is the utterance id; speaker labels travel in text manifests of
"utterance_id speaker_id byte_offset" lines so splits can select
subsets of one archive by offset.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NumericError, ShapeError

ARCHIVE_MAGIC = b"FARC"
ARCHIVE_VERSION = 1

# shortest crop the frame stack can survive: the default five-layer
# network sees 15 frames per output, so a 15-frame crop yields exactly one
MIN_CROP = 15


@dataclass(eq=False)
class FeatureSequence:
    """One utterance: an id, a speaker label, and (T, D) float32 frames."""

    utterance_id: str
    speaker_id: str
    frames: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"frames must be (T, D), got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ShapeError(f"utterance {self.utterance_id!r} has no frames")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"utterance {self.utterance_id!r} holds "
                               "non-finite frames")
        self.frames = arr

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    offset: int


class CorpusManifest:
    """Ordered list of (utterance, speaker, archive offset) rows."""

    def __init__(self, entries):
        entries = list(entries)
        seen = set()
        for e in entries:
            if e.utterance_id in seen:
                raise ValueError(f"duplicate utterance id {e.utterance_id!r}")
            seen.add(e.utterance_id)
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def speakers(self):
        return sorted({e.speaker_id for e in self.entries})

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(f"{e.utterance_id} {e.speaker_id} {e.offset}\n")

    @classmethod
    def read(cls, path):
        entries = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise FormatError(f"{path}:{lineno}: expected "
                                      f"'utterance speaker offset', got {line!r}")
                try:
                    offset = int(parts[2])
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: bad offset "
                                      f"{parts[2]!r}") from exc
                entries.append(ManifestEntry(parts[0], parts[1], offset))
        return cls(entries)


def _write_u32(f, value):
    f.write(struct.pack("<I", value))


def _read_u32(f, path):
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError(f"{path}: truncated archive")
    return struct.unpack("<I", raw)[0]


def write_archive(path, sequences):
    """Write sequences to a FARC archive; returns the matching manifest."""
    entries = []
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        _write_u32(f, ARCHIVE_VERSION)
        for seq in sequences:
            offset = f.tell()
            key = seq.utterance_id.encode("utf-8")
            _write_u32(f, len(key))
            f.write(key)
            _write_u32(f, seq.num_frames)
            _write_u32(f, seq.dim)
            f.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())
            entries.append(ManifestEntry(seq.utterance_id, seq.speaker_id, offset))
    return CorpusManifest(entries)


class ArchiveReader:
    """Random and sequential access to a FARC archive."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "rb")
        magic = self._f.read(4)
        if magic != ARCHIVE_MAGIC:
            self._f.close()
            raise FormatError(f"{path}: bad magic {magic!r}")
        version = _read_u32(self._f, path)
        if version != ARCHIVE_VERSION:
            self._f.close()
            raise FormatError(f"{path}: unsupported archive version {version}")
        self._data_start = self._f.tell()

    def _read_record(self):
        keylen = _read_u32(self._f, self.path)
        key = self._f.read(keylen)
        if len(key) != keylen:
            raise FormatError(f"{self.path}: truncated key")
        t = _read_u32(self._f, self.path)
        d = _read_u32(self._f, self.path)
        raw = self._f.read(4 * t * d)
        if len(raw) != 4 * t * d:
            raise FormatError(f"{self.path}: truncated frames for "
                              f"{key.decode('utf-8', 'replace')!r}")
        frames = np.frombuffer(raw, dtype="<f4").reshape(t, d).copy()
        return key.decode("utf-8"), frames

    def read_at(self, offset):
        """Return (utterance_id, frames) for the record at a byte offset."""
        self._f.seek(offset)
        return self._read_record()

    def __iter__(self):
        self._f.seek(self._data_start)
        while True:
            probe = self._f.read(1)
            if not probe:
                return
            self._f.seek(-1, 1)
            yield self._read_record()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_archive(path, manifest=None):
    """Load a whole archive as FeatureSequences.

    The archive stores no speaker labels; pass the manifest written
    alongside it to restore them (otherwise speaker_id is left empty).
    """
    by_utt = {}
    if manifest is not None:
        by_utt = {e.utterance_id: e.speaker_id for e in manifest}
    out = []
    with ArchiveReader(path) as reader:
        for utt, frames in reader:
            out.append(FeatureSequence(utt, by_utt.get(utt, ""), frames))
    return out


def load_split(archive_path, manifest):
    """Load the manifest's utterances from an archive by offset."""
    out = []
    with ArchiveReader(archive_path) as reader:
        for e in manifest:
            utt, frames = reader.read_at(e.offset)
            if utt != e.utterance_id:
                raise FormatError(
                    f"{archive_path}: offset {e.offset} holds {utt!r}, "
                    f"manifest says {e.utterance_id!r}")
            out.append(FeatureSequence(utt, e.speaker_id, frames))
    return out


def sample_crop(seq, crop_len, rng):
    """Random contiguous crop of crop_len frames, start uniform over fits."""
    crop_len = int(crop_len)
    if crop_len < MIN_CROP:
        raise ValueError(f"crop length {crop_len} below minimum {MIN_CROP}")
    if crop_len > seq.num_frames:
        raise ValueError(f"crop length {crop_len} exceeds utterance "
                         f"{seq.utterance_id!r} length {seq.num_frames}")
    start = int(rng.integers(0, seq.num_frames - crop_len + 1))
    return FeatureSequence(seq.utterance_id, seq.speaker_id,
                           seq.frames[start : start + crop_len].copy())


def make_batches(sequences, batch_size, rng, crop_range=(200, 400)):
    """Shuffle, crop, and group sequences into equal-length batches.

    Each batch draws one crop length uniformly from crop_range, clamped
    to its shortest member so every batch stays rectangular. Utterances
    shorter than the minimum crop are skipped with a warning; a trailing
    group smaller than batch_size is dropped.
    """
    lo, hi = int(crop_range[0]), int(crop_range[1])
    if lo < MIN_CROP or hi < lo:
        raise ValueError(f"crop_range must satisfy {MIN_CROP} <= lo <= hi, "
                         f"got ({lo}, {hi})")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    usable = [s for s in sequences if s.num_frames >= lo]
    skipped = len(sequences) - len(usable)
    if skipped:
        warnings.warn(f"skipped {skipped} utterances shorter than {lo} frames")
    if len(usable) < batch_size:
        raise ValueError(f"only {len(usable)} usable utterances for "
                         f"batch_size {batch_size}")
    perm = rng.permutation(len(usable))
    batches = []
    for start in range(0, len(usable) - batch_size + 1, batch_size):
        chunk = [usable[i] for i in perm[start : start + batch_size]]
        crop = int(rng.integers(lo, hi + 1))
        crop = min(crop, min(s.num_frames for s in chunk))
        batches.append([sample_crop(s, crop, rng) for s in chunk])
    return batches


class NoiseTargetSource:
    """Gaussian regression targets for the auxiliary branches.

    In "fixed" mode the target for (utterance, layer) is a function of
    the seed alone: the same vector every epoch, derived by hashing
    seed, utterance id, and layer name into a private generator. In
    "resampled" mode targets are drawn fresh from a stream; reseed()
    the stream at each epoch boundary to keep runs reproducible.
    """

    def __init__(self, seed, dims, mode="fixed"):
        if mode not in ("fixed", "resampled"):
            raise ValueError(f"mode must be 'fixed' or 'resampled', got {mode!r}")
        self.seed = int(seed)
        self.dims = dict(dims)
        for layer, dim in self.dims.items():
            if dim < 1:
                raise ValueError(f"target dim for {layer!r} must be >= 1")
        self.mode = mode
        self._stream = np.random.default_rng([self.seed])

    def reseed(self, lineage):
        """Point the resampled-mode stream at a fresh deterministic state."""
        self._stream = np.random.default_rng(lineage)

    def _dim(self, layer):
        if layer not in self.dims:
            raise ValueError(f"no target dim configured for layer {layer!r}")
        return self.dims[layer]

    def target(self, utterance_id, layer):
        dim = self._dim(layer)
        if self.mode == "resampled":
            return self._stream.standard_normal(dim)
        digest = hashlib.blake2b(
            f"{self.seed}|{utterance_id}|{layer}".encode("utf-8"),
            digest_size=8).digest()
        gen = np.random.default_rng(int.from_bytes(digest, "little"))
        return gen.standard_normal(dim)

    def batch_targets(self, utterance_ids, layer):
        return np.stack([self.target(u, layer) for u in utterance_ids])


def generate_synthetic_corpus(num_speakers, utts_per_speaker,
                              frame_range=(200, 400), feature_dim=30, seed=0,
                              speaker_prefix="spk", mixture_seed=0,
                              num_phonemes=8, transform_scale=0.4,
                              offset_scale=0.6):
    """Sample a labeled corpus of pseudo-speech feature sequences.

    All speakers share one inventory of `num_phonemes` Gaussian frame
    clusters (seeded by mixture_seed so disjoint speaker sets can share
    it). Each utterance is a run-length sequence of cluster draws passed
    through a per-speaker affine map, so speaker identity lives in a
    stable linear distortion plus offset while phonetic content varies
    frame to frame.
    """
    if num_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("need at least one speaker and one utterance each")
    lo, hi = int(frame_range[0]), int(frame_range[1])
    if lo < 1 or hi < lo:
        raise ValueError(f"bad frame_range ({lo}, {hi})")
    mix = np.random.default_rng([int(mixture_seed), 11])
    centers = 2.0 * mix.standard_normal((num_phonemes, feature_dim))
    scales = mix.uniform(0.25, 0.75, size=(num_phonemes, feature_dim))

    spk_rng = np.random.default_rng([int(seed), 13])
    eye = np.eye(feature_dim)
    sequences = []
    for s in range(num_speakers):
        speaker_id = f"{speaker_prefix}{s:03d}"
        transform = eye + (transform_scale / np.sqrt(feature_dim)) * \
            spk_rng.standard_normal((feature_dim, feature_dim))
        offset = offset_scale * spk_rng.standard_normal(feature_dim)
        for u in range(utts_per_speaker):
            utt_rng = np.random.default_rng([int(seed), 17, s, u])
            t = int(utt_rng.integers(lo, hi + 1))
            chunks = []
            filled = 0
            while filled < t:
                p = int(utt_rng.integers(0, num_phonemes))
                run = int(utt_rng.integers(5, 16))
                chunk = centers[p] + scales[p] * utt_rng.standard_normal(
                    (run, feature_dim))
                chunks.append(chunk)
                filled += run
            frames = np.concatenate(chunks, axis=0)[:t]
            frames = frames @ transform.T + offset
            sequences.append(FeatureSequence(
                f"{speaker_id}_u{u:03d}", speaker_id,
                frames.astype(np.float32)))
    return sequences
