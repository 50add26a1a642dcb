"""Synthetic sequence data, on-disk formats and input normalization.

Feature files: magic ``OCTF``, u32 version, u32 T, u32 D, then T*D float32,
all little-endian.  Label files hold one line of space-separated tokens.  A
JSON manifest lists the alphabet and the (feature, label) file pairs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .labels import Alphabet
from .streaming import Utterance

FEATURE_MAGIC = b"OCTF"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    alphabet_size: int = 6
    sequences: int = 600
    symbols: tuple[int, int] = (8, 12)  # inclusive range
    frames_per_symbol: tuple[int, int] = (9, 15)
    noise: float = 0.5
    silence: tuple[int, int] = (0, 0)  # leading and trailing silence frames
    allow_repeats: bool = False

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "frames_per_symbol", tuple(self.frames_per_symbol))
        object.__setattr__(self, "silence", tuple(self.silence))
        if self.alphabet_size < 1 or self.sequences < 1:
            raise ValueError("alphabet size and sequence count must be positive")
        if not 1 <= self.symbols[0] <= self.symbols[1]:
            raise ValueError("symbols-per-sequence range must satisfy 1 <= lo <= hi")
        if not 1 <= self.frames_per_symbol[0] <= self.frames_per_symbol[1]:
            raise ValueError("frames-per-symbol range must satisfy 1 <= lo <= hi")
        if not 0 <= self.silence[0] <= self.silence[1]:
            raise ValueError("silence range must satisfy 0 <= lo <= hi")
        if self.noise < 0 or not np.isfinite(self.noise):
            raise ValueError("noise must be a finite nonnegative number")
        if not self.allow_repeats and self.alphabet_size < 2 and self.symbols[1] > 1:
            raise ValueError("sequences without repeats need at least two symbols")

    @property
    def expected_length(self) -> float:
        return (
            np.mean(self.symbols) * np.mean(self.frames_per_symbol) + 2 * np.mean(self.silence)
        )

    def alphabet(self) -> Alphabet:
        return Alphabet(tuple(_token(i) for i in range(self.alphabet_size)))


def _token(i: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    return letters[i] if i < 26 else f"s{i}"


def synth_utterance(spec: SynthSpec, rng: np.random.Generator, name: str = "") -> Utterance:
    """One sequence: every symbol emits a run of noisy one-hot frames."""
    n = int(rng.integers(spec.symbols[0], spec.symbols[1] + 1))
    symbols = []
    for _ in range(n):
        if spec.allow_repeats or not symbols:
            s = int(rng.integers(spec.alphabet_size))
        else:
            s = int(rng.integers(spec.alphabet_size - 1))
            s += s >= symbols[-1]
        symbols.append(s)
    D = spec.alphabet_size
    parts = [np.zeros((int(rng.integers(spec.silence[0], spec.silence[1] + 1)), D))]
    for s in symbols:
        run = np.zeros((int(rng.integers(spec.frames_per_symbol[0], spec.frames_per_symbol[1] + 1)), D))
        run[:, s] = 1.0
        parts.append(run)
    parts.append(np.zeros((int(rng.integers(spec.silence[0], spec.silence[1] + 1)), D)))
    clean = np.concatenate(parts)
    features = clean + spec.noise * rng.standard_normal(clean.shape) if spec.noise > 0 else clean
    return Utterance(features, tuple(s + 1 for s in symbols), name)


def synth_dataset(spec: SynthSpec, seed: int, prefix: str = "utt") -> list[Utterance]:
    rng = np.random.default_rng(seed)
    return [synth_utterance(spec, rng, f"{prefix}{i:05d}") for i in range(spec.sequences)]


# feature and label files --------------------------------------------------------


def write_features(path: str | Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise FormatError("features must be a (T, D) array")
    T, D = features.shape
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, T, D)
    Path(path).write_bytes(header + features.astype("<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    version, T, D = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    if len(raw) != 16 + 4 * T * D:
        raise FormatError(f"{path}: expected {T}x{D} floats")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, D).astype(np.float64)


def write_labels(path: str | Path, tokens: Sequence[str]) -> None:
    Path(path).write_text(" ".join(tokens) + "\n", encoding="utf-8")


def read_labels(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").split()


@dataclass
class Manifest:
    alphabet: tuple[str, ...]
    entries: list[tuple[str, str]]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"version": MANIFEST_VERSION, "alphabet": list(self.alphabet),
             "entries": [list(e) for e in self.entries], "meta": self.meta},
            indent=1, sort_keys=True,
        ) + "\n"

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if obj.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{path}: unsupported manifest version {obj.get('version')}")
        return cls(tuple(obj["alphabet"]), [tuple(e) for e in obj["entries"]], obj.get("meta", {}))


def write_dataset(directory: str | Path, name: str, utterances: Sequence[Utterance],
                  alphabet: Alphabet, meta: dict | None = None) -> Path:
    """Write features, labels and ``<name>.json`` under ``directory``."""
    root = Path(directory)
    (root / name).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, utt in enumerate(utterances):
        stem = utt.name or f"{name}{i:05d}"
        feat, lab = f"{name}/{stem}.octf", f"{name}/{stem}.txt"
        write_features(root / feat, utt.features)
        write_labels(root / lab, alphabet.decode(utt.target))
        entries.append((feat, lab))
    path = root / f"{name}.json"
    path.write_text(Manifest(alphabet.labels, entries, meta or {}).to_json(), encoding="utf-8")
    return path


def load_dataset(manifest_path: str | Path) -> tuple[list[Utterance], Alphabet]:
    """Read a manifest; relative paths resolve against its directory."""
    manifest_path = Path(manifest_path)
    manifest = Manifest.read(manifest_path)
    alphabet = Alphabet(manifest.alphabet)
    utterances = []
    for feat, lab in manifest.entries:
        fp, lp = manifest_path.parent / feat, manifest_path.parent / lab
        utterances.append(Utterance(read_features(fp), tuple(alphabet.encode(read_labels(lp))), Path(feat).stem))
    return utterances, alphabet


def datagen(spec: SynthSpec, seed: int, out_dir: str | Path, test_sequences: int = 0,
            dev_sequences: int = 0) -> dict[str, Path]:
    """Generate train and optional dev/test splits on disk, each from its own seed."""
    alphabet = spec.alphabet()
    meta = {"spec": asdict(spec), "seed": seed}
    out = {"train": write_dataset(out_dir, "train", synth_dataset(spec, seed, "tr"), alphabet, meta)}
    for name, count, prefix, offset in (("dev", dev_sequences, "dv", 2_000_003), ("test", test_sequences, "te", 1_000_003)):
        if count:
            split = SynthSpec(**{**asdict(spec), "sequences": count})
            out[name] = write_dataset(out_dir, name, synth_dataset(split, seed + offset, prefix), alphabet, meta)
    return out


# normalization ---------------------------------------------------------------------


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, utterances: Sequence[Utterance], floor: float = 1e-8) -> "Normalizer":
        frames = np.concatenate([u.features for u in utterances])
        return cls(frames.mean(axis=0), np.maximum(frames.std(axis=0), floor))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def apply_all(self, utterances: Sequence[Utterance]) -> list[Utterance]:
        return [Utterance(self.apply(u.features), u.target, u.name) for u in utterances]
