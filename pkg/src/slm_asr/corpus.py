"""Utterance manifests, dialogue reconstruction and the synthetic tone corpus."""

from __future__ import annotations

import json
import logging
import wave
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError

logger = logging.getLogger(__name__)

SPEAKERS = ("O1", "O2")
MANIFEST_FIELDS = (
    "utt_id",
    "audio_ref",
    "text",
    "language",
    "dialogue_id",
    "speaker_id",
    "start_time",
    "end_time",
)
STORE_METADATA = "store.json"


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    audio_ref: str
    text: str
    language: str
    dialogue_id: str
    speaker_id: str
    start_time: float
    end_time: float

    def __post_init__(self):
        if self.speaker_id not in SPEAKERS:
            raise ManifestError(f"{self.utt_id}: speaker_id must be one of {SPEAKERS}, got {self.speaker_id!r}")
        if self.start_time < 0:
            raise ManifestError(f"{self.utt_id}: start_time must be >= 0")
        if not self.end_time > self.start_time:
            raise ManifestError(f"{self.utt_id}: end_time must exceed start_time")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Conversation:
    dialogue_id: str
    turns: list[UtteranceRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.turns)


def _parse_record(obj: dict, lineno: int) -> UtteranceRecord:
    missing = [name for name in MANIFEST_FIELDS if name not in obj]
    if missing:
        raise ManifestError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    extra = sorted(set(obj) - set(MANIFEST_FIELDS))
    if extra:
        logger.warning("line %d: ignoring unknown field(s) %s", lineno, ", ".join(extra))
    try:
        return UtteranceRecord(
            utt_id=str(obj["utt_id"]),
            audio_ref=str(obj["audio_ref"]),
            text=str(obj["text"]),
            language=str(obj["language"]),
            dialogue_id=str(obj["dialogue_id"]),
            speaker_id=str(obj["speaker_id"]),
            start_time=float(obj["start_time"]),
            end_time=float(obj["end_time"]),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc


def validate_records(records: list[UtteranceRecord]) -> None:
    """Check manifest-level uniqueness constraints."""
    seen_ids: set[str] = set()
    seen_keys: set[tuple[str, float]] = set()
    for rec in records:
        if rec.utt_id in seen_ids:
            raise ManifestError(f"duplicate utt_id {rec.utt_id!r}")
        seen_ids.add(rec.utt_id)
        key = (rec.dialogue_id, rec.start_time)
        if key in seen_keys:
            raise ManifestError(
                f"duplicate (dialogue_id, start_time) = ({rec.dialogue_id!r}, {rec.start_time}) at {rec.utt_id!r}"
            )
        seen_keys.add(key)


def load_manifest(path) -> list[UtteranceRecord]:
    """Read a line-delimited JSON manifest, preserving file order."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"line {lineno}: expected an object")
            records.append(_parse_record(obj, lineno))
    validate_records(records)
    return records


def write_manifest(records: list[UtteranceRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


def reconstruct_conversations(records: list[UtteranceRecord]) -> dict[str, Conversation]:
    """Group records by dialogue and order each dialogue by start time.

    Overlapping turns are ordered by start_time alone.
    """
    validate_records(records)
    grouped: dict[str, list[UtteranceRecord]] = defaultdict(list)
    for rec in records:
        grouped[rec.dialogue_id].append(rec)
    return {
        dlg: Conversation(dlg, sorted(turns, key=lambda r: r.start_time))
        for dlg, turns in sorted(grouped.items())
    }


# --- synthetic corpus -------------------------------------------------------

TONE_SECONDS = 0.1
TURN_GAP_SECONDS = 0.1
BASE_FREQ_HZ = 200.0
FREQ_STEP_HZ = 100.0


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_dialogues: int = 8
    turns_per_dialogue: int = 4
    vocabulary: tuple[str, ...] = tuple("abcdefgh")
    sample_rate: int = 16000
    seed: int = 0
    min_symbols: int = 1
    max_symbols: int = 3
    languages: tuple[str, ...] = ("en", "fr")
    amplitude: float = 0.5
    # additive white noise std; 0 keeps audio a pure function of text
    noise_std: float = 0.0
    # probability that a turn opens with the last symbol of the previous turn
    context_carryover: float = 0.0

    def validate(self) -> None:
        if self.n_dialogues < 1 or self.turns_per_dialogue < 1:
            raise ConfigError("n_dialogues and turns_per_dialogue must be >= 1")
        if not self.vocabulary:
            raise ConfigError("vocabulary must not be empty")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ConfigError("vocabulary symbols must be unique")
        if any((not s) or any(c.isspace() for c in s) for s in self.vocabulary):
            raise ConfigError("vocabulary symbols must be non-empty and contain no whitespace")
        if self.sample_rate < 1:
            raise ConfigError("sample_rate must be >= 1")
        if symbol_frequency(len(self.vocabulary) - 1) >= self.sample_rate / 2:
            raise ConfigError("vocabulary too large: highest tone exceeds the Nyquist frequency")
        if not 1 <= self.min_symbols <= self.max_symbols:
            raise ConfigError("need 1 <= min_symbols <= max_symbols")
        if not self.languages:
            raise ConfigError("languages must not be empty")
        if not 0.0 <= self.context_carryover <= 1.0:
            raise ConfigError("context_carryover must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def symbol_frequency(index: int) -> float:
    return BASE_FREQ_HZ + FREQ_STEP_HZ * index


def synthesize_text(text: str, vocabulary, sample_rate: int = 16000, amplitude: float = 0.5) -> np.ndarray:
    """Render whitespace-separated symbols as back-to-back pure tones."""
    index = {sym: i for i, sym in enumerate(vocabulary)}
    seg_len = int(round(TONE_SECONDS * sample_rate))
    t = np.arange(seg_len) / sample_rate
    pieces = []
    for sym in text.split():
        if sym not in index:
            raise ConfigError(f"symbol {sym!r} not in vocabulary")
        pieces.append(amplitude * np.sin(2 * np.pi * symbol_frequency(index[sym]) * t))
    if not pieces:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(pieces).astype(np.float32)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> tuple[list[UtteranceRecord], dict[str, np.ndarray]]:
    """Build a deterministic toy corpus of alternating-speaker dialogues.

    Returns the records and an in-memory waveform store keyed by utt_id.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    vocab = list(spec.vocabulary)
    records: list[UtteranceRecord] = []
    store: dict[str, np.ndarray] = {}
    for d in range(spec.n_dialogues):
        dialogue_id = f"dlg{d:03d}"
        language = spec.languages[d % len(spec.languages)]
        clock = 0.0
        prev_symbols: list[str] = []
        for t in range(spec.turns_per_dialogue):
            n = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
            symbols = [vocab[i] for i in rng.integers(0, len(vocab), size=n)]
            carry = rng.random() < spec.context_carryover
            if prev_symbols and carry:
                symbols[0] = prev_symbols[-1]
            text = " ".join(symbols)
            wav = synthesize_text(text, vocab, spec.sample_rate, spec.amplitude)
            if spec.noise_std > 0:
                wav = (wav + spec.noise_std * rng.standard_normal(wav.shape[0])).astype(np.float32)
            utt_id = f"{dialogue_id}_t{t:02d}"
            duration = wav.shape[0] / spec.sample_rate
            start = round(clock, 6)
            end = round(clock + duration, 6)
            records.append(
                UtteranceRecord(
                    utt_id=utt_id,
                    audio_ref=f"audio/{utt_id}.wav",
                    text=text,
                    language=language,
                    dialogue_id=dialogue_id,
                    speaker_id=SPEAKERS[t % 2],
                    start_time=start,
                    end_time=end,
                )
            )
            store[utt_id] = wav
            clock = end + TURN_GAP_SECONDS
            prev_symbols = symbols
    return records, store


# --- waveform store -------------------------------------------------------


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ManifestError(f"{path}: expected 16-bit mono PCM")
        sr = fh.getframerate()
        data = fh.readframes(fh.getnframes())
    return (np.frombuffer(data, dtype="<i2").astype(np.float32) / 32767.0), sr


def write_waveform_store(store: dict[str, np.ndarray], records: list[UtteranceRecord], root, sample_rate: int) -> None:
    """Write one PCM file per record under ``root`` plus a sidecar metadata file."""
    root = Path(root)
    for rec in records:
        path = root / rec.audio_ref
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(path, store[rec.utt_id], sample_rate)
    meta = {"sample_rate": sample_rate, "encoding": "pcm_s16le", "channels": 1}
    (root / STORE_METADATA).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def read_store_sample_rate(root) -> int | None:
    meta = Path(root) / STORE_METADATA
    if not meta.exists():
        return None
    return int(json.loads(meta.read_text(encoding="utf-8"))["sample_rate"])


def load_audio(record: UtteranceRecord, root) -> np.ndarray:
    path = Path(root) / record.audio_ref
    samples, sr = read_wav(path)
    declared = read_store_sample_rate(root)
    if declared is not None and declared != sr:
        raise ManifestError(f"{path}: sample rate {sr} disagrees with store metadata {declared}")
    return samples
