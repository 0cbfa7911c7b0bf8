"""Corpora of feature-vector utterances and their on-disk container.

The binary container (magic "HMPC") is the canonical artifact; a JSON-lines
mirror of the same records can be written next to it for inspection. Both
serializations are deterministic byte-for-byte given the same corpus.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .util import DataError, sha256_bytes

MAGIC = b"HMPC"
VERSION = 1


@dataclass
class TruthInfo:
    """Generation-time ground truth attached to a simulated utterance.

    state_ids enumerate the visited emitting states along the expanded unit
    chain (a fresh id per chain position, so runs of equal ids are exactly
    the state regions); tied_ids give the emitting output id per frame.
    """

    units: tuple[str, ...]
    state_ids: np.ndarray
    tied_ids: np.ndarray


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    words: tuple[str, ...]
    frames: np.ndarray
    truth: TruthInfo | None = None

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise DataError(f"{self.utt_id}: frames must be (n, d)")
        self.words = tuple(self.words)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class Corpus:
    dim: int
    utterances: list[Utterance] = field(default_factory=list)

    def __post_init__(self):
        for utt in self.utterances:
            if utt.dim != self.dim:
                raise DataError(f"{utt.utt_id}: dimension {utt.dim} != corpus {self.dim}")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def by_id(self) -> dict[str, Utterance]:
        return {u.utt_id: u for u in self.utterances}

    @property
    def total_frames(self) -> int:
        return sum(u.n_frames for u in self.utterances)

    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HHI", VERSION, self.dim, len(self.utterances)))
        for utt in self.utterances:
            for text in (utt.utt_id, utt.speaker, " ".join(utt.words)):
                raw = text.encode("utf-8")
                buf.write(struct.pack("<H", len(raw)))
                buf.write(raw)
            buf.write(struct.pack("<I", utt.n_frames))
            buf.write(utt.frames.astype("<f8").tobytes(order="C"))
        payload = buf.getvalue()
        return payload + sha256_bytes(payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Corpus":
        if len(data) < 44 or data[:4] != MAGIC:
            raise DataError("not a corpus file (bad magic)")
        payload, digest = data[:-32], data[-32:]
        if sha256_bytes(payload) != digest:
            raise DataError("corpus file checksum mismatch")
        off = 4
        version, dim, n_utts = struct.unpack_from("<HHI", payload, off)
        off += 8
        if version != VERSION:
            raise DataError(f"unsupported corpus version {version}")
        utts = []
        for _ in range(n_utts):
            texts = []
            for _ in range(3):
                (ln,) = struct.unpack_from("<H", payload, off)
                off += 2
                texts.append(payload[off:off + ln].decode("utf-8"))
                off += ln
            (n_frames,) = struct.unpack_from("<I", payload, off)
            off += 4
            nbytes = n_frames * dim * 8
            if off + nbytes > len(payload):
                raise DataError("corpus file truncated")
            frames = np.frombuffer(payload, dtype="<f8", count=n_frames * dim, offset=off)
            off += nbytes
            words = tuple(texts[2].split()) if texts[2] else ()
            utts.append(Utterance(texts[0], texts[1], words, frames.reshape(n_frames, dim).copy()))
        if off != len(payload):
            raise DataError("corpus file has trailing bytes")
        return cls(dim, utts)

    def save(self, path, mirror: bool = False) -> None:
        data = self.to_bytes()
        with open(path, "wb") as f:
            f.write(data)
        if mirror:
            self.save_jsonl(str(path) + ".jsonl")

    def save_jsonl(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            for utt in self.utterances:
                rec = {
                    "utt_id": utt.utt_id,
                    "speaker": utt.speaker,
                    "transcript": " ".join(utt.words),
                    "n_frames": utt.n_frames,
                    "frames": [[float(v) for v in row] for row in utt.frames],
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Corpus":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def content_hash(self) -> str:
        return sha256_bytes(self.to_bytes()).hex()


def save_truth(corpus: Corpus, path) -> None:
    """Ground-truth state tracks as JSON lines (one record per utterance)."""
    with open(path, "w", newline="\n") as f:
        for utt in corpus:
            if utt.truth is None:
                raise DataError(f"{utt.utt_id}: no truth metadata to save")
            rec = {
                "utt_id": utt.utt_id,
                "units": list(utt.truth.units),
                "states": [int(v) for v in utt.truth.state_ids],
                "tied": [int(v) for v in utt.truth.tied_ids],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_truth(corpus: Corpus, path) -> None:
    """Attach saved truth records to the matching utterances in place."""
    records = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                records[rec["utt_id"]] = rec
    for utt in corpus:
        rec = records.get(utt.utt_id)
        if rec is None:
            raise DataError(f"{utt.utt_id}: missing truth record")
        utt.truth = TruthInfo(
            units=tuple(rec["units"]),
            state_ids=np.asarray(rec["states"], dtype=np.int32),
            tied_ids=np.asarray(rec["tied"], dtype=np.int32),
        )
