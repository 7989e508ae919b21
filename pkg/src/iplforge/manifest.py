"""Utterance manifests (TSV) and binary feature files."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import DatasetError

SOURCES = ("truth", "reference")


@dataclass(frozen=True)
class UttRecord:
    utt_id: str
    lang_id: str
    feature_path: str
    transcript: str
    source: str = "truth"
    certainty: Optional[float] = None

    def __post_init__(self) -> None:
        is_pseudo = self.source.startswith("pseudo:")
        if not is_pseudo and self.source not in SOURCES:
            raise DatasetError(f"{self.utt_id}: unknown source {self.source!r}")
        if is_pseudo != (self.certainty is not None):
            raise DatasetError(f"{self.utt_id}: certainty must be set iff source is pseudo")
        for name in ("utt_id", "lang_id", "feature_path", "transcript"):
            value = getattr(self, name)
            if "\t" in value or "\n" in value:
                raise DatasetError(f"{self.utt_id}: {name} contains a tab or newline")

    def with_transcript(self, transcript: str, source: str, certainty: Optional[float] = None) -> "UttRecord":
        return replace(self, transcript=transcript, source=source, certainty=certainty)


class Manifest:
    """Ordered list of utterance records with unique ids.

    ``root`` anchors relative feature paths; it is the directory of the TSV
    file when loaded from disk.
    """

    def __init__(self, records: Iterable[UttRecord] = (), root: str | Path | None = None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        seen = set()
        for rec in self.records:
            if rec.utt_id in seen:
                raise DatasetError(f"duplicate utt_id {rec.utt_id}")
            seen.add(rec.utt_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[UttRecord]:
        return iter(self.records)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Manifest) and self.records == other.records

    def __repr__(self) -> str:
        return f"Manifest({len(self.records)} records)"

    @property
    def ids(self) -> list[str]:
        return [r.utt_id for r in self.records]

    def languages(self) -> list[str]:
        return sorted({r.lang_id for r in self.records})

    def by_language(self, lang: str) -> "Manifest":
        return Manifest([r for r in self.records if r.lang_id == lang], self.root)

    def filter_languages(self, langs: Iterable[str]) -> "Manifest":
        keep = set(langs)
        return Manifest([r for r in self.records if r.lang_id in keep], self.root)

    def resolve(self, rec: UttRecord) -> Path:
        path = Path(rec.feature_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def load_features(self, rec: UttRecord) -> np.ndarray:
        return read_features(self.resolve(rec))

    def derive(self, records: Iterable[UttRecord]) -> "Manifest":
        return Manifest(records, self.root)

    def dumps(self) -> str:
        return "".join(_format_record(r) + "\n" for r in self.records)

    def save(self, path: str | Path) -> None:
        """Write as TSV; feature paths are rewritten relative to the new location."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        out_root = path.parent.resolve()
        records = []
        for rec in self.records:
            if self.root is None and not Path(rec.feature_path).is_absolute():
                records.append(rec)
            else:
                rel = os.path.relpath(self.resolve(rec).resolve(), out_root)
                records.append(replace(rec, feature_path=Path(rel).as_posix()))
        path.write_text(Manifest(records).dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, root: str | Path | None = None) -> "Manifest":
        records = []
        for lineno, line in enumerate(text.split("\n"), 1):
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise DatasetError(f"manifest line {lineno}: expected 6 fields, got {len(fields)}")
            utt_id, lang, feat, transcript, source, cert = fields
            try:
                score = float(cert) if cert else None
            except ValueError:
                raise DatasetError(f"manifest line {lineno}: bad certainty {cert!r}") from None
            records.append(UttRecord(utt_id, lang, feat, transcript, source, score))
        return cls(records, root)

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        return cls.loads(text, root=path.parent.resolve())


def _format_record(rec: UttRecord) -> str:
    cert = "" if rec.certainty is None else f"{rec.certainty:.6f}"
    return "\t".join([rec.utt_id, rec.lang_id, rec.feature_path, rec.transcript, rec.source, cert])


# feature files: int32 T, int32 F, then T*F float32 row-major, little-endian
_FEAT_HEADER = struct.Struct("<ii")


def write_features(path: str | Path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise DatasetError(f"{path}: features must be 2-D, got shape {feats.shape}")
    try:
        with open(path, "wb") as fh:
            fh.write(_FEAT_HEADER.pack(*feats.shape))
            fh.write(np.ascontiguousarray(feats).tobytes())
    except OSError as exc:
        raise DatasetError(f"cannot write features {path}: {exc}") from exc


def read_features(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read features {path}: {exc}") from exc
    if len(data) < _FEAT_HEADER.size:
        raise DatasetError(f"{path}: truncated feature header")
    t, f = _FEAT_HEADER.unpack_from(data)
    body = np.frombuffer(data, dtype="<f4", offset=_FEAT_HEADER.size)
    if t < 0 or f < 0 or body.size != t * f:
        raise DatasetError(f"{path}: header ({t}, {f}) does not match payload")
    return body.reshape(t, f).astype(np.float64)
