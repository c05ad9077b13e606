"""Fixation logs, word-timed transcripts, and their sentence-level alignment."""
import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyTranscript, MalformedRow, NonMonotonicTime

FIXATION_HEADER = ["t_ms", "x", "y", "dur_ms"]
TRANSCRIPT_HEADER = ["word", "t_start_ms", "t_end_ms"]
MANIFEST_HEADER = ["session_id", "image_path", "fixation_csv", "transcript_csv", "width", "height"]
TERMINATORS = (".", "?", "!")


@dataclass(frozen=True)
class FixationEvent:
    t_ms: int
    x: float
    y: float
    dur_ms: int

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"fixation position ({self.x}, {self.y}) outside [0,1]^2")
        if self.dur_ms <= 0:
            raise ValueError(f"fixation duration must be positive, got {self.dur_ms}")


@dataclass(frozen=True)
class TimedWord:
    text: str
    t_start_ms: int
    t_end_ms: int

    def __post_init__(self):
        if not self.t_start_ms < self.t_end_ms:
            raise ValueError(f"word {self.text!r}: t_start_ms must be < t_end_ms")


@dataclass(frozen=True)
class SentenceSpan:
    text: str
    word_range: range
    t_start_ms: int
    t_end_ms: int


@dataclass(frozen=True)
class GazeSession:
    image_path: str
    image_width: int
    image_height: int
    fixations: tuple
    words: tuple
    sentences: tuple = field(default=())
    gaze_free: bool = False

    def __post_init__(self):
        if not self.words:
            raise EmptyTranscript("session has no transcript words")
        if not self.sentences:
            object.__setattr__(self, "sentences", tuple(segment_sentences(self.words)))
        if not self.fixations and not self.gaze_free:
            object.__setattr__(self, "gaze_free", True)


def segment_sentences(words):
    """Split words into sentences ending at a token that ends with '.', '?' or '!'.

    A trailing run without a terminator becomes the final sentence.
    """
    words = list(words)
    spans = []
    start = 0
    for i, w in enumerate(words):
        if w.text.endswith(TERMINATORS) or i == len(words) - 1:
            run = words[start:i + 1]
            spans.append(SentenceSpan(
                text=" ".join(x.text for x in run),
                word_range=range(start, i + 1),
                t_start_ms=run[0].t_start_ms,
                t_end_ms=run[-1].t_end_ms,
            ))
            start = i + 1
    return spans


def fixations_in_interval(session, span):
    """Fixations with ``t_start_ms <= t_ms < t_end_ms``."""
    return [f for f in session.fixations if span.t_start_ms <= f.t_ms < span.t_end_ms]


def _read_rows(path, header):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise MalformedRow(path, 1, "missing header") from None
        if [c.strip() for c in first] != header:
            raise MalformedRow(path, 1, f"expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(path, lineno, f"expected {len(header)} columns, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def read_fixations(path):
    out = []
    prev = None
    for lineno, (t, x, y, dur) in _read_rows(path, FIXATION_HEADER):
        try:
            ev = FixationEvent(int(t), float(x), float(y), int(dur))
        except ValueError as exc:
            raise MalformedRow(path, lineno, str(exc)) from None
        if prev is not None and ev.t_ms < prev:
            raise NonMonotonicTime(f"{path}:{lineno}: t_ms {ev.t_ms} precedes {prev}")
        prev = ev.t_ms
        out.append(ev)
    return out


def read_transcript(path):
    out = []
    for lineno, (word, t0, t1) in _read_rows(path, TRANSCRIPT_HEADER):
        if not word:
            raise MalformedRow(path, lineno, "empty word")
        try:
            w = TimedWord(word, int(t0), int(t1))
        except ValueError as exc:
            raise MalformedRow(path, lineno, str(exc)) from None
        if out and w.t_start_ms < out[-1].t_end_ms:
            raise NonMonotonicTime(
                f"{path}:{lineno}: word starts at {w.t_start_ms} before previous ends at {out[-1].t_end_ms}")
        out.append(w)
    if not out:
        raise EmptyTranscript(f"{path}: transcript has no rows")
    return out


def parse_session(fixation_file, transcript_file, image_meta, image_path=""):
    """Load and validate one reading session.

    ``image_meta`` is ``(width, height)`` in pixels.
    """
    width, height = (int(v) for v in image_meta)
    fixations = read_fixations(fixation_file)
    words = read_transcript(transcript_file)
    return GazeSession(
        image_path=str(image_path),
        image_width=width,
        image_height=height,
        fixations=tuple(fixations),
        words=tuple(words),
        gaze_free=not fixations,
    )


def write_fixations(path, fixations):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIXATION_HEADER)
        for f in fixations:
            w.writerow([f.t_ms, repr(float(f.x)), repr(float(f.y)), f.dur_ms])


def write_transcript(path, words):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSCRIPT_HEADER)
        for word in words:
            w.writerow([word.text, word.t_start_ms, word.t_end_ms])


def write_session(session, fixation_file, transcript_file):
    write_fixations(fixation_file, session.fixations)
    write_transcript(transcript_file, session.words)


@dataclass(frozen=True)
class ManifestEntry:
    session_id: str
    image_path: Path
    fixation_csv: Path
    transcript_csv: Path
    width: int
    height: int

    def load(self):
        return parse_session(self.fixation_csv, self.transcript_csv,
                             (self.width, self.height), self.image_path)


def read_manifest(path):
    """Parse a session manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, row in _read_rows(path, MANIFEST_HEADER):
        sid, img, fix, tr, w, h = row
        try:
            width, height = int(w), int(h)
        except ValueError:
            raise MalformedRow(path, lineno, "width/height must be integers") from None
        if width <= 0 or height <= 0:
            raise MalformedRow(path, lineno, "width/height must be positive")
        entries.append(ManifestEntry(sid, base / img, base / fix, base / tr, width, height))
    return entries


def write_manifest(path, entries):
    base = Path(path).parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.session_id,
                        os.path.relpath(e.image_path, base),
                        os.path.relpath(e.fixation_csv, base),
                        os.path.relpath(e.transcript_csv, base),
                        e.width, e.height])
