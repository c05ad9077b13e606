"""Planted-correspondence dataset: class texture in a class patch, read aloud while fixated.

Each sample has an image with a class-specific texture in a class-specific
patch, a short report whose class sentence mentions the finding, and fixations
on that patch during the class sentence.  Shared filler sentences and random
distractor patches make the correspondence something that has to be learned.
"""
import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoders import Vocabulary
from .errors import DataError
from .heatmap import DEFAULT_SIGMA_FRAC, PatchGrid, read_pgm, session_gaze_matrices
from .session import (
    FixationEvent,
    GazeSession,
    ManifestEntry,
    TimedWord,
    read_manifest,
    write_fixations,
    write_manifest,
    write_transcript,
)

IMAGE_SIZE = 224
FILLER_SENTENCES = [
    "the lungs are clear.",
    "heart size is normal.",
    "no acute process is seen.",
    "the mediastinum is stable.",
    "bones appear intact.",
    "no pleural change is seen.",
]
WORD_MS = 300
GAP_MS = 400
SENTENCE_GAP_MS = 800


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray            # H x W in [0, 1]
    sentences: list              # token-id lists
    sentence_texts: list
    label: int
    gaze: object = None          # GazeMatrices or None
    session: GazeSession = None
    planted: tuple = None        # (sentence index, patch index)
    split: str = "train"


@dataclass
class Dataset:
    samples: list
    vocab: Vocabulary
    class_names: list
    grid: PatchGrid
    prompts: dict = field(default_factory=dict)  # class name -> prompt sentences

    def split(self, name):
        return [s for s in self.samples if s.split == name]


def _class_tokens(c):
    return f"finding{c}", f"zone{c}"


def class_sentence(c, variant=0):
    f, z = _class_tokens(c)
    forms = [f"{f} seen in {z}.", f"there is {f} in the {z}.", f"{z} shows {f}."]
    return forms[variant % len(forms)]


def build_vocabulary(num_classes):
    words = set()
    for s in FILLER_SENTENCES:
        words.update(Vocabulary.normalize(t) for t in s.split())
    for c in range(num_classes):
        for v in range(3):
            words.update(Vocabulary.normalize(t) for t in class_sentence(c, v).split())
    return Vocabulary(sorted(w for w in words if w))


def class_layout(num_classes, grid, seed):
    """Class patch indices and 32x32-style textures, fixed per seed."""
    if num_classes > grid.n:
        raise DataError(f"{num_classes} classes do not fit a {grid} grid")
    rng = np.random.default_rng([seed, 17])
    cells = rng.choice(grid.n, size=num_classes, replace=False)
    ph, pw = IMAGE_SIZE // grid.rows, IMAGE_SIZE // grid.cols
    textures = 0.4 + 0.6 * rng.random((num_classes, ph, pw))
    return [int(c) for c in cells], textures


def _patch_slice(grid, cell):
    ph, pw = IMAGE_SIZE // grid.rows, IMAGE_SIZE // grid.cols
    r, c = divmod(cell, grid.cols)
    return slice(r * ph, (r + 1) * ph), slice(c * pw, (c + 1) * pw)


def _patch_center(grid, cell):
    ph, pw = IMAGE_SIZE // grid.rows, IMAGE_SIZE // grid.cols
    r, c = divmod(cell, grid.cols)
    return (c * pw + pw / 2.0) / IMAGE_SIZE, (r * ph + ph / 2.0) / IMAGE_SIZE


def _fixations_on(rng, grid, cell, t0, t1, count, jitter_px=6.0):
    cx, cy = _patch_center(grid, cell)
    times = np.sort(rng.choice(np.arange(t0, t1), size=min(count, t1 - t0), replace=False))
    out = []
    for t in times:
        dx, dy = rng.uniform(-jitter_px, jitter_px, size=2) / IMAGE_SIZE
        out.append(FixationEvent(int(t), float(np.clip(cx + dx, 0, 1)),
                                 float(np.clip(cy + dy, 0, 1)), int(rng.integers(150, 400))))
    return out


def make_session(sentence_texts, fixation_plan, rng, grid, image_path=""):
    """Time the words of each sentence and place fixations per ``fixation_plan``.

    ``fixation_plan[j]`` is a patch index to look at during sentence ``j`` or None.
    """
    words, fixations = [], []
    t = 0
    for j, text in enumerate(sentence_texts):
        start = t
        for tok in text.split():
            words.append(TimedWord(tok, t, t + WORD_MS))
            t += WORD_MS + GAP_MS // 4
        end = words[-1].t_end_ms
        if fixation_plan[j] is not None:
            fixations += _fixations_on(rng, grid, fixation_plan[j], start, end,
                                       int(rng.integers(3, 6)))
        t += SENTENCE_GAP_MS
    return GazeSession(image_path=image_path, image_width=IMAGE_SIZE, image_height=IMAGE_SIZE,
                       fixations=tuple(fixations), words=tuple(words))


def generate_planted_dataset(num_samples, grid=PatchGrid(7, 7), num_classes=8, seed=0,
                             holdout=0, sigma_frac=DEFAULT_SIGMA_FRAC, distractors=2,
                             vocab=None):
    """Build ``num_samples`` planted samples; the last ``holdout`` are marked ``"heldout"``."""
    vocab = vocab or build_vocabulary(num_classes)
    missing = [w for c in range(num_classes) for w in _class_tokens(c) if w not in vocab.index]
    if missing:
        raise DataError(f"vocabulary lacks class tokens {missing}")
    cells, textures = class_layout(num_classes, grid, seed)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(num_samples):
        label = int(rng.integers(num_classes))
        img = rng.uniform(0.0, 0.1, size=(IMAGE_SIZE, IMAGE_SIZE))
        free = [c for c in range(grid.n) if c != cells[label]]
        distract = [int(c) for c in rng.choice(free, size=distractors, replace=False)]
        for c in distract:
            rs, cs = _patch_slice(grid, c)
            img[rs, cs] = 0.4 + 0.6 * rng.random(img[rs, cs].shape)
        rs, cs = _patch_slice(grid, cells[label])
        img[rs, cs] = np.clip(textures[label] + rng.normal(0, 0.03, textures[label].shape), 0, 1)

        fillers = list(rng.choice(len(FILLER_SENTENCES), size=2, replace=False))
        texts = [FILLER_SENTENCES[f] for f in fillers]
        pos = int(rng.integers(len(texts) + 1))
        texts.insert(pos, class_sentence(label, int(rng.integers(3))))
        plan = [None] * len(texts)
        plan[pos] = cells[label]
        for j in range(len(texts)):
            if j != pos and rng.random() < 0.5:
                plan[j] = distract[int(rng.integers(len(distract)))]
        sid = f"s{i:05d}"
        session = make_session(texts, plan, rng, grid, image_path=f"images/{sid}.pgm")
        gaze = session_gaze_matrices(session, grid, sigma_frac)
        samples.append(Sample(
            sample_id=sid, image=img, sentences=[vocab.encode(t) for t in texts],
            sentence_texts=texts, label=label, gaze=gaze, session=session,
            planted=(pos, cells[label]),
            split="heldout" if i >= num_samples - holdout else "train",
        ))
    names = [f"class{c}" for c in range(num_classes)]
    prompts = {names[c]: [class_sentence(c, v) for v in range(3)] for c in range(num_classes)}
    return Dataset(samples, vocab, names, grid, prompts)


def select_gaze_subset(samples, fraction, seed):
    """Keep gaze on ``round(fraction * N)`` seeded-random samples; drop it elsewhere.

    Python's half-to-even rounding reproduces the 37/185/370/1108/1848 counts
    for N=3695 at 1/5/10/30/50 percent.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"gaze fraction must be in [0, 1], got {fraction}")
    n = len(samples)
    keep = int(round(fraction * n))
    chosen = set(np.random.default_rng([seed, 5]).permutation(n)[:keep].tolist())
    return [s if i in chosen else replace(s, gaze=None) for i, s in enumerate(samples)]


# --- on-disk layout -------------------------------------------------------

def write_dataset(ds, out_dir):
    """Write images (PGM), session CSVs, manifest, labels, vocabulary and prompt bank."""
    out = Path(out_dir)
    for sub in ("images", "fixations", "transcripts"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        img_path = out / "images" / f"{s.sample_id}.pgm"
        pix = np.rint(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        with open(img_path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (pix.shape[1], pix.shape[0]) + pix.tobytes())
        fix = out / "fixations" / f"{s.sample_id}.csv"
        tr = out / "transcripts" / f"{s.sample_id}.csv"
        write_fixations(fix, s.session.fixations)
        write_transcript(tr, s.session.words)
        entries.append(ManifestEntry(s.sample_id, img_path, fix, tr,
                                     s.image.shape[1], s.image.shape[0]))
    write_manifest(out / "manifest.csv", entries)
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session_id", "label", "split"])
        for s in ds.samples:
            w.writerow([s.sample_id, ds.class_names[s.label], s.split])
    ds.vocab.write(out / "vocab.txt")
    with open(out / "prompts.tsv", "w", encoding="utf-8") as fh:
        for name in ds.class_names:
            for p in ds.prompts.get(name, []):
                fh.write(f"{name}\t{p}\n")
    with open(out / "grid.txt", "w", encoding="utf-8") as fh:
        fh.write(f"{ds.grid}\n")


def read_dataset(data_dir, grid=None, sigma_frac=DEFAULT_SIGMA_FRAC):
    """Load a directory written by :func:`write_dataset`, rebuilding gaze matrices."""
    root = Path(data_dir)
    if grid is None:
        grid_file = root / "grid.txt"
        grid = PatchGrid.parse(grid_file.read_text().strip()) if grid_file.exists() else PatchGrid()
    vocab = Vocabulary.read(root / "vocab.txt")
    labels = {}
    with open(root / "labels.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            labels[row["session_id"]] = (row["label"], row.get("split") or "train")
    class_names = sorted({v[0] for v in labels.values()}, key=_natural_key)
    prompts = {}
    bank_path = root / "prompts.tsv"
    if bank_path.exists():
        prompts = {k: v for k, v in read_prompt_bank(bank_path).items()}
        class_names = sorted(set(class_names) | set(prompts), key=_natural_key)
    samples = []
    for entry in read_manifest(root / "manifest.csv"):
        if entry.session_id not in labels:
            raise DataError(f"labels.csv has no row for session {entry.session_id}")
        session = entry.load()
        img = read_pgm(entry.image_path).astype(np.float64) / 255.0
        texts = [s.text for s in session.sentences]
        gaze = None if session.gaze_free else session_gaze_matrices(session, grid, sigma_frac)
        name, split = labels[entry.session_id]
        samples.append(Sample(entry.session_id, img, [vocab.encode(t) for t in texts], texts,
                              class_names.index(name), gaze, session, None, split))
    return Dataset(samples, vocab, class_names, grid, prompts)


def _natural_key(name):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", name)]


def read_prompt_bank(path):
    """``class_name<TAB>prompt`` lines, grouped in file order."""
    bank = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected class<TAB>prompt")
            name, prompt = line.split("\t", 1)
            bank.setdefault(name.strip(), []).append(prompt.strip())
    return bank
