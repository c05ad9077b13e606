"""Sentence heatmaps, patch binning, and the gaze similarity/label matrices."""
import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionMismatch, MalformedRow
from .session import fixations_in_interval

DEFAULT_DIMS = (224, 224)  # (height, width)
DEFAULT_SIGMA_FRAC = 0.05
GAZE_CSV_HEADER = ["sentence_idx", "patch_idx", "gs", "gl"]


@dataclass(frozen=True)
class PatchGrid:
    rows: int = 7
    cols: int = 7

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("grid rows/cols must be positive")

    @property
    def n(self):
        return self.rows * self.cols

    @classmethod
    def parse(cls, text):
        """Parse ``"RxC"`` (e.g. ``"7x7"``)."""
        try:
            r, c = text.lower().split("x")
            return cls(int(r), int(c))
        except ValueError:
            raise ValueError(f"grid must look like RxC, got {text!r}") from None

    def patch_shape(self, height, width):
        if height % self.rows or width % self.cols:
            raise DimensionMismatch(
                f"{height}x{width} is not divisible by a {self.rows}x{self.cols} grid")
        return height // self.rows, width // self.cols

    def __str__(self):
        return f"{self.rows}x{self.cols}"


@dataclass(frozen=True)
class GazeMatrices:
    gs: np.ndarray  # m x n, rows max-normalized to [0, 1]
    gl: np.ndarray  # m x n, {0, 1}

    @property
    def shape(self):
        return self.gs.shape

    def zeroed(self):
        return GazeMatrices(np.zeros_like(self.gs), np.zeros_like(self.gl))


def render_heatmap(fixations, out_dims=DEFAULT_DIMS, sigma_frac=DEFAULT_SIGMA_FRAC):
    """Duration-weighted sum of isotropic Gaussians, truncated at 3 sigma.

    Pixel ``(r, c)`` sits at image coordinate ``(c, r)``; a fixation at normalized
    ``(x, y)`` is centred on ``(x * width, y * height)``.
    """
    height, width = (int(v) for v in out_dims)
    if height <= 0 or width <= 0:
        raise ValueError("heatmap dimensions must be positive")
    if not sigma_frac > 0:
        raise ValueError("sigma_frac must be positive")
    sigma = sigma_frac * min(height, width)
    radius = 3.0 * sigma
    norm = 1.0 / (2.0 * np.pi * sigma * sigma)
    h = np.zeros((height, width), dtype=np.float64)
    for f in fixations:
        cx, cy = f.x * width, f.y * height
        c0, c1 = max(0, int(np.ceil(cx - radius))), min(width - 1, int(np.floor(cx + radius)))
        r0, r1 = max(0, int(np.ceil(cy - radius))), min(height - 1, int(np.floor(cy + radius)))
        if c0 > c1 or r0 > r1:
            continue
        dx = np.arange(c0, c1 + 1) - cx
        dy = np.arange(r0, r1 + 1) - cy
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        g = np.where(d2 <= radius * radius, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
        h[r0:r1 + 1, c0:c1 + 1] += f.dur_ms * norm * g
    return h


def bin_to_patches(heatmap, grid):
    """Sum of heatmap values per patch, row-major."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    ph, pw = grid.patch_shape(*heatmap.shape)
    return heatmap.reshape(grid.rows, ph, grid.cols, pw).sum(axis=(1, 3)).reshape(-1)


def build_gaze_matrices(sentence_heatmaps, grid):
    if not sentence_heatmaps:
        raise DimensionMismatch("need at least one sentence heatmap")
    dims = {np.shape(h) for h in sentence_heatmaps}
    if len(dims) != 1:
        raise DimensionMismatch(f"heatmaps have differing shapes: {sorted(dims)}")
    raw = np.stack([bin_to_patches(h, grid) for h in sentence_heatmaps])
    peak = raw.max(axis=1, keepdims=True)
    gs = np.divide(raw, peak, out=np.zeros_like(raw), where=peak > 0)
    gl = (gs > 0).astype(np.float64)
    return GazeMatrices(gs, gl)


def sentence_heatmaps(session, out_dims=DEFAULT_DIMS, sigma_frac=DEFAULT_SIGMA_FRAC):
    return [render_heatmap(fixations_in_interval(session, s), out_dims, sigma_frac)
            for s in session.sentences]


def session_gaze_matrices(session, grid, sigma_frac=DEFAULT_SIGMA_FRAC, out_dims=DEFAULT_DIMS):
    return build_gaze_matrices(sentence_heatmaps(session, out_dims, sigma_frac), grid)


def heatmap_to_pgm_bytes(heatmap):
    h = np.asarray(heatmap, dtype=np.float64)
    peak = h.max() if h.size else 0.0
    scaled = np.zeros(h.shape, dtype=np.uint8) if peak <= 0 else \
        np.rint(h / peak * 255.0).astype(np.uint8)
    rows, cols = h.shape
    return b"P5\n%d %d\n255\n" % (cols, rows) + scaled.tobytes()


def write_pgm(path, heatmap):
    with open(path, "wb") as fh:
        fh.write(heatmap_to_pgm_bytes(heatmap))


def read_pgm(path):
    """Read a binary P5 PGM (maxval < 256) into a uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    body = data[pos:pos + width * height]
    if len(body) != width * height:
        raise DataError(f"{path}: truncated PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def write_gaze_csv(path, gm):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GAZE_CSV_HEADER)
        m, n = gm.gs.shape
        for j in range(m):
            for i in range(n):
                w.writerow([j, i, repr(float(gm.gs[j, i])), int(gm.gl[j, i])])


def read_gaze_csv(path):
    cells = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != GAZE_CSV_HEADER:
            raise MalformedRow(path, 1, f"expected header {','.join(GAZE_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MalformedRow(path, lineno, "expected 4 columns")
            try:
                cells.append((int(row[0]), int(row[1]), float(row[2]), int(row[3])))
            except ValueError as exc:
                raise MalformedRow(path, lineno, str(exc)) from None
    if not cells:
        raise MalformedRow(path, 2, "no cells")
    m = max(c[0] for c in cells) + 1
    n = max(c[1] for c in cells) + 1
    gs = np.zeros((m, n))
    gl = np.zeros((m, n))
    for j, i, v, b in cells:
        gs[j, i] = v
        gl[j, i] = b
    return GazeMatrices(gs, gl)
