"""Small differentiable image/text encoders and their binary checkpoint format.

Image: each patch's pixels -> affine -> tanh -> unit row.
Text: mean of token embeddings per sentence -> tanh -> unit row.
"""
import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionMismatch, EmptySentence, UnknownToken
from .numeric import l2_normalize_rows, l2_normalize_rows_backward

IMAGE_SIZE = 224
MAGIC = b"EGMA1"
UNK = "<unk>"


@dataclass
class EncoderParams:
    w_img: np.ndarray   # patch_pixels x d
    b_img: np.ndarray   # d
    tokens: np.ndarray  # vocab x d
    grid_rows: int = 7
    grid_cols: int = 7
    seed: int = 0

    @property
    def d(self):
        return self.tokens.shape[1]

    @property
    def vocab_size(self):
        return self.tokens.shape[0]

    @property
    def patch_pixels(self):
        return self.w_img.shape[0]

    @classmethod
    def init(cls, patch_pixels, vocab_size, d=16, seed=0, grid=(7, 7)):
        """Uniform in [-1/sqrt(d), 1/sqrt(d)] from a seeded generator."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d)
        fan_in = 1.0 / np.sqrt(patch_pixels)
        w = rng.uniform(-fan_in, fan_in, size=(patch_pixels, d))
        b = rng.uniform(-bound, bound, size=d)
        t = rng.uniform(-bound, bound, size=(vocab_size, d))
        return cls(w, b, t, grid[0], grid[1], seed)

    def arrays(self):
        return [self.w_img, self.b_img, self.tokens]

    def copy(self):
        return EncoderParams(self.w_img.copy(), self.b_img.copy(), self.tokens.copy(),
                             self.grid_rows, self.grid_cols, self.seed)

    def flat(self):
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def with_flat(self, vec):
        out = self.copy()
        pos = 0
        for a in out.arrays():
            a.reshape(-1)[:] = vec[pos:pos + a.size]
            pos += a.size
        return out


def image_patches(img, grid):
    """Flatten each grid cell into a row, row-major over cells."""
    img = np.asarray(img, dtype=np.float64)
    ph, pw = grid.patch_shape(*img.shape)
    return (img.reshape(grid.rows, ph, grid.cols, pw)
               .transpose(0, 2, 1, 3)
               .reshape(grid.n, ph * pw))


def encode_image(img, grid, params, cache=None):
    x = image_patches(img, grid)
    if x.shape[1] != params.patch_pixels:
        raise DimensionMismatch(
            f"patch has {x.shape[1]} pixels, encoder expects {params.patch_pixels}")
    h = np.tanh(x @ params.w_img + params.b_img)
    p, norms = l2_normalize_rows(h)
    if cache is not None:
        cache.update(x=x, h=h, p=p, norms=norms)
    return p


def encode_image_backward(cache, grad_p):
    """Gradients of ``sum(grad_p * P)`` w.r.t. ``(w_img, b_img)``."""
    dh = l2_normalize_rows_backward(cache["p"], cache["norms"], grad_p)
    dz = dh * (1.0 - cache["h"] ** 2)
    return cache["x"].T @ dz, dz.sum(axis=0)


def encode_sentences(sentences, params, cache=None):
    """``sentences`` is a list of token-id lists; returns m x d unit rows."""
    if not sentences:
        raise EmptySentence("no sentences to encode")
    means = []
    for j, ids in enumerate(sentences):
        if len(ids) == 0:
            raise EmptySentence(f"sentence {j} has no tokens")
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= params.vocab_size):
            raise UnknownToken(f"sentence {j}: token id outside vocabulary of {params.vocab_size}")
        means.append(params.tokens[ids].mean(axis=0))
    h = np.tanh(np.stack(means))
    s, norms = l2_normalize_rows(h)
    if cache is not None:
        cache.update(ids=[np.asarray(i, dtype=np.int64) for i in sentences], h=h, s=s, norms=norms)
    return s


def encode_sentences_backward(cache, grad_s, vocab_size):
    dh = l2_normalize_rows_backward(cache["s"], cache["norms"], grad_s)
    dmean = dh * (1.0 - cache["h"] ** 2)
    dtok = np.zeros((vocab_size, dmean.shape[1]))
    for j, ids in enumerate(cache["ids"]):
        np.add.at(dtok, ids, dmean[j] / len(ids))
    return dtok


class Vocabulary:
    """Whitespace + lowercase tokenizer over a fixed word list (one word per line)."""

    def __init__(self, words):
        words = list(words)
        if UNK not in words:
            words = [UNK] + words
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        if len(self.index) != len(words):
            raise DataError("vocabulary has duplicate entries")

    def __len__(self):
        return len(self.words)

    @staticmethod
    def normalize(token):
        return re.sub(r"[^\w<>-]", "", token.lower())

    def encode(self, text, strict=False):
        ids = []
        for tok in text.split():
            tok = self.normalize(tok)
            if not tok:
                continue
            if tok not in self.index:
                if strict:
                    raise UnknownToken(f"token {tok!r} not in vocabulary")
                tok = UNK
            ids.append(self.index[tok])
        return ids

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.strip() for line in fh if line.strip())

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.words) + "\n")


def save_checkpoint(path, params):
    header = MAGIC + struct.pack("<5I", params.d, params.vocab_size, params.patch_pixels,
                                 params.grid_rows, params.grid_cols)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    with open(path, "wb") as fh:
        fh.write(header + body)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise DataError(f"{path}: not an EGMA1 checkpoint")
    off = len(MAGIC)
    d, vocab, pix, rows, cols = struct.unpack_from("<5I", data, off)
    off += 20
    sizes = [(pix, d), (d,), (vocab, d)]
    expected = off + 8 * sum(int(np.prod(s)) for s in sizes)
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(data)}")
    arrays = []
    for shape in sizes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off)
                      .astype(np.float64).reshape(shape))
        off += 8 * count
    return EncoderParams(arrays[0], arrays[1], arrays[2], rows, cols)
