"""Zero-shot classification and fine-grained retrieval metrics."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .encoders import encode_image, encode_sentences
from .errors import EmptyBank, GalleryTooSmall
from .numeric import l2_normalize_rows

K_LIST = (1, 5, 10)


@dataclass
class PromptBank:
    classes: list
    prompts: list  # per class, list of sentence strings

    def __post_init__(self):
        if not self.classes:
            raise EmptyBank("prompt bank has no classes")
        for c, ps in zip(self.classes, self.prompts):
            if not ps:
                raise EmptyBank(f"class {c!r} has no prompts")

    @classmethod
    def from_dict(cls, bank, class_order=None):
        names = list(class_order) if class_order is not None else list(bank)
        return cls(names, [list(bank.get(n, [])) for n in names])


@dataclass
class EvalResult:
    accuracy: float = float("nan")
    macro_f1: float = float("nan")
    p_at_k: dict = field(default_factory=dict)
    per_class_f1: dict = field(default_factory=dict)

    def rows(self):
        out = []
        if not np.isnan(self.accuracy):
            out += [("accuracy", self.accuracy), ("macro_f1", self.macro_f1)]
        out += [(f"p_at_{k}", v) for k, v in sorted(self.p_at_k.items())]
        out += [(f"f1_{name}", v) for name, v in self.per_class_f1.items()]
        return out

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k, v in self.rows():
                w.writerow([k, repr(float(v))])


def mean_max_scores(queries, gallery):
    """``out[q, g] = mean over rows of queries[q] of max over rows of gallery[g]`` of cosines.

    With image patches as queries and sentences as gallery this is the
    image-to-text fine similarity; swapping roles gives text-to-image.
    """
    q_sizes = np.array([len(q) for q in queries])
    g_sizes = np.array([len(g) for g in gallery])
    qcat = l2_normalize_rows(np.concatenate(queries))[0]
    gcat = l2_normalize_rows(np.concatenate(gallery))[0]
    big = qcat @ gcat.T
    g_off = np.concatenate([[0], np.cumsum(g_sizes)])
    q_starts = np.concatenate([[0], np.cumsum(q_sizes)])[:-1]
    best = np.maximum.reduceat(big, g_off[:-1], axis=1)  # (sum q rows) x G
    return np.add.reduceat(best, q_starts, axis=0) / q_sizes[:, None]


def encode_images(images, grid, params):
    return [encode_image(img, grid, params) for img in images]


def encode_texts(texts, params):
    return [encode_sentences(t, params) for t in texts]


def classification_metrics(y_true, y_pred, class_names):
    """Accuracy, macro F1 over classes present in either labels or predictions, per-class F1."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    acc = float(np.mean(y_true == y_pred)) if y_true.size else 0.0
    per_class = {}
    present = sorted(set(y_true.tolist()) | set(y_pred.tolist()))
    for c in present:
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        per_class[class_names[c]] = 2 * tp / denom if denom else 0.0
    macro = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return acc, macro, per_class


def zero_shot_classify(image_feats, bank, prompt_feats, labels=None, policy="mean_similarity"):
    """Predict the class whose prompts best match each image (ties -> lower class index).

    ``image_feats``: list of n x d patch features.  ``prompt_feats[c]``: list of
    1 x d (or m x d) features, one per prompt of class ``c``.
    ``policy="mean_similarity"`` averages per-prompt scores; ``"mean_embedding"``
    averages the (unit) prompt embeddings first.
    """
    if not bank.classes:
        raise EmptyBank("prompt bank has no classes")
    scores = np.zeros((len(image_feats), len(bank.classes)))
    for c, feats in enumerate(prompt_feats):
        if not feats:
            raise EmptyBank(f"class {bank.classes[c]!r} has no prompts")
        if policy == "mean_similarity":
            scores[:, c] = mean_max_scores(image_feats, feats).mean(axis=1)
        elif policy == "mean_embedding":
            pooled = np.mean([l2_normalize_rows(f)[0].mean(axis=0) for f in feats], axis=0)
            scores[:, c] = mean_max_scores(image_feats, [pooled[None, :]])[:, 0]
        else:
            raise ValueError(f"unknown prompt policy {policy!r}")
    preds = np.argmax(scores, axis=1)  # first maximum wins ties
    result = EvalResult()
    if labels is not None:
        result.accuracy, result.macro_f1, result.per_class_f1 = classification_metrics(
            labels, preds, bank.classes)
    return preds, result, scores


def precision_at_k(scores, query_labels, gallery_labels, k_list=K_LIST):
    """Mean fraction of the top-K gallery items sharing the query's class.

    Ranking is by descending score; equal scores keep the lower gallery index first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gallery_labels = np.asarray(gallery_labels)
    query_labels = np.asarray(query_labels)
    if scores.shape[1] < max(k_list):
        raise GalleryTooSmall(f"gallery has {scores.shape[1]} items, need at least {max(k_list)}")
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = gallery_labels[order] == query_labels[:, None]
    return {k: float(np.mean(hits[:, :k].mean(axis=1))) for k in k_list}


def retrieval_p_at_k(queries, query_labels, gallery, gallery_labels, k_list=K_LIST):
    """P@K where queries and gallery are lists of token-feature matrices.

    For text-to-image pass sentence features as queries and patch features as
    gallery; for image-to-text swap them.
    """
    if len(gallery) < max(k_list):
        raise GalleryTooSmall(f"gallery has {len(gallery)} items, need at least {max(k_list)}")
    return precision_at_k(mean_max_scores(queries, gallery), query_labels, gallery_labels, k_list)


def evaluate_retrieval(samples, params, grid, direction="t2i", k_list=K_LIST):
    images = encode_images([s.image for s in samples], grid, params)
    texts = encode_texts([s.sentences for s in samples], params)
    labels = [s.label for s in samples]
    if direction == "t2i":
        return retrieval_p_at_k(texts, labels, images, labels, k_list)
    if direction == "i2t":
        return retrieval_p_at_k(images, labels, texts, labels, k_list)
    raise ValueError(f"direction must be 't2i' or 'i2t', got {direction!r}")


def evaluate_zero_shot(samples, params, grid, bank, vocab, policy="mean_similarity"):
    images = encode_images([s.image for s in samples], grid, params)
    prompt_feats = [[encode_sentences([vocab.encode(p)], params) for p in ps] for ps in bank.prompts]
    return zero_shot_classify(images, bank, prompt_feats, [s.label for s in samples], policy)
