"""Dataset ingestion and file formats.

IDX image/label files, header-row CSV tables, whitespace-separated
embedding tables (GloVe layout), text corpora, padding/embedding, and the
PGM/CSV export helpers, and the distilled-dataset container (a one-line
JSON header followed by little-endian float64 payload).
"""

from __future__ import annotations

import csv
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PAD = "<pad>"


class DataFormatError(ValueError):
    """Malformed or inconsistent input file."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class UnknownTokenError(KeyError):
    pass


@dataclass(frozen=True)
class LabeledData:
    """Features (N, ...) with integer class labels."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "LabeledData":
        return LabeledData(self.x[idx], self.y[idx], self.num_classes)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.y == c)


# images are stored (count, H, W, channels); models consume (count, channels, H, W)
LabeledImages = LabeledData


def images_to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2)))


# ------------------------------------------------------------------ IDX


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(path, "truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise DataFormatError(path, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndims = magic & 0xFF
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise DataFormatError(path, "truncated header")
    dims = struct.unpack(">" + "I" * ndims, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise DataFormatError(path, f"payload has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledData:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise DataFormatError(labels_path, f"{len(labels)} labels for {len(images)} images")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    x = (images.astype(np.float64) / 255.0)[..., None]
    return LabeledData(x, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (count, H, W) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ------------------------------------------------------------------ CSV tables


def load_csv_dataset(path, label_column: str | None = None,
                     feature_columns: Sequence[str] | None = None) -> tuple[LabeledData, list[str]]:
    """Numeric feature columns plus one label column (default: the last).

    Returns the data and the sorted class names (label i == class_names[i]).
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(path, "empty file") from None
        rows = [r for r in reader if r]
    label_column = label_column or header[-1]
    if label_column not in header:
        raise DataFormatError(path, f"no column {label_column!r}")
    li = header.index(label_column)
    feats = list(feature_columns) if feature_columns else [h for h in header if h != label_column]
    missing = [c for c in feats if c not in header]
    if missing:
        raise DataFormatError(path, f"missing columns {missing}")
    fi = [header.index(c) for c in feats]
    x = np.empty((len(rows), len(fi)))
    names = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataFormatError(path, f"row {r + 2} has {len(row)} fields, expected {len(header)}")
        try:
            x[r] = [float(row[i]) for i in fi]
        except ValueError as e:
            raise DataFormatError(path, f"row {r + 2}: {e}") from None
        names.append(row[li])
    classes = sorted(set(names))
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[n] for n in names], dtype=np.int64)
    return LabeledData(x, y, len(classes)), classes


IRIS_PATH = Path(__file__).with_name("iris.csv")


def load_iris(features: Sequence[str] = ("petal_length", "petal_width")) -> LabeledData:
    return load_csv_dataset(IRIS_PATH, "species", features)[0]


# ------------------------------------------------------------------ text

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase; words and individual punctuation marks become tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TextCorpus:
    sentences: tuple[tuple[str, ...], ...]
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.sentences) != len(self.labels):
            raise ValueError("sentence/label count mismatch")
        if any(len(s) == 0 for s in self.sentences):
            raise ValueError("empty sentence after tokenization")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "TextCorpus":
        idx = np.asarray(idx)
        return TextCorpus(tuple(self.sentences[i] for i in idx), self.labels[idx], self.num_classes)


def make_corpus(texts: Iterable[str], labels: Iterable[int], num_classes: int | None = None) -> TextCorpus:
    sents = tuple(tuple(tokenize(t)) for t in texts)
    labels = np.asarray(list(labels), dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return TextCorpus(sents, labels, num_classes)


def load_text_corpus(path, num_classes: int | None = None) -> TextCorpus:
    """CSV with header ``label,text``."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"label", "text"} <= set(reader.fieldnames):
            raise DataFormatError(path, "expected header with 'label' and 'text' columns")
        rows = list(reader)
    try:
        labels = [int(r["label"]) for r in rows]
    except ValueError as e:
        raise DataFormatError(path, str(e)) from None
    try:
        return make_corpus([r["text"] for r in rows], labels, num_classes)
    except ValueError as e:
        raise DataFormatError(path, str(e)) from None


class EmbeddingTable:
    """Token -> d-dimensional vector; PAD maps to the zero vector."""

    def __init__(self, tokens: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(tokens) != len(vectors):
            raise ValueError("tokens and vectors must align, vectors 2-D")
        tokens = list(tokens)
        if PAD not in tokens:
            tokens.append(PAD)
            vectors = np.vstack([vectors, np.zeros((1, vectors.shape[1]))])
        self.tokens = tokens
        self.vectors = vectors
        self.index: dict[str, int] = {}
        for i, t in enumerate(tokens):
            if t in self.index:
                raise ValueError(f"duplicate token {t!r}")
            self.index[t] = i

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __getitem__(self, token: str) -> np.ndarray:
        return self.vectors[self.index[token]]

    def save(self, path) -> None:
        with open(path, "w") as f:
            for t, v in zip(self.tokens, self.vectors):
                if t == PAD:
                    continue
                f.write(t + " " + " ".join(repr(float(a)) for a in v) + "\n")


def load_embeddings(path) -> EmbeddingTable:
    tokens, rows = [], []
    seen = set()
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            token, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
                if dim == 0:
                    raise DataFormatError(path, f"line {lineno}: no vector")
            if len(vals) != dim:
                raise DataFormatError(path, f"line {lineno}: dimension {len(vals)}, expected {dim}")
            if token in seen:
                raise DataFormatError(path, f"line {lineno}: duplicate token {token!r}")
            try:
                rows.append([float(v) for v in vals])
            except ValueError as e:
                raise DataFormatError(path, f"line {lineno}: {e}") from None
            seen.add(token)
            tokens.append(token)
    if dim is None:
        raise DataFormatError(path, "empty embedding file")
    return EmbeddingTable(tokens, np.array(rows))


def pad_tokens(sentence: Sequence[str], s: int) -> tuple[str, ...]:
    if s < 1:
        raise ValueError("sentence length must be >= 1")
    sentence = tuple(sentence[:s])
    return sentence + (PAD,) * (s - len(sentence))


def pad_embed(corpus: TextCorpus | Sequence[Sequence[str]], table: EmbeddingTable, s: int,
              unknown: str = "error") -> np.ndarray:
    """(N, s, d) matrices; ``unknown`` is ``"error"`` or ``"zero"``."""
    if unknown not in ("error", "zero"):
        raise ValueError(f"unknown-token policy must be 'error' or 'zero', got {unknown!r}")
    sentences = corpus.sentences if isinstance(corpus, TextCorpus) else corpus
    pad_row = table.index[PAD]
    idx = np.empty((len(sentences), s), dtype=np.intp)
    for i, sent in enumerate(sentences):
        for j, tok in enumerate(pad_tokens(sent, s)):
            k = table.index.get(tok)
            if k is None:
                if unknown == "error":
                    raise UnknownTokenError(tok)
                k = pad_row
            idx[i, j] = k
    return table.vectors[idx]


def nearest_word(vector: np.ndarray, table: EmbeddingTable) -> str:
    """Euclidean nearest token; ties go to the lexicographically smallest."""
    d2 = np.sum((table.vectors - np.asarray(vector, dtype=np.float64)) ** 2, axis=1)
    best = np.flatnonzero(d2 == d2.min())
    return min(table.tokens[i] for i in best)


def decode_sentence(matrix: np.ndarray, table: EmbeddingTable) -> list[str]:
    return [nearest_word(row, table) for row in np.asarray(matrix)]


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ------------------------------------------------------------------ synthetic data


def make_blobs(n_per_class: int, num_classes: int = 3, separation: float = 5.0, sigma: float = 1.0,
               dim: int = 2, seed: int = 0) -> LabeledData:
    """Isotropic Gaussian blobs; class centers pairwise ``separation * sigma`` apart.

    Centers are the vertices of a regular simplex (an equilateral triangle
    for three classes in 2-D), shuffled sample order.
    """
    rng = np.random.default_rng(seed)
    centers = blob_centers(num_classes, separation * sigma, dim)
    x = np.concatenate([rng.normal(c, sigma, size=(n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(num_classes), n_per_class)
    perm = rng.permutation(len(y))
    return LabeledData(x[perm], y[perm], num_classes)


def blob_centers(num_classes: int, distance: float, dim: int) -> np.ndarray:
    if num_classes <= dim + 1:
        # regular simplex from scaled basis vectors, projected into `dim` dims
        basis = np.eye(num_classes)
        basis -= basis.mean(axis=0)
        q, _ = np.linalg.qr(basis.T)
        pts = basis @ q[:, : num_classes - 1]
        pts *= distance / np.sqrt(2.0)
        out = np.zeros((num_classes, dim))
        out[:, : num_classes - 1] = pts
        return out
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = distance / (2 * np.sin(np.pi / num_classes))
    out = np.zeros((num_classes, dim))
    out[:, 0], out[:, 1] = radius * np.cos(angles), radius * np.sin(angles)
    return out


def make_text_task(n_sentences: int, vocab_per_class: int = 20, dim: int = 16, min_len: int = 6,
                   max_len: int = 12, num_classes: int = 2, seed: int = 0) -> tuple[TextCorpus, EmbeddingTable, list[list[str]]]:
    """Classes drawn from disjoint vocabularies, with a random Gaussian embedding table.

    Returns the corpus, the table, and the per-class vocabularies.
    """
    rng = np.random.default_rng(seed)
    vocabs = [[f"c{c}w{i}" for i in range(vocab_per_class)] for c in range(num_classes)]
    tokens = [t for v in vocabs for t in v]
    table = EmbeddingTable(tokens, rng.normal(size=(len(tokens), dim)))
    labels = np.arange(n_sentences) % num_classes
    rng.shuffle(labels)
    sents = []
    for c in labels:
        n = int(rng.integers(min_len, max_len + 1))
        sents.append(tuple(rng.choice(vocabs[c], size=n)))
    return TextCorpus(tuple(sents), labels.astype(np.int64), num_classes), table, vocabs


# ------------------------------------------------------------------ PGM


def write_pgm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    """Binary P5 graymap; pixels must already be integers in [0, maxval]."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if not 1 <= maxval <= 255:
        raise ValueError("only 8-bit PGM supported")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise ValueError("pixel outside [0, maxval]")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(pixels.astype(np.uint8).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(path, "truncated PGM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise DataFormatError(path, "not a binary PGM (P5)")
    w, h, maxval = (int(v) for v in fields[1:])
    pos += 1
    body = raw[pos:]
    if len(body) != w * h:
        raise DataFormatError(path, f"expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy(), maxval


def to_gray(image: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; a constant image becomes mid gray."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.full(image.shape, 128, dtype=np.uint8)
    # halve first so hi - lo cannot overflow for extreme but finite values
    scaled = (image / 2 - lo / 2) / (hi / 2 - lo / 2)
    return np.round(255 * np.clip(scaled, 0.0, 1.0)).astype(np.uint8)


def top_classes(label: np.ndarray, k: int = 3) -> list[tuple[int, float]]:
    """Top-k (class, logit) pairs, ties to the lower index."""
    label = np.asarray(label, dtype=np.float64)
    order = np.argsort(-label, kind="stable")[:k]
    return [(int(i), float(label[i])) for i in order]


# ------------------------------------------------------------------ distilled dataset container

DD_FORMAT = "distillkit-dd"
DD_DTYPE = "<f8"


@dataclass
class DistilledDataset:
    """Synthetic samples, unrestricted soft labels and per-step learning rates.

    Learning rates are stored as their logarithm (``log_lr``) so that
    gradient descent on them can never produce a negative rate.
    Samples are split into ``steps`` contiguous mini-batches, one per inner
    GD step, reused in every epoch.
    """

    x: np.ndarray
    y: np.ndarray
    log_lr: np.ndarray
    epochs: int = 1
    num_classes: int = 2
    seed: int = 0
    config: dict | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.log_lr = np.asarray(self.log_lr, dtype=np.float64).reshape(-1)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.y.ndim != 2:
            raise ValueError("labels must be (M, label_dim)")
        if not 1 <= self.steps <= self.m:
            raise ValueError(f"need 1 <= steps <= M, got steps={self.steps}, M={self.m}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def m(self) -> int:
        return len(self.x)

    @property
    def steps(self) -> int:
        return len(self.log_lr)

    @property
    def lr(self) -> np.ndarray:
        return np.exp(self.log_lr)

    def step_batches(self) -> list[np.ndarray]:
        """Contiguous, near-equal partition of the M samples into the steps."""
        return np.array_split(np.arange(self.m), self.steps)

    def copy(self) -> "DistilledDataset":
        return DistilledDataset(self.x.copy(), self.y.copy(), self.log_lr.copy(), self.epochs,
                                self.num_classes, self.seed, dict(self.config) if self.config else None)

    def equals(self, other: "DistilledDataset") -> bool:
        """Bitwise equality of all arrays and metadata."""
        return (self.x.shape == other.x.shape and self.y.shape == other.y.shape
                and self.x.tobytes() == other.x.tobytes() and self.y.tobytes() == other.y.tobytes()
                and self.log_lr.tobytes() == other.log_lr.tobytes()
                and (self.epochs, self.num_classes, self.seed) == (other.epochs, other.num_classes, other.seed))


def save_dd(path, dd: DistilledDataset) -> None:
    header = {
        "format": DD_FORMAT,
        "version": 1,
        "dtype": DD_DTYPE,
        "x_shape": list(dd.x.shape),
        "y_shape": list(dd.y.shape),
        "lr_shape": [dd.steps],
        "lr_param": "log",
        "M": dd.m,
        "C": dd.num_classes,
        "S": dd.steps,
        "E": dd.epochs,
        "seed": dd.seed,
        "config": dd.config or {},
    }
    payload = b"".join(a.astype(DD_DTYPE).tobytes() for a in (dd.x, dd.y, dd.log_lr))
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload)


def load_dd(path) -> DistilledDataset:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise DataFormatError(path, "missing container header")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(path, f"corrupted header: {e}") from None
    if not isinstance(header, dict) or header.get("format") != DD_FORMAT:
        raise DataFormatError(path, "not a distilled-dataset container")
    if header.get("dtype") != DD_DTYPE:
        raise DataFormatError(path, f"dtype tag {header.get('dtype')!r}, expected {DD_DTYPE!r}")
    try:
        shapes = [tuple(int(v) for v in header[k]) for k in ("x_shape", "y_shape", "lr_shape")]
        epochs, num_classes, seed = int(header["E"]), int(header["C"]), int(header["seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(path, f"corrupted header: {e!r}") from None
    sizes = [int(np.prod(s)) for s in shapes]
    body = raw[end + 1:]
    if len(body) != 8 * sum(sizes):
        raise DataFormatError(path, f"payload is {len(body)} bytes, header promises {8 * sum(sizes)}")
    flat = np.frombuffer(body, dtype=DD_DTYPE)
    parts, pos = [], 0
    for shape, size in zip(shapes, sizes):
        parts.append(flat[pos:pos + size].reshape(shape).astype(np.float64))
        pos += size
    return DistilledDataset(parts[0], parts[1], parts[2], epochs, num_classes, seed,
                            header.get("config") or None)


def _as_gray_image(sample: np.ndarray) -> np.ndarray:
    sample = np.asarray(sample)
    if sample.ndim == 1:
        return sample[None, :]
    if sample.ndim == 3:
        return sample.mean(axis=0)
    return sample


def export_image_grid(dd: DistilledDataset, out_dir, prefix: str = "distilled") -> list[Path]:
    """One PGM per sample (min-max normalized) plus a CSV of top-3 label logits."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, sample in enumerate(dd.x):
        p = out_dir / f"{prefix}_{i:03d}.pgm"
        write_pgm(p, to_gray(_as_gray_image(sample)))
        paths.append(p)
    csv_path = out_dir / f"{prefix}_labels.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "class1", "logit1", "class2", "logit2", "class3", "logit3"])
        for i, label in enumerate(dd.y):
            row: list = [i]
            for c, v in top_classes(label, 3):
                row += [c, repr(v)]
            w.writerow(row)
    paths.append(csv_path)
    return paths
