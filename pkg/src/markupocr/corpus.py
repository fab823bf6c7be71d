"""Synthetic TinyTeX corpora.

`generate_corpus` samples random ASTs (depth-bounded, resampled until
the token length lands in the configured range), serializes them with
randomized script order and occasional redundant braces, and renders
each through the same compile path the evaluator uses, so markup and
image agree exactly by construction. Corpora persist to disk as one
formula per line plus text-PGM images and per-split manifests, and
batch up by bucket size for training.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tinytex as tt
from .render import (BucketOverflowError, BucketSpec, TOY_BUCKETS,
                     read_pgm, render, write_pgm)

__all__ = [
    "Sample", "Corpus", "Batch", "SPLITS",
    "gen_ast", "generate_corpus", "save_corpus", "load_corpus",
    "sample_tokens", "bucket_batches",
]

SPLITS = ("train", "val", "test")

_SYMBOLS = tuple(tt.GLYPH_CHARS) + ("\\sum",)


@dataclass
class Sample:
    index: int
    markup: str
    bitmap: Bitmap


@dataclass
class Corpus:
    samples: list[Sample]
    splits: dict[str, list[int]]

    def split(self, name: str) -> list[Sample]:
        return [self.samples[i] for i in self.splits[name]]


# ---------------------------------------------------------------------------
# random ASTs


def _gen_symbol(rng) -> tt.Symbol:
    return tt.Symbol(_SYMBOLS[int(rng.integers(len(_SYMBOLS)))])


def _gen_content(rng, depth: int, limit: int, hi: int = 4) -> tt.Node:
    items = [_gen_item(rng, depth, limit) for _ in range(int(rng.integers(1, hi)))]
    return items[0] if len(items) == 1 else tt.Row(tuple(items))


def _gen_script_base(rng, depth: int, limit: int) -> tt.Node:
    r = rng.random()
    if depth >= limit or r < 0.75:
        return _gen_symbol(rng)
    if r < 0.88:
        return tt.Sqrt(_gen_content(rng, depth + 1, limit, hi=3))
    return tt.Group(tuple(
        _gen_item(rng, depth + 1, limit) for _ in range(int(rng.integers(1, 3)))))


def _gen_item(rng, depth: int, limit: int) -> tt.Node:
    if depth >= limit:
        return _gen_symbol(rng)
    r = rng.random()
    if r < 0.55:
        return _gen_symbol(rng)
    if r < 0.67:
        return tt.Frac(_gen_content(rng, depth + 1, limit),
                       _gen_content(rng, depth + 1, limit))
    if r < 0.77:
        return tt.Sqrt(_gen_content(rng, depth + 1, limit))
    if r < 0.87:
        # single-child groups are deliberate: spurious braces for the
        # normalizer to strip
        n = int(rng.integers(1, 4))
        return tt.Group(tuple(_gen_item(rng, depth + 1, limit) for _ in range(n)))
    which = int(rng.integers(3))
    base = _gen_script_base(rng, depth + 1, limit)
    sub = _gen_content(rng, depth + 1, limit, hi=3) if which != 1 else None
    sup = _gen_content(rng, depth + 1, limit, hi=3) if which != 0 else None
    return tt.Scripts(base, sub=sub, sup=sup)


def gen_ast(rng: np.random.Generator, depth_limit: int = 3) -> tt.Node:
    items = [_gen_item(rng, 0, depth_limit) for _ in range(int(rng.integers(1, 9)))]
    return items[0] if len(items) == 1 else tt.Row(tuple(items))


def generate_corpus(n: int, seed: int, depth_limit: int = 3,
                    buckets: BucketSpec = TOY_BUCKETS,
                    min_tokens: int = 4, max_tokens: int = 60) -> Corpus:
    """n rendered (markup, image) pairs, split 80/10/10 in order."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    while len(samples) < n:
        ast = gen_ast(rng, depth_limit)
        raw = tt.ast_tokens(ast, rng=rng)
        if not min_tokens <= len(raw) <= max_tokens:
            continue
        markup = tt.detokenize(raw)
        try:
            bmp = render(tt.parse(tt.tokenize(markup)), buckets)
        except BucketOverflowError:
            continue
        samples.append(Sample(len(samples), markup, bmp))
    n_train = int(round(n * 0.8))
    n_val = int(round(n * 0.1))
    splits = {
        "train": list(range(0, n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n)),
    }
    return Corpus(samples, splits)


# ---------------------------------------------------------------------------
# disk layout: formulas.txt + images/{split}/{idx}.pgm + {split}.txt manifests


def save_corpus(corpus: Corpus, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "formulas.txt"), "w") as f:
        for s in corpus.samples:
            f.write(s.markup + "\n")
    for split in SPLITS:
        ids = corpus.splits.get(split, [])
        img_dir = os.path.join(out_dir, "images", split)
        os.makedirs(img_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{split}.txt"), "w") as f:
            for i in ids:
                f.write(f"{i}\n")
        for i in ids:
            write_pgm(corpus.samples[i].bitmap,
                      os.path.join(img_dir, f"{i}.pgm"))


def load_corpus(in_dir: str) -> Corpus:
    with open(os.path.join(in_dir, "formulas.txt")) as f:
        formulas = [line.rstrip("\n") for line in f]
    samples: list[Sample | None] = [None] * len(formulas)
    splits: dict[str, list[int]] = {}
    for split in SPLITS:
        manifest = os.path.join(in_dir, f"{split}.txt")
        if not os.path.exists(manifest):
            continue
        with open(manifest) as f:
            ids = [int(line) for line in f if line.strip()]
        splits[split] = ids
        for i in ids:
            bmp = read_pgm(os.path.join(in_dir, "images", split, f"{i}.pgm"))
            samples[i] = Sample(i, formulas[i], bmp)
    loaded = [s for s in samples if s is not None]
    if len(loaded) != len(formulas):
        missing = len(formulas) - len(loaded)
        raise ValueError(f"{in_dir}: {missing} formulas lack a split/image")
    return Corpus(list(samples), splits)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray   # (B, 1, H, W) float64 in [0,1]
    targets: np.ndarray  # (B, T) int64, BOS ... EOS then PAD
    indices: list[int]   # sample indices within the corpus


def sample_tokens(sample: Sample, normalize_markup: bool = False) -> list[str]:
    toks = tt.tokenize(sample.markup)
    if normalize_markup:
        toks = tt.ast_tokens(tt.normalize(tt.parse(toks)))
    return toks


def bucket_batches(samples: list[Sample], spec: BucketSpec, batch_size: int,
                   train: bool = True, normalize_markup: bool = False,
                   rng: np.random.Generator | None = None) -> list[Batch]:
    """Group samples by image size into PAD-padded batches.

    With train=True, samples longer than spec.max_tokens or sized off
    the bucket grid are dropped; at test time everything is kept.
    """
    if not spec.sizes:
        raise ValueError("empty bucket spec")
    kept: list[tuple[Sample, list[str]]] = []
    for s in samples:
        toks = sample_tokens(s, normalize_markup)
        if train and len(toks) > spec.max_tokens:
            continue
        if train and (s.bitmap.width, s.bitmap.height) not in spec.sizes:
            continue
        kept.append((s, toks))
    if rng is not None:
        order = rng.permutation(len(kept))
        kept = [kept[i] for i in order]
    groups: dict[tuple[int, int], list[tuple[Sample, list[str]]]] = {}
    for s, toks in kept:
        groups.setdefault(s.bitmap.pixels.shape, []).append((s, toks))
    batches = []
    for group in groups.values():
        for at in range(0, len(group), batch_size):
            chunk = group[at:at + batch_size]
            images = np.stack([s.bitmap.to_input() for s, _ in chunk])
            tmax = max(len(t) for _, t in chunk) + 2
            targets = np.full((len(chunk), tmax), tt.PAD, dtype=np.int64)
            for k, (_, toks) in enumerate(chunk):
                ids = tt.to_ids(toks, add_bos_eos=True)
                targets[k, :len(ids)] = ids
            batches.append(Batch(images, targets, [s.index for s, _ in chunk]))
    return batches
