"""Word corpora: IAM index loading, vocabulary, splits and synthetic words."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import preprocess
from .ctc import required_frames
from .font import GLYPH_HEIGHT, GLYPHS

log = logging.getLogger(__name__)

MAX_CHARS = 79
TIME_STEPS = 32


@dataclass
class Sample:
    id: str
    image: str | Path | np.ndarray
    transcription: str
    ok: bool = True

    def __post_init__(self):
        if not self.transcription:
            raise ValueError(f"sample {self.id}: empty transcription")

    def load(self) -> np.ndarray:
        if isinstance(self.image, np.ndarray):
            return self.image
        return preprocess.load_gray(self.image)


@dataclass(frozen=True)
class CharVocab:
    """Characters 0..n-1 plus a blank at index n."""

    chars: str

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("vocabulary characters must be unique")

    @property
    def blank(self) -> int:
        return len(self.chars)

    @property
    def num_classes(self) -> int:
        return len(self.chars) + 1

    def __len__(self):
        return len(self.chars)

    def encode(self, text: str) -> list[int]:
        index = self._index
        try:
            return [index[c] for c in text]
        except KeyError as err:
            raise ValueError(f"character {err.args[0]!r} of {text!r} is not in the vocabulary") from None

    def decode(self, indices: Iterable[int]) -> str:
        return "".join(self.chars[i] for i in indices)

    @property
    def _index(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {c: i for i, c in enumerate(self.chars)}
            object.__setattr__(self, "_cache", cache)
        return cache


def ctc_feasible(text: str, time_steps: int = TIME_STEPS) -> bool:
    """Conservative length cap: 2*len + adjacent repeats + 1 <= time_steps."""
    repeats = required_frames(text) - len(text)
    return 2 * len(text) + repeats + 1 <= time_steps


def build_vocab(samples: Sequence[Sample], max_chars: int = MAX_CHARS) -> CharVocab:
    if not samples:
        raise ValueError("cannot build a vocabulary from no samples")
    chars = sorted(set("".join(s.transcription for s in samples)))
    if len(chars) > max_chars:
        raise ValueError(f"{len(chars)} distinct characters exceed the limit of {max_chars}; "
                         "filter the corpus first")
    return CharVocab("".join(chars))


# ---------------------------------------------------------------------------
# IAM words index

def iam_image_path(images_root, sample_id: str) -> Path:
    """a01-000u-00-00 -> <root>/a01/a01-000u/a01-000u-00-00.png"""
    parts = sample_id.split("-")
    if len(parts) < 3:
        raise ValueError(f"not a hierarchical word id: {sample_id!r}")
    return Path(images_root) / parts[0] / f"{parts[0]}-{parts[1]}" / f"{sample_id}.png"


def parse_index_line(line: str, lineno: int = 0) -> Sample | None:
    """One line of the IAM words index, or None for comments and blank lines."""
    text = line.rstrip("\r\n")
    if not text.strip() or text.startswith("#"):
        return None
    fields = text.split(" ", 8)
    if len(fields) != 9:
        raise ValueError(f"line {lineno}: expected 9 space-separated fields, got {len(fields)}: {text!r}")
    sid, seg = fields[0], fields[1]
    if seg not in ("ok", "err"):
        raise ValueError(f"line {lineno}: segmentation flag must be ok/err, got {seg!r}")
    try:
        [int(v) for v in fields[2:7]]
    except ValueError:
        raise ValueError(f"line {lineno}: graylevel and bounding box must be integers: {text!r}") from None
    if not fields[8]:
        raise ValueError(f"line {lineno}: empty transcription")
    return Sample(sid, sid, fields[8], ok=seg == "ok")


def load_iam(index_path, images_root, include_err: bool = False,
             time_steps: int = TIME_STEPS) -> list[Sample]:
    """Samples listed in a words index whose images exist and fit the CTC length cap."""
    samples = []
    skipped_err = missing = too_long = 0
    with open(index_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            sample = parse_index_line(line, lineno)
            if sample is None:
                continue
            if not sample.ok and not include_err:
                skipped_err += 1
                continue
            path = iam_image_path(images_root, sample.id)
            if not path.exists():
                log.warning("missing image for %s: %s", sample.id, path)
                missing += 1
                continue
            if not ctc_feasible(sample.transcription, time_steps):
                too_long += 1
                continue
            sample.image = path
            samples.append(sample)
    log.info("loaded %d samples (%d err-flagged skipped, %d missing, %d too long for %d steps)",
             len(samples), skipped_err, missing, too_long, time_steps)
    return samples


def format_index_line(sample: Sample, width: int = 0, height: int = 0, tag: str = "TOY") -> str:
    return (f"{sample.id} {'ok' if sample.ok else 'err'} 255 0 0 {width} {height} "
            f"{tag} {sample.transcription}")


# ---------------------------------------------------------------------------
# split

@dataclass
class Split:
    train: list[Sample]
    test: list[Sample]
    seed: int = 0


def split_95_5(samples: Sequence[Sample], seed: int = 0) -> Split:
    """Seeded shuffle; test gets floor(5%) of the samples (at least one)."""
    n = len(samples)
    if n < 20:
        raise ValueError(f"need at least 20 samples for a 95:5 split, got {n}")
    n_test = max(1, n * 5 // 100)
    order = np.random.default_rng(seed).permutation(n)
    return Split([samples[i] for i in order[:n - n_test]],
                 [samples[i] for i in order[n - n_test:]], seed)


# ---------------------------------------------------------------------------
# synthetic words

@dataclass
class ToyJitter:
    spacing: tuple[int, int] = (1, 3)         # blank columns between glyphs
    offset: int = 4                            # max vertical shift in pixels
    scale: float = 0.15                        # relative scale jitter
    noise: float = 0.01                        # salt-and-pepper fraction
    ink: tuple[int, int] = (0, 60)
    paper: tuple[int, int] = (190, 255)
    base_scale: float = 3.0
    margin: int = 4

    @classmethod
    def none(cls) -> "ToyJitter":
        return cls(spacing=(1, 1), offset=0, scale=0.0, noise=0.0, ink=(0, 0), paper=(255, 255))


def render_word(word: str, rng: np.random.Generator, jitter: ToyJitter = ToyJitter()) -> np.ndarray:
    """Draw ``word`` with the bitmap font on a light canvas; returns uint8 (h, w)."""
    unknown = sorted({c for c in word if c not in GLYPHS})
    if unknown:
        raise ValueError(f"{word!r} uses characters without glyphs: {''.join(unknown)!r}")
    cols = []
    for k, ch in enumerate(word):
        if k:
            gap = int(rng.integers(jitter.spacing[0], jitter.spacing[1] + 1))
            cols.append(np.zeros((GLYPH_HEIGHT, gap), dtype=bool))
        cols.append(GLYPHS[ch])
    bitmap = np.concatenate(cols, axis=1)
    scale = jitter.base_scale * (1 + rng.uniform(-jitter.scale, jitter.scale)) if jitter.scale else jitter.base_scale
    h = max(1, int(round(bitmap.shape[0] * scale)))
    w = max(1, int(round(bitmap.shape[1] * scale)))
    rows = np.minimum((np.arange(h) / scale).astype(int), bitmap.shape[0] - 1)
    cols_idx = np.minimum((np.arange(w) / scale).astype(int), bitmap.shape[1] - 1)
    glyphs = bitmap[rows][:, cols_idx]
    m = jitter.margin
    dy = int(rng.integers(0, jitter.offset + 1)) if jitter.offset else 0
    canvas_h = h + 2 * m + jitter.offset
    paper = int(rng.integers(jitter.paper[0], jitter.paper[1] + 1))
    ink = int(rng.integers(jitter.ink[0], jitter.ink[1] + 1))
    img = np.full((canvas_h, w + 2 * m), paper, dtype=np.uint8)
    region = img[m + dy:m + dy + h, m:m + w]
    region[glyphs] = ink
    if jitter.noise:
        u = rng.random(img.shape)
        img[u < jitter.noise / 2] = ink
        img[(u >= jitter.noise / 2) & (u < jitter.noise)] = paper
    return img


def gen_toy(words: Sequence[str], samples_per_word: int, seed: int = 0,
            jitter: ToyJitter = ToyJitter()) -> list[Sample]:
    """``samples_per_word`` renders of each word, ids ``toy-WWW-RR-00``."""
    rng = np.random.default_rng(seed)
    samples = []
    for w_idx, word in enumerate(words):
        for r in range(samples_per_word):
            samples.append(Sample(f"toy-{w_idx:03d}-{r:02d}-00", render_word(word, rng, jitter), word))
    return samples


TOY_WORDS = (
    "the", "and", "was", "for", "that", "with", "his", "had", "not", "but",
    "from", "have", "were", "they", "which", "been", "this", "would", "there", "their",
    "said", "what", "could", "more", "into", "time", "only", "other", "about", "people",
)


def write_dataset(samples: Sequence[Sample], out_dir, index_name: str = "words.txt") -> Path:
    """Write PNGs in the IAM directory layout plus a words index."""
    out_dir = Path(out_dir)
    lines = ["# synthetic word corpus; fields as in the IAM words index"]
    for s in samples:
        img = s.load()
        path = iam_image_path(out_dir / "words", s.id)
        path.parent.mkdir(parents=True, exist_ok=True)
        preprocess.save_gray(path, img)
        lines.append(format_index_line(s, img.shape[1], img.shape[0]))
    index = out_dir / index_name
    index.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return index
