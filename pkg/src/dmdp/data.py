"""Corpus formats, a whitespace tokenizer, the synthetic image-text world and few-shot samplers.

Synthetic world
---------------
Images are grayscale grids on a mid-gray background with one square blob in
one quadrant.  The blob is bright (visual class ``a = 1``) or dark
(``a = 0``).  Texts mix one or two sentiment words with distractors; the
sentiment set is positive (textual class ``b = 1``) or negative (``b = 0``).

* case 1: ``y = a XOR b`` -- the label is the incongruity between modalities
* case 2: ``y = a``, ``b`` is noise -- the image carries the signal
* case 3: ``y = b``, ``a`` is noise -- the text carries the signal
* case 0: an even mixture of the three

Pretraining pairs are congruent: a bright blob is captioned with a positive
word, a dark one with a negative word, plus words naming the quadrant.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ManifestParseError, SamplingError, ValidationError

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"

POSITIVE_WORDS = ("lovely", "great", "nice", "awesome", "pleasant", "clean", "wonderful", "perfect")
NEGATIVE_WORDS = ("awful", "dirty", "broken", "leaky", "terrible", "gross", "horrible", "ugly")
POSITION_WORDS = ("top", "bottom", "left", "right")
DISTRACTOR_WORDS = (
    "train", "home", "morning", "cup", "weather", "sale", "today", "user",
    "the", "my", "this", "so", "just", "really", "day", "coffee",
)


# ----------------------------------------------------------------------------
# vocabulary and tokenizer


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    eos_index: int


class Vocab:
    """Token list where the line number (0-based) is the id."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigurationError("vocabulary has duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def check(self) -> None:
        if not self.tokens:
            raise ConfigurationError("vocabulary is empty")
        missing = [t for t in (PAD, UNK, EOS) if t not in self.index]
        if missing:
            raise ConfigurationError(f"vocabulary lacks special tokens {missing}")

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def default_vocab() -> Vocab:
    return Vocab([PAD, UNK, EOS, *POSITIVE_WORDS, *NEGATIVE_WORDS, *POSITION_WORDS, *DISTRACTOR_WORDS])


def tokenize(vocab: Vocab, text: str, max_text_len: int) -> TokenSeq:
    vocab.check()
    if max_text_len < 1:
        raise ConfigurationError("max_text_len must be at least 1")
    words = text.lower().split()[: max_text_len - 1]
    ids = [vocab.index.get(w, vocab.unk_id) for w in words]
    eos_index = len(ids)
    ids.append(vocab.eos_id)
    ids.extend([vocab.pad_id] * (max_text_len - len(ids)))
    return TokenSeq(tuple(ids), eos_index)


def detokenize(vocab: Vocab, seq: TokenSeq) -> str:
    return " ".join(vocab.tokens[i] for i in seq.ids[: seq.eos_index])


# ----------------------------------------------------------------------------
# samples and manifests


@dataclass(frozen=True)
class Sample:
    id: str
    image: tuple[tuple[int, ...], ...]
    text: str
    label: int

    def to_json(self) -> str:
        obj = {"id": self.id, "image": [list(r) for r in self.image], "text": self.text, "label": self.label}
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


@dataclass
class Manifest:
    samples: list[Sample]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValidationError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def name(self) -> str:
        return self.metadata.get("name", "manifest")

    @property
    def image_size(self) -> int | None:
        return len(self.samples[0].image) if self.samples else None

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Manifest":
        meta = dict(self.metadata)
        if name:
            meta["name"] = name
        return Manifest([self.samples[i] for i in indices], meta)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


def _as_image(raw, line_no: int) -> tuple[tuple[int, ...], ...]:
    if not isinstance(raw, list) or not raw or not all(isinstance(r, list) for r in raw):
        raise ManifestParseError(line_no, "image must be a non-empty list of rows")
    width = len(raw[0])
    rows = []
    for r in raw:
        if len(r) != width:
            raise ManifestParseError(line_no, "image rows have unequal lengths")
        for v in r:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ManifestParseError(line_no, f"pixel {v!r} is not an integer")
            if not 0 <= v <= 255:
                raise ValidationError(f"line {line_no}: pixel {v} outside 0..255")
        rows.append(tuple(r))
    return tuple(rows)


def parse_sample(line: str, line_no: int) -> Sample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(line_no, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ManifestParseError(line_no, "expected a JSON object")
    for key in ("id", "image", "text", "label"):
        if key not in obj:
            raise ManifestParseError(line_no, f"missing {key!r}")
    if not isinstance(obj["id"], str) or not isinstance(obj["text"], str):
        raise ManifestParseError(line_no, "id and text must be strings")
    if obj["label"] not in (0, 1) or isinstance(obj["label"], bool):
        raise ValidationError(f"line {line_no}: label {obj['label']!r} not in {{0, 1}}")
    return Sample(obj["id"], _as_image(obj["image"], line_no), obj["text"], int(obj["label"]))


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    samples = []
    with path.open(encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if line.strip():
                samples.append(parse_sample(line, no))
    sizes = {(len(s.image), len(s.image[0])) for s in samples}
    if len(sizes) > 1:
        raise ValidationError(f"{path}: images of differing sizes {sorted(sizes)}")
    return Manifest(samples, {"name": path.stem})


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text("".join(s.to_json() + "\n" for s in manifest.samples), encoding="utf-8")


# ----------------------------------------------------------------------------
# encoded arrays for the model


@dataclass
class EncodedSet:
    images: np.ndarray  # (N, H, W) integer grid
    token_ids: np.ndarray  # (N, n)
    eos_index: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)
    keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "EncodedSet":
        keys = [self.keys[i] for i in idx] if self.keys else []
        return EncodedSet(self.images[idx], self.token_ids[idx], self.eos_index[idx], self.labels[idx], keys)


def encode_manifest(manifest: Manifest, vocab: Vocab, max_text_len: int, image_size: int | None = None) -> EncodedSet:
    if image_size is not None and manifest.samples and manifest.image_size != image_size:
        raise ValidationError(
            f"manifest {manifest.name!r} has {manifest.image_size}px images, encoder expects {image_size}px"
        )
    seqs = [tokenize(vocab, s.text, max_text_len) for s in manifest.samples]
    return EncodedSet(
        images=np.array([s.image for s in manifest.samples], dtype=np.int64),
        token_ids=np.array([q.ids for q in seqs], dtype=np.int64).reshape(len(seqs), max_text_len),
        eos_index=np.array([q.eos_index for q in seqs], dtype=np.int64),
        labels=manifest.labels(),
    )


# ----------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 8
    blob: int = 3
    background: float = 128.0
    background_jitter: float = 4.0
    pixel_noise: float = 10.0
    max_words: int = 7


def render_image(rng: np.random.Generator, bright: int, quadrant: int, cfg: SyntheticConfig) -> tuple:
    s, half = cfg.image_size, cfg.image_size // 2
    img = rng.normal(cfg.background + rng.normal(0, cfg.background_jitter), cfg.pixel_noise, size=(s, s))
    r0 = (quadrant // 2) * half + int(rng.integers(0, max(1, half - cfg.blob + 1)))
    c0 = (quadrant % 2) * half + int(rng.integers(0, max(1, half - cfg.blob + 1)))
    level = rng.uniform(200, 250) if bright else rng.uniform(5, 55)
    img[r0 : r0 + cfg.blob, c0 : c0 + cfg.blob] = level + rng.normal(0, cfg.pixel_noise / 2, size=(cfg.blob, cfg.blob))
    img = np.clip(np.rint(img), 0, 255).astype(int)
    return tuple(tuple(int(v) for v in row) for row in img)


def _sentiment_text(rng: np.random.Generator, positive: int, cfg: SyntheticConfig) -> str:
    pool = POSITIVE_WORDS if positive else NEGATIVE_WORDS
    n_sent = int(rng.integers(1, 3))
    n_dist = int(rng.integers(1, cfg.max_words - n_sent + 1))
    words = [pool[i] for i in rng.choice(len(pool), n_sent, replace=False)]
    words += [DISTRACTOR_WORDS[i] for i in rng.choice(len(DISTRACTOR_WORDS), n_dist, replace=False)]
    return " ".join(words[i] for i in rng.permutation(len(words)))


def label_for(case: int, a: int, b: int) -> int:
    if case == 1:
        return a ^ b
    if case == 2:
        return a
    if case == 3:
        return b
    raise ConfigurationError(f"unknown synthetic case {case}")


@dataclass(frozen=True)
class SyntheticRecord:
    sample: Sample
    visual_class: int
    text_class: int
    case: int


def synthetic_records(case: int, n_samples: int, seed: int, cfg: SyntheticConfig = SyntheticConfig()) -> list[SyntheticRecord]:
    if case not in (0, 1, 2, 3):
        raise ConfigurationError(f"synthetic case must be 0 (mixed), 1, 2 or 3, got {case}")
    if n_samples < 4:
        raise ConfigurationError("synthetic generator needs n_samples >= 4")
    rng = np.random.default_rng([seed, case])
    if case == 0:
        cases = np.array([1 + i % 3 for i in range(n_samples)])[rng.permutation(n_samples)]
    else:
        cases = np.full(n_samples, case)
    out = []
    for i in range(n_samples):
        k = int(cases[i])
        a, b = int(rng.integers(0, 2)), int(rng.integers(0, 2))
        image = render_image(rng, a, int(rng.integers(0, 4)), cfg)
        text = _sentiment_text(rng, b, cfg)
        sample = Sample(f"case{case}-{seed}-{i:05d}", image, text, label_for(k, a, b))
        out.append(SyntheticRecord(sample, a, b, k))
    return out


def gen_synthetic(case: int, n_samples: int, seed: int, cfg: SyntheticConfig = SyntheticConfig()) -> Manifest:
    recs = synthetic_records(case, n_samples, seed, cfg)
    return Manifest([r.sample for r in recs], {"name": f"synthetic-case{case}-seed{seed}", "image_size": cfg.image_size})


def gen_aligned_pairs(n_pairs: int, seed: int, vocab: Vocab, max_text_len: int,
                      cfg: SyntheticConfig = SyntheticConfig()) -> EncodedSet:
    """Congruent image-caption pairs for contrastive pretraining.

    ``keys`` holds the content ``(brightness, quadrant)`` of each pair so
    retrieval can credit any caption describing the same content.
    """
    rng = np.random.default_rng([seed, 99])
    images, texts, keys = [], [], []
    for _ in range(n_pairs):
        a, q = int(rng.integers(0, 2)), int(rng.integers(0, 4))
        images.append(render_image(rng, a, q, cfg))
        pool = POSITIVE_WORDS if a else NEGATIVE_WORDS
        words = [pool[int(rng.integers(0, len(pool)))], POSITION_WORDS[q // 2], POSITION_WORDS[2 + q % 2]]
        n_dist = int(rng.integers(0, 3))
        words += [DISTRACTOR_WORDS[i] for i in rng.choice(len(DISTRACTOR_WORDS), n_dist, replace=False)]
        texts.append(" ".join(words[i] for i in rng.permutation(len(words))))
        keys.append(2 * q + a)
    seqs = [tokenize(vocab, t, max_text_len) for t in texts]
    return EncodedSet(
        images=np.array(images, dtype=np.int64),
        token_ids=np.array([s.ids for s in seqs], dtype=np.int64),
        eos_index=np.array([s.eos_index for s in seqs], dtype=np.int64),
        labels=np.zeros(n_pairs, dtype=np.int64),
        keys=keys,
    )


# ----------------------------------------------------------------------------
# few-shot sampling


@dataclass(frozen=True)
class SplitPolicy:
    kind: str = "k-shot"  # "k-shot" | "percent"
    k: int = 20
    percent: float = 0.01

    def per_class(self, pool_size: int) -> int:
        if self.kind == "k-shot":
            if self.k < 1:
                raise ConfigurationError("k-shot policy needs k >= 1")
            return self.k
        if self.kind == "percent":
            if not 0 < self.percent <= 1:
                raise ConfigurationError("percent policy needs 0 < percent <= 1")
            # 1e-9 guards against 0.01 * N landing a hair below an integer
            return int(math.floor(self.percent * pool_size / 2 + 1e-9))
        raise ConfigurationError(f"unknown split policy {self.kind!r}")

    def describe(self) -> dict:
        return {"kind": self.kind, "k": self.k} if self.kind == "k-shot" else {"kind": self.kind, "percent": self.percent}


@dataclass
class FewShotSplit:
    train: Manifest
    valid: Manifest
    test: Manifest
    seed: int
    policy: SplitPolicy

    def descriptor(self) -> dict:
        def counts(m: Manifest) -> dict:
            lab = m.labels()
            return {"0": int((lab == 0).sum()), "1": int((lab == 1).sum())}

        return {
            "policy": self.policy.describe(),
            "seed": self.seed,
            "counts": {"train": counts(self.train), "valid": counts(self.valid), "test": counts(self.test)},
        }

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for part in ("train", "valid", "test"):
            save_manifest(getattr(self, part), d / f"{part}.jsonl")
        (d / "split.json").write_text(json.dumps(self.descriptor(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "FewShotSplit":
        d = Path(directory)
        desc = json.loads((d / "split.json").read_text())
        pol = desc["policy"]
        policy = SplitPolicy(kind=pol["kind"], k=pol.get("k", 20), percent=pol.get("percent", 0.01))
        parts = {p: load_manifest(d / f"{p}.jsonl") for p in ("train", "valid", "test")}
        return cls(parts["train"], parts["valid"], parts["test"], int(desc["seed"]), policy)


def _draw_balanced(labels: np.ndarray, per_class: int, rng: np.random.Generator, taken: set[int],
                   what: str) -> list[int]:
    chosen = []
    for cls in (0, 1):
        candidates = [i for i in np.flatnonzero(labels == cls) if i not in taken]
        if len(candidates) < per_class:
            raise SamplingError(
                f"class {cls} has {len(candidates)} available samples, {what} needs {per_class}"
            )
        picked = rng.permutation(len(candidates))[:per_class]
        chosen.extend(sorted(int(candidates[j]) for j in picked))
    return chosen


def few_shot_sample(pool: Manifest, policy: SplitPolicy, seed: int,
                    valid_pool: Manifest | None = None, test: Manifest | None = None) -> FewShotSplit:
    """Class-balanced train/valid draws; test is ``test`` or the untouched rest of ``pool``."""
    rng = np.random.default_rng(seed)
    per_class = policy.per_class(len(pool))
    if per_class < 1:
        raise SamplingError(f"policy {policy.describe()} yields 0 samples per class for pool of {len(pool)}")
    labels = pool.labels()
    train_idx = _draw_balanced(labels, per_class, rng, set(), "train")
    if valid_pool is not None:
        valid = valid_pool.subset(_draw_balanced(valid_pool.labels(), per_class, rng, set(), "valid"), "valid")
        used = set(train_idx)
    else:
        valid_idx = _draw_balanced(labels, per_class, rng, set(train_idx), "valid")
        valid = pool.subset(valid_idx, "valid")
        used = set(train_idx) | set(valid_idx)
    if test is None:
        test = pool.subset([i for i in range(len(pool)) if i not in used], "test")
    return FewShotSplit(pool.subset(train_idx, "train"), valid, test, seed, policy)
