"""Experiment drivers: multi-run protocol, ablations, sweeps, attention export, transfer."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import FewShotSplit, Manifest, Sample, Vocab, encode_manifest, tokenize
from .encoder import DualEncoderParams
from .errors import ConfigurationError, ValidationError
from .prompts import PromptBank, PromptConfig, Variant, dmdp_forward, frozen_features
from .training import (
    Metrics,
    RunRecord,
    RunReport,
    TrainConfig,
    aggregate_runs,
    evaluate,
    train,
)


# ----------------------------------------------------------------------------
# attention maps


@dataclass(frozen=True)
class AttentionMap:
    modality: str  # "text" | "vision"
    prompt_index: int
    layer: int
    targets: tuple[tuple[str, float], ...]
    flagged: tuple[int, ...]  # target positions that are prompts or the class token

    def row_sum(self) -> float:
        return float(sum(w for _, w in self.targets))

    def content_weights(self) -> np.ndarray:
        """Weights on word (text) or patch (vision) positions only."""
        return np.array([w for k, (_, w) in enumerate(self.targets) if k not in self.flagged])

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "prompt_index": self.prompt_index,
            "layer": self.layer,
            "targets": [[lab, w] for lab, w in self.targets],
            "flagged": list(self.flagged),
        }


def extract_prompt_attention(frozen: DualEncoderParams, bank: PromptBank, cfg: PromptConfig, sample: Sample,
                             vocab: Vocab, per_head: bool = False) -> list[AttentionMap]:
    """Final-layer attention rows of every prompt token, text maps first.

    Rows are head-averaged unless ``per_head`` is set, in which case one map
    per head is returned with ``layer`` still the last layer index.
    """
    enc = frozen.config
    seq = tokenize(vocab, sample.text, enc.max_text_len)
    images = np.array([sample.image])
    out = dmdp_forward(frozen, bank, cfg, images, np.array([seq.ids]), np.array([seq.eos_index]))
    c, m, layer = cfg.c, enc.m, enc.L - 1
    text_labels = [f"<prompt{k}>" for k in range(c)] + [vocab.tokens[i] for i in seq.ids]
    g = enc.grid
    vision_labels = ["<class>"] + [f"patch({p // g},{p % g})" for p in range(m)] + [f"<prompt{k}>" for k in range(c)]
    maps = []
    for modality, attn, rows, labels, flagged in (
        ("text", out.text_attention[0], range(c), text_labels, tuple(range(c))),
        ("vision", out.vision_attention[0], range(1 + m, 1 + m + c), vision_labels,
         (0,) + tuple(range(1 + m, 1 + m + c))),
    ):
        heads = [attn[h] for h in range(attn.shape[0])] if per_head else [attn.mean(axis=0)]
        for A in heads:
            for k, row in enumerate(rows):
                targets = tuple((lab, float(w)) for lab, w in zip(labels, A[row]))
                maps.append(AttentionMap(modality, k, layer, targets, flagged))
    return maps


def heatmap_grid(amap: AttentionMap, grid: int) -> np.ndarray:
    """Content weights laid out as a grid (vision) or a single row (text)."""
    w = amap.content_weights()
    return w.reshape(grid, grid) if amap.modality == "vision" else w.reshape(1, -1)


def pgm_text(grid: np.ndarray, maxval: int = 255) -> str:
    """Plain (P2) graymap scaled so the largest weight maps to ``maxval``."""
    grid = np.asarray(grid, dtype=np.float64)
    top = grid.max()
    scaled = np.zeros(grid.shape, dtype=int) if top <= 0 else np.rint(grid / top * maxval).astype(int)
    rows = [" ".join(str(v) for v in r) for r in scaled]
    return f"P2\n{grid.shape[1]} {grid.shape[0]}\n{maxval}\n" + "\n".join(rows) + "\n"


def parse_pgm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines() for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P2":
        raise ValidationError("not a plain PGM (missing P2 magic)")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = [int(t) for t in tokens[4:]]
    except (IndexError, ValueError):
        raise ValidationError("malformed PGM header or body") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536 or len(vals) != w * h:
        raise ValidationError(f"PGM declares {w}x{h} but holds {len(vals)} samples")
    if any(v < 0 or v > maxval for v in vals):
        raise ValidationError("PGM sample exceeds maxval")
    return np.array(vals).reshape(h, w)


def export_attention(maps: Sequence[AttentionMap], grid: int, out_dir: str | Path, stem: str = "sample") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for amap in maps:
        p = out_dir / f"{stem}_{amap.modality}_p{amap.prompt_index}.pgm"
        p.write_text(pgm_text(heatmap_grid(amap, grid)))
        written.append(p)
    j = out_dir / f"{stem}.json"
    j.write_text(json.dumps([a.to_dict() for a in maps], indent=2) + "\n")
    written.append(j)
    return written


# ----------------------------------------------------------------------------
# linear probe on frozen features


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                 steps: int = 3000, lr: float = 0.5, l2: float = 1e-3) -> float:
    """Logistic regression on standardized features; returns test accuracy."""
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0) + 1e-8
    X = (train_x - mu) / sd
    Xt = (test_x - mu) / sd
    y = np.asarray(train_y, dtype=np.float64)
    w, b = np.zeros(X.shape[1]), 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        w -= lr * (X.T @ (p - y) / len(y) + l2 * w)
        b -= lr * float(np.mean(p - y))
    pred = (Xt @ w + b > 0).astype(int)
    return float(np.mean(pred == np.asarray(test_y)))


def frozen_probe_accuracy(frozen: DualEncoderParams, split: FewShotSplit, vocab: Vocab) -> float:
    enc = frozen.config
    sets = [encode_manifest(m, vocab, enc.max_text_len, enc.image_size) for m in (split.train, split.test)]
    feats = [np.concatenate(frozen_features(frozen, s.images, s.token_ids, s.eos_index), axis=1) for s in sets]
    return linear_probe(feats[0], sets[0].labels, feats[1], sets[1].labels)


# ----------------------------------------------------------------------------
# multi-run protocol


@dataclass
class RunOutput:
    record: RunRecord
    bank: PromptBank
    history: list[dict]


def run_once(frozen: DualEncoderParams, vocab: Vocab, pcfg: PromptConfig, tcfg: TrainConfig,
             split: FewShotSplit, seed: int, split_id: int = 0) -> RunOutput:
    enc = frozen.config
    tr, va, te = (encode_manifest(m, vocab, enc.max_text_len, enc.image_size)
                  for m in (split.train, split.valid, split.test))
    bank = PromptBank.init(pcfg, enc, seed)
    result = train(frozen, bank, replace(tcfg, seed=seed), pcfg, tr, va)
    metrics = evaluate(frozen, result.best_bank, pcfg, te)
    return RunOutput(RunRecord(seed, split_id, metrics), result.best_bank, result.history)


def _map_cells(fn: Callable, cells: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


def run_protocol(frozen: DualEncoderParams, vocab: Vocab, pcfg: PromptConfig, tcfg: TrainConfig,
                 splits: Sequence[FewShotSplit], seeds: Sequence[int], workers: int = 1) -> RunReport:
    """Train and test once per (split, seed) and aggregate."""
    cells = [(sid, sp, seed) for sid, sp in enumerate(splits) for seed in seeds]
    outs = _map_cells(lambda cell: run_once(frozen, vocab, pcfg, tcfg, cell[1], cell[2], cell[0]).record,
                      cells, workers)
    return aggregate_runs(outs)


# ----------------------------------------------------------------------------
# ablations


ABLATION_ORDER = (Variant.DMDP, Variant.UPT, Variant.IPT, Variant.NO_GATE, Variant.NO_WEIGHTMOD, Variant.V_TO_T)


@dataclass
class AblationRow:
    variant: Variant
    report: RunReport | None
    error: str | None = None

    def to_dict(self) -> dict:
        if self.report is None:
            return {"variant": self.variant.value, "status": "failed", "error": self.error}
        return {"variant": self.variant.value, "status": "ok", **self.report.to_dict()}


@dataclass
class AblationTable:
    rows: list[AblationRow]
    split_descriptors: list[dict] = field(default_factory=list)

    def row(self, variant: Variant | str) -> AblationRow:
        v = Variant(variant)
        return next(r for r in self.rows if r.variant is v)

    def to_json(self) -> str:
        return json.dumps({"splits": self.split_descriptors, "rows": [r.to_dict() for r in self.rows]}, indent=2) + "\n"


def ablation_suite(frozen: DualEncoderParams, vocab: Vocab, splits: Sequence[FewShotSplit], seeds: Sequence[int],
                   base_cfg: PromptConfig, tcfg: TrainConfig, workers: int = 1,
                   variants: Sequence[Variant] = ABLATION_ORDER) -> AblationTable:
    """Every variant on the same splits and seeds; a failing variant only fails its row."""
    if len(seeds) < 2:
        raise ConfigurationError("ablation suite needs at least 2 seeds")

    def cell(v: Variant) -> AblationRow:
        try:
            cfg = replace(base_cfg, variant=v).validate(frozen.config)
            return AblationRow(v, run_protocol(frozen, vocab, cfg, tcfg, splits, seeds))
        except Exception as exc:  # recorded, the remaining rows still run
            return AblationRow(v, None, f"{type(exc).__name__}: {exc}")

    rows = _map_cells(cell, list(variants), workers)
    return AblationTable(rows, [s.descriptor() for s in splits])


# ----------------------------------------------------------------------------
# sweeps


SWEEP_COLUMNS = ("setting", "acc_mean", "acc_std", "f1_mean", "f1_std")


@dataclass
class SweepResult:
    axis: str  # "depth" | "length"
    values: list[tuple[int, RunReport]]

    def __post_init__(self):
        settings = [s for s, _ in self.values]
        if any(b <= a for a, b in zip(settings, settings[1:])):
            raise ValidationError(f"sweep settings must be strictly increasing, got {settings}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for setting, rep in self.values:
            w.writerow([setting, repr(rep.mean.accuracy), repr(rep.std.accuracy),
                        repr(rep.mean.macro_f1), repr(rep.std.macro_f1)])
        return buf.getvalue()


def _sweep(axis: str, settings: Sequence[int], frozen, vocab, base_cfg, tcfg, splits, seeds, workers) -> SweepResult:
    settings = sorted(settings)
    key = "S" if axis == "depth" else "c"
    for s in settings:
        replace(base_cfg, **{key: s}).validate(frozen.config)

    def cell(s):
        return s, run_protocol(frozen, vocab, replace(base_cfg, **{key: s}), tcfg, splits, seeds)

    return SweepResult(axis, _map_cells(cell, settings, workers))


def depth_sweep(depths: Sequence[int], frozen, vocab, base_cfg: PromptConfig, tcfg: TrainConfig,
                splits, seeds, workers: int = 1) -> SweepResult:
    return _sweep("depth", depths, frozen, vocab, base_cfg, tcfg, splits, seeds, workers)


def length_sweep(lengths: Sequence[int], frozen, vocab, base_cfg: PromptConfig, tcfg: TrainConfig,
                 splits, seeds, workers: int = 1) -> SweepResult:
    return _sweep("length", lengths, frozen, vocab, base_cfg, tcfg, splits, seeds, workers)


# ----------------------------------------------------------------------------
# cross-dataset transfer


def cross_dataset_eval(frozen: DualEncoderParams, bank: PromptBank, cfg: PromptConfig, vocab: Vocab,
                       targets: Mapping[str, Manifest]) -> dict[str, Metrics]:
    """Evaluate an already-trained bank on each target manifest, no further training."""
    enc = frozen.config
    if len(vocab) > enc.vocab_size:
        raise ValidationError(f"vocabulary of {len(vocab)} tokens exceeds encoder vocab_size {enc.vocab_size}")
    out = {}
    for name, manifest in targets.items():
        if not len(manifest):
            raise ValidationError(f"target {name!r} is empty")
        data = encode_manifest(manifest, vocab, enc.max_text_len, enc.image_size)
        out[name] = evaluate(frozen, bank, cfg, data)
    return out
