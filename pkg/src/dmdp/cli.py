"""``dmdp`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, checkpoint
from . import config as cfgmod
from .config import ExperimentConfig, UsageError
from .data import (FewShotSplit, Manifest, SplitPolicy, Vocab, default_vocab, encode_manifest, few_shot_sample,
                   gen_aligned_pairs, gen_synthetic, load_manifest, save_manifest)
from .encoder import (DualEncoderParams, contrastive_pretrain, fingerprint, freeze, load_params, retrieval_at_1,
                      save_params)
from .errors import ConfigurationError, DepthError, SamplingError, ValidationError
from .prompts import PromptBank
from .training import evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("pretrain", "train", "eval", "ablate", "sweep", "attn", "split", "gen")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# shared pipeline pieces


def load_vocab(cfg: ExperimentConfig) -> Vocab:
    vocab = Vocab.load(cfg.data.vocab) if cfg.data.vocab else default_vocab()
    if len(vocab) > cfg.encoder.vocab_size:
        raise ValidationError(f"encoder.vocab_size {cfg.encoder.vocab_size} is smaller than the vocabulary ({len(vocab)})")
    return vocab


def pool_manifest(cfg: ExperimentConfig) -> Manifest:
    if cfg.data.manifest:
        return load_manifest(cfg.data.manifest)
    return gen_synthetic(cfg.data.case, cfg.data.n, cfg.data.seed)


def make_splits(cfg: ExperimentConfig) -> list[FewShotSplit]:
    d = cfg.data
    pool = pool_manifest(cfg)
    valid_pool = load_manifest(d.valid_manifest) if d.valid_manifest else None
    test = load_manifest(d.test_manifest) if d.test_manifest else None
    policy = SplitPolicy(d.policy, k=d.k, percent=d.percent)
    return [few_shot_sample(pool, policy, int(s), valid_pool, test) for s in d.split_seeds]


def obtain_backbone(cfg: ExperimentConfig, vocab: Vocab, log) -> DualEncoderParams:
    """Frozen backbone: explicit checkpoint, cached ``backbone.ckpt``, random init, or fresh pretraining."""
    pc = cfg.pretrain
    cached = cfg.out / "backbone.ckpt"
    if pc.random_backbone:
        params = DualEncoderParams.init(cfg.encoder, pc.seed)
    elif pc.backbone:
        params = load_params(cfg.encoder, pc.backbone)
    elif cached.exists():
        params = load_params(cfg.encoder, cached)
    else:
        params = pretrain_backbone(cfg, vocab, log)
    return freeze(params)


def pretrain_backbone(cfg: ExperimentConfig, vocab: Vocab, log) -> DualEncoderParams:
    pc = cfg.pretrain
    params = DualEncoderParams.init(cfg.encoder, pc.seed)
    pairs = gen_aligned_pairs(pc.pairs, pc.seed, vocab, cfg.encoder.max_text_len)
    log(f"pretraining backbone on {pc.pairs} pairs for {pc.epochs} epochs")
    res = contrastive_pretrain(params, pairs, epochs=pc.epochs, lr=pc.lr, seed=pc.seed, batch_size=pc.batch_size)
    save_params(params, cfg.out / "backbone.ckpt")
    _write_json(cfg.out / "pretrain.json",
                {"loss_curve": res.loss_curve, "retrieval_at_1": retrieval_at_1(params, pairs)})
    return params


def save_bank(path: Path, frozen: DualEncoderParams, bank: PromptBank) -> None:
    arrays = dict(frozen.arrays())
    arrays.update({f"bank.{k}": v for k, v in bank.arrays().items()})
    checkpoint.save(path, arrays)


def load_bank(path: Path, cfg: ExperimentConfig) -> tuple[DualEncoderParams, PromptBank]:
    if not path.exists():
        raise ValidationError(f"{path} not found; run `dmdp train` first")
    arrays = checkpoint.load(path)
    frozen = freeze(DualEncoderParams.from_arrays(cfg.encoder, {k: v for k, v in arrays.items()
                                                                if not k.startswith("bank.")}))
    bank = PromptBank.init(cfg.prompt, cfg.encoder, 0)
    bank.load_arrays(arrays, prefix="bank.")
    return frozen, bank


def bank_digest(bank: PromptBank) -> str:
    return checkpoint.digest(bank.arrays())


def write_meta(cfg: ExperimentConfig, command: str, **fingerprints) -> None:
    _write_json(cfg.out / "run_meta.json", {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "fingerprints": {k: v for k, v in fingerprints.items() if v is not None},
    })


# ----------------------------------------------------------------------------
# commands


def cmd_gen(cfg: ExperimentConfig, log) -> None:
    m = gen_synthetic(cfg.data.case, cfg.data.n, cfg.data.seed)
    save_manifest(m, cfg.out / "manifest.jsonl")
    default_vocab().save(cfg.out / "vocab.txt")
    log(f"wrote {len(m)} case-{cfg.data.case} samples to {cfg.out / 'manifest.jsonl'}")
    write_meta(cfg, "gen")


def cmd_split(cfg: ExperimentConfig, log) -> None:
    for seed, sp in zip(cfg.data.split_seeds, make_splits(cfg)):
        sp.save(cfg.out / "splits" / str(seed))
        log(f"split {seed}: {sp.descriptor()['counts']}")
    write_meta(cfg, "split")


def cmd_pretrain(cfg: ExperimentConfig, log) -> None:
    vocab = load_vocab(cfg)
    params = pretrain_backbone(cfg, vocab, log)
    log(f"backbone fingerprint {fingerprint(params)}")
    write_meta(cfg, "pretrain", backbone=fingerprint(params))


def cmd_train(cfg: ExperimentConfig, log) -> None:
    vocab = load_vocab(cfg)
    frozen = obtain_backbone(cfg, vocab, log)
    split = make_splits(cfg)[0]
    enc = cfg.encoder
    tr, va = (encode_manifest(m, vocab, enc.max_text_len, enc.image_size) for m in (split.train, split.valid))
    bank = PromptBank.init(cfg.prompt, enc, cfg.train.seed)
    result = train(frozen, bank, cfg.train, cfg.prompt, tr, va,
                   log=lambda r: log(f"epoch {r['epoch']:3d} loss {r['loss']:.4f} val_acc {r['val_acc']:.4f}"))
    save_bank(cfg.out / "bank.ckpt", frozen, result.best_bank)
    (cfg.out / "history.json").write_text(result.history_json())
    write_meta(cfg, "train", backbone=fingerprint(frozen), bank=bank_digest(result.best_bank))


def cmd_eval(cfg: ExperimentConfig, log) -> None:
    vocab = load_vocab(cfg)
    frozen, bank = load_bank(cfg.out / "bank.ckpt", cfg)
    enc = cfg.encoder
    split = make_splits(cfg)[0]
    te = encode_manifest(split.test, vocab, enc.max_text_len, enc.image_size)
    out = {"test": evaluate(frozen, bank, cfg.prompt, te).to_dict()}
    if cfg.data.targets:
        targets = {name: load_manifest(p) for name, p in sorted(cfg.data.targets.items())}
        out["targets"] = {k: m.to_dict() for k, m in analysis.cross_dataset_eval(frozen, bank, cfg.prompt,
                                                                                 vocab, targets).items()}
    _write_json(cfg.out / "metrics.json", out)
    log(f"test acc {out['test']['acc']:.4f} macro_f1 {out['test']['macro_f1']:.4f}")
    write_meta(cfg, "eval", backbone=fingerprint(frozen), bank=bank_digest(bank))


def cmd_ablate(cfg: ExperimentConfig, log) -> None:
    vocab = load_vocab(cfg)
    frozen = obtain_backbone(cfg, vocab, log)
    table = analysis.ablation_suite(frozen, vocab, make_splits(cfg), list(cfg.analysis.seeds), cfg.prompt,
                                    cfg.train, workers=cfg.analysis.workers)
    (cfg.out / "ablation.json").write_text(table.to_json())
    for row in table.rows:
        log(f"{row.variant.value:13s} " + (f"acc {row.report.mean.accuracy:.4f} ± {row.report.std.accuracy:.4f}"
                                           if row.report else f"failed: {row.error}"))
    write_meta(cfg, "ablate", backbone=fingerprint(frozen))


def cmd_sweep(cfg: ExperimentConfig, log) -> None:
    vocab = load_vocab(cfg)
    frozen = obtain_backbone(cfg, vocab, log)
    splits, seeds, a = make_splits(cfg), list(cfg.analysis.seeds), cfg.analysis
    depths = list(a.depths) or list(range(1, cfg.encoder.L + 1))
    for name, fn, values in (("depth", analysis.depth_sweep, depths),
                             ("length", analysis.length_sweep, list(a.lengths))):
        res = fn(values, frozen, vocab, cfg.prompt, cfg.train, splits, seeds, a.workers)
        (cfg.out / f"sweep_{name}.csv").write_text(res.to_csv())
        log(f"wrote sweep_{name}.csv ({len(values)} settings)")
    write_meta(cfg, "sweep", backbone=fingerprint(frozen))


def cmd_attn(cfg: ExperimentConfig, log) -> None:
    vocab = load_vocab(cfg)
    frozen, bank = load_bank(cfg.out / "bank.ckpt", cfg)
    test = make_splits(cfg)[0].test
    n = min(cfg.analysis.attn_samples, len(test))
    for i, sample in enumerate(test.samples[:n]):
        maps = analysis.extract_prompt_attention(frozen, bank, cfg.prompt, sample, vocab, cfg.analysis.per_head)
        analysis.export_attention(maps, cfg.encoder.grid, cfg.out / "attn", stem=f"sample{i:03d}")
    log(f"exported attention for {n} samples to {cfg.out / 'attn'}")
    write_meta(cfg, "attn", backbone=fingerprint(frozen), bank=bank_digest(bank))


HANDLERS = {
    "gen": cmd_gen, "split": cmd_split, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "sweep": cmd_sweep, "attn": cmd_attn,
}


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmdp", description="Gated modality-disentangled prompt tuning experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable (e.g. train.lr=0.02)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("--quiet", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    def log(msg: str) -> None:
        if not args.quiet:
            print(msg, file=sys.stderr)

    try:
        cfg = cfgmod.load(args.config, args.overrides)
        if args.dry_run:
            sys.stdout.write(cfg.to_json())
            return EXIT_OK
        cfg.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, log)
    except UsageError as exc:
        print(f"dmdp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ConfigurationError, DepthError, SamplingError) as exc:
        print(f"dmdp: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"dmdp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
