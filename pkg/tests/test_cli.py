import json

import pytest

from dmdp import cli
from dmdp import config as cfgmod
from dmdp.analysis import parse_pgm
from dmdp.data import load_manifest
from dmdp.errors import ValidationError

FAST = ["--set", "pretrain.pairs=64", "--set", "pretrain.epochs=2", "--set", "train.epochs=3",
        "--set", "train.lr=0.02", "--set", "data.n=200", "--set", "data.k=5", "--quiet"]


def run(tmp_path, *args):
    return cli.main([*args, "--set", f"output_dir={tmp_path}"])


def test_dry_run_roundtrip(capsys, tmp_path):
    assert run(tmp_path, "train", "--dry-run", "--set", "train.lr=0.02", "--set", "prompt.variant=IPT") == 0
    printed = capsys.readouterr().out
    cfg = cfgmod.resolve(json.loads(printed), env={})
    assert cfg.to_json() == printed
    assert cfg.train.lr == 0.02 and cfg.prompt.variant.value == "IPT"


def test_default_hyperparameters_cap_depth(capsys, tmp_path):
    assert run(tmp_path, "train", "--dry-run") == 0
    d = json.loads(capsys.readouterr().out)
    assert d["prompt"]["c"] == 2 and d["prompt"]["S"] == d["encoder"]["L"] == 4
    assert d["train"]["batch_size"] == 4 and d["train"]["lr"] == 0.0035
    assert d["train"]["warmup_lr"] == 1e-5 and d["train"]["epochs"] == 100


def test_env_seed_overrides(monkeypatch):
    monkeypatch.setenv("DMDP_SEED", "17")
    assert cfgmod.load(None, []).train.seed == 17
    monkeypatch.setenv("DMDP_SEED", "x")
    with pytest.raises(ValidationError):
        cfgmod.load(None, [])


def test_unknown_key_is_usage_error(capsys, tmp_path):
    assert run(tmp_path, "gen", "--set", "train.nope=1") == 2
    err = capsys.readouterr().err
    assert "train.nope" in err and "train.lr" in err


def test_validation_exit_code(capsys, tmp_path):
    assert run(tmp_path, "gen", "--set", "data.manifest=/no/such/file.jsonl") == 3
    assert "data.manifest" in capsys.readouterr().err
    assert run(tmp_path, "train", "--set", "prompt.c=0") == 3
    assert run(tmp_path, "train", "--set", "data.policy=random") == 3


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{oops")
    assert cli.main(["gen", "--config", str(p)]) == 3
    p.write_text(json.dumps({"surprise": {}}))
    assert cli.main(["gen", "--config", str(p)]) == 2


def test_config_file_then_overrides(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"lr": 0.5, "epochs": 7}}))
    assert cli.main(["train", "--config", str(p), "--set", "train.lr=0.1", "--dry-run"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["train"]["lr"] == 0.1 and d["train"]["epochs"] == 7


def test_gen_writes_manifest(tmp_path):
    assert run(tmp_path, "gen", "--set", "data.case=1", "--set", "data.n=512", "--quiet") == 0
    m = load_manifest(tmp_path / "manifest.jsonl")
    assert len(m) == 512 and all(s.id.startswith("case1-") for s in m.samples)
    assert json.loads((tmp_path / "run_meta.json").read_text())["command"] == "gen"


def test_split_writes_files(tmp_path):
    assert run(tmp_path, "split", *FAST, "--set", "data.split_seeds=[0,3]") == 0
    for seed in ("0", "3"):
        d = tmp_path / "splits" / seed
        assert len(load_manifest(d / "train.jsonl")) == 10
        assert json.loads((d / "split.json").read_text())["seed"] == int(seed)


def test_pipeline_train_eval_attn(tmp_path):
    assert run(tmp_path, "pretrain", *FAST) == 0
    assert (tmp_path / "backbone.ckpt").exists()
    assert run(tmp_path, "train", *FAST) == 0
    meta = json.loads((tmp_path / "run_meta.json").read_text())
    assert set(meta["fingerprints"]) == {"backbone", "bank"} and meta["seed"] == 0
    assert run(tmp_path, "eval", *FAST) == 0
    first = (tmp_path / "metrics.json").read_bytes()
    assert run(tmp_path, "eval", *FAST) == 0
    assert (tmp_path / "metrics.json").read_bytes() == first
    assert "acc" in json.loads(first)["test"]
    assert run(tmp_path, "attn", *FAST, "--set", "analysis.attn_samples=2") == 0
    pgms = sorted((tmp_path / "attn").glob("*.pgm"))
    assert len(pgms) == 2 * 2 * 2
    for p in pgms:
        parse_pgm(p.read_text())


def test_eval_without_bank_is_validation_error(tmp_path):
    assert run(tmp_path, "eval", *FAST) == 3


def test_eval_cross_dataset_targets(tmp_path):
    assert run(tmp_path, "gen", "--set", "data.case=3", "--set", "data.n=20", "--quiet") == 0
    target = tmp_path / "t.jsonl"
    (tmp_path / "manifest.jsonl").rename(target)
    assert run(tmp_path, "train", *FAST, "--set", "pretrain.random_backbone=true") == 0
    assert run(tmp_path, "eval", *FAST, "--set", "pretrain.random_backbone=true",
               "--set", "data.targets=" + json.dumps({"other": str(target)})) == 0
    out = json.loads((tmp_path / "metrics.json").read_text())
    assert sum(map(sum, out["targets"]["other"]["confusion"])) == 20


def test_ablate_and_sweep_outputs(tmp_path):
    common = [*FAST, "--set", "pretrain.random_backbone=true", "--set", "analysis.seeds=[0,1]",
              "--set", "train.epochs=2", "--set", "encoder.L=2", "--set", "analysis.lengths=[1,2]"]
    assert run(tmp_path, "ablate", *common) == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == ["DMDP", "UPT", "IPT", "NO_GATE", "NO_WEIGHTMOD", "V_TO_T"]
    assert run(tmp_path, "sweep", *common) == 0
    assert (tmp_path / "sweep_depth.csv").read_text().splitlines()[0] == "setting,acc_mean,acc_std,f1_mean,f1_std"
    assert len((tmp_path / "sweep_length.csv").read_text().splitlines()) == 3
