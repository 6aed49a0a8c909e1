import dataclasses
import os

import numpy as np
import pytest

from slukit import autodiff as ad
from slukit import trainer
from slukit.cli import main
from slukit.data import intent_label_set, load_manifest, prepare_examples, transcript_corpus
from slukit.errors import ConfigError, RunLockError, ValidationError
from slukit.models import SluModel, Vocabulary
from slukit.synth import default_task_specs, write_synth_dataset
from slukit.trainer import (
    MetricsRow,
    TrainConfig,
    load_train_config,
    parse_config_file,
    read_metrics,
    write_metrics,
)
from slukit.transfer import fingerprint_tensors, load_checkpoint

TINY_DIMS = dict(n_enc_layers=1, n_dec_layers=1, n_heads=2, d_k=8, d_v=8,
                 d_model=16, d_inner=32)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec_a, spec_b = default_task_specs(seed=0)
    train = write_synth_dataset(root / "train", dataclasses.replace(spec_b, seed=31), 16)
    valid = write_synth_dataset(root / "valid", dataclasses.replace(spec_b, seed=32), 8)
    return {"train": train, "valid": valid}


@pytest.fixture()
def run_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(trainer.RUN_DIR_ENV, str(tmp_path))
    return tmp_path


def tiny_tc(dataset, **kw):
    base = dict(
        train_manifest=str(dataset["train"]),
        epochs=2,
        batch_size=8,
        seed=3,
        **TINY_DIMS,
    )
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# config files


def test_config_file_values_comments_and_includes(tmp_path):
    base = tmp_path / "base.cfg"
    base.write_text("lr = 0.01\nepochs = 7\n# full-line comment\nseed = 1\n")
    top = tmp_path / "top.cfg"
    top.write_text("include = base.cfg\nseed = 9  # inline comment\n")
    values = parse_config_file(top)
    assert values == {"lr": "0.01", "epochs": "7", "seed": "9"}


def test_config_include_cycle_rejected(tmp_path):
    a, b = tmp_path / "a.cfg", tmp_path / "b.cfg"
    a.write_text("include = b.cfg\n")
    b.write_text("include = a.cfg\n")
    with pytest.raises(ConfigError, match="cycle"):
        parse_config_file(a)


def test_config_missing_file_and_bad_lines(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config_file(tmp_path / "nope.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs 7\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_file(bad)


def test_load_train_config_precedence(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("lr = 0.5\nepochs = 4\ntiming = true\n")
    tc = load_train_config(cfg, {"epochs": 11})
    assert tc.lr == 0.5 and tc.epochs == 11 and tc.timing is True
    assert tc.batch_size == 16  # untouched default


def test_load_train_config_rejects_unknown_and_untyped(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("learning_rate = 0.5\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        load_train_config(cfg)
    cfg.write_text("epochs = soon\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_train_config(cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lam=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(patience=-1)
    assert TrainConfig(policy="FIX").policy == "fix"


# ---------------------------------------------------------------------------
# metrics


def test_metrics_row_rejects_bad_values():
    good = dict(epoch=1, split="train", intent_accuracy=0.5, slu_loss=1.0,
                asr_loss=None, asr_loss_per_token=None, total_loss=1.0)
    MetricsRow(**good)
    with pytest.raises(ValidationError):
        MetricsRow(**{**good, "intent_accuracy": 1.5})
    with pytest.raises(ValidationError):
        MetricsRow(**{**good, "total_loss": float("nan")})
    with pytest.raises(ValidationError):
        MetricsRow(**{**good, "split": "tr,ain"})


def test_metrics_round_trip_and_empty_cells(tmp_path):
    rows = [
        MetricsRow(1, "train", 0.25, 2.0, 19.5, 2.4, 21.5, 0.0),
        MetricsRow(1, "valid", None, None, 3.25, 0.5, 3.25, 0.0),
    ]
    path = write_metrics(tmp_path / "m.csv", rows)
    text = path.read_text()
    assert text.splitlines()[0] == trainer.METRICS_HEADER
    assert ",,," in text.splitlines()[2]  # absent branches stay empty
    back = read_metrics(path)
    assert back == rows


# ---------------------------------------------------------------------------
# run directories and locking


def test_run_lock_excludes_second_holder(run_dir):
    with trainer.run_lock():
        assert (run_dir / trainer.LOCK_NAME).exists()
        with pytest.raises(RunLockError):
            with trainer.run_lock():
                pass
    assert not (run_dir / trainer.LOCK_NAME).exists()


def test_resolve_out_lands_in_run_dir(run_dir):
    out = trainer.resolve_out("sub/file.csv")
    assert out == run_dir / "sub" / "file.csv"
    assert out.parent.is_dir()


# ---------------------------------------------------------------------------
# training commands


def test_train_slu_writes_metrics_and_checkpoint(dataset, run_dir):
    tc = tiny_tc(dataset, valid_manifest=str(dataset["valid"]),
                 metrics_out="m.csv", checkpoint_out="ck.bin")
    rows, written = trainer.cmd_train_slu(tc)
    assert [r.split for r in rows] == ["train", "valid"] * 2
    assert all(r.asr_loss is None for r in rows)
    ckpt = load_checkpoint(written["checkpoint"])
    assert ckpt.metadata["kind"] == "slu"
    names = set(ckpt.tensors)
    assert any(n.startswith("encoder.") for n in names)
    got = read_metrics(written["metrics"])
    assert got == rows


def test_training_deterministic_across_runs(dataset, run_dir):
    outs = []
    for run in ("x", "y"):
        tc = tiny_tc(dataset, metrics_out=f"{run}.csv", checkpoint_out=f"{run}.bin")
        trainer.cmd_train_slu(tc)
        outs.append(
            (
                (run_dir / f"{run}.csv").read_bytes(),
                fingerprint_tensors(load_checkpoint(run_dir / f"{run}.bin").tensors),
            )
        )
    assert outs[0] == outs[1]


def test_pretrain_asr_requires_checkpoint_and_trains_decoder(dataset, run_dir):
    with pytest.raises(ConfigError, match="checkpoint_out"):
        trainer.cmd_pretrain_asr(tiny_tc(dataset))
    tc = tiny_tc(dataset, checkpoint_out="asr.bin", metrics_out="asr.csv")
    rows, written = trainer.cmd_pretrain_asr(tc)
    assert all(r.intent_accuracy is None and r.slu_loss is None for r in rows)
    assert rows[-1].asr_loss_per_token < rows[0].asr_loss_per_token
    names = set(load_checkpoint(written["checkpoint"]).tensors)
    assert any(n.startswith("encoder.") for n in names)
    assert any(n.startswith("decoder.") for n in names)


def test_multitask_lambda_zero_matches_slu_command(dataset, run_dir):
    tc0 = tiny_tc(dataset, metrics_out="slu.csv", checkpoint_out="slu.bin")
    trainer.cmd_train_slu(tc0)
    tc1 = tiny_tc(dataset, lam=0.0, metrics_out="mt.csv", checkpoint_out="mt.bin")
    trainer.cmd_train_multitask(tc1)
    slu_rows = read_metrics(run_dir / "slu.csv")
    mt_rows = read_metrics(run_dir / "mt.csv")
    for a, b in zip(slu_rows, mt_rows):
        assert (a.epoch, a.split) == (b.epoch, b.split)
        assert a.intent_accuracy == b.intent_accuracy
        assert a.slu_loss == b.slu_loss
        assert b.total_loss == b.slu_loss  # zero-weight branch adds exactly nothing
        assert a.total_loss == b.total_loss
    fp = [
        fingerprint_tensors(load_checkpoint(run_dir / n).tensors)
        for n in ("slu.bin", "mt.bin")
    ]
    assert fp[0] == fp[1]


def test_transfer_policies_through_commands(dataset, run_dir):
    src = tiny_tc(dataset, checkpoint_out="src.bin")
    trainer.cmd_pretrain_asr(src)
    src_ck = load_checkpoint(run_dir / "src.bin")
    enc_fp = fingerprint_tensors(src_ck.tensors, prefix="encoder.")

    fixed = tiny_tc(dataset, init_encoder=str(run_dir / "src.bin"), policy="fix",
                    checkpoint_out="fix.bin")
    trainer.cmd_train_slu(fixed)
    fix_ck = load_checkpoint(run_dir / "fix.bin")
    assert fingerprint_tensors(fix_ck.tensors, prefix="encoder.") == enc_fp
    assert all(not t.trainable for n, t in fix_ck.tensors.items() if n.startswith("encoder."))

    tuned = tiny_tc(dataset, init_encoder=str(run_dir / "src.bin"), policy="finetune",
                    checkpoint_out="tune.bin")
    trainer.cmd_train_slu(tuned)
    tune_ck = load_checkpoint(run_dir / "tune.bin")
    assert fingerprint_tensors(tune_ck.tensors, prefix="encoder.") != enc_fp


def test_policy_without_init_encoder_rejected(dataset, run_dir):
    with pytest.raises(ConfigError, match="init-encoder"):
        trainer.cmd_train_slu(tiny_tc(dataset, policy="fix"))


def test_fusion_requires_text_encoder_checkpoint(dataset, run_dir):
    with pytest.raises(ConfigError, match="text encoder"):
        trainer.cmd_train_fusion(tiny_tc(dataset))
    trainer.cmd_train_slu(tiny_tc(dataset, checkpoint_out="notte.bin"))
    with pytest.raises(ConfigError, match="not a text encoder"):
        trainer.cmd_train_fusion(
            tiny_tc(dataset, text_encoder=str(run_dir / "notte.bin"))
        )


def test_fusion_round_trip_keeps_text_side_frozen(dataset, run_dir):
    trainer.cmd_pretrain_textenc(tiny_tc(dataset, epochs=2, checkpoint_out="te.bin"))
    te_ck = load_checkpoint(run_dir / "te.bin")
    assert te_ck.metadata["kind"] == "textenc"
    te_fp = fingerprint_tensors(te_ck.tensors)

    tc = tiny_tc(dataset, text_encoder=str(run_dir / "te.bin"), lam=0.5,
                 metrics_out="fu.csv", checkpoint_out="fu.bin")
    rows, written = trainer.cmd_train_fusion(tc)
    assert rows[-1].asr_loss is not None
    fu_ck = load_checkpoint(written["checkpoint"])
    assert fu_ck.metadata["kind"] == "fusion"
    assert fingerprint_tensors(fu_ck.tensors, prefix="text_encoder.") == te_fp

    model, vocab, labels, md = trainer.build_from_checkpoint(written["checkpoint"])
    assert type(model).__name__ == "FusionModel"
    assert float(md["lam"]) == 0.5


# ---------------------------------------------------------------------------
# evaluation


def test_eval_side_effect_free_and_repeatable(dataset, run_dir):
    tc = tiny_tc(dataset, checkpoint_out="ck.bin")
    trainer.cmd_train_slu(tc)
    ck_path = run_dir / "ck.bin"
    before = ck_path.read_bytes()
    row1, rate1 = trainer.cmd_eval(ck_path, dataset["valid"], token_match=True)
    row2, rate2 = trainer.cmd_eval(ck_path, dataset["valid"], token_match=True)
    assert row1 == row2 and rate1 == rate2
    assert 0.0 <= rate1 <= 1.0
    assert ck_path.read_bytes() == before
    assert row1.split == "eval" and row1.epoch == 0


def test_untrained_model_near_chance_on_large_sample():
    spec_b = default_task_specs(seed=0)[1]
    spec = dataclasses.replace(spec_b, seed=900)
    from slukit.features import FeatureConfig, extract_features, Waveform
    from slukit.synth import synth_generate

    utts = synth_generate(spec, 1000)
    labels = sorted({u.intent for u in utts})
    ids = {n: i for i, n in enumerate(labels)}
    cfg = TrainConfig(**TINY_DIMS).model_config(24, len(labels))
    model = SluModel(ad.make_rng(123), cfg)
    feat_cfg = FeatureConfig()
    hits = 0
    for u in utts:
        feats = extract_features(Waveform(u.samples), feat_cfg).frames
        hits += int(model.predict_intent(ad.Tensor(feats)) == ids[u.intent])
    acc = hits / len(utts)
    assert 0.125 - 0.04 <= acc <= 0.125 + 0.04, f"untrained accuracy {acc}"


# ---------------------------------------------------------------------------
# CLI surface


def test_cli_error_line_format(dataset, run_dir, capsys):
    rc = main(["train-slu", "--train-manifest", "missing.jsonl"])
    out = capsys.readouterr()
    assert rc == 1
    err_lines = [l for l in out.err.splitlines() if l]
    assert len(err_lines) == 1
    assert err_lines[0].startswith("ERROR ConfigError: train manifest not found")


def test_cli_train_and_eval_round_trip(dataset, run_dir, capsys):
    rc = main([
        "train-slu",
        "--train-manifest", str(dataset["train"]),
        "--epochs", "2", "--batch-size", "8", "--seed", "3",
        "--n-enc-layers", "1", "--n-dec-layers", "1",
        "--d-model", "16", "--d-k", "8", "--d-v", "8", "--d-inner", "32",
        "--metrics-out", "m.csv", "--checkpoint-out", "ck.bin",
    ])
    assert rc == 0
    rc = main(["eval", "--checkpoint", str(run_dir / "ck.bin"),
               "--manifest", str(dataset["valid"])])
    assert rc == 0
    out = capsys.readouterr().out
    line = out.splitlines()[-1]
    assert line.startswith("0,eval,")


def test_cli_config_file_with_flag_override(dataset, run_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "train_manifest = {m}\nepochs = 1\nbatch_size = 8\nseed = 3\n"
        "n_enc_layers = 1\nn_dec_layers = 1\nd_model = 16\nd_k = 8\nd_v = 8\nd_inner = 32\n"
        "metrics_out = viafile.csv\n".format(m=dataset["train"])
    )
    rc = main(["train-slu", "--config", str(cfg), "--epochs", "2"])
    assert rc == 0
    rows = read_metrics(run_dir / "viafile.csv")
    assert rows[-1].epoch == 2  # the flag beat the file


def test_cli_synth_then_train_manifest_usable(tmp_path, run_dir, capsys):
    rc = main(["synth", "--out", str(tmp_path / "d"), "--language", "B",
               "--count", "6", "--seed", "55"])
    assert rc == 0
    manifest = capsys.readouterr().out.strip()
    entries = load_manifest(manifest)
    assert len(entries) == 6
    labels = intent_label_set(entries)
    vocab = Vocabulary.from_corpus(transcript_corpus(entries))
    examples = prepare_examples(entries, vocab, labels)
    assert all(e.feats.shape[1] == 320 for e in examples)


def test_cli_plot_writes_svg(dataset, run_dir, capsys):
    rows = [
        MetricsRow(1, "train", 0.5, 2.0, None, None, 2.0, 0.0),
        MetricsRow(2, "train", 0.75, 1.0, None, None, 1.0, 0.0),
    ]
    write_metrics(run_dir / "m.csv", rows)
    rc = main(["plot", "--metrics", str(run_dir / "m.csv"),
               "--out", str(run_dir / "m.svg")])
    assert rc == 0
    head = (run_dir / "m.svg").read_text()[:200]
    assert "<svg" in head or "svg" in head


def test_cli_lock_collision_reported(dataset, run_dir, capsys):
    (run_dir / trainer.LOCK_NAME).write_text("held\n")
    rc = main(["train-slu", "--train-manifest", str(dataset["train"])])
    assert rc == 1
    assert "ERROR RunLockError" in capsys.readouterr().err
