"""Command-line surface: the full gen-corpus -> train -> decode -> score
pipeline, config files with overrides, and exit codes."""

import json
import os

import pytest
from click.testing import CliRunner

from fnt.cli import main
from fnt.config import apply_overrides, empty_tree, parse_config_file
from fnt.errors import ValidationError

MICRO_CORPUS = [
    "corpus.vocab_size = 10",
    "corpus.sessions = 4",
    "corpus.dev_sessions = 2",
    "corpus.test_sessions = 2",
    "corpus.utterances_per_session = 3",
    "corpus.tokens_per_utt = [2, 3]",
    "corpus.frames_per_token = [4, 5]",
    "corpus.feature_dim = 6",
    "corpus.confusable_pairs = 1",
    "corpus.entity_tokens = 2",
    "corpus.topics = 2",
]

MICRO_MODEL = [
    "model.model_dim = 8",
    "model.heads = 2",
    "model.ffn_dim = 16",
    "model.encoder_layers = 1",
    "model.blank_hidden = 8",
    "model.joint_dim = 8",
    "model.predictor_dim = 8",
    "model.predictor_heads = 2",
    "model.predictor_ffn_dim = 16",
    "model.predictor_layers = 1",
    "train.steps = 3",
    "train.batch_size = 2",
    "train.augment = false",
    "train.warmup_steps = 2",
]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workdir(tmp_path, runner):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("\n".join(MICRO_CORPUS + MICRO_MODEL) + "\n")
    out = runner.invoke(main, ["gen-corpus", "--seed", "3", "--out", str(tmp_path / "corpus"),
                               "--config", str(cfg)])
    assert out.exit_code == 0, out.output
    return tmp_path


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("model.vocab_size = 12   # comment\ntrain.lr = 0.002\ncorpus.tokens_per_utt = [2, 4]\ndecode.mode = hyp\n")
    tree = parse_config_file(str(cfg))
    assert tree["model"]["vocab_size"] == 12
    assert tree["train"]["lr"] == 0.002
    assert tree["corpus"]["tokens_per_utt"] == [2, 4]
    assert tree["decode"]["mode"] == "hyp"
    tree = apply_overrides(tree, ["train.lr=0.01", "decode.beam=4"])
    assert tree["train"]["lr"] == 0.01
    assert tree["decode"]["beam"] == 4
    with pytest.raises(ValidationError):
        apply_overrides(empty_tree(), ["nosection.key=1"])
    with pytest.raises(ValidationError):
        apply_overrides(empty_tree(), ["oops"])


def test_gen_corpus_requires_seed(runner, tmp_path):
    out = runner.invoke(main, ["gen-corpus", "--out", str(tmp_path / "c")])
    assert out.exit_code == 2


def test_gen_corpus_validation_exit_code(runner, tmp_path):
    out = runner.invoke(main, ["gen-corpus", "--seed", "1", "--out", str(tmp_path / "c"),
                               "--set", "corpus.vocab_size=4"])
    assert out.exit_code == 2
    assert "error" in out.output


def test_full_pipeline(runner, workdir):
    cfg = str(workdir / "run.cfg")
    corpus = str(workdir / "corpus")
    ckpt = str(workdir / "model.lfck")
    metrics = str(workdir / "metrics.jsonl")

    out = runner.invoke(main, ["train", "--seed", "5", "--corpus", corpus, "--out", ckpt,
                               "--metrics", metrics, "--config", cfg])
    assert out.exit_code == 0, out.output
    assert os.path.exists(ckpt)
    lines = [json.loads(l) for l in open(metrics)]
    assert len(lines) == 3 and "loss_total" in lines[0]

    hyps = str(workdir / "hyps.tsv")
    out = runner.invoke(main, ["decode", "--ckpt", ckpt, "--corpus", corpus, "--split", "test",
                               "--out", hyps, "--config", cfg, "--set", "decode.mode=hyp",
                               "--set", "decode.beam=2"])
    assert out.exit_code == 0, out.output
    assert os.path.exists(hyps)

    out = runner.invoke(main, ["score", "--corpus", corpus, "--split", "test", "--hyps", hyps])
    assert out.exit_code == 0, out.output
    report = json.loads(out.output)
    assert "corpus" in report and "wer" in report["corpus"]
    assert report["corpus"]["ref_len"] > 0


def test_train_resume_matches_uninterrupted(runner, workdir):
    cfg = str(workdir / "run.cfg")
    corpus = str(workdir / "corpus")

    m_full = str(workdir / "full.jsonl")
    out = runner.invoke(main, ["train", "--seed", "6", "--corpus", corpus,
                               "--out", str(workdir / "full.lfck"), "--metrics", m_full,
                               "--config", cfg, "--set", "train.steps=6"])
    assert out.exit_code == 0, out.output

    m_ab = str(workdir / "ab.jsonl")
    out = runner.invoke(main, ["train", "--seed", "6", "--corpus", corpus,
                               "--out", str(workdir / "a.lfck"), "--metrics", m_ab,
                               "--config", cfg, "--set", "train.steps=3"])
    assert out.exit_code == 0, out.output
    out = runner.invoke(main, ["train", "--seed", "6", "--corpus", corpus,
                               "--out", str(workdir / "b.lfck"), "--metrics", m_ab,
                               "--config", cfg, "--set", "train.steps=6",
                               "--resume", str(workdir / "a.lfck")])
    assert out.exit_code == 0, out.output
    full = [json.loads(l)["loss_total"] for l in open(m_full)]
    ab = [json.loads(l)["loss_total"] for l in open(m_ab)]
    assert ab == full


def test_lm_pretrain_and_init(runner, workdir):
    cfg = str(workdir / "run.cfg")
    corpus = str(workdir / "corpus")
    lm_ckpt = str(workdir / "lm.lfck")
    out = runner.invoke(main, ["lm-pretrain", "--seed", "7", "--corpus", corpus,
                               "--out", lm_ckpt, "--config", cfg, "--set", "train.steps=5"])
    assert out.exit_code == 0, out.output
    out = runner.invoke(main, ["train", "--seed", "8", "--corpus", corpus,
                               "--out", str(workdir / "init.lfck"), "--config", cfg,
                               "--init-predictor", lm_ckpt])
    assert out.exit_code == 0, out.output
    assert "predictor parameters" in out.output


def test_decode_gt_vs_hyp_write_mode_column(runner, workdir):
    cfg = str(workdir / "run.cfg")
    corpus = str(workdir / "corpus")
    ckpt = str(workdir / "m.lfck")
    out = runner.invoke(main, ["train", "--seed", "9", "--corpus", corpus, "--out", ckpt,
                               "--config", cfg])
    assert out.exit_code == 0, out.output
    hyps = str(workdir / "h.tsv")
    out = runner.invoke(main, ["decode", "--ckpt", ckpt, "--corpus", corpus, "--out", hyps,
                               "--config", cfg, "--set", "decode.mode=gt", "--set", "decode.n_text=2"])
    assert out.exit_code == 0, out.output
    modes = {line.split("\t")[4].strip() for line in open(hyps)}
    assert modes == {"gt"}


def test_grad_check_command(runner):
    out = runner.invoke(main, ["grad-check", "--seed", "0"])
    assert out.exit_code == 0, out.output
    assert "worst" in out.output


def test_oracle_check_command(runner):
    out = runner.invoke(main, ["oracle-check", "--seed", "0", "--cases", "60"])
    assert out.exit_code == 0, out.output
    assert "lattice" in out.output and "corpus" in out.output


def test_score_missing_hypotheses_is_validation_error(runner, workdir, tmp_path):
    corpus = str(workdir / "corpus")
    bad = tmp_path / "empty.tsv"
    bad.write_text("")
    out = runner.invoke(main, ["score", "--corpus", corpus, "--split", "test", "--hyps", str(bad)])
    assert out.exit_code == 2
