"""Command-line surface.

Commands: gen-corpus, train, lm-pretrain, decode, score, grad-check,
oracle-check. A single key=value config file (see fnt.config) plus
repeatable --set overrides configure everything; --seed is mandatory for
train and gen-corpus. Exit codes: 0 success, 2 validation error,
3 numerical divergence.
"""

from __future__ import annotations

import json
import os
import sys

import click


def _thread_env(single):
    # must run before numpy is imported (commands import lazily)
    if single:
        n = os.environ.get("FNT_THREADS", "1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _load_tree(config, overrides):
    from . import config as cfgmod

    tree = cfgmod.parse_config_file(config) if config else cfgmod.empty_tree()
    return cfgmod.apply_overrides(tree, overrides)


def _fail_validation(exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(2)


def _run(fn):
    from .errors import DivergenceError, FntError

    try:
        fn()
    except DivergenceError as exc:
        click.echo(f"divergence: {exc}", err=True)
        sys.exit(3)
    except FntError as exc:
        _fail_validation(exc)


def _model_section_with_corpus_defaults(tree, corpus_dir):
    from . import corpus as cp

    section = dict(tree["model"])
    if corpus_dir and os.path.exists(os.path.join(corpus_dir, "corpus.json")):
        spec = cp.corpus_spec_of(corpus_dir)
        section.setdefault("vocab_size", spec.vocab_size)
        section.setdefault("feature_dim", spec.feature_dim)
    return section


@click.group()
@click.option("--single-thread/--no-single-thread", default=True,
              help="pin BLAS to one thread for bit-deterministic runs (default on)")
def main(single_thread):
    _thread_env(single_thread)


@main.command("gen-corpus")
@click.option("--seed", type=int, required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True)
@click.option("--text-only", is_flag=True, default=False)
def gen_corpus_cmd(seed, out_dir, config, overrides, text_only):
    """Generate a synthetic session corpus (features + manifests)."""

    def body():
        from . import corpus as cp

        tree = _load_tree(config, overrides)
        section = dict(tree["corpus"])
        section["seed"] = seed
        spec = cp.CorpusSpec.from_dict(section)
        paths = cp.gen_corpus(spec, out_dir, text_only=text_only)
        click.echo(json.dumps({"out": out_dir, "manifests": paths}, sort_keys=True))

    _run(body)


@main.command("train")
@click.option("--seed", type=int, required=True)
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "ckpt_path", required=True, type=click.Path())
@click.option("--metrics", "metrics_path", type=click.Path(), default=None)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True)
@click.option("--resume", type=click.Path(exists=True), default=None)
@click.option("--init-predictor", type=click.Path(exists=True), default=None)
@click.option("--context-table", type=click.Path(exists=True), default=None)
def train_cmd(seed, corpus_dir, ckpt_path, metrics_path, config, overrides, resume,
              init_predictor, context_table):
    """Train a model on a generated corpus; writes checkpoint + metrics log."""

    def body():
        from . import checkpoint as ck
        from . import corpus as cp
        from . import longform as lf
        from . import tensor as tt
        from . import training as tr
        from .model import ModelConfig, build_model

        tree = _load_tree(config, overrides)
        train_section = dict(tree["train"])
        train_section["seed"] = seed
        tc = tr.TrainConfig.from_dict(train_section).validate()
        tt.set_default_dtype(tc.precision)

        mcfg = ModelConfig.from_dict(_model_section_with_corpus_defaults(tree, corpus_dir))
        model = build_model(mcfg, seed)
        if context_table:
            model.attach_context_table(lf.read_context_table(context_table))
        if init_predictor:
            names = tr.load_predictor_weights(model, init_predictor)
            click.echo(f"loaded {len(names)} predictor parameters from {init_predictor}")
        records = cp.load_split(corpus_dir, "train")
        items = tr.build_train_items(records)
        metrics = tr.MetricsLog(metrics_path)
        resume_state = ck.load_checkpoint(resume) if resume else None
        tr.train(model, items, tc, metrics=metrics, ckpt_path=ckpt_path, resume=resume_state)
        click.echo(json.dumps({"checkpoint": ckpt_path, "steps": tc.steps}, sort_keys=True))

    _run(body)


@main.command("lm-pretrain")
@click.option("--seed", type=int, required=True)
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "ckpt_path", required=True, type=click.Path())
@click.option("--metrics", "metrics_path", type=click.Path(), default=None)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True)
def lm_pretrain_cmd(seed, corpus_dir, ckpt_path, metrics_path, config, overrides):
    """Pretrain the vocabulary predictor as an LM on text-only sessions."""

    def body():
        from . import corpus as cp
        from . import tensor as tt
        from . import training as tr
        from .model import ModelConfig, build_model

        tree = _load_tree(config, overrides)
        train_section = dict(tree["train"])
        train_section["seed"] = seed
        tc = tr.TrainConfig.from_dict(train_section).validate()
        tt.set_default_dtype(tc.precision)
        mcfg = ModelConfig.from_dict(_model_section_with_corpus_defaults(tree, corpus_dir))
        model = build_model(mcfg, seed)
        records = cp.load_split(corpus_dir, "train", with_features=False)
        seqs = [r.tokens for r in records if r.tokens]
        spec = cp.corpus_spec_of(corpus_dir)
        bad = [t for s in seqs for t in s if t < 1 or t > mcfg.vocab_size]
        if bad or spec.vocab_size != mcfg.vocab_size:
            raise tr.ValidationError(
                f"vocabulary mismatch: corpus V={spec.vocab_size}, model V={mcfg.vocab_size}"
            )
        metrics = tr.MetricsLog(metrics_path)
        tr.lm_pretrain(model, seqs, tc, metrics=metrics, ckpt_path=ckpt_path)
        click.echo(json.dumps({"checkpoint": ckpt_path, "sequences": len(seqs)}, sort_keys=True))

    _run(body)


@main.command("decode")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["train", "dev", "test"]))
@click.option("--out", "hyp_path", required=True, type=click.Path())
@click.option("--metrics", "metrics_path", type=click.Path(), default=None)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True)
@click.option("--context-table", type=click.Path(exists=True), default=None)
def decode_cmd(ckpt_path, corpus_dir, split, hyp_path, metrics_path, config, overrides, context_table):
    """Session-level decoding with gt or hyp history; writes a hypothesis file."""

    def body():
        from . import corpus as cp
        from . import decoding as dec
        from . import longform as lf
        from . import tensor as tt
        from . import training as tr

        tree = _load_tree(config, overrides)
        d = tree["decode"]
        mode = d.get("mode", "gt")
        n_text = int(d.get("n_text", 0))
        n_speech = int(d.get("n_speech", 0))
        beam = int(d.get("beam", 1))
        max_sym = int(d.get("max_symbols_per_frame", dec.MAX_SYMBOLS_PER_FRAME))
        tt.set_default_dtype("float32")
        model, _ = tr.load_model_from_checkpoint(ckpt_path)
        if context_table:
            model.attach_context_table(lf.read_context_table(context_table))
        records = cp.load_split(corpus_dir, split)
        sessions = cp.group_sessions(records)
        metrics = tr.MetricsLog(metrics_path)
        with open(hyp_path, "w") as f:
            for sid, utts in sessions.items():
                hyps = dec.session_decode(model, utts, mode, n_text=n_text, n_speech=n_speech,
                                          beam=beam, max_symbols_per_frame=max_sym)
                for hyp in hyps:
                    toks = " ".join(str(t) for t in hyp.tokens)
                    f.write(f"{sid}\t{hyp.utt_index}\t{toks}\t{hyp.log_score:.6f}\t{mode}\n")
                    metrics.write(utt=f"{sid}:{hyp.utt_index}", mode=mode, n_text=n_text,
                                  n_speech=n_speech, beam=beam, log_score=hyp.log_score,
                                  n_tokens=len(hyp.tokens))
        click.echo(json.dumps({"hyps": hyp_path, "utterances": len(records)}, sort_keys=True))

    _run(body)


@main.command("score")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["train", "dev", "test"]))
@click.option("--hyps", "hyp_path", required=True, type=click.Path(exists=True))
@click.option("--metrics", "metrics_path", type=click.Path(), default=None)
def score_cmd(corpus_dir, split, hyp_path, metrics_path):
    """Score a hypothesis file against the reference manifest (token WER)."""

    def body():
        from . import corpus as cp
        from . import training as tr
        from . import wer as wr
        from .errors import ValidationError

        records = cp.load_split(corpus_dir, split, with_features=False)
        refs = {(r.session_id, r.utt_index): r.tokens for r in records}
        hyps = {}
        with open(hyp_path) as f:
            for line in f:
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 3:
                    continue
                sid, idx, toks = parts[0], int(parts[1]), parts[2]
                hyps[(sid, idx)] = [int(t) for t in toks.split()] if toks else []
        missing = set(refs) - set(hyps)
        if missing:
            raise ValidationError(f"hypotheses missing for {len(missing)} utterances")
        metrics = tr.MetricsLog(metrics_path)
        per_session = {}
        total = wr.WerReport()
        for (sid, idx), ref in sorted(refs.items()):
            rep = wr.wer(ref, hyps[(sid, idx)])
            per_session[sid] = per_session.get(sid, wr.WerReport()) + rep
            total = total + rep
            metrics.write(utt=f"{sid}:{idx}", wer=rep.wer, errors=rep.errors, ref_len=rep.ref_len)
        out = {"corpus": total.as_dict(),
               "per_session": {sid: r.as_dict() for sid, r in sorted(per_session.items())}}
        click.echo(json.dumps(out, sort_keys=True))

    _run(body)


@main.command("grad-check")
@click.option("--seed", type=int, default=0)
def grad_check_cmd(seed):
    """64-bit finite-difference verification of every block and the micro-model."""

    def body():
        from .verification import gradient_suite

        report = gradient_suite(seed)
        worst = max(report.values())
        for name, err in report.items():
            click.echo(f"{name:32s} max rel err {err:.3e}")
        click.echo(f"worst: {worst:.3e} (threshold 1e-4)")
        if worst > 1e-4:
            sys.exit(2)

    _run(body)


@main.command("oracle-check")
@click.option("--seed", type=int, default=0)
@click.option("--cases", type=int, default=500)
def oracle_check_cmd(seed, cases):
    """Lattice losses vs brute-force enumeration; corpus history oracles."""

    def body():
        from .verification import corpus_oracle_suite, lattice_oracle_suite

        lat = lattice_oracle_suite(seed, cases)
        click.echo(json.dumps({"lattice": lat}, sort_keys=True))
        if lat["transducer_max_abs_diff"] > 1e-6 or lat["ctc_max_abs_diff"] > 1e-6:
            sys.exit(2)
        cor = corpus_oracle_suite(seed)
        click.echo(json.dumps({"corpus": cor}, sort_keys=True))
        if not cor["aware_below_blind"] or not cor["entropy_drops"]:
            sys.exit(2)

    _run(body)


if __name__ == "__main__":
    main()
