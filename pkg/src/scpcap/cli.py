"""Command-line entry point: ``scpcap <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Logs go to stderr,
machine-readable results to stdout or the ``--out`` file.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

from . import checkpoint
from .captioner import Captioner, DecodeMode, ModelConfig, generate, parse_value
from .corpus import (DEFAULT_THRESHOLD, DEFAULT_WINDOW, ConceptVocabulary, PmiLexicon,
                     Vocabulary, build_lexicon, count_cooccurrence, load_corpus)
from .gradcheck import SUITES, run_suites
from .harness import (AblationSettings, SyntheticSpec, TrainingError, build_resources, config_for,
                      evaluate, format_ablation, format_log, generate_dataset, load_jsonl,
                      make_samples, parse_arm, run_ablation, train)

log = logging.getLogger("scpcap")

MODEL_FILES = ("model.ckpt", "config.txt", "vocab.txt", "concepts.txt", "lexicon.tsv")
# derived from the training data unless given explicitly
DATA_FIELDS = ("vocab_size", "concept_vocab_size", "feature_dim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _bool(raw):
    return parse_value("bool", raw)


def _add_model_flags(p, skip=("seed",)):
    g = p.add_argument_group("model (ModelConfig fields)")
    for f in dataclasses.fields(ModelConfig):
        if f.name in skip:
            continue
        typ = f.type if isinstance(f.type, str) else f.type.__name__
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        g.add_argument(*names, dest=f.name, type=_bool if typ == "bool" else {"int": int, "float": float,
                                                                               "str": str}[typ],
                       default=None, metavar=typ.upper())


def _add_spec_flags(p):
    g = p.add_argument_group("synthetic data")
    for f in dataclasses.fields(SyntheticSpec):
        if f.name == "seed":
            continue
        names = [f"--{f.name}"] + ([f"--{f.name.replace('_', '-')}"] if "_" in f.name else [])
        g.add_argument(*names, dest=f.name, type=type(f.default), default=f.default)


def _flag(p, *names, **kw):
    # every underscore flag also answers to its dashed spelling
    extra = [n.replace("_", "-") for n in names if "_" in n]
    p.add_argument(*names, *extra, **kw)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="key=value file; flags take precedence")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--threads", type=int, default=1)

    parser = _Parser(prog="scpcap", description="Structured-concept captioning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-lexicon", parents=[common], help="PMI lexicon from a caption corpus")
    p.add_argument("--corpus", required=True, help="one caption per line")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as JSONL")
    _add_spec_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus-out", dest="corpus_out", default=None, help="also write captions as text")

    p = sub.add_parser("train", parents=[common], help="train a captioner")
    p.add_argument("--data", required=True, help="JSONL with features and caption")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    _flag(p, "--batch_size", dest="batch_size", type=int, default=32)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    _flag(p, "--min_freq", dest="min_freq", type=int, default=1)
    _add_model_flags(p)

    for name, help_ in (("evaluate", "score a trained model"), ("generate", "caption features")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--model", required=True, help="directory written by train")
        p.add_argument("--data", required=True)
        if name == "generate":
            p.add_argument("--decode", choices=[m.value for m in DecodeMode], default="greedy")
            _flag(p, "--beam_size", dest="beam_size", type=int, default=None)
            _flag(p, "--max_len", dest="max_len", type=int, default=None)
        p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--all", action="store_true", help="run every registered suite")
    p.add_argument("--suite", action="append", choices=sorted(SUITES), default=None)

    p = sub.add_parser("ablate", parents=[common], help="train and compare ablation arms")
    p.add_argument("--arms", default="baseline,cp,cp_wgcn",
                   help="comma list: baseline, cp, cp_wgcn, random, one_for_all, mlp, threshold-X")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, counted from --seed")
    p.add_argument("--epochs", type=int, default=AblationSettings.epochs)
    p.add_argument("--lr", type=float, default=AblationSettings.lr)
    _flag(p, "--batch_size", dest="batch_size", type=int, default=AblationSettings.batch_size)
    _flag(p, "--n_eval", dest="n_eval", type=int, default=AblationSettings.n_eval)
    p.add_argument("--out", default=None, help="TSV report path (stdout if omitted)")
    _add_spec_flags(p)
    _add_model_flags(p, skip=("seed",) + DATA_FIELDS)
    return parser


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _read_config(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{n}: expected key=value")
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    path = pre.parse_known_args(argv)[0].config
    command = next((a for a in argv if a in COMMANDS), None)
    if path is not None and command is not None:
        try:
            values = _read_config(path)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(actions) - {"config", "help"})
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        for key, raw in values.items():
            action = actions[key]
            action.required = False
            # string defaults go through the action's type conversion; flags still win
            try:
                action.default = _bool(raw) if action.nargs == 0 else raw
            except ValueError as exc:
                raise UsageError(f"{path}: {key}: {exc}") from None
    return parser.parse_args(argv)


def _model_overrides(args):
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(ModelConfig)
            if f.name != "seed" and getattr(args, f.name, None) is not None}


def _check_positive(**values):
    for name, v in values.items():
        if v is not None and v < 1:
            raise UsageError(f"--{name} must be >= 1")


def _write_text(path, text):
    checkpoint.atomic_write(path, text, "w")


def _emit(args, text):
    if getattr(args, "out", None):
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_build_lexicon(args):
    _check_positive(window=args.window)
    sentences = load_corpus(args.corpus)
    table = count_cooccurrence(sentences, args.window)
    lexicon = build_lexicon(table, args.threshold)
    _write_text(args.out, lexicon.to_text())
    log.info("%d tokens, %d pairs, %d lexicon entries", table.total_tokens, table.total_pairs, len(lexicon))


def cmd_gen_data(args):
    spec = SyntheticSpec(**{f.name: getattr(args, f.name) for f in dataclasses.fields(SyntheticSpec)
                            if f.name != "seed"}, seed=args.seed)
    ds = generate_dataset(spec)
    _write_text(args.out, ds.to_jsonl())
    if args.corpus_out:
        _write_text(args.corpus_out, "".join(c + "\n" for c in ds.corpus))
    log.info("wrote %d samples", len(ds.records))


def _config(args, resources, samples):
    overrides = _model_overrides(args)
    given = {k: overrides.pop(k) for k in DATA_FIELDS if k in overrides}
    cfg = config_for(resources, samples, **overrides, seed=args.seed)
    for k, v in given.items():
        if v != getattr(cfg, k):
            raise UsageError(f"--{k}={v} does not match the data ({getattr(cfg, k)})")
    try:
        return cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    _check_positive(epochs=args.epochs, batch_size=args.batch_size, window=args.window,
                    min_freq=args.min_freq)
    if args.lr <= 0:
        raise UsageError("--lr must be > 0")
    records = load_jsonl(args.data)
    if not records:
        raise ValueError(f"{args.data}: no samples")
    res = build_resources([c for _, c in records], args.window, args.threshold, args.min_freq)
    probe = make_samples(records[:1], res.vocab, res.cv)
    cfg = _config(args, res, probe)
    samples = make_samples(records, res.vocab, res.cv, cfg.max_caption_len)

    model = Captioner(cfg, res.cv.concept_ids)
    t0 = time.perf_counter()
    rows = train(model, samples, res.lexicon, args.epochs, args.lr, args.optimizer,
                 args.batch_size, seed=args.seed)
    log.info("trained %d epochs in %.1fs", len(rows), time.perf_counter() - t0)

    os.makedirs(args.out, exist_ok=True)
    checkpoint.save_module(model, os.path.join(args.out, "model.ckpt"))
    _write_text(os.path.join(args.out, "config.txt"), cfg.to_text())
    _write_text(os.path.join(args.out, "vocab.txt"), res.vocab.to_text())
    _write_text(os.path.join(args.out, "concepts.txt"), "".join(w + "\n" for w in res.cv.words))
    _write_text(os.path.join(args.out, "lexicon.tsv"), res.lexicon.to_text())
    _write_text(os.path.join(args.out, "train_log.csv"), format_log(rows))


def load_model_dir(path):
    """(model, vocab, concept vocab, lexicon) from a directory written by ``train``."""
    missing = [f for f in MODEL_FILES if not os.path.exists(os.path.join(path, f))]
    if missing:
        raise FileNotFoundError(f"{path}: missing {', '.join(missing)}")
    with open(os.path.join(path, "config.txt"), encoding="utf-8") as fh:
        cfg = ModelConfig.from_text(fh.read()).validate()
    vocab = Vocabulary.load(os.path.join(path, "vocab.txt"))
    with open(os.path.join(path, "concepts.txt"), encoding="utf-8") as fh:
        words = [w for w in fh.read().split("\n") if w]
    cv = ConceptVocabulary(tuple(sorted(vocab.index[w] for w in words)), 1, vocab)
    lexicon = PmiLexicon.from_tsv(os.path.join(path, "lexicon.tsv"), vocab)
    model = Captioner(cfg, cv.concept_ids)
    checkpoint.load_module(model, os.path.join(path, "model.ckpt"))
    return model, vocab, cv, lexicon


def cmd_evaluate(args):
    model, vocab, cv, lexicon = load_model_dir(args.model)
    samples = make_samples(load_jsonl(args.data), vocab, cv, model.cfg.max_caption_len)
    report = evaluate(model, samples, lexicon)
    _emit(args, json.dumps(dataclasses.asdict(report), sort_keys=True) + "\n")


def cmd_generate(args):
    _check_positive(beam_size=args.beam_size, max_len=args.max_len)
    model, vocab, _, lexicon = load_model_dir(args.model)
    mode = DecodeMode(args.decode)
    lines = []
    for feats, _ in load_jsonl(args.data):
        ids = generate(feats, model, lexicon, mode, args.beam_size, args.max_len)
        lines.append(" ".join(vocab.decode(ids)) + "\n")
    _emit(args, "".join(lines))


def cmd_gradcheck(args):
    if not args.all and not args.suite:
        raise UsageError("give --all or at least one --suite")
    results = run_suites(None if args.all else args.suite, args.seed)
    ok = True
    for name, (err, tol) in results.items():
        passed = err < tol
        ok &= passed
        print(f"{name}\t{err:.3e}\t{'ok' if passed else 'FAIL'} (< {tol:g})")
    return 0 if ok else 2


def cmd_ablate(args):
    _check_positive(seeds=args.seeds, epochs=args.epochs, n_eval=args.n_eval, threads=args.threads)
    try:
        arms = [parse_arm(a) for a in args.arms.split(",") if a.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not arms:
        raise UsageError("--arms is empty")
    model = _model_overrides(args)
    for k in ("arm", "graph_mode"):
        if k in model:
            raise UsageError(f"--{k} is set per arm in ablate; use --arms")
    spec = SyntheticSpec(**{f.name: getattr(args, f.name) for f in dataclasses.fields(SyntheticSpec)
                            if f.name != "seed"}, seed=args.seed)
    settings = AblationSettings(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                                n_eval=args.n_eval, threads=args.threads, model=model)
    seeds = list(range(args.seed, args.seed + args.seeds))
    results = run_ablation(spec, arms, seeds, settings)
    _emit(args, format_ablation(results, seeds))


COMMANDS = {
    "build-lexicon": cmd_build_lexicon,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "generate": cmd_generate,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args) or 0
    except UsageError as exc:
        sys.stderr.write(f"scpcap {args.command}: error: {exc}\n")
        return 1
    except (OSError, ValueError, KeyError, TrainingError, checkpoint.CheckpointError) as exc:
        sys.stderr.write(f"scpcap {args.command}: {type(exc).__name__}: {exc}\n")
        return 2
    except Exception:
        log.exception("unexpected failure in %s", args.command)
        return 2


if __name__ == "__main__":
    sys.exit(main())
