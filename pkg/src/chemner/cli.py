"""Command-line interface: tokenize, stats, split, train-bilm, train, tag,
eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure. Diagnostics go to stderr, results to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import numerics as nx
from .bilm import BiLmConfig, bilm_from_checkpoint, train_bilm
from .corpus import (CorpusFormatError, DatasetSplit, LabelScheme, TaggedSentence,
                     UnknownLabelError, build_vocabulary, corpus_stats,
                     normalize_long_tokens, read_column_corpus, sentence_from_texts,
                     split_dataset, write_column_corpus)
from .embeddings import EmbeddingFormatError, align_to_vocab, load_embedding_text
from .evaluation import (confusion_matrix, error_listing, evaluate, format_confusion,
                         format_errors, format_report)
from .model import ConfigurationError, ModelConfig, NerModel, model_from_checkpoint
from .numerics import NumericError
from .textproc import RuleConfig, Sentence, TokenizerKind, split_sentences
from .training import (CheckpointError, TrainConfig, load_checkpoint, make_checkpoint,
                       save_checkpoint, train)

USAGE_ERROR = 1
DATA_ERROR = 2
NUMERIC_ERROR = 3

_DATA_ERRORS = (CorpusFormatError, UnknownLabelError, EmbeddingFormatError,
                CheckpointError, ConfigurationError, FileNotFoundError,
                IsADirectoryError, PermissionError, json.JSONDecodeError,
                ValueError)


class ConfigError(ValueError):
    """Run configuration file problem."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {"labels", "tokenizer", "model", "train", "embeddings", "bilm"}
_TOKENIZER_KEYS = {"mode", "rules"}
_MODEL_KEYS = {"use_words", "use_pretrained_words", "use_char_cnn", "use_contextual",
               "word_dim", "char_embed_dim", "char_filter_width", "char_filter_count",
               "char_output_dim", "lstm_layers", "lstm_hidden", "dropout",
               "crf_bio_mask", "long_token_threshold"}
_TRAIN_KEYS = {"learning_rate", "batch_size", "clip_norm", "max_epochs", "patience",
               "seed", "beta1", "beta2", "epsilon"}


def _reject_unknown(section: str, raw: dict, allowed: set[str]) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"config section {section!r}: unknown keys {sorted(unknown)}")


def load_run_config(path: str) -> dict:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("<top>", raw, _TOP_KEYS)
    if "labels" not in raw or not raw["labels"]:
        raise ConfigError("config needs a non-empty 'labels' list")
    tok = raw.get("tokenizer") or {"mode": "general", "rules": None}
    _reject_unknown("tokenizer", tok, _TOKENIZER_KEYS)
    _reject_unknown("model", raw.get("model") or {}, _MODEL_KEYS)
    _reject_unknown("train", raw.get("train") or {}, _TRAIN_KEYS)
    for key in ("embeddings", "bilm"):
        p = raw.get(key)
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"config {key!r}: path does not exist: {p}")
    rules = tok.get("rules")
    if rules is not None and not os.path.exists(rules):
        raise ConfigError(f"tokenizer rules path does not exist: {rules}")
    raw["tokenizer"] = tok
    return raw


def _tokenizer_from_payload(payload: dict) -> TokenizerKind:
    rules = payload.get("rules")
    return TokenizerKind(payload.get("mode", "general"),
                         RuleConfig.from_file(rules) if rules else None)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_tokenize(args) -> int:
    rules = RuleConfig.from_file(args.rules) if args.rules else None
    kind = TokenizerKind(args.mode, rules)
    text = sys.stdin.read()
    first = True
    for sentence in split_sentences(text):
        if not first:
            print()
        first = False
        base = sentence.source_span[0]
        for tok in kind.tokenize(sentence):
            print(f"{base + tok.start}\t{base + tok.end}\t{tok.text}")
    return 0


def _scheme_from_arg(labels_arg: str) -> LabelScheme:
    labels = tuple(lab for lab in labels_arg.split(",") if lab)
    return LabelScheme(labels)


def cmd_stats(args) -> int:
    scheme = _scheme_from_arg(args.labels)
    sentences = read_column_corpus(args.corpus, scheme)
    st = corpus_stats(sentences, scheme)
    print(json.dumps({"documents": st.documents, "sentences": st.sentences,
                      "tokens": st.tokens, "entities": st.entities,
                      "bio_repairs": st.repairs}, indent=2, sort_keys=True))
    return 0


def cmd_split(args) -> int:
    scheme = _scheme_from_arg(args.labels)
    sentences = read_column_corpus(args.corpus, scheme)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if len(ratios) != 3:
        raise ConfigError("--ratios needs three comma-separated numbers")
    split = split_dataset(sentences, ratios, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for name, part in (("train", split.train), ("dev", split.dev), ("test", split.test)):
        write_column_corpus(os.path.join(args.out, f"{name}.tsv"), part, scheme)
    counts = split.document_counts()
    print(f"documents: train={counts[0]} dev={counts[1]} test={counts[2]}")
    return 0


def _read_plain_sentences(path: str, kind: TokenizerKind) -> list[list[str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            toks = kind.tokenize(Sentence(text=line))
            if toks:
                out.append([t.text for t in toks])
    return out


_BILM_CONFIG_KEYS = {"char_embed_dim", "filter_width", "filter_count", "layer_dim",
                     "layers", "max_token_len", "learning_rate", "min_count",
                     "tokenizer", "rules"}


def cmd_train_bilm(args) -> int:
    settings = {"char_embed_dim": 16, "filter_width": 3, "filter_count": 32,
                "layer_dim": 64, "layers": 2, "max_token_len": 25,
                "learning_rate": 0.01, "min_count": 1,
                "tokenizer": "chemical", "rules": None}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            raw = json.load(f)
        _reject_unknown("train-bilm config", raw, _BILM_CONFIG_KEYS)
        settings.update(raw)
    for key in _BILM_CONFIG_KEYS:  # explicit flags win over the config file
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag

    kind = TokenizerKind(settings["tokenizer"],
                         RuleConfig.from_file(settings["rules"])
                         if settings["rules"] else None)
    sentences = _read_plain_sentences(args.corpus, kind)
    if not sentences:
        raise CorpusFormatError(f"{args.corpus}: no sentences found")
    normalized = []
    for texts in sentences:
        sent = normalize_long_tokens(sentence_from_texts(texts, [0] * len(texts), "d"),
                                     settings["max_token_len"])
        normalized.append(sent.texts)
    tagged = [sentence_from_texts(t, [0] * len(t), f"doc{i}")
              for i, t in enumerate(normalized)]
    vocab = build_vocabulary(tagged, [], min_count=settings["min_count"])
    config = BiLmConfig(vocab=vocab, char_embed_dim=settings["char_embed_dim"],
                        char_filters=((settings["filter_width"],
                                       settings["filter_count"]),),
                        token_projection_dim=settings["layer_dim"],
                        num_layers=settings["layers"],
                        layer_dim=settings["layer_dim"],
                        max_token_len=settings["max_token_len"])
    bilm = train_bilm(normalized, config, epochs=args.epochs, seed=args.seed,
                      learning_rate=settings["learning_rate"])
    ckpt = make_checkpoint(bilm, None, None,
                           meta={"perplexities": bilm.training_perplexities},
                           kind="bilm")
    save_checkpoint(ckpt, args.out)
    print(f"final perplexity: {bilm.training_perplexities[-1]:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    scheme_labels = tuple(run["labels"])
    scheme = LabelScheme(scheme_labels)
    train_sents = read_column_corpus(args.train, scheme)
    dev_sents = read_column_corpus(args.dev, scheme)

    pretrained_words: list[str] = []
    pretrained = None
    if run.get("embeddings"):
        words, vectors = load_embedding_text(run["embeddings"])
        pretrained = (words, vectors)
        pretrained_words = words

    vocab = build_vocabulary(train_sents, dev_sents, pretrained_words)

    bilm = None
    if run.get("bilm"):
        bilm = bilm_from_checkpoint(load_checkpoint(run["bilm"]))

    model_kwargs = dict(run.get("model") or {})
    if "dropout" in model_kwargs:
        model_kwargs["dropout"] = tuple(model_kwargs["dropout"])
    if bilm is not None:
        model_kwargs.setdefault("use_contextual", True)
        model_kwargs["contextual_dim"] = bilm.config.output_dim
    if pretrained is not None:
        model_kwargs.setdefault("use_pretrained_words", True)
        model_kwargs["word_source"] = os.path.basename(run["embeddings"])
    config = ModelConfig(labels=scheme_labels, **model_kwargs)

    word_table = None
    if pretrained is not None and config.use_pretrained_words:
        word_table = align_to_vocab(pretrained[0], pretrained[1], vocab,
                                    seed=args.seed, source_name=run["embeddings"])
        if word_table.dim != config.word_dim:
            config = ModelConfig.from_payload(
                {**config.to_payload(), "word_dim": word_table.dim})

    train_kwargs = dict(run.get("train") or {})
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    tconfig = TrainConfig(**train_kwargs)

    model = NerModel.init(config, vocab, seed=tconfig.seed,
                          word_table=word_table, bilm=bilm)
    splits = DatasetSplit(train=tuple(train_sents), dev=tuple(dev_sents),
                          test=(), seed=tconfig.seed)
    result = train(model, splits, tconfig)

    os.makedirs(args.out, exist_ok=True)
    result.best.meta["tokenizer"] = run["tokenizer"]
    ckpt_path = os.path.join(args.out, "model.ckpt")
    save_checkpoint(result.best, ckpt_path)
    report_path = os.path.join(args.out, "train_report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(result.report.to_payload(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"best dev F1 {result.report.best_f1:.4f} at epoch {result.report.best_epoch} "
          f"({result.report.stopping_reason})")
    print(f"checkpoint: {ckpt_path}\nreport: {report_path}")
    return 0


def _read_token_sentences(path: str, scheme: LabelScheme | None) -> list[TaggedSentence]:
    """Column file where the tag column is optional; tags ignored if absent."""
    sentences: list[TaggedSentence] = []
    texts: list[str] = []
    doc_id = "doc0000"
    doc_index = 0

    def flush():
        nonlocal texts
        if texts:
            sentences.append(sentence_from_texts(texts, [0] * len(texts), doc_id))
            texts = []

    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            cols = line.split("\t")
            if len(cols) == 1:
                cols = line.split()
            if cols[0] == "-DOCSTART-":
                flush()
                doc_index += 1
                doc_id = cols[1] if len(cols) > 1 else f"doc{doc_index:04d}"
                continue
            if len(cols) > 2:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected 1 or 2 columns per token "
                    f"(pass --raw to tag plain sentence text)")
            texts.append(cols[0])
    flush()
    return sentences


def cmd_tag(args) -> int:
    ckpt = load_checkpoint(args.model)
    model = model_from_checkpoint(ckpt)
    scheme = model.config.scheme
    if args.raw:
        kind = _tokenizer_from_payload(ckpt.meta.get("tokenizer") or {"mode": "general"})
        sentences = []
        with open(args.input, encoding="utf-8") as f:
            text = f.read()
        for sent in split_sentences(text):
            toks = kind.tokenize(sent)
            if toks:
                sentences.append(sentence_from_texts([t.text for t in toks],
                                                     [0] * len(toks), "doc0000"))
    else:
        sentences = _read_token_sentences(args.input, scheme)

    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for sent in sentences:
            tags = model.predict(sent)
            for tok, tid in zip(sent.tokens, tags):
                out.write(f"{tok.text}\t{scheme.tag_name(tid)}\n")
            out.write("\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_eval(args) -> int:
    scheme = _scheme_from_arg(args.labels)
    gold = read_column_corpus(args.gold, scheme)
    pred = read_column_corpus(args.pred, scheme)
    if len(gold) != len(pred):
        raise CorpusFormatError(
            f"gold has {len(gold)} sentences, pred has {len(pred)}")
    pred_tags = [list(s.tags) for s in pred]
    report = evaluate(gold, pred_tags, scheme)
    print(format_report(report))
    print()
    print(format_confusion(confusion_matrix(gold, pred_tags, scheme)))
    if args.errors:
        listing = error_listing(gold, pred_tags, scheme, limit=args.errors)
        if listing:
            print()
            print(format_errors(listing))
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    labels = ("A", "B")
    scheme = LabelScheme(labels)
    words = [f"w{i}" for i in range(14)] + ["2-xy", "qz9", "benzol", "acidum",
                                            "salz", "aqua"]
    sents = [sentence_from_texts(
        [words[int(rng.integers(0, len(words)))] for _ in range(6)],
        [int(rng.integers(0, scheme.num_tags)) for _ in range(6)], "d0")]
    vocab = build_vocabulary(sents * 4, [], min_count=1)
    config = ModelConfig(labels=labels, word_dim=8, char_embed_dim=4,
                         char_filter_count=4, char_output_dim=4, lstm_hidden=6)
    model = NerModel.init(config, vocab, seed=args.seed)
    masks = model.make_dropout_masks([6], np.random.default_rng(args.seed + 1))
    err = nx.grad_check(lambda tape: model.build_loss(tape, sents, masks),
                        model.trainable_parameters(), epsilon=1e-5)
    print(f"max relative gradient error: {err:.3e} (threshold 1e-3)")
    if not np.isfinite(err) or err >= 1e-3:
        print("gradient check FAILED", file=sys.stderr)
        return NUMERIC_ERROR
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chemner",
                     description="Chemical-patent NER pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="tokenize stdin text")
    p.add_argument("--mode", choices=("general", "chemical"), default="general")
    p.add_argument("--rules", help="JSON rule file for the chemical tokenizer")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels", required=True, help="comma-separated entity labels")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="document-level train/dev/test split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.6,0.1,0.3")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-bilm", help="train the scaled-down bidirectional LM")
    p.add_argument("--config", help="JSON file with the settings below as keys")
    p.add_argument("--corpus", required=True, help="plain text, one sentence per line")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--tokenizer", choices=("general", "chemical"), default=None)
    p.add_argument("--rules", default=None)
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--min-count", type=int, default=None, dest="min_count")
    p.add_argument("--char-embed-dim", type=int, default=None, dest="char_embed_dim")
    p.add_argument("--filter-width", type=int, default=None, dest="filter_width")
    p.add_argument("--filter-count", type=int, default=None, dest="filter_count")
    p.add_argument("--layer-dim", type=int, default=None, dest="layer_dim")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--max-token-len", type=int, default=None, dest="max_token_len")
    p.set_defaults(func=cmd_train_bilm)

    p = sub.add_parser("train", help="train the NER model")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--train", required=True, help="training corpus (column format)")
    p.add_argument("--dev", required=True, help="development corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tag", help="tag sentences with a trained model")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--raw", action="store_true",
                   help="input is plain text instead of column format")
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("eval", help="entity-level evaluation")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--errors", type=int, default=0, help="list up to N error sentences")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else USAGE_ERROR
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return NUMERIC_ERROR
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
