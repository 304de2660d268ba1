"""EBC-CRF network assembly: word + char-CNN + contextual features into a
stacked bidirectional LSTM encoder with a linear-chain CRF head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import crf as crf_mod
from . import numerics as nx
from .bilm import BiLm, MixingWeights, glorot, lstm_params, mix_layers
from .corpus import LabelScheme, TaggedSentence, Vocabulary, normalize_long_tokens
from .embeddings import EmbeddingTable
from .numerics import Parameter, Tape, Tensor


class ConfigurationError(ValueError):
    """Model configuration inconsistent with the requested operation."""


@dataclass
class ModelConfig:
    labels: tuple[str, ...]
    use_words: bool = True
    use_pretrained_words: bool = False
    use_char_cnn: bool = True
    use_contextual: bool = False
    word_dim: int = 200
    char_embed_dim: int = 50
    char_filter_width: int = 3
    char_filter_count: int = 30
    char_output_dim: int = 30
    lstm_layers: int = 2
    lstm_hidden: int = 250
    dropout: tuple[float, float] = (0.25, 0.25)
    contextual_dim: int = 0
    crf_bio_mask: bool = False
    long_token_threshold: int = 25
    word_source: str = "baseline"

    def __post_init__(self):
        if not (self.use_words or self.use_char_cnn or self.use_contextual):
            raise ConfigurationError("at least one feature source must be enabled")
        if self.use_contextual and self.contextual_dim <= 0:
            raise ConfigurationError("use_contextual requires a positive contextual_dim")
        dims = (self.word_dim, self.char_embed_dim, self.char_filter_width,
                self.char_filter_count, self.char_output_dim, self.lstm_hidden)
        if any(d < 1 for d in dims) or self.lstm_layers < 1:
            raise ConfigurationError("dimensions must be positive")
        if len(self.dropout) != self.lstm_layers:
            raise ConfigurationError("one dropout rate per stacked LSTM layer")
        if not self.labels:
            raise ConfigurationError("label scheme is empty")

    @property
    def scheme(self) -> LabelScheme:
        return LabelScheme(tuple(self.labels))

    @property
    def feature_dim(self) -> int:
        return (self.word_dim * self.use_words
                + self.char_output_dim * self.use_char_cnn
                + self.contextual_dim * self.use_contextual)

    @property
    def encoder_dim(self) -> int:
        return 2 * self.lstm_hidden

    def to_payload(self) -> dict:
        return {"labels": list(self.labels), "use_words": self.use_words,
                "use_pretrained_words": self.use_pretrained_words,
                "use_char_cnn": self.use_char_cnn, "use_contextual": self.use_contextual,
                "word_dim": self.word_dim, "char_embed_dim": self.char_embed_dim,
                "char_filter_width": self.char_filter_width,
                "char_filter_count": self.char_filter_count,
                "char_output_dim": self.char_output_dim,
                "lstm_layers": self.lstm_layers, "lstm_hidden": self.lstm_hidden,
                "dropout": list(self.dropout), "contextual_dim": self.contextual_dim,
                "crf_bio_mask": self.crf_bio_mask,
                "long_token_threshold": self.long_token_threshold,
                "word_source": self.word_source}

    @classmethod
    def from_payload(cls, payload: dict) -> "ModelConfig":
        kwargs = dict(payload)
        kwargs["labels"] = tuple(kwargs["labels"])
        kwargs["dropout"] = tuple(kwargs["dropout"])
        return cls(**kwargs)


@dataclass
class PaddedBatch:
    """Batch padded to a common length with a boolean mask; masked-out
    positions hold PAD ids and never contribute to the loss."""

    sentences: list[TaggedSentence]  # long-token normalized
    token_ids: np.ndarray            # (B, T_max) intp, PAD beyond each length
    mask: np.ndarray                 # (B, T_max) bool


class NerModel:
    """Parameters plus the forward pipeline of the full network."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 params: dict[str, Parameter], crf: crf_mod.CrfParams,
                 mixing: MixingWeights | None = None, bilm: BiLm | None = None):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.crf = crf
        self.mixing = mixing
        self.bilm = bilm
        if config.crf_bio_mask:
            crf.enable_bio_mask(config.scheme)
        if config.use_contextual and (bilm is None or mixing is None):
            raise ConfigurationError("contextual features need a biLM and mixing weights")
        self._ctx_cache: dict[tuple[str, ...], np.ndarray] = {}

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary, seed: int = 0,
             word_table: EmbeddingTable | None = None,
             bilm: BiLm | None = None) -> "NerModel":
        rng = np.random.default_rng(seed)
        p: dict[str, Parameter] = {}
        if config.use_words:
            if word_table is not None:
                if word_table.dim != config.word_dim:
                    raise ConfigurationError(
                        f"word table dim {word_table.dim} != config {config.word_dim}")
                p["words"] = word_table.as_parameter("words")
            else:
                matrix = rng.normal(0.0, 1.0 / np.sqrt(config.word_dim),
                                    size=(vocab.size, config.word_dim))
                matrix[Vocabulary.PAD] = 0.0
                p["words"] = Parameter("words", matrix, trainable=True,
                                       frozen_rows=(Vocabulary.PAD,))
        if config.use_char_cnn:
            chars = rng.normal(0.0, 1.0 / np.sqrt(config.char_embed_dim),
                               size=(vocab.char_size, config.char_embed_dim))
            chars[Vocabulary.CHAR_PAD] = 0.0
            p["chars"] = Parameter("chars", chars, frozen_rows=(Vocabulary.CHAR_PAD,))
            p["char_conv.w"] = Parameter(
                "char_conv.w",
                glorot(rng, (config.char_filter_count, config.char_filter_width,
                              config.char_embed_dim),
                        config.char_filter_width * config.char_embed_dim,
                        config.char_filter_count))
            p["char_conv.b"] = Parameter("char_conv.b", np.zeros(config.char_filter_count))
            p["char_proj.w"] = Parameter(
                "char_proj.w", glorot(rng, (config.char_filter_count, config.char_output_dim),
                                       config.char_filter_count, config.char_output_dim))
            p["char_proj.b"] = Parameter("char_proj.b", np.zeros(config.char_output_dim))

        in_dim = config.feature_dim
        for layer in range(config.lstm_layers):
            for direction in ("fwd", "bwd"):
                p.update(lstm_params(rng, f"lstm.l{layer}.{direction}", in_dim,
                                      config.lstm_hidden))
            in_dim = config.encoder_dim
        k = config.scheme.num_tags
        p["emit.w"] = Parameter("emit.w", glorot(rng, (config.encoder_dim, k),
                                                  config.encoder_dim, k))
        p["emit.b"] = Parameter("emit.b", np.zeros(k))
        crf = crf_mod.CrfParams.init(k)
        mixing = None
        if config.use_contextual:
            if bilm is None:
                raise ConfigurationError("use_contextual requires a trained biLM")
            mixing = MixingWeights.init(bilm.config.num_layers)
        return cls(config, vocab, p, crf, mixing=mixing, bilm=bilm)

    def parameters(self) -> list[Parameter]:
        """All parameters in a stable name order (biLM ones frozen)."""
        out = [self.params[k] for k in sorted(self.params)]
        out.extend(self.crf.parameters())
        if self.mixing is not None:
            out.extend(self.mixing.parameters())
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def all_tensors(self) -> dict[str, Parameter]:
        """Named view of every tensor including the frozen biLM, for checkpoints."""
        named = dict(self.params)
        for p in self.crf.parameters():
            named[p.name] = p
        if self.mixing is not None:
            for p in self.mixing.parameters():
                named[p.name] = p
        if self.bilm is not None:
            named.update(self.bilm.params)
        return named

    # -- forward pipeline ----------------------------------------------------

    def encode_chars(self, token_text: str, tape: Tape | None = None) -> Tensor:
        """Char-CNN word vector (1 x char_output_dim); empty text is all zeros."""
        if not self.config.use_char_cnn:
            raise ConfigurationError("char CNN disabled")
        if not token_text:
            return Tensor(np.zeros((1, self.config.char_output_dim)), tape=None)
        pad = self.config.char_filter_width // 2
        ids = np.asarray([Vocabulary.CHAR_PAD] * pad
                         + [self.vocab.char_id(c) for c in token_text]
                         + [Vocabulary.CHAR_PAD] * pad, dtype=np.intp)
        emb = nx.embedding(nx.use_param(tape, self.params["chars"]), ids)
        conv = nx.conv1d(emb, nx.use_param(tape, self.params["char_conv.w"]),
                         nx.use_param(tape, self.params["char_conv.b"]))
        pooled = nx.reshape(nx.max_over_time(conv), (1, self.config.char_filter_count))
        return nx.linear(pooled, nx.use_param(tape, self.params["char_proj.w"]),
                         nx.use_param(tape, self.params["char_proj.b"]))

    def _contextual_layers(self, texts: tuple[str, ...]) -> np.ndarray:
        cached = self._ctx_cache.get(texts)
        if cached is None:
            cached = self.bilm.contextualize(list(texts))
            self._ctx_cache[texts] = cached
        return cached

    def embed_tokens(self, sentence: TaggedSentence, tape: Tape | None = None,
                     contextual_layers: np.ndarray | None = None,
                     word_ids: np.ndarray | None = None) -> Tensor:
        """Per-token features (T x D), concatenated word, char, contextual."""
        texts = sentence.texts
        if not texts:
            raise ValueError("cannot embed an empty sentence")
        parts: list[Tensor] = []
        if self.config.use_words:
            if word_ids is None:
                word_ids = np.asarray([self.vocab.word_id(t) for t in texts],
                                      dtype=np.intp)
            parts.append(nx.embedding(nx.use_param(tape, self.params["words"]),
                                      word_ids))
        if self.config.use_char_cnn:
            rows = [self.encode_chars(t, tape) for t in texts]
            parts.append(rows[0] if len(rows) == 1 else nx.concat(rows, axis=0))
        if self.config.use_contextual:
            if contextual_layers is None:
                contextual_layers = self._contextual_layers(tuple(texts))
            if contextual_layers.shape[0] != len(texts):
                raise ConfigurationError("contextual layer count != token count")
            layer_mats = [contextual_layers[:, j, :]
                          for j in range(contextual_layers.shape[1])]
            parts.append(mix_layers(layer_mats, self.mixing, tape))
        elif contextual_layers is not None:
            raise ConfigurationError("contextual layers supplied but use_contextual is off")
        return parts[0] if len(parts) == 1 else nx.concat(parts, axis=1)

    def encode(self, features: Tensor, tape: Tape | None = None,
               dropout_masks: Sequence[np.ndarray | None] | None = None) -> Tensor:
        """Stacked biLSTM encoder (T x 2*hidden); dropout on each layer's input."""
        h = features
        for layer in range(self.config.lstm_layers):
            rate = self.config.dropout[layer]
            if dropout_masks is not None and dropout_masks[layer] is not None and rate > 0:
                h = nx.dropout(h, dropout_masks[layer], rate)
            outs = []
            for direction in ("fwd", "bwd"):
                name = f"lstm.l{layer}.{direction}"
                outs.append(nx.lstm_scan(h, nx.use_param(tape, self.params[f"{name}.wx"]),
                                         nx.use_param(tape, self.params[f"{name}.wh"]),
                                         nx.use_param(tape, self.params[f"{name}.b"]),
                                         reverse=(direction == "bwd")))
            h = nx.concat(outs, axis=1)
        return h

    def emissions(self, encoded: Tensor, tape: Tape | None = None) -> Tensor:
        return nx.linear(encoded, nx.use_param(tape, self.params["emit.w"]),
                         nx.use_param(tape, self.params["emit.b"]))

    def make_dropout_masks(self, lengths: Sequence[int], rng: np.random.Generator
                           ) -> list[list[np.ndarray | None]]:
        """Per-sentence keep masks for each stacked layer's input."""
        masks = []
        dims = [self.config.feature_dim] + [self.config.encoder_dim] * (
            self.config.lstm_layers - 1)
        for T in lengths:
            per_layer = []
            for layer, rate in enumerate(self.config.dropout):
                if rate > 0:
                    per_layer.append(
                        (rng.random((T, dims[layer])) >= rate).astype(np.float64))
                else:
                    per_layer.append(None)
            masks.append(per_layer)
        return masks

    def pad_batch(self, sentences: Sequence[TaggedSentence],
                  pad_to: int | None = None) -> PaddedBatch:
        """Pad word ids to the batch maximum (or ``pad_to``) with a mask."""
        if not sentences:
            raise ValueError("empty batch")
        normalized = [normalize_long_tokens(s, self.config.long_token_threshold)
                      for s in sentences]
        lengths = [len(s.tokens) for s in normalized]
        width = max(max(lengths), pad_to or 0)
        ids = np.full((len(normalized), width), Vocabulary.PAD, dtype=np.intp)
        mask = np.zeros((len(normalized), width), dtype=bool)
        for i, sent in enumerate(normalized):
            ids[i, :lengths[i]] = [self.vocab.word_id(t) for t in sent.texts]
            mask[i, :lengths[i]] = True
        return PaddedBatch(sentences=normalized, token_ids=ids, mask=mask)

    def build_loss(self, tape: Tape | None,
                   batch: Sequence[TaggedSentence] | PaddedBatch,
                   dropout_masks: Sequence[Sequence[np.ndarray | None]] | None = None
                   ) -> Tensor:
        """Mean per-sentence CRF NLL over a padded batch; the mask confines
        every computation to real tokens, so pad columns contribute nothing."""
        if not isinstance(batch, PaddedBatch):
            batch = self.pad_batch(batch)
        total: Tensor | None = None
        for i, sent in enumerate(batch.sentences):
            T = int(batch.mask[i].sum())
            if T != len(sent.tokens):
                raise ValueError(f"sentence {i}: mask length {T} != {len(sent.tokens)}")
            feats = self.embed_tokens(sent, tape, word_ids=batch.token_ids[i, :T])
            masks = dropout_masks[i] if dropout_masks is not None else None
            encoded = self.encode(feats, tape, masks)
            emissions = self.emissions(encoded, tape)
            sent_nll = crf_mod.nll(emissions, list(sent.tags), self.crf, tape)
            total = sent_nll if total is None else nx.add(total, sent_nll)
        return nx.scale(total, 1.0 / len(batch.sentences))

    def loss(self, sentences: Sequence[TaggedSentence],
             dropout_seed: int | None = None) -> float:
        """Mean batch NLL; dropout masks drawn from the seed when given."""
        masks = None
        if dropout_seed is not None:
            rng = np.random.default_rng(dropout_seed)
            masks = self.make_dropout_masks([len(s.tokens) for s in sentences], rng)
        return float(self.build_loss(None, sentences, masks).data)

    def predict(self, sentence: TaggedSentence) -> list[int]:
        """Evaluation-mode Viterbi decode; deterministic, dropout disabled."""
        if not sentence.tokens:
            return []
        sent = normalize_long_tokens(sentence, self.config.long_token_threshold)
        feats = self.embed_tokens(sent, tape=None)
        encoded = self.encode(feats, tape=None)
        emissions = self.emissions(encoded, tape=None)
        tags, _ = crf_mod.viterbi(emissions.data, self.crf)
        return tags


def model_from_checkpoint(ckpt) -> NerModel:
    """Rebuild a NerModel (including any embedded biLM) from a checkpoint."""
    from .bilm import BiLmConfig
    from .training import CheckpointError, vocab_from_payload

    if ckpt.kind != "ner":
        raise CheckpointError(f"expected a ner checkpoint, got kind {ckpt.kind!r}")
    vocab = vocab_from_payload(ckpt.vocab)
    config = ModelConfig.from_payload(ckpt.config)
    bilm = None
    if ckpt.bilm_config is not None:
        bilm_vocab = vocab_from_payload(ckpt.bilm_vocab)
        bilm = BiLm.init(BiLmConfig.from_payload(ckpt.bilm_config, bilm_vocab), seed=0)
    model = NerModel.init(config, vocab, seed=0, bilm=bilm)
    named = model.all_tensors()
    if set(named) != set(ckpt.tensors):
        raise CheckpointError("checkpoint tensor names do not match the model layout")
    for name, p in named.items():
        if p.value.shape != ckpt.tensors[name].shape:
            raise CheckpointError(f"tensor {name}: shape {ckpt.tensors[name].shape} "
                                  f"!= expected {p.value.shape}")
        p.value[...] = ckpt.tensors[name]
        p.trainable = ckpt.trainable[name]
    return model
