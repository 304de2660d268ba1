import numpy as np
import pytest

from chemner import numerics as nx
from chemner.bilm import BiLmConfig, train_bilm
from chemner.corpus import sentence_from_texts
from chemner.embeddings import init_baseline
from chemner.model import (ConfigurationError, ModelConfig, NerModel,
                           model_from_checkpoint)
from chemner.numerics import Tape, backward
from chemner.training import load_checkpoint, make_checkpoint, save_checkpoint


def tiny_model(vocab, labels=("A", "B"), seed=0, **overrides):
    defaults = dict(word_dim=8, char_embed_dim=4, char_filter_count=4,
                    char_output_dim=4, lstm_hidden=6)
    defaults.update(overrides)
    return NerModel.init(ModelConfig(labels=labels, **defaults), vocab, seed=seed)


@pytest.fixture
def vocab(toy_data):
    return toy_data[2]


class TestModelConfig:
    def test_feature_dims(self):
        cfg = ModelConfig(labels=("A",))
        assert cfg.feature_dim == 230  # 200 word + 30 char

    def test_full_config_dim(self):
        cfg = ModelConfig(labels=("A",), use_contextual=True, contextual_dim=128)
        assert cfg.feature_dim == 358

    def test_ablation_strictly_reduces_dim(self):
        full = ModelConfig(labels=("A",), use_contextual=True, contextual_dim=128)
        no_ctx = ModelConfig(labels=("A",))
        no_char = ModelConfig(labels=("A",), use_char_cnn=False)
        words_only = ModelConfig(labels=("A",), use_char_cnn=False)
        assert full.feature_dim > no_ctx.feature_dim > no_char.feature_dim
        assert words_only.feature_dim == 200

    def test_no_feature_sources_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(labels=("A",), use_words=False, use_char_cnn=False)

    def test_contextual_needs_dim(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(labels=("A",), use_contextual=True)

    def test_payload_roundtrip(self):
        cfg = ModelConfig(labels=("A", "B"), lstm_hidden=16, dropout=(0.1, 0.2))
        assert ModelConfig.from_payload(cfg.to_payload()) == cfg


class TestEncodeChars:
    def test_output_width(self, vocab):
        model = tiny_model(vocab)
        out = model.encode_chars("benzene")
        assert out.shape == (1, 4)
        wide = NerModel.init(ModelConfig(labels=("A",)),
                             vocab, seed=0)
        assert wide.encode_chars("benzene").shape == (1, 30)

    def test_single_char_token(self, vocab):
        model = tiny_model(vocab)
        assert np.isfinite(model.encode_chars("x").data).all()

    def test_empty_text_zero_vector(self, vocab):
        model = tiny_model(vocab)
        assert np.array_equal(model.encode_chars("").data, np.zeros((1, 4)))

    def test_unknown_char_uses_unk(self, vocab):
        model = tiny_model(vocab)
        a = model.encode_chars("☃")     # not in char vocab
        b = model.encode_chars("☄")
        assert np.array_equal(a.data, b.data)

    def test_maxpool_invariance_hand_filters(self, vocab):
        model = tiny_model(vocab)
        # one filter detects a specific char embedding via dot product; a
        # shared maximal window makes two tokens pool identically
        model.params["char_conv.w"].value[:] = 0.0
        model.params["char_conv.b"].value[:] = 0.0
        model.params["chars"].value[:] = 0.0
        cid = vocab.char_id("b")
        model.params["chars"].value[cid, 0] = 1.0
        model.params["char_conv.w"].value[:, 1, 0] = 1.0  # center of width-3 window
        a = model.encode_chars("abc")
        b = model.encode_chars("abcd")
        assert np.array_equal(a.data, b.data)


class TestEmbedTokens:
    def test_concatenation_order_and_width(self, toy_data):
        sentences, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        feats = model.embed_tokens(sentences[0])
        T = len(sentences[0].tokens)
        assert feats.shape == (T, 12)
        # word block first: matches a direct embedding lookup
        ids = [vocab.word_id(t) for t in sentences[0].texts]
        assert np.array_equal(feats.data[:, :8], model.params["words"].value[ids])

    def test_eval_mode_dropout_free(self, toy_data):
        sentences, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        a = model.embed_tokens(sentences[0]).data
        b = model.embed_tokens(sentences[0]).data
        assert np.array_equal(a, b)

    def test_contextual_layers_rejected_when_disabled(self, toy_data):
        sentences, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        with pytest.raises(ConfigurationError):
            model.embed_tokens(sentences[0], contextual_layers=np.zeros((5, 3, 8)))


class TestEncode:
    def test_output_shape(self, vocab):
        model = tiny_model(vocab)
        out = model.encode(nx.constant(np.random.default_rng(0).normal(size=(1, 12))))
        assert out.shape == (1, 12)  # 2 * hidden(6)

    def test_default_dims_single_token(self, toy_data):
        # word 200 + char 30 features into 2-stacked LSTM of size 250
        sentences, scheme, vocab = toy_data
        model = NerModel.init(ModelConfig(labels=scheme.entity_labels), vocab, seed=0)
        assert model.config.feature_dim == 230
        one = sentence_from_texts(["benzene"], [0], "d")
        feats = model.embed_tokens(one)
        assert feats.shape == (1, 230)
        encoded = model.encode(feats)
        assert encoded.shape == (1, 500)
        assert model.emissions(encoded).shape == (1, scheme.num_tags)

    def test_zero_weights_zero_output(self, vocab):
        model = tiny_model(vocab)
        for name, p in model.params.items():
            if name.startswith("lstm."):
                p.value[:] = 0.0
        out = model.encode(nx.constant(np.zeros((4, 12))))
        assert np.array_equal(out.data, np.zeros((4, 12)))

    def test_direction_symmetry_with_mirrored_parameters(self, vocab):
        # constructed parameters: backward mirrors forward, and the second
        # layer's input weights are tied across the two direction halves so
        # the half-swap under reversal is absorbed
        model = tiny_model(vocab)
        H = 6
        for layer in (0, 1):
            for suffix in ("wx", "wh", "b"):
                model.params[f"lstm.l{layer}.bwd.{suffix}"].value[...] = \
                    model.params[f"lstm.l{layer}.fwd.{suffix}"].value
        wx2 = model.params["lstm.l1.fwd.wx"]
        wx2.value[H:] = wx2.value[:H]
        model.params["lstm.l1.bwd.wx"].value[...] = wx2.value
        x = np.random.default_rng(1).normal(size=(5, 12))
        out_fwd = model.encode(nx.constant(x)).data
        out_rev = model.encode(nx.constant(x[::-1].copy())).data
        assert np.allclose(out_rev[::-1, H:], out_fwd[:, :H], atol=1e-12)
        assert np.allclose(out_rev[::-1, :H], out_fwd[:, H:], atol=1e-12)


class TestEmissions:
    def test_zero_weight_bias_rows(self, vocab):
        model = tiny_model(vocab)
        model.params["emit.w"].value[:] = 0.0
        model.params["emit.b"].value[:] = [1.0, 2.0, 3.0, 4.0, 5.0]
        out = model.emissions(nx.constant(np.zeros((3, 12))))
        assert np.array_equal(out.data, np.tile([1, 2, 3, 4, 5], (3, 1)))

    def test_matches_matrix_multiply(self, vocab):
        model = tiny_model(vocab)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 12))
        out = model.emissions(nx.constant(x)).data
        direct = x @ model.params["emit.w"].value + model.params["emit.b"].value
        assert np.abs(out - direct).max() < 1e-12


class TestPredictAndLoss:
    def test_empty_sentence_empty_tags(self, toy_data):
        _, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        assert model.predict(sentence_from_texts([], [], "d")) == []

    def test_predict_deterministic(self, toy_data):
        sentences, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        assert model.predict(sentences[0]) == model.predict(sentences[0])

    def test_batch_loss_is_mean_of_singles(self, toy_data):
        sentences, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        batch = sentences[:4]
        total = model.loss(batch)
        singles = [model.loss([s]) for s in batch]
        assert total == pytest.approx(np.mean(singles), abs=1e-12)

    def test_loss_finite_long_sentence(self, toy_data):
        _, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        texts = ["benzene"] * 200
        sent = sentence_from_texts(texts, [0] * 200, "d")
        assert np.isfinite(model.loss([sent]))

    def test_masking_padded_batch_invariance(self, toy_data):
        # appending PAD columns to the batch layout changes no sentence's loss
        sentences, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        batch = sentences[:3]
        base = float(model.build_loss(None, model.pad_batch(batch)).data)
        widened = model.pad_batch(batch, pad_to=max(len(s.tokens) for s in batch) + 7)
        again = float(model.build_loss(None, widened).data)
        assert abs(base - again) <= 1e-10
        per_sentence = [model.loss([s]) for s in batch]
        assert base == pytest.approx(np.mean(per_sentence), abs=1e-12)

    def test_dropout_seed_changes_training_loss(self, toy_data):
        sentences, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=scheme.entity_labels)
        l1 = model.loss(sentences[:2], dropout_seed=1)
        l2 = model.loss(sentences[:2], dropout_seed=2)
        l1_again = model.loss(sentences[:2], dropout_seed=1)
        assert l1 != l2
        assert l1 == l1_again

    def test_word_table_plumbed(self, toy_data):
        sentences, scheme, vocab = toy_data
        table = init_baseline(vocab, dim=8, seed=4)
        cfg = ModelConfig(labels=scheme.entity_labels, word_dim=8, char_embed_dim=4,
                          char_filter_count=4, char_output_dim=4, lstm_hidden=6)
        model = NerModel.init(cfg, vocab, seed=0, word_table=table)
        assert np.array_equal(model.params["words"].value, table.matrix)


class TestContextualIntegration:
    def make_contextual_model(self, toy_data, seed=0):
        sentences, scheme, vocab = toy_data
        bcfg = BiLmConfig(vocab=vocab, char_embed_dim=4, char_filters=((3, 4),),
                          token_projection_dim=8, num_layers=2, layer_dim=8)
        bilm = train_bilm([s.texts for s in sentences[:6]], bcfg, epochs=2, seed=seed)
        cfg = ModelConfig(labels=scheme.entity_labels, word_dim=8, char_embed_dim=4,
                          char_filter_count=4, char_output_dim=4, lstm_hidden=6,
                          use_contextual=True, contextual_dim=bcfg.output_dim)
        return NerModel.init(cfg, vocab, seed=seed, bilm=bilm), sentences, scheme

    def test_feature_width(self, toy_data):
        model, sentences, _ = self.make_contextual_model(toy_data)
        feats = model.embed_tokens(sentences[0])
        assert feats.shape == (len(sentences[0].tokens), 8 + 4 + 16)

    def test_mixing_gradient_nonzero(self, toy_data):
        model, sentences, _ = self.make_contextual_model(toy_data)
        for p in model.trainable_parameters():
            p.zero_grad()
        tape = Tape()
        out = model.build_loss(tape, sentences[:4])
        backward(tape, out)
        assert np.abs(model.mixing.s.gradient).max() > 0
        assert abs(float(model.mixing.gamma.gradient)) > 0

    def test_bilm_frozen_out_of_training(self, toy_data):
        model, _, _ = self.make_contextual_model(toy_data)
        trainable_names = {p.name for p in model.trainable_parameters()}
        assert not any(name.startswith("bilm.") for name in trainable_names)
        assert "mix.s" in trainable_names and "mix.gamma" in trainable_names

    def test_checkpoint_roundtrip_with_bilm(self, toy_data, tmp_path):
        model, sentences, _ = self.make_contextual_model(toy_data)
        ckpt = make_checkpoint(model, None, None)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(ckpt, path)
        restored = model_from_checkpoint(load_checkpoint(path))
        assert restored.predict(sentences[0]) == model.predict(sentences[0])
        assert restored.loss(sentences[:2]) == model.loss(sentences[:2])


class TestFullModelGradient:
    def test_tiny_grad_check(self, toy_data):
        sentences, scheme, vocab = toy_data
        model = tiny_model(vocab, labels=("A", "B"), seed=5)
        sent = sentence_from_texts(sentences[0].texts[:4], [1, 0, 2, 3], "d")
        masks = model.make_dropout_masks([4], np.random.default_rng(7))
        err = nx.grad_check(lambda t: model.build_loss(t, [sent], masks),
                            model.trainable_parameters(), epsilon=1e-5)
        assert err < 1e-3
