#!/usr/bin/env python3
"""Test the question and image encoders"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import autodiff as ad
import encoders


def test_tokenize():
    assert encoders.tokenize("Is there a river?") == ["is", "there", "a", "river"]
    assert encoders.tokenize("  How many  BUILDINGS are there? ") == ["how", "many", "buildings", "are", "there"]

    with pytest.raises(encoders.EncoderError):
        encoders.tokenize(" ?! ")


def test_vocabulary_layout():
    vocab = encoders.build_vocabulary(["Is there a river?", "Is it rural or urban?"])

    assert vocab.tokens() == sorted(vocab.tokens())
    assert vocab.lookup("a") == 2
    assert vocab.lookup("zebra") == encoders.UNK_INDEX
    assert len(vocab) == len(vocab.tokens()) + 2
    assert "river" in vocab

    assert encoders.Vocabulary.from_tsv(vocab.to_tsv()) == vocab

    with pytest.raises(encoders.EncoderError):
        encoders.Vocabulary.from_tsv("a\t2\nb\t4\n")
    with pytest.raises(encoders.EncoderError):
        encoders.Vocabulary.from_tsv("a 2\n")


def test_vocabulary_file(tmp_path):
    vocab = encoders.Vocabulary(["water", "road", "field"])
    path = tmp_path / "vocab.tsv"
    vocab.save(str(path))
    assert encoders.Vocabulary.load(str(path)) == vocab


def test_encode_tokens_pads_and_truncates(capsys):
    vocab = encoders.Vocabulary(["a", "b"])
    indices, lengths = encoders.encode_tokens([["a", "b", "zzz"], ["b"]], vocab)
    assert indices.tolist() == [[2, 3, 1], [3, 0, 0]]
    assert lengths.tolist() == [3, 1]

    long = ["a"] * 25
    indices, lengths = encoders.encode_tokens([long], vocab, max_tokens=20)
    assert indices.shape == (1, 20)
    assert lengths.tolist() == [20]
    assert "[WARN]" in capsys.readouterr().out

    with pytest.raises(encoders.EncoderError):
        encoders.encode_tokens([[]], vocab)


def test_question_feature_shape():
    rng = np.random.default_rng(0)
    vocab = encoders.Vocabulary(["is", "there", "a", "river"])
    params = encoders.init_question_encoder(rng, len(vocab))

    v = encoders.encode_question(["is", "there", "a", "river"], vocab, params)
    assert v.shape == (1, encoders.DEFAULT_HIDDEN_DIM)
    assert np.all(np.abs(v.data) < 1.0)

    with pytest.raises(encoders.EncoderError):
        encoders.encode_question([], vocab, params)


def test_padding_does_not_change_the_feature():
    rng = np.random.default_rng(1)
    vocab = encoders.Vocabulary(["a", "b", "c"])
    params = encoders.init_question_encoder(rng, len(vocab), embed_dim=4, hidden_dim=6)

    alone = encoders.encode_question(["a", "b"], vocab, params).data
    indices, lengths = encoders.encode_tokens([["a", "b"], ["c", "c", "c", "c"]], vocab)
    batched = encoders.encode_question_batch(indices, lengths, params).data

    assert np.allclose(batched[0], alone[0], atol=1e-14)


def test_image_feature_shape():
    rng = np.random.default_rng(0)
    params = encoders.init_image_encoder(rng)
    image = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)

    f = encoders.encode_image(image, params)
    assert f.shape == (1, 64, 8, 8)
    assert np.all(f.data >= 0.0)


def test_black_image_gives_zero_features():
    params = encoders.init_image_encoder(np.random.default_rng(0))
    f = encoders.encode_image(np.zeros((64, 64, 3), dtype=np.uint8), params)
    assert np.all(f.data == 0.0)


def test_prepare_images_errors():
    assert encoders.downsampling_factor() == 8

    x = encoders.prepare_images(np.full((16, 16, 3), 255, dtype=np.uint8))
    assert x.shape == (1, 3, 16, 16)
    assert np.all(x == 1.0)

    with pytest.raises(encoders.EncoderError):
        encoders.prepare_images(np.zeros((16, 16, 4), dtype=np.uint8))
    with pytest.raises(encoders.EncoderError):
        encoders.prepare_images(np.zeros((20, 16, 3), dtype=np.uint8))


def test_encoder_gradients():
    rng = np.random.default_rng(2)
    vocab = encoders.Vocabulary(["a", "b", "c"])
    raw = encoders.init_question_encoder(rng, len(vocab), embed_dim=3, hidden_dim=4)
    params = {k: ad.Tensor(v, trainable=True) for k, v in raw.items()}
    indices, lengths = encoders.encode_tokens([["a", "c", "b"], ["b", "a"]], vocab)

    def loss_fn():
        v = encoders.encode_question_batch(indices, lengths, params)
        return ad.mean(ad.tanh(v))

    report = ad.finite_diff_check(loss_fn, params)
    assert report.passed, report.max_errors


if __name__ == "__main__":
    test_tokenize()
    test_vocabulary_layout()
    test_black_image_gives_zero_features()
    print("encoders ok")
