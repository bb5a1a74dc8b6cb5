import re

import numpy as np

import autodiff as ad


PAD_INDEX = 0
UNK_INDEX = 1
DEFAULT_MAX_TOKENS = 20

# (out_channels, stride) per conv+ReLU block, kernel 3, pad 1
DEFAULT_IMAGE_BLOCKS = ((16, 2), (32, 2), (64, 2), (64, 1))
DEFAULT_EMBED_DIM = 32
DEFAULT_HIDDEN_DIM = 128

_PUNCT = re.compile(r"[^\w\s]")


class EncoderError(ValueError):
    pass


def tokenize(question):
    """
    Lowercase, strip punctuation, split on whitespace
    """
    text = _PUNCT.sub("", question.strip().lower())
    tokens = text.split()

    if not tokens:
        raise EncoderError(f"empty question: {question!r}")

    return tokens


class Vocabulary:
    """
    token -> index, 0 = padding, 1 = unknown, real tokens from 2 in
    lexicographic order
    """

    def __init__(self, tokens=()):
        self.token_to_index = {}
        for i, token in enumerate(sorted(set(tokens))):
            self.token_to_index[token] = i + 2

    def __len__(self):
        return len(self.token_to_index) + 2

    def __contains__(self, token):
        return token in self.token_to_index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.token_to_index == other.token_to_index

    def lookup(self, token):
        return self.token_to_index.get(token, UNK_INDEX)

    def tokens(self):
        return sorted(self.token_to_index, key=self.token_to_index.get)

    def to_tsv(self):
        return "".join(f"{t}\t{i}\n" for t, i in sorted(self.token_to_index.items()))

    @classmethod
    def from_tsv(cls, text):
        vocab = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue

            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].isdigit():
                raise EncoderError(f"malformed vocabulary line {lineno}: {line!r}")

            vocab.token_to_index[parts[0]] = int(parts[1])

        indices = sorted(vocab.token_to_index.values())
        if indices != list(range(2, 2 + len(indices))):
            raise EncoderError("vocabulary indices are not contiguous from 2")

        return vocab

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_tsv())

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_tsv(f.read())


def build_vocabulary(questions):
    tokens = set()
    for q in questions:
        tokens.update(tokenize(q))

    return Vocabulary(tokens)


def encode_tokens(token_lists, vocab, max_tokens=DEFAULT_MAX_TOKENS):
    """
    Right-padded index matrix N×T plus per-row lengths.
    Lists longer than max_tokens are truncated (logged).
    """
    if not token_lists:
        raise EncoderError("no questions to encode")

    rows = []
    for tokens in token_lists:
        if not tokens:
            raise EncoderError("empty token list")

        if len(tokens) > max_tokens:
            print(f"[WARN] question of {len(tokens)} tokens truncated to {max_tokens}: {' '.join(tokens)}")
            tokens = tokens[:max_tokens]

        rows.append([vocab.lookup(t) for t in tokens])

    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    indices = np.full((len(rows), int(lengths.max())), PAD_INDEX, dtype=np.int64)
    for i, r in enumerate(rows):
        indices[i, :len(r)] = r

    return indices, lengths


########################################################################
# Parameter initializers
########################################################################
def init_question_encoder(rng, vocab_size, embed_dim=DEFAULT_EMBED_DIM, hidden_dim=DEFAULT_HIDDEN_DIM):
    bound = 1.0 / np.sqrt(hidden_dim)

    def uniform(*shape):
        return rng.uniform(-bound, bound, size=shape)

    embed = rng.normal(0.0, 0.5, size=(vocab_size, embed_dim))
    embed[PAD_INDEX] = 0.0

    return {
        "q.embed": embed,
        "q.gru.wx": uniform(embed_dim, 3 * hidden_dim),
        "q.gru.bx": np.zeros(3 * hidden_dim),
        "q.gru.wh": uniform(hidden_dim, 3 * hidden_dim),
        "q.gru.bh": np.zeros(3 * hidden_dim),
    }


def init_image_encoder(rng, blocks=DEFAULT_IMAGE_BLOCKS, in_channels=3, kernel=3):
    params = {}
    c = in_channels
    for i, (out_c, _) in enumerate(blocks):
        # He init for ReLU stacks
        std = np.sqrt(2.0 / (c * kernel * kernel))
        params[f"img.conv{i}.w"] = rng.normal(0.0, std, size=(out_c, c, kernel, kernel))
        params[f"img.conv{i}.b"] = np.zeros(out_c)
        c = out_c

    return params


########################################################################
# Forward
########################################################################
def encode_question_batch(indices, lengths, params):
    """
    Single-layer GRU over right-padded token indices; rows stop updating
    after their last real token.

    @return Tensor N×L, the hidden state after the last real token
    """
    embed = params["q.embed"]
    wx, bx = params["q.gru.wx"], params["q.gru.bx"]
    wh, bh = params["q.gru.wh"], params["q.gru.bh"]

    n, steps = indices.shape
    e = embed.shape[1]
    hidden = wh.shape[0]

    emb = ad.embedding(embed, indices)
    gx_all = ad.reshape(ad.linear(ad.reshape(emb, (n * steps, e)), wx, bx), (n, steps, 3 * hidden))

    h = ad.Tensor(np.zeros((n, hidden)))
    for t in range(int(lengths.max())):
        gx = ad.take(gx_all, t, axis=1)
        gh = ad.linear(h, wh, bh)

        xz, xr, xn = ad.split(gx, 3, axis=1)
        hz, hr, hn = ad.split(gh, 3, axis=1)

        z = ad.sigmoid(ad.add(xz, hz))
        r = ad.sigmoid(ad.add(xr, hr))
        cand = ad.tanh(ad.add(xn, ad.multiply(r, hn)))

        # h' = (1 - z) * cand + z * h
        h_new = ad.add(cand, ad.multiply(z, ad.sub(h, cand)))

        mask = (t < lengths).astype(np.float64)[:, None]
        h = ad.add(h, ad.multiply(mask, ad.sub(h_new, h)))

    return h


def encode_question(tokens, vocab, params, max_tokens=DEFAULT_MAX_TOKENS):
    """
    One question (token list) -> LanguageFeature of shape 1×L
    """
    if not tokens:
        raise EncoderError("empty token list")

    indices, lengths = encode_tokens([tokens], vocab, max_tokens)
    return encode_question_batch(indices, lengths, params)


def downsampling_factor(blocks=DEFAULT_IMAGE_BLOCKS):
    factor = 1
    for _, stride in blocks:
        factor *= stride
    return factor


def prepare_images(images, blocks=DEFAULT_IMAGE_BLOCKS):
    """
    uint8 H×W×3 image (or N×H×W×3 batch) -> float N×3×H×W scaled to [0,1]
    """
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]

    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise EncoderError(f"wrong channel count: expected H×W×3 images, got shape {list(arr.shape)}")

    factor = downsampling_factor(blocks)
    h, w = arr.shape[1:3]
    if h % factor or w % factor:
        raise EncoderError(f"image size {h}x{w} not divisible by the downsampling factor {factor}")

    return arr.transpose(0, 3, 1, 2).astype(np.float64) / 255.0


def encode_image_batch(x, params, blocks=DEFAULT_IMAGE_BLOCKS):
    """
    @param x float N×3×H×W array or Tensor (already scaled)
    """
    out = x
    for i, (_, stride) in enumerate(blocks):
        out = ad.conv2d(out, params[f"img.conv{i}.w"], params[f"img.conv{i}.b"], stride=stride, pad=1)
        out = ad.relu(out)

    return out


def encode_image(image, params, blocks=DEFAULT_IMAGE_BLOCKS):
    return encode_image_batch(prepare_images(image, blocks), params, blocks)
