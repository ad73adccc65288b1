"""Text encoders behind one interface: encode(list of strings) -> (n, d).

`lexicon` is a built-in deterministic encoder that needs no downloads:
each word gets a hash-seeded vector, synonyms share a concept vector so
they land close. Any other model id goes through sentence-transformers.
"""

from __future__ import annotations

import hashlib

import numpy as np

LEXICON_DIM = 64
_QUIRK = 0.15  # word-specific offset away from the shared concept vector

# synonym groups; first entry names the concept
_SYNONYM_GROUPS = (
    ("sofa", "couch", "settee"),
    ("car", "automobile"),
    ("cup", "mug"),
    ("rock", "stone"),
    ("boat", "ship"),
    ("photo", "picture", "photograph"),
    ("television", "tv"),
    ("plane", "airplane", "aeroplane"),
    ("trash", "garbage", "rubbish"),
    ("child", "kid"),
)
_CONCEPT = {w: g[0] for g in _SYNONYM_GROUPS for w in g}


class ModelLoadError(RuntimeError):
    pass


def _seeded_unit(tag, word, dim):
    digest = hashlib.sha256(f"{tag}:{word}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _tokenize(text):
    out = []
    word = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


class LexiconEncoder:
    """Deterministic bag-of-words embedding with shared synonym concepts."""

    dim = LEXICON_DIM

    def __init__(self):
        self._cache = {}

    def _word_vector(self, word):
        v = self._cache.get(word)
        if v is None:
            concept = _CONCEPT.get(word, word)
            v = _seeded_unit("concept", concept, self.dim)
            v = v + _QUIRK * _seeded_unit("word", word, self.dim)
            v = v / np.linalg.norm(v)
            self._cache[word] = v
        return v

    def encode(self, texts):
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for word in _tokenize(text):
                out[i] += self._word_vector(word)
        return out


class SentenceTransformerEncoder:
    def __init__(self, model_id):
        try:
            from sentence_transformers import SentenceTransformer
            self._model = SentenceTransformer(model_id)
        except Exception as e:
            raise ModelLoadError(f"cannot load model {model_id!r}: {e}")
        self.dim = self._model.get_sentence_embedding_dimension()

    def encode(self, texts):
        out = self._model.encode(texts, convert_to_numpy=True,
                                 normalize_embeddings=False,
                                 show_progress_bar=False)
        return np.asarray(out, dtype=np.float64)


def get_encoder(model_id):
    if model_id == "lexicon":
        return LexiconEncoder()
    return SentenceTransformerEncoder(model_id)
