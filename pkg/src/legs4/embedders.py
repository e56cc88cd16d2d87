"""Pluggable crop-tube embedders plus text-query resolution.

Every embedder consumes a resized uint8 tube (L, s, s, 3) and returns a
D-dimensional float vector. The synthetic embedder is a pure function of the
tube content: palette-matched pixels vote for their concept embedding and the
unmatched remainder contributes a content-hash-derived unit vector, which
makes whole pipelines runnable (and deterministic) without any model weights.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .blobs import decode_blob, encode_blob, read_blob

ENV_EMBEDDER_URL = "LEGS4_EMBEDDER_URL"


class EmbedderError(RuntimeError):
    """Embedding failure; the message carries the crop identity."""


class TextEmbeddingError(RuntimeError):
    pass


def tube_digest(tube: np.ndarray, salt: int = 0) -> bytes:
    tube = np.ascontiguousarray(tube, dtype=np.uint8)
    h = hashlib.sha256()
    h.update(str(salt).encode())
    h.update(np.asarray(tube.shape, dtype=np.int64).tobytes())
    h.update(tube.tobytes())
    return h.digest()


def _hash_unit_vector(digest: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(digest[:8], "little")
    v = np.random.default_rng(seed).normal(size=dim)
    return v / np.linalg.norm(v)


class SyntheticEmbedder:
    """Maps tubes to concept embeddings by palette voting.

    Each tube pixel votes for the nearest palette entry within `tol` (max
    channel difference); pixels matching nothing vote for a content-hash unit
    vector. Votes are scaled by per-concept `salience` and sharpened (raised
    to `sharpen`, renormalized) before mixing the concept embeddings.

    `edge_penalty` models scale selectivity: a concept whose pixels run into
    the crop boundary is only partially framed, and that share of its vote is
    demoted. Background-like entries keep a penalty of 0 since textures read
    the same at any scale, while object-like entries need the crop to contain
    them. Where the demoted mass goes is controlled by `surface_concept`:
    when set, a partially framed object reads as that concept instead (a
    close-up of a red ball looks like flat colored surface, which the myopic
    viewer files under the backdrop concept); when None it reads as
    unrecognized texture (the hash vector). Together the knobs mimic real
    video-text encoders: foreground-biased, winner-take-most, and tuned to
    objects framed with context rather than close-up fragments.
    """

    def __init__(self, concept_embeddings: np.ndarray, palette: np.ndarray,
                 seed: int = 0, input_side: int = 32, tol: int = 40,
                 sharpen: float = 2.0, salience: Optional[np.ndarray] = None,
                 edge_penalty: Optional[np.ndarray] = None,
                 surface_concept: Optional[int] = None):
        self.concept_embeddings = np.atleast_2d(
            np.asarray(concept_embeddings, dtype=np.float64))
        self.palette = np.asarray(palette, dtype=np.int16).reshape(-1, 3)
        if self.palette.shape[0] != self.concept_embeddings.shape[0]:
            raise ValueError("palette and concept embeddings must align")
        self.seed = seed
        self.input_side = input_side
        self.tol = tol
        self.sharpen = sharpen
        if salience is None:
            salience = np.ones(len(self.palette))
        self.salience = np.asarray(salience, dtype=np.float64)
        if self.salience.shape != (len(self.palette),):
            raise ValueError("salience must have one weight per palette entry")
        if edge_penalty is None:
            edge_penalty = np.zeros(len(self.palette))
        self.edge_penalty = np.asarray(edge_penalty, dtype=np.float64)
        if self.edge_penalty.shape != (len(self.palette),):
            raise ValueError("edge_penalty must have one weight per palette entry")
        if surface_concept is not None and not (
                0 <= surface_concept < len(self.palette)):
            raise ValueError("surface_concept must index a palette entry")
        self.surface_concept = surface_concept
        self.feature_dim = self.concept_embeddings.shape[1]

    def embed(self, tube: np.ndarray) -> np.ndarray:
        if len(self.palette) == 0:
            return _hash_unit_vector(tube_digest(tube, self.seed),
                                     self.feature_dim).astype(np.float32)
        frames = np.ascontiguousarray(np.atleast_2d(tube), dtype=np.uint8)
        if frames.ndim == 3:
            frames = frames[None]
        px = frames.reshape(-1, 3).astype(np.int16)
        dist = np.abs(px[:, None, :] - self.palette[None, :, :]).max(axis=2)  # (N, C)
        best = np.argmin(dist, axis=1)
        matched = dist[np.arange(len(px)), best] <= self.tol
        n = len(px)
        match_c = np.zeros((n, len(self.palette)))
        match_c[np.arange(n)[matched], best[matched]] = 1.0
        fracs = match_c.mean(axis=0)

        # fraction of the crop boundary each concept occupies; a boundary hit
        # means the concept extends past the frame and is only partially seen,
        # and the squared falloff makes heavy contact decisively fatal
        border = np.zeros(frames.shape[:3], dtype=bool)
        border[:, 0, :] = border[:, -1, :] = True
        border[:, :, 0] = border[:, :, -1] = True
        edge_fracs = match_c[border.reshape(-1)].mean(axis=0)
        context = np.clip(1.0 - self.edge_penalty * edge_fracs, 0.0, 1.0)
        recognized = fracs * context * context
        if self.surface_concept is None:
            unrecognized = 1.0 - recognized.sum()
        else:
            # partially framed objects read as the surface concept, not noise
            recognized[self.surface_concept] += (fracs - recognized).sum()
            unrecognized = 1.0 - fracs.sum()

        weights = np.append(recognized * self.salience,
                            unrecognized) ** self.sharpen
        total = weights.sum()
        if total > 1e-12:
            weights = weights / total
        feat = weights[:-1] @ self.concept_embeddings
        if weights[-1] > 1e-12:
            feat = feat + weights[-1] * _hash_unit_vector(tube_digest(tube, self.seed),
                                                          self.feature_dim)
        return feat.astype(np.float32)


class DictionaryEmbedder:
    """Looks tubes up by content hash in a JSON file {hex_digest: [floats]}."""

    def __init__(self, path: str | Path, input_side: int = 32):
        self.path = Path(path)
        table = json.loads(self.path.read_text())
        self.table = {k: np.asarray(v, dtype=np.float32) for k, v in table.items()}
        if not self.table:
            raise ValueError(f"empty embedding dictionary {path}")
        self.feature_dim = len(next(iter(self.table.values())))
        self.input_side = input_side

    def embed(self, tube: np.ndarray) -> np.ndarray:
        key = tube_digest(tube).hex()
        if key not in self.table:
            raise EmbedderError(f"no dictionary entry for crop tube {key[:12]}")
        return self.table[key]


class HttpEmbedder:
    """POSTs the raw tube blob to `{url}/embed`; expects a D-float32 blob back."""

    def __init__(self, url: str, feature_dim: int, input_side: int = 32,
                 timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.feature_dim = feature_dim
        self.input_side = input_side
        self.timeout = timeout
        self._client = None

    def _http(self):
        if self._client is None:
            import httpx
            self._client = httpx.Client(timeout=self.timeout)
        return self._client

    def embed(self, tube: np.ndarray) -> np.ndarray:
        try:
            resp = self._http().post(
                f"{self.url}/embed", content=encode_blob(np.ascontiguousarray(tube, np.uint8)),
                headers={"content-type": "application/octet-stream"})
            resp.raise_for_status()
            vec = decode_blob(resp.content)
        except Exception as exc:
            raise EmbedderError(f"embedder endpoint failed: {exc}") from exc
        if vec.ndim != 1 or vec.shape[0] != self.feature_dim:
            raise EmbedderError(
                f"embedder endpoint returned shape {vec.shape}, expected ({self.feature_dim},)")
        return vec.astype(np.float32)


def load_query_dictionary(path: str | Path) -> dict[str, np.ndarray]:
    """Phrase -> D-vector, from a JSON file mapping phrase to a blob path
    (relative paths resolve against the dictionary file)."""
    path = Path(path)
    mapping = json.loads(path.read_text())
    out = {}
    for phrase, rel in mapping.items():
        blob_path = Path(rel)
        if not blob_path.is_absolute():
            blob_path = path.parent / blob_path
        out[phrase] = read_blob(blob_path).astype(np.float32)
    return out


def resolve_text_embedding(text: str, dictionary: Optional[dict[str, np.ndarray]] = None,
                           endpoint_url: Optional[str] = None) -> np.ndarray:
    """Resolution order: dictionary file, then external endpoint, else error."""
    if dictionary is not None and text in dictionary:
        return dictionary[text]
    url = endpoint_url or os.environ.get(ENV_EMBEDDER_URL)
    if url:
        import httpx
        try:
            resp = httpx.post(f"{url.rstrip('/')}/embed_text", json={"text": text},
                              timeout=30.0)
            resp.raise_for_status()
            return decode_blob(resp.content).astype(np.float32)
        except Exception as exc:
            raise TextEmbeddingError(f"text embedder endpoint failed: {exc}") from exc
    raise TextEmbeddingError(
        f"no text embedder: '{text}' is not in the query dictionary and no "
        f"embedder endpoint is configured ({ENV_EMBEDDER_URL} unset)")
