"""Anchor-prompt plumbing: VLM request/parse, text embeddings, SAP attention.

The VLM is queried once per image pair with a fixed instruction template and
must answer in a strict three-label format (Anchor-prompt / Caption A /
Caption B). The anchor text is a compact phrase for the concept the two images
share; at denoise time its key/value rows are concatenated onto each caption
branch of the cross-attention (`sap_attention`), and the two branch outputs
are blended per morph index (`combine_branches`).

No text encoder is shipped. `HashingTextEmbedder` stands in for one offline:
it hashes each token to a deterministic pseudorandom row, which is all the toy
pipeline needs. Real CLIP-style encoders plug in through the same
embed/embed_padded surface.
"""

from __future__ import annotations

import base64
import json
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError, VlmClientError, VlmParseError

VLM_PROMPT_TEMPLATE = """\
You are given two correlated images.
Your goal is to analyze them in a way that helps to generate smooth and semantically consistent transitions between the two.
1. First, carefully identify their shared semantic concept, the main subject, action, or event that connects both images.
2. Next, identify their shared layout structure, the spatial arrangement or composition of major elements
   (e.g., background, perspective, subject position) that remains partially consistent between both.
3. Summarize the shared theme (semantic and/or layout) in one short compact phrase.
4. Then, write short but precise captions for each image, ensuring that both captions naturally include
   the shared semantic meaning and layout structure.
Use this exact format strictly:
Anchor-prompt: [compact phrase capturing shared semantic or layout aspect]
Caption A: [short factual description of image1 including the shared theme]
Caption B: [short factual description of image2 including the shared theme]
Avoid artistic or stylistic adjectives (e.g., "beautiful", "vibrant"). Focus only on semantic meaning and spatial arrangement, not texture, color tone, or artistic style.

Output format.
Anchor-prompt: [compact shared concept]
Caption A: [description of image A including the shared theme]
Caption B: [description of image B including the shared theme]

Avoid artistic or stylistic adjectives; focus strictly on semantics and spatial structure.
"""


@dataclass
class PromptTriplet:
    """Anchor text plus the two captions, with optional embedding matrices."""

    anchor: str
    caption_a: str
    caption_b: str
    e_anchor: np.ndarray | None = None
    e_a: np.ndarray | None = None
    e_b: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "PromptTriplet":
        return cls(anchor="", caption_a="", caption_b="")

    def texts(self) -> dict[str, str]:
        return {"anchor": self.anchor, "caption_a": self.caption_a,
                "caption_b": self.caption_b}


def build_vlm_request(image_a_path, image_b_path, model: str = "") -> dict:
    """Assemble the captioning request payload for one image pair.

    The payload carries both images base64-encoded and the verbatim
    instruction template; it is fully deterministic for fixed inputs.
    Unreadable images raise OSError.
    """
    return {
        "model": model,
        "prompt": VLM_PROMPT_TEMPLATE,
        "images": [
            base64.b64encode(Path(image_a_path).read_bytes()).decode("ascii"),
            base64.b64encode(Path(image_b_path).read_bytes()).decode("ascii"),
        ],
    }


_LABEL_PATTERNS = {
    "anchor": re.compile(r"^\s*Anchor-prompt:\s*(.*)$", re.MULTILINE),
    "caption_a": re.compile(r"^\s*Caption A:\s*(.*)$", re.MULTILINE),
    "caption_b": re.compile(r"^\s*Caption B:\s*(.*)$", re.MULTILINE),
}


def parse_vlm_response(text: str) -> PromptTriplet:
    """Extract the three labeled lines from a VLM response.

    Tolerates prose before/after the block, surrounding whitespace, and
    bracketed placeholder text. Raises VlmParseError (carrying the raw
    response) when any label is missing.
    """
    fields = {}
    for name, pattern in _LABEL_PATTERNS.items():
        match = pattern.search(text)
        if match is None:
            raise VlmParseError(f"response is missing the {name} label", raw_text=text)
        fields[name] = _strip_placeholder(match.group(1))
    return PromptTriplet(**fields)


def _strip_placeholder(value: str) -> str:
    value = value.strip()
    if value.startswith("[") and value.endswith("]"):
        value = value[1:-1].strip()
    return value


class VlmClient:
    """Minimal HTTP client for the captioning endpoint.

    POSTs the request payload as JSON and expects a JSON body with the
    generated text under "text". One retry on failure, then VlmClientError.
    """

    def __init__(self, url: str, model: str = "", timeout: float = 30.0,
                 retries: int = 1, session=None):
        if not url:
            raise ValueError("VLM endpoint URL is required")
        self.url = url
        self.model = model
        self.timeout = timeout
        self.retries = retries
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def caption_pair(self, image_a_path, image_b_path) -> PromptTriplet:
        payload = build_vlm_request(image_a_path, image_b_path, model=self.model)
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                response = self._session.post(self.url, json=payload,
                                              timeout=self.timeout)
                response.raise_for_status()
                body = response.json()
                return parse_vlm_response(body["text"])
            except VlmParseError:
                raise
            except Exception as exc:  # noqa: BLE001 - network/HTTP/JSON errors retry
                last_error = exc
        raise VlmClientError(f"VLM endpoint {self.url} unreachable: {last_error}")


def save_triplet(triplet: PromptTriplet, path, source: str = "vlm") -> None:
    Path(path).write_text(json.dumps({**triplet.texts(), "source": source}, indent=2))


def load_triplet(path) -> PromptTriplet:
    data = json.loads(Path(path).read_text())
    return PromptTriplet(anchor=data["anchor"], caption_a=data["caption_a"],
                         caption_b=data["caption_b"])


# -- text embeddings -------------------------------------------------------


class HashingTextEmbedder:
    """Deterministic stand-in text encoder: one pseudorandom row per token.

    Rows are seeded from crc32 of the token text, so identical tokens map to
    identical rows across processes. Empty text embeds to a (0, dim) matrix.
    """

    def __init__(self, dim: int = 16, pad_tokens: int = 8):
        self.dim = dim
        self.pad_tokens = pad_tokens

    def embed(self, text: str) -> np.ndarray:
        tokens = text.split()
        rows = np.zeros((len(tokens), self.dim), dtype=np.float64)
        for i, token in enumerate(tokens):
            rows[i] = self._token_row(token)
        return rows

    def embed_padded(self, text: str) -> np.ndarray:
        """Fixed-length embedding (pad_tokens rows, zero padded/truncated)."""
        rows = self.embed(text)[: self.pad_tokens]
        padded = np.zeros((self.pad_tokens, self.dim), dtype=np.float64)
        padded[: len(rows)] = rows
        return padded

    def _token_row(self, token: str) -> np.ndarray:
        from .denoiser import SplitMix64

        rng = SplitMix64(zlib.crc32(token.lower().encode("utf-8")))
        return rng.uniform((self.dim,))


def embed_triplet(triplet: PromptTriplet, embedder: HashingTextEmbedder) -> PromptTriplet:
    """Fill a triplet's embedding matrices: captions padded, anchor raw."""
    return PromptTriplet(
        anchor=triplet.anchor,
        caption_a=triplet.caption_a,
        caption_b=triplet.caption_b,
        e_anchor=embedder.embed(triplet.anchor),
        e_a=embedder.embed_padded(triplet.caption_a),
        e_b=embedder.embed_padded(triplet.caption_b),
    )


# -- attention math ---------------------------------------------------------


@dataclass
class AttentionInputs:
    """One branch of anchored cross-attention: queries, endpoint K/V, anchor K/V."""

    q: np.ndarray
    k_x: np.ndarray
    v_x: np.ndarray
    k_anc: np.ndarray
    v_anc: np.ndarray

    def __post_init__(self):
        d = self.q.shape[1]
        for name in ("k_x", "v_x", "k_anc", "v_anc"):
            mat = getattr(self, name)
            if mat.ndim != 2 or mat.shape[1] != d:
                raise ShapeError(f"{name} must have width {d}, got {mat.shape}")
        if self.k_x.shape[0] != self.v_x.shape[0]:
            raise ShapeError("k_x and v_x must have equal row counts")
        if self.k_anc.shape[0] != self.v_anc.shape[0]:
            raise ShapeError("k_anc and v_anc must have equal row counts")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def plain_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rowwise softmax(q k^T / sqrt(d)) v."""
    d = q.shape[1]
    if d == 0:
        raise ValueError("attention head dimension must be positive")
    return _softmax_rows(q @ k.T / math.sqrt(d)) @ v


def sap_attention(inp: AttentionInputs) -> np.ndarray:
    """Attention over the endpoint keys/values concatenated with the anchor's.

    With zero anchor rows this is exactly plain attention over (k_x, v_x).
    """
    k = np.concatenate([inp.k_x, inp.k_anc], axis=0)
    v = np.concatenate([inp.v_x, inp.v_anc], axis=0)
    return plain_attention(inp.q, k, v)


def combine_branches(attn_a: np.ndarray, attn_b: np.ndarray, alpha_k: float,
                     mode: str = "linear") -> np.ndarray:
    """Blend the two endpoint attention branches for morph weight alpha_k."""
    attn_a = np.asarray(attn_a, dtype=np.float64)
    attn_b = np.asarray(attn_b, dtype=np.float64)
    if attn_a.shape != attn_b.shape:
        raise ShapeError(f"branch shapes differ: {attn_a.shape} vs {attn_b.shape}")
    if mode == "linear":
        return (1.0 - alpha_k) * attn_a + alpha_k * attn_b
    if mode == "slerp":
        from .core_math import slerp_vec

        flat_a, flat_b = attn_a.ravel(), attn_b.ravel()
        if np.linalg.norm(flat_a) == 0.0 or np.linalg.norm(flat_b) == 0.0:
            return (1.0 - alpha_k) * attn_a + alpha_k * attn_b
        return slerp_vec(flat_a, flat_b, alpha_k).reshape(attn_a.shape)
    raise ValueError(f"unknown branch combination mode {mode!r}")


def anchor_similarity(e_anc: np.ndarray, e_a: np.ndarray,
                      e_b: np.ndarray) -> tuple[float, float]:
    """Cosine similarity between the pooled anchor embedding and each caption's.

    Pooling is the token mean. At full scale with a CLIP-style encoder these
    similarities sit around 0.90 for both captions; the toy embedder only
    guarantees the [-1, 1] contract.
    """
    anchor = _pooled(e_anc, "anchor")
    sim_a = _cosine(anchor, _pooled(e_a, "caption A"))
    sim_b = _cosine(anchor, _pooled(e_b, "caption B"))
    return sim_a, sim_b


def _pooled(embedding: np.ndarray, name: str) -> np.ndarray:
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.size == 0:
        raise ValueError(f"{name} embedding is empty")
    pooled = embedding.mean(axis=0)
    if np.linalg.norm(pooled) == 0.0:
        raise ValueError(f"{name} embedding pools to the zero vector")
    return pooled


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    value = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(1.0, max(-1.0, value))
