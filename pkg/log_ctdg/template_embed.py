"""Semantic vectors and log levels for mined templates."""

import enum
import hashlib
import logging
import os
import re
import string
import struct
from collections.abc import Mapping, Sequence
from typing import Optional

import numpy as np

from .errors import ContractViolation, EmbeddingFormatError

logger = logging.getLogger(__name__)

WILDCARD = "<*>"

DEFAULT_DIM = 64

EMBEDDING_MAGIC = b"LGEM"
_HEADER = struct.Struct("<4sII")
_KEY_LEN = struct.Struct("<I")

_STRIP = string.punctuation.replace("_", "")


class LogLevel(enum.IntEnum):
    DEBUG = 0
    INFO = 1
    WARN = 2
    ERROR = 3
    FATAL = 4


LEVEL_ORDER = tuple(LogLevel)

_LEVEL_ALIASES = {
    "TRACE": LogLevel.DEBUG,
    "DEBUG": LogLevel.DEBUG,
    "INFO": LogLevel.INFO,
    "NOTICE": LogLevel.INFO,
    "WARN": LogLevel.WARN,
    "WARNING": LogLevel.WARN,
    "ERROR": LogLevel.ERROR,
    "ERR": LogLevel.ERROR,
    "SEVERE": LogLevel.ERROR,
    "FAILURE": LogLevel.FATAL,
    "FATAL": LogLevel.FATAL,
    "CRITICAL": LogLevel.FATAL,
    "CRIT": LogLevel.FATAL,
}

# checked top to bottom, first hit wins; keywords match whole words
_LEVEL_RULES = (
    (LogLevel.FATAL, re.compile(r"\b(?:critical|fatal)\b")),
    (LogLevel.ERROR, re.compile(r"\b(?:errors?|fail(?:s|ed|ing|ures?)?)\b")),
    (LogLevel.WARN, re.compile(r"\b(?:warn(?:s|ing|ings)?|deprecated)\b")),
    (LogLevel.DEBUG, re.compile(r"\b(?:debug|trace)\b")),
)


def parse_level(value: Optional[str]) -> Optional[LogLevel]:
    """Map a level column value such as ``WARNING`` onto a LogLevel.

    Returns ``None`` for empty or unrecognized values.
    """
    if not value:
        return None
    return _LEVEL_ALIASES.get(value.strip().upper())


def infer_log_level(template_text: str) -> LogLevel:
    """Assign a level to a template from keywords in its text.

    Parameters
    ----------
    template_text : str
        The template text, wildcards included.

    Returns
    -------
    LogLevel
        FATAL for "critical"/"fatal", ERROR for "error"/"fail", WARN for
        "warn"/"deprecated", DEBUG for "debug"/"trace", INFO otherwise.
        Keywords match whole words with their common inflections, so
        "failed" counts and "traceback" does not. The match is
        case-insensitive and the more severe rule wins.
    """
    lowered = template_text.lower()
    for level, pattern in _LEVEL_RULES:
        if pattern.search(lowered):
            return level
    return LogLevel.INFO


def one_hot_level(level: LogLevel) -> np.ndarray:
    vec = np.zeros(len(LEVEL_ORDER), dtype=np.float64)
    vec[int(LogLevel(level))] = 1.0
    return vec


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ContractViolation("cannot normalize a zero vector")
    return vec / norm


def _literal_tokens(tokens: Sequence[str]) -> list[str]:
    out = []
    for tok in tokens:
        if tok == WILDCARD:
            continue
        tok = tok.replace(WILDCARD, "").strip(_STRIP).lower()
        if tok:
            out.append(tok)
    return out


def _token_slot(token: str, dim: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        token.encode("utf-8"),
        digest_size=16,
        salt=seed.to_bytes(8, "little", signed=False),
    ).digest()
    position = int.from_bytes(digest[:8], "little") % dim
    sign = 1.0 if digest[8] & 1 else -1.0
    return position, sign


def hashed_embedding(
    tokens: Sequence[str], dim: int = DEFAULT_DIM, seed: int = 0
) -> np.ndarray:
    """Sum signed one-hot token vectors and normalize.

    Every literal token is hashed twice, once for its position in ``R^dim``
    and once for its sign. Wildcards carry no meaning and are skipped. A
    template made only of wildcards falls back to hashing its full text so
    the output always has unit norm.
    """
    if not tokens:
        raise ContractViolation("template must have at least one token")
    literals = _literal_tokens(tokens) or [" ".join(tokens)]
    vec = np.zeros(dim, dtype=np.float64)
    for tok in literals:
        pos, sign = _token_slot(tok, dim, seed)
        vec[pos] += sign
    if not vec.any():
        # every token collided and cancelled out
        pos, sign = _token_slot(" ".join(tokens), dim, seed)
        vec[pos] = sign
    return _normalize(vec)


def embed_template(
    template,
    provider: str = "hashed",
    *,
    dim: int = DEFAULT_DIM,
    seed: int = 0,
    external: Optional[Mapping[str, np.ndarray]] = None,
) -> np.ndarray:
    """Compute the semantic vector of one template.

    Parameters
    ----------
    template : Template
        Anything with a ``tokens`` list.
    provider : str, optional
        ``"hashed"`` (default) or ``"external"``.
    dim : int, optional
        Output dimension.
    seed : int, optional
        Hash seed of the hashed provider.
    external : mapping, optional
        Template text to vector, as returned by ``load_embeddings``. Vectors
        must already have dimension ``dim``.

    Returns
    -------
    np.ndarray
        A unit-norm vector of length ``dim``.
    """
    tokens = list(template.tokens)
    if provider == "external":
        text = " ".join(tokens)
        vec = None if external is None else external.get(text)
        if vec is not None:
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ContractViolation(
                    f"external vector for {text!r} has shape {vec.shape}, expected ({dim},)"
                )
            return _normalize(vec)
        logger.warning(
            "no external vector for template %r, using the hashed embedder", text
        )
    elif provider != "hashed":
        raise ValueError(f"unknown embedding provider: {provider!r}")
    return hashed_embedding(tokens, dim=dim, seed=seed)


def orthogonal_projection(src_dim: int, dim: int, seed: int) -> np.ndarray:
    """Return a ``(src_dim, dim)`` matrix with orthonormal rows or columns."""
    rng = np.random.default_rng(seed)
    big, small = max(src_dim, dim), min(src_dim, dim)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    # fix the sign ambiguity of QR so the result only depends on the seed
    q = q * np.sign(np.diag(r))
    return q if src_dim >= dim else q.T


def save_embeddings(path: str, vectors: Mapping[str, np.ndarray]) -> int:
    """Write template vectors in the binary exchange format.

    The header is the magic ``LGEM``, the vector count and the dimension
    (little-endian uint32). Each entry is a uint32 key length, the UTF-8 key
    and ``dim`` float32 values.
    """
    items = list(vectors.items())
    dim = int(np.asarray(items[0][1]).shape[0]) if items else 0
    with open(path, "wb") as fp:
        fp.write(_HEADER.pack(EMBEDDING_MAGIC, len(items), dim))
        for key, vec in items:
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise ContractViolation(
                    f"vector for {key!r} has shape {vec.shape}, expected ({dim},)"
                )
            raw = key.encode("utf-8")
            fp.write(_KEY_LEN.pack(len(raw)))
            fp.write(raw)
            fp.write(vec.tobytes())
    return len(items)


def _read_raw_embeddings(path: str) -> tuple[int, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"embedding file does not exist: {path}")
    with open(path, "rb") as fp:
        data = fp.read()

    if len(data) < _HEADER.size:
        raise EmbeddingFormatError(f"{path}: file too short for a header")
    magic, count, src_dim = _HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")

    offset = _HEADER.size
    vec_bytes = 4 * src_dim
    out = {}
    for i in range(count):
        if offset + _KEY_LEN.size > len(data):
            raise EmbeddingFormatError(f"{path}: truncated at entry {i}")
        (key_len,) = _KEY_LEN.unpack_from(data, offset)
        offset += _KEY_LEN.size
        end = offset + key_len + vec_bytes
        if end > len(data):
            raise EmbeddingFormatError(f"{path}: truncated at entry {i}")
        key = data[offset : offset + key_len].decode("utf-8")
        offset += key_len
        out[key] = np.frombuffer(data, dtype="<f4", count=src_dim, offset=offset)
        offset = end
    return src_dim, out


def load_embeddings(
    path: str, dim: int = DEFAULT_DIM, seed: int = 0
) -> dict[str, np.ndarray]:
    """Read precomputed template vectors.

    Parameters
    ----------
    path : str
        File written by ``save_embeddings`` or an external tool using the
        same layout.
    dim : int, optional
        Configured embedding dimension. Vectors of another dimension are
        mapped through a fixed orthogonal projection seeded with ``seed``.
    seed : int, optional
        Run seed.

    Returns
    -------
    dict
        Template text to unit-norm float64 vector of length ``dim``.
    """
    src_dim, raw = _read_raw_embeddings(path)
    if not raw:
        return {}

    proj = None
    if src_dim != dim:
        logger.info("projecting %d external vectors from %d to %d dims", len(raw), src_dim, dim)
        proj = orthogonal_projection(src_dim, dim, seed)

    out = {}
    for key, vec in raw.items():
        vec = vec.astype(np.float64)
        if proj is not None:
            vec = vec @ proj
        if not np.any(vec):
            logger.warning("dropping zero vector for template %r", key)
            continue
        out[key] = _normalize(vec)
    return out
