"""Vocabulary file format.

Layout (little-endian)::

    b"CVOC" | u32 version | u64 json length | u64 blob length | JSON | float64 blob | u32 crc32

The JSON document carries the structure; every Gaussian (part geometry and
layer-1 models) lives in the float64 blob and is referenced by offset, so
parameters round-trip bit-exactly. The CRC covers everything before it.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ValidationError

from compvocab.exceptions import (
    VocabularyFormatError,
    VocabularyValidationError,
    VocabularyVersionError,
)
from compvocab.services.vocabulary import (
    AppearanceParam,
    Composition,
    GeometryParam,
    Layer,
    ORComposition,
    Part,
    Polarity,
    Vocabulary,
    validate,
)
from compvocab.utils.io import atomic_write

logger = logging.getLogger(__name__)

MAGIC = b"CVOC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
_CRC = struct.Struct("<I")


# ── Document schema ───────────────────────────────────────────────────────────

class PartDoc(BaseModel):
    polarity: Polarity
    appearance: list[tuple[int, float]]
    geometry: int  # blob offset: mean (2) + cov (4)


class CompositionDoc(BaseModel):
    id: int
    parts: list[PartDoc] = []
    orientation: int | None = None
    gaussian1: int | None = None  # blob offset: mean (n) + cov (n*n)
    estimated: bool = False
    threshold: float | None = None


class ORDoc(BaseModel):
    id: int
    members: list[int]


class LayerDoc(BaseModel):
    index: int
    radius: int
    downsample: float
    threshold: float
    compositions: list[CompositionDoc]
    or_nodes: list[ORDoc]


class VocabularyDoc(BaseModel):
    num_orientations: int
    object_layer: int
    layers: list[LayerDoc]
    class_layer: dict[str, list[int]]


# ── Encoding ──────────────────────────────────────────────────────────────────

def _encode(vocab: Vocabulary) -> tuple[VocabularyDoc, np.ndarray]:
    blob: list[float] = []

    def put(values) -> int:
        offset = len(blob)
        blob.extend(float(v) for v in np.asarray(values, dtype=np.float64).ravel())
        return offset

    layers = []
    for layer in vocab.layers:
        comps = []
        for comp in layer.compositions:
            parts = [
                PartDoc(
                    polarity=p.polarity,
                    appearance=sorted(p.appearance.weights.items()),
                    geometry=put([*p.geometry.mean, *np.ravel(p.geometry.cov)]),
                )
                for p in comp.parts
            ]
            g1 = None
            if comp.mean1 is not None and comp.cov1 is not None:
                g1 = put([*comp.mean1, *np.ravel(comp.cov1)])
            comps.append(CompositionDoc(
                id=comp.id,
                parts=parts,
                orientation=comp.orientation,
                gaussian1=g1,
                estimated=comp.estimated,
                threshold=comp.threshold,
            ))
        layers.append(LayerDoc(
            index=layer.index,
            radius=layer.radius,
            downsample=layer.downsample,
            threshold=layer.threshold,
            compositions=comps,
            or_nodes=[ORDoc(id=o.id, members=list(o.members)) for o in layer.or_nodes],
        ))
    doc = VocabularyDoc(
        num_orientations=vocab.num_orientations,
        object_layer=vocab.object_layer,
        layers=layers,
        class_layer={k: list(v) for k, v in sorted(vocab.class_layer.items())},
    )
    return doc, np.asarray(blob, dtype="<f8")


def _decode(doc: VocabularyDoc, blob: np.ndarray) -> Vocabulary:
    n = doc.num_orientations

    def take(offset: int, count: int) -> np.ndarray:
        if offset < 0 or offset + count > len(blob):
            raise VocabularyFormatError(f"blob offset {offset}+{count} out of range")
        return blob[offset:offset + count]

    layers = []
    for ld in doc.layers:
        comps = []
        for cd in ld.compositions:
            parts = []
            for pd in cd.parts:
                g = take(pd.geometry, 6)
                parts.append(Part(
                    AppearanceParam({int(k): float(w) for k, w in pd.appearance}),
                    GeometryParam(
                        (float(g[0]), float(g[1])),
                        ((float(g[2]), float(g[3])), (float(g[4]), float(g[5]))),
                    ),
                    Polarity(pd.polarity),
                ))
            comp = Composition(
                id=cd.id, layer=ld.index, parts=parts, orientation=cd.orientation,
                estimated=cd.estimated, threshold=cd.threshold,
            )
            if cd.gaussian1 is not None:
                g1 = take(cd.gaussian1, n + n * n)
                comp.mean1 = tuple(float(v) for v in g1[:n])
                comp.cov1 = tuple(
                    tuple(float(v) for v in g1[n + r * n:n + (r + 1) * n]) for r in range(n)
                )
            comps.append(comp)
        layers.append(Layer(
            index=ld.index,
            radius=ld.radius,
            downsample=ld.downsample,
            threshold=ld.threshold,
            compositions=comps,
            or_nodes=[ORComposition(o.id, ld.index, tuple(o.members)) for o in ld.or_nodes],
        ))
    return Vocabulary(
        num_orientations=n,
        object_layer=doc.object_layer,
        layers=layers,
        class_layer={k: list(v) for k, v in doc.class_layer.items()},
    )


def to_bytes(vocab: Vocabulary) -> bytes:
    doc, blob = _encode(vocab)
    payload = json.dumps(doc.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()
    raw = blob.tobytes()
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(payload), len(raw)) + payload + raw
    return body + _CRC.pack(zlib.crc32(body))


def from_bytes(data: bytes, check: bool = True) -> Vocabulary:
    if len(data) < _HEADER.size + _CRC.size:
        raise VocabularyFormatError("file too short")
    magic, version, json_len, blob_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise VocabularyFormatError("not a vocabulary file")
    if version != FORMAT_VERSION:
        raise VocabularyVersionError(f"vocabulary format {version}, expected {FORMAT_VERSION}")
    end = _HEADER.size + json_len + blob_len
    if len(data) != end + _CRC.size or blob_len % 8:
        raise VocabularyFormatError("truncated or oversized vocabulary file")
    (crc,) = _CRC.unpack_from(data, end)
    if crc != zlib.crc32(data[:end]):
        raise VocabularyFormatError("checksum mismatch")
    try:
        doc = VocabularyDoc.model_validate_json(data[_HEADER.size:_HEADER.size + json_len])
    except ValidationError as exc:
        raise VocabularyFormatError(f"bad vocabulary document: {exc}") from exc
    blob = np.frombuffer(data, dtype="<f8", count=blob_len // 8, offset=_HEADER.size + json_len)
    vocab = _decode(doc, blob)
    if check:
        violations = validate(vocab)
        if violations:
            raise VocabularyValidationError(violations)
    return vocab


def save(vocab: Vocabulary, path: str | Path) -> int:
    """Validate, then write atomically; an invalid vocabulary leaves `path` untouched."""
    violations = validate(vocab)
    if violations:
        raise VocabularyValidationError(violations)
    data = to_bytes(vocab)
    with atomic_write(path, "wb") as fh:
        fh.write(data)
    logger.info("Vocabulary saved: %s (%d bytes, %d layers)", path, len(data), vocab.depth)
    return len(data)


def load(path: str | Path, check: bool = True) -> Vocabulary:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise VocabularyFormatError(f"cannot read vocabulary {path}: {exc}") from exc
    vocab = from_bytes(data, check=check)
    logger.info("Vocabulary loaded: %s (%d layers, %d classes)", path, vocab.depth, len(vocab.class_layer))
    return vocab
