"""Frame feature files: a k x d matrix of per-frame embeddings with a small header.

Text container::

    MEDVID-FEAT v1 <k> <d>
    <d space-separated reals>   (k lines)

Binary container: the header line ``MEDVID-FEAT v1b <k> <d>`` followed by k*d
little-endian float64 values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FeatureFormatError

logger = logging.getLogger(__name__)

MAGIC = b"MEDVID-FEAT"
TEXT_VERSION = b"v1"
BINARY_VERSION = b"v1b"


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    """Per-frame feature matrix V with shape (k, d)."""

    matrix: np.ndarray

    @property
    def frame_count(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


def _parse_header(line: bytes) -> tuple[bytes, int, int]:
    fields = line.split()
    if len(fields) != 4 or fields[0] != MAGIC or fields[1] not in (TEXT_VERSION, BINARY_VERSION):
        raise FeatureFormatError(f"Bad frame feature header: {line[:60]!r}")
    try:
        k, d = int(fields[2]), int(fields[3])
    except ValueError:
        raise FeatureFormatError(f"Bad frame/feature counts in header: {line[:60]!r}")
    if k < 0 or d < 1:
        raise FeatureFormatError(f"Invalid shape in header: k={k}, d={d}")
    return fields[1], k, d


def parse_frame_features(raw: bytes) -> FrameFeatures:
    """Parse a text or binary frame feature container.

    Raises:
        FeatureFormatError: On a bad header, a non-ASCII text body, wrong row count/width, or non-finite values
    """
    header, sep, body = raw.partition(b"\n")
    if not sep:
        raise FeatureFormatError("Frame feature file has no header line")
    version, k, d = _parse_header(header.strip())

    if version == BINARY_VERSION:
        expected = k * d * 8
        if len(body) != expected:
            raise FeatureFormatError(f"Binary body has {len(body)} bytes, expected {expected}")
        matrix = np.frombuffer(body, dtype='<f8').reshape(k, d).astype(np.float64)
    else:
        try:
            lines = body.decode('ascii').splitlines()
        except UnicodeDecodeError as e:
            raise FeatureFormatError(f"Text frame features are not ASCII (byte {e.start} of the body)") from e
        rows = [line.split() for line in lines if line.strip()]
        if len(rows) != k:
            raise FeatureFormatError(f"Expected {k} frame rows, found {len(rows)}")
        for i, row in enumerate(rows, start=1):
            if len(row) != d:
                raise FeatureFormatError(f"Frame row {i} has {len(row)} values, expected {d}")
        try:
            matrix = np.array(rows, dtype=np.float64).reshape(k, d)
        except ValueError as e:
            raise FeatureFormatError(f"Non-numeric frame feature value: {e}") from e

    if not np.all(np.isfinite(matrix)):
        raise FeatureFormatError("Frame features contain non-finite values")
    return FrameFeatures(matrix)


def read_frame_features(path: Path) -> FrameFeatures:
    try:
        features = parse_frame_features(Path(path).read_bytes())
    except FeatureFormatError as e:
        raise FeatureFormatError(f"{path}: {e}") from e
    logger.debug("Read %d x %d frame features from %s", features.frame_count, features.dim, path)
    return features


def write_frame_features(path: Path, matrix: np.ndarray, binary: bool = False) -> None:
    """Write a k x d matrix in the text (default) or binary container."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise FeatureFormatError(f"Frame features must be 2-D, got shape {matrix.shape}")
    k, d = matrix.shape
    version = BINARY_VERSION if binary else TEXT_VERSION
    header = b" ".join([MAGIC, version, str(k).encode(), str(d).encode()]) + b"\n"
    if binary:
        body = matrix.astype('<f8').tobytes()
    else:
        body = "".join(" ".join(repr(float(x)) for x in row) + "\n" for row in matrix).encode('ascii')
    Path(path).write_bytes(header + body)
