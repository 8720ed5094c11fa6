"""
File Formats

Readers and writers for everything the CLI touches:

- matrices: text (`n d` header, then n rows of d floats) or little-endian binary
  (int64 n, int64 d, then n*d float64 row-major)
- marginals and scaling vectors: one float per line
- Laplacians: TSV `u<TAB>v<TAB>weight`, 0-indexed, u < v, with an optional
  `# n <count>` header
- reports: pydantic models as indented JSON via orjson
- benchmark rows: CSV
"""

import csv
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Type, TypeVar, Union

import numpy as np
import orjson
from pydantic import BaseModel, ValidationError

from forster.core.errors import DimensionMismatch, ParseError
from forster.modules.soc import SparseLaplacian

PathLike = Union[str, Path]
ModelT = TypeVar("ModelT", bound=BaseModel)

BINARY_HEADER = np.dtype("<i8")
BINARY_VALUES = np.dtype("<f8")


def _float(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"not a number: {token!r}", line) from None
    if not np.isfinite(value):
        raise ParseError(f"non-finite value {token!r}", line)
    return value


def _content_lines(path: PathLike) -> List[tuple]:
    """(line number, stripped text) for nonblank, non-comment lines."""
    with open(path, "r", encoding="utf-8") as handle:
        return [(number, text.strip()) for number, text in enumerate(handle, start=1)
                if text.strip() and not text.lstrip().startswith("#")]


# ==========================================
# MATRICES
# ==========================================

def read_matrix_text(path: PathLike) -> np.ndarray:
    lines = _content_lines(path)
    if not lines:
        raise ParseError("empty matrix file", 1)
    number, header = lines[0]
    fields = header.split()
    if len(fields) != 2 or not all(f.isdigit() for f in fields):
        raise ParseError(f"expected header 'n d', got {header!r}", number)
    n, d = int(fields[0]), int(fields[1])
    if len(lines) - 1 != n:
        last = lines[-1][0] if len(lines) > 1 else number
        raise ParseError(f"header declares {n} rows, found {len(lines) - 1}", last)
    A = np.empty((n, d))
    for row, (number, text) in enumerate(lines[1:]):
        tokens = text.split()
        if len(tokens) != d:
            raise ParseError(f"expected {d} values, got {len(tokens)}", number)
        A[row] = [_float(token, number) for token in tokens]
    return A


def write_matrix_text(path: PathLike, A: np.ndarray) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{A.shape[0]} {A.shape[1]}\n")
        for row in A:
            handle.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_matrix_binary(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ParseError("binary matrix shorter than its 16-byte header")
    n, d = (int(x) for x in np.frombuffer(raw[:16], dtype=BINARY_HEADER))
    if n < 0 or d < 0 or len(raw) != 16 + 8 * n * d:
        raise ParseError(f"binary payload of {len(raw) - 16} bytes does not match n={n}, d={d}")
    return np.frombuffer(raw[16:], dtype=BINARY_VALUES).astype(np.float64).reshape(n, d)


def write_matrix_binary(path: PathLike, A: np.ndarray) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    header = np.asarray(A.shape, dtype=BINARY_HEADER)
    Path(path).write_bytes(header.tobytes() + np.ascontiguousarray(A, dtype=BINARY_VALUES).tobytes())


def read_matrix(path: PathLike, binary: Optional[bool] = None) -> np.ndarray:
    """Binary when asked, or when the file ends in .bin."""
    if binary is None:
        binary = str(path).endswith(".bin")
    return read_matrix_binary(path) if binary else read_matrix_text(path)


def write_matrix(path: PathLike, A: np.ndarray, binary: bool = False) -> None:
    if binary:
        write_matrix_binary(path, A)
    else:
        write_matrix_text(path, A)


# ==========================================
# VECTORS
# ==========================================

def read_vector(path: PathLike, expected: Optional[int] = None) -> np.ndarray:
    values = []
    for number, text in _content_lines(path):
        tokens = text.split()
        if len(tokens) != 1:
            raise ParseError(f"expected one value per line, got {len(tokens)}", number)
        values.append(_float(tokens[0], number))
    if expected is not None and len(values) != expected:
        raise DimensionMismatch(f"expected {expected} values in {path}, got {len(values)}")
    return np.asarray(values)


def write_vector(path: PathLike, values: Iterable[float]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for x in values:
            handle.write(f"{float(x)!r}\n")


# ==========================================
# LAPLACIANS
# ==========================================

def read_laplacian_tsv(path: PathLike, n: Optional[int] = None) -> SparseLaplacian:
    """Edge list; n comes from the `# n` header, the argument, or the largest index."""
    u: List[int] = []
    v: List[int] = []
    w: List[float] = []
    declared = None
    with open(path, "r", encoding="utf-8") as handle:
        for number, text in enumerate(handle, start=1):
            text = text.strip()
            if not text:
                continue
            if text.startswith("#"):
                fields = text[1:].split()
                if len(fields) == 2 and fields[0] == "n" and fields[1].isdigit():
                    declared = int(fields[1])
                continue
            fields = text.split("\t") if "\t" in text else text.split()
            if len(fields) != 3:
                raise ParseError(f"expected 'u<TAB>v<TAB>weight', got {text!r}", number)
            try:
                a, b = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError(f"bad vertex index in {text!r}", number) from None
            weight = _float(fields[2], number)
            if a < 0 or b < 0:
                raise ParseError("negative vertex index", number)
            if weight < 0.0:
                raise ParseError(f"negative weight {weight}", number)
            u.append(a)
            v.append(b)
            w.append(weight)
    size = n if n is not None else declared
    top = max(max(u, default=-1), max(v, default=-1)) + 1
    if size is None:
        size = top
    if top > size:
        raise DimensionMismatch(f"edge index {top - 1} outside a graph on {size} vertices")
    return SparseLaplacian.from_edges(size, u, v, w)


def write_laplacian_tsv(path: PathLike, L: SparseLaplacian) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"# n {L.n}\n")
        for a, b, weight in L.edges():
            handle.write(f"{a}\t{b}\t{weight!r}\n")


# ==========================================
# JSON REPORTS
# ==========================================

def dumps_report(report: Union[BaseModel, Any]) -> bytes:
    """Indented JSON in field-declaration order; aliases used where declared."""
    if isinstance(report, BaseModel):
        report = report.model_dump(mode="json", by_alias=True)
    return orjson.dumps(report, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)


def write_report(path: PathLike, report: Union[BaseModel, Any]) -> None:
    Path(path).write_bytes(dumps_report(report) + b"\n")


def read_json(path: PathLike) -> Any:
    try:
        return orjson.loads(Path(path).read_bytes())
    except orjson.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {path}: {exc.msg}", exc.lineno) from None


def read_model(path: PathLike, model: Type[ModelT]) -> ModelT:
    try:
        return model.model_validate(read_json(path))
    except ValidationError as exc:
        raise ParseError(f"{path} does not match {model.__name__}: {exc.errors()[0]['msg']}") from None


# ==========================================
# CSV
# ==========================================

def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def append_csv_rows(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Append rows, writing the header first when the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        if fresh:
            writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: PathLike) -> List[dict]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))
