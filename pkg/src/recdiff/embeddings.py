"""Item representation tables: the trainable collaborative embedding, the
frozen semantic matrix (file-backed or pseudo-generated), and the trainable
adapter that projects semantics into the collaborative space."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

SEMANTIC_MAGIC = "recdiff-semantic-v1"


def stable_seed(*parts) -> int:
    """Process-independent 64-bit seed derived from the given parts."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class SemanticMatrix:
    """Frozen per-item semantic vectors with a trailing all-zero padding row."""

    matrix: torch.Tensor        # (num_items + 1, d_prime), requires_grad False
    source_tag: str

    @property
    def num_items(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def d_prime(self) -> int:
        return self.matrix.shape[1]

    def checksum(self) -> str:
        return hashlib.sha256(self.matrix.detach().cpu().numpy()
                              .astype(np.float32).tobytes()).hexdigest()


def _with_padding_row(rows: np.ndarray, source_tag: str) -> SemanticMatrix:
    padded = np.concatenate([rows, np.zeros((1, rows.shape[1]), dtype=rows.dtype)], axis=0)
    tensor = torch.from_numpy(np.ascontiguousarray(padded.astype(np.float32)))
    tensor.requires_grad_(False)
    return SemanticMatrix(matrix=tensor, source_tag=source_tag)


def pseudo_embed(prompt: str, d_prime: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm stand-in for an external text embedder.

    The vector is a hash-seeded standard Gaussian draw, so distinct prompts
    land nearly orthogonal at realistic widths.
    """
    if d_prime < 1:
        raise ValueError(f"d_prime must be >= 1, got {d_prime}")
    digest = hashlib.sha256(f"{seed}:{prompt}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(d_prime).astype(np.float32)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:  # unreachable for any practical width, kept for safety
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


def pseudo_semantic_matrix(prompts: list[str], d_prime: int, seed: int) -> SemanticMatrix:
    rows = np.stack([pseudo_embed(p, d_prime, seed) for p in prompts]).astype(np.float32)
    return _with_padding_row(rows, source_tag="pseudo")


def save_semantic_matrix(rows: np.ndarray, path: str | Path, source_tag: str = "pseudo") -> None:
    """Write real item rows (no padding row) as a JSON header line followed by
    a raw little-endian float32 payload. A `.csv` destination writes CSV."""
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise ValueError(f"semantic matrix must be 2-D, got shape {tuple(rows.shape)}")
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, rows, delimiter=",", fmt="%.9g")
        return
    header = {"magic": SEMANTIC_MAGIC, "shape": [int(rows.shape[0]), int(rows.shape[1])],
              "dtype": "float32", "byteorder": "little", "source_tag": source_tag}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def load_semantic_matrix(path: str | Path, expected_items: int) -> SemanticMatrix:
    """Load a semantic matrix file, append the zero padding row, and freeze it."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"semantic matrix file not found: {path}")
    if path.suffix.lower() == ".csv":
        rows = _load_semantic_csv(path)
        tag = "csv"
    else:
        rows, tag = _load_semantic_binary(path)
    if rows.shape[0] != expected_items:
        raise ValueError(f"semantic matrix has {rows.shape[0]} rows, expected {expected_items}")
    return _with_padding_row(rows, source_tag=tag)


def _load_semantic_csv(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            values = [float(v) for v in line.split(",")]
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ValueError(f"line {line_no}: ragged row width {len(values)}, expected {width}")
            rows.append(values)
    if not rows:
        raise ValueError(f"semantic matrix file {path} is empty")
    return np.asarray(rows, dtype=np.float32)


def _load_semantic_binary(path: Path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ValueError(f"{path}: missing or invalid semantic matrix header") from None
        if header.get("magic") != SEMANTIC_MAGIC:
            raise ValueError(f"{path}: not a {SEMANTIC_MAGIC} file")
        n, d_prime = (int(v) for v in header["shape"])
        payload = fh.read()
    expected_bytes = n * d_prime * 4
    if len(payload) != expected_bytes:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {expected_bytes}")
    rows = np.frombuffer(payload, dtype="<f4").reshape(n, d_prime).copy()
    return rows, str(header.get("source_tag", "unknown"))


class SemanticAdapter(nn.Module):
    """Projects frozen semantic vectors into the d-wide collaborative space.

    One affine layer, or two with a smooth nonlinearity between. The input is
    detached so no gradient ever reaches the semantic matrix.
    """

    def __init__(self, d_prime: int, d: int, layers: int = 2, activation: str = "gelu"):
        super().__init__()
        if layers not in (1, 2):
            raise ValueError(f"adapter layers must be 1 or 2, got {layers}")
        self.layers = layers
        self.fc1 = nn.Linear(d_prime, d)
        if layers == 2:
            self.act = nn.GELU() if activation == "gelu" else nn.Tanh()
            self.fc2 = nn.Linear(d, d)

    def forward(self, e_llm: torch.Tensor) -> torch.Tensor:
        x = e_llm.detach()
        if x.shape[-1] != self.fc1.in_features:
            raise ValueError(f"adapter expects width {self.fc1.in_features}, got {x.shape[-1]}")
        out = self.fc1(x)
        if self.layers == 2:
            out = self.fc2(self.act(out))
        return out


def make_collaborative_table(num_items: int, d: int) -> nn.Embedding:
    """Trainable (num_items + 1) x d table; the final row is padding, kept
    all-zero and excluded from gradient updates."""
    table = nn.Embedding(num_items + 1, d, padding_idx=num_items)
    with torch.no_grad():
        table.weight.normal_(0.0, 0.02)
        table.weight[num_items].zero_()
    return table
