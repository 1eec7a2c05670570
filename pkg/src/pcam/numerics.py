"""Dense float64 kernels, seeded randomness, and the finite-difference oracle.

Everything downstream runs on plain 2-D float64 numpy arrays ("matrices"):
C-contiguous row-major storage, no NaN/Inf allowed to escape a public
operation.  Randomness comes exclusively from counter-based Philox streams
keyed by a 64-bit seed, so every derived quantity in the repo is
reproducible across platforms.
"""

from __future__ import annotations

import numpy as np

MATRIX_FLOAT_FORMAT = "%.17g"


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))
        raise ContractViolation(f"{name} contains non-finite entries, first at {tuple(bad[0])}")
    return arr


def softmax(row: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax along `axis`; outputs in (0, 1] summing to 1."""
    x = check_finite("softmax input", row)
    if x.size == 0 or x.shape[axis] == 0:
        raise ContractViolation("softmax input must have length >= 1")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = check_finite("matmul lhs", a)
    b = check_finite("matmul rhs", b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar field over a matrix.

    Perturbs one entry at a time: (f(x + h e) - f(x - h e)) / (2h).  This is
    the oracle every analytic gradient in the repo is checked against, so it
    deliberately shares no code with any of them.
    """
    if h <= 0:
        raise ContractViolation("finite_diff_grad requires h > 0")
    x = check_finite("finite_diff_grad point", x).copy()
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        f_plus = float(f(x))
        x[idx] = orig - h
        f_minus = float(f(x))
        x[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ContractViolation(f"finite_diff_grad: non-finite field value at {idx}")
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Seeded randomness


def rng_from_seed(seed: int) -> np.random.Generator:
    """Counter-based generator; equal seeds give equal streams everywhere."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent child stream of `seed`, addressed by an integer path.

    Used wherever work fans out (per-sample generation, per-epoch shuffles)
    so parallel order can never change the draws.
    """
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path)))
    )


# ---------------------------------------------------------------------------
# Matrix text format: header "rows cols", one whitespace-separated row per
# line, 17 significant digits (lossless float64 round trip).


def format_float(x: float) -> str:
    return MATRIX_FLOAT_FORMAT % float(x)


def save_matrix(path, m: np.ndarray) -> None:
    m = check_finite("save_matrix", m)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ContractViolation("matrix text format holds 2-D data")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for row in m:
            fh.write(" ".join(format_float(v) for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ContractViolation(f"{path}: malformed matrix header")
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (rows, cols):
        raise ContractViolation(f"{path}: header says {(rows, cols)}, body is {data.shape}")
    return check_finite(str(path), data)
