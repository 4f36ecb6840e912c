"""Dense matrix helpers, seeded sampling and the finite-difference oracle.

Matrices are plain 2-D ``float64`` numpy arrays with rows as samples.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError, OracleFailureError

# Scale of the central-difference step relative to max(1, |x|).
CBRT_EPS = float(np.cbrt(np.finfo(np.float64).eps))

# Below this gradient magnitude relative error is meaningless; compare absolutely.
REL_ERR_FLOOR = 1e-6


def as_matrix(H, name="H") -> np.ndarray:
    """Validate and copy ``H`` into a finite 2-D float64 array."""
    try:
        M = np.array(H, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{name}: not numeric ({exc})") from None
    if M.ndim == 1:
        M = M.reshape(1, -1)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise InvalidInputError(f"{name}: expected a non-empty 2-D matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        r, c = np.argwhere(~np.isfinite(M))[0]
        raise InvalidInputError(f"{name}: non-finite entry at row {r + 1}, column {c + 1}")
    return M


def pairwise_sq_dists(H) -> np.ndarray:
    """Squared Euclidean distances between all rows of ``H``.

    The result is exactly symmetric with an exactly zero diagonal. Differences
    are formed explicitly instead of using the ``|a|^2 + |b|^2 - 2ab`` trick,
    which loses precision for nearby rows.
    """
    H = as_matrix(H)
    diff = H[:, None, :] - H[None, :, :]
    D = np.einsum("ijk,ijk->ij", diff, diff)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


@dataclass(frozen=True)
class FdConfig:
    """Central finite-difference settings.

    The step for coordinate ``x`` is ``rel_step * max(1, |x|)``; the scheme is
    always second-order central.
    """

    rel_step: float = CBRT_EPS
    scheme: int = 2

    def __post_init__(self):
        if not (self.rel_step > 0 and np.isfinite(self.rel_step)):
            raise InvalidInputError("rel_step must be a positive finite number")
        if self.scheme != 2:
            raise InvalidInputError("only the second-order central scheme is supported")

    def step(self, x: float) -> float:
        return self.rel_step * max(1.0, abs(x))


def fd_gradient(f: Callable[[np.ndarray], float], H, cfg: FdConfig | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``H``.

    ``H`` may be any real array; the result has its shape. ``f`` receives a
    fresh perturbed copy on every probe, so it may not mutate state between
    calls without breaking determinism.
    """
    cfg = cfg or FdConfig()
    X = np.array(H, dtype=np.float64)
    grad = np.empty_like(X)
    flat = X.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        x0 = flat[k]
        h = cfg.step(x0)
        # exact representable step so (x+h)-(x-h) is what we divide by
        xp, xm = x0 + h, x0 - h
        flat[k] = xp
        fp = float(f(X.copy()))
        flat[k] = xm
        fm = float(f(X.copy()))
        flat[k] = x0
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(k, X.shape)
            raise OracleFailureError(
                f"function is non-finite when probing coordinate {tuple(int(i) for i in idx)}",
                index=idx,
            )
        gflat[k] = (fp - fm) / (xp - xm)
    return grad


def max_rel_error(analytic, reference, floor: float = REL_ERR_FLOOR) -> float:
    """Max entrywise error scaled by the larger gradient's max magnitude.

    Falls back to absolute error when both gradients are below ``floor``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if a.shape != r.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {r.shape}")
    err = float(np.max(np.abs(a - r))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(r), initial=0.0)))
    return err / scale if scale >= floor else err


def seeded_normal(rows: int, cols: int, seed: int) -> np.ndarray:
    """Standard-normal ``rows x cols`` matrix.

    Generator: numpy ``PCG64`` bit generator seeded with ``seed``, normal
    variates from numpy's ziggurat ``Generator.standard_normal``, filled in
    row-major order.
    """
    if int(rows) < 1 or int(cols) < 1:
        raise InvalidInputError(f"rows and cols must be >= 1, got {rows}x{cols}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    return rng.standard_normal((int(rows), int(cols)))


def parse_csv_matrix(text: str, source: str = "<csv>") -> np.ndarray:
    """Parse headerless comma-separated rows; errors name 1-based row/column."""
    rows = []
    width = None
    for r, record in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not record or all(not cell.strip() for cell in record):
            continue
        values = []
        for c, cell in enumerate(record, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise InvalidInputError(f"{source}: row {r}, column {c}: cannot parse {cell.strip()!r}") from None
            if not np.isfinite(v):
                raise InvalidInputError(f"{source}: row {r}, column {c}: non-finite value")
            values.append(v)
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise InvalidInputError(f"{source}: row {r}: expected {width} columns, found {len(values)}")
        rows.append(values)
    if not rows:
        raise InvalidInputError(f"{source}: no data rows")
    return np.array(rows, dtype=np.float64)


def read_csv_matrix(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidInputError(f"{path}: {exc.strerror}") from None
    return parse_csv_matrix(text, source=str(path))


def format_csv_matrix(H) -> str:
    H = as_matrix(H)
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in H)


def write_csv_matrix(path, H) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_csv_matrix(H))
