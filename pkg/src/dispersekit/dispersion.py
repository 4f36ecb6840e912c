"""Dispersive losses over a batch of embeddings, their exact gradients, and InfoNCE.

All pairwise variants average over ordered pairs ``i != j`` unless
``include_self_pairs`` is set, in which case the diagonal joins the average.
The covariance variant is the unnormalized squared Frobenius norm of the
off-diagonal part of the centered feature covariance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateBatchError, InvalidInputError, NormalizationError, PairingError
from .numeric_core import as_matrix, pairwise_sq_dists

VARIANTS = ("infonce_l2", "infonce_cos", "hinge", "covariance")
HINGE_FORMS = ("squared_distance", "distance")
DISTANCES = ("l2_squared", "cosine")

MIN_ROW_NORM = 1e-12


@dataclass(frozen=True)
class DispersionSpec:
    variant: str = "infonce_l2"
    tau: float = 0.8
    epsilon: float = 1e-8
    margin: float = 1.0
    hinge_form: str = "squared_distance"
    include_self_pairs: bool = False

    def __post_init__(self):
        problems = _spec_problems(asdict(self))
        if problems:
            raise ConfigError(problems)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "DispersionSpec":
        if not isinstance(payload, Mapping):
            raise ConfigError(["top level: expected a JSON object"])
        fields = set(cls.__dataclass_fields__)
        problems = [f"{k}: unknown key" for k in sorted(set(payload) - fields)]
        merged = {**asdict(cls()), **{k: v for k, v in payload.items() if k in fields}}
        problems += _spec_problems(merged)
        if problems:
            raise ConfigError(problems)
        return cls(**merged)

    @classmethod
    def from_json(cls, text: str) -> "DispersionSpec":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON ({exc})"]) from None
        return cls.from_dict(payload)


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _spec_problems(d: Mapping) -> list[str]:
    problems = []
    if d["variant"] not in VARIANTS:
        problems.append(f"variant: must be one of {', '.join(VARIANTS)}")
    if not (_is_real(d["tau"]) and d["tau"] > 0):
        problems.append("tau: must be a finite real > 0")
    if not (_is_real(d["epsilon"]) and d["epsilon"] >= 0):
        problems.append("epsilon: must be a finite real >= 0")
    if not (_is_real(d["margin"]) and d["margin"] > 0):
        problems.append("margin: must be a finite real > 0")
    if d["hinge_form"] not in HINGE_FORMS:
        problems.append(f"hinge_form: must be one of {', '.join(HINGE_FORMS)}")
    if not isinstance(d["include_self_pairs"], bool):
        problems.append("include_self_pairs: must be a boolean")
    return problems


@dataclass(frozen=True)
class PositivePairing:
    """Anchor index -> positive index, each positive a different in-batch row."""

    pairs: tuple[tuple[int, int], ...]

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, int] | Sequence[int]) -> "PositivePairing":
        if isinstance(mapping, Mapping):
            items = sorted((int(i), int(p)) for i, p in mapping.items())
        else:
            items = [(i, int(p)) for i, p in enumerate(mapping)]
        return cls(tuple(items))

    @classmethod
    def ring(cls, B: int) -> "PositivePairing":
        """Pair each anchor with the next row, wrapping around."""
        return cls(tuple((i, (i + 1) % B) for i in range(B)))

    def validate(self, B: int) -> None:
        if not self.pairs:
            raise PairingError("pairing is empty")
        for i, p in self.pairs:
            if not (0 <= i < B and 0 <= p < B):
                raise PairingError(f"pair {i}->{p} is outside a batch of {B} rows")
            if i == p:
                raise PairingError(f"anchor {i} is paired with itself")


def _batch(H) -> np.ndarray:
    H = as_matrix(H)
    if H.shape[0] < 2:
        raise DegenerateBatchError(f"need at least 2 rows for a pairwise loss, got {H.shape[0]}")
    return H


def _pair_mask(B: int, include_self: bool) -> np.ndarray:
    mask = np.ones((B, B), dtype=bool)
    if not include_self:
        np.fill_diagonal(mask, False)
    return mask


def _unit_rows(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(H, axis=1)
    bad = np.flatnonzero(norms < MIN_ROW_NORM)
    if bad.size:
        raise NormalizationError(f"row {bad[0] + 1} has norm below {MIN_ROW_NORM}; cosine dissimilarity is undefined")
    return H / norms[:, None], norms


def cosine_dissimilarity(H) -> np.ndarray:
    """``1 - cos(h_i, h_j)`` for all row pairs.

    Evaluated as ``|u_i - u_j|^2 / 2`` on unit rows, which is exactly zero for
    parallel rows and never negative.
    """
    U, _ = _unit_rows(as_matrix(H))
    return 0.5 * pairwise_sq_dists(U)


def _dissimilarity(H: np.ndarray, distance: str) -> np.ndarray:
    if distance == "l2_squared":
        return pairwise_sq_dists(H)
    if distance == "cosine":
        return cosine_dissimilarity(H)
    raise InvalidInputError(f"unknown distance {distance!r}")


def _masked_logsumexp(A: np.ndarray, mask: np.ndarray, axis=None):
    # entries outside mask are ignored; every reduced slice has >= 1 unmasked entry
    shift = np.max(np.where(mask, A, -np.inf), axis=axis, keepdims=True)
    total = np.sum(np.exp(np.where(mask, A - shift, -np.inf)), axis=axis, keepdims=True)
    out = np.log(total) + shift
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def _row_softmax(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized weights over ``mask`` and the per-row log normalizers."""
    log_z = _masked_logsumexp(logits, mask, axis=1)
    W = np.exp(np.where(mask, logits - log_z[:, None], -np.inf))
    return W, log_z


def softmax_weights(H, tau: float, include_self_pairs: bool = False) -> np.ndarray:
    """Per-anchor repulsion weights from squared L2 distances.

    Row ``i`` is the softmax of ``-|h_i - h_j|^2 / tau`` over neighbours ``j``;
    the diagonal is zero unless self pairs are included.
    """
    if not tau > 0:
        raise InvalidInputError("tau must be > 0")
    H = _batch(H)
    W, _ = _row_softmax(-pairwise_sq_dists(H) / tau, _pair_mask(H.shape[0], include_self_pairs))
    return W


def _log_mean_exp_plus_eps(logits: np.ndarray, mask: np.ndarray, epsilon: float) -> float:
    log_mean = _masked_logsumexp(logits, mask) - math.log(int(mask.sum()))
    if epsilon > 0:
        return float(np.logaddexp(log_mean, math.log(epsilon)))
    return float(log_mean)


def dispersive_loss(H, spec: DispersionSpec) -> float:
    """Scalar dispersive loss of batch ``H`` for the variant in ``spec``."""
    H = _batch(H)
    B = H.shape[0]
    v = spec.variant
    if v in ("infonce_l2", "infonce_cos"):
        D = _dissimilarity(H, "l2_squared" if v == "infonce_l2" else "cosine")
        return _log_mean_exp_plus_eps(-D / spec.tau, _pair_mask(B, spec.include_self_pairs), spec.epsilon)
    if v == "hinge":
        mask = _pair_mask(B, spec.include_self_pairs)
        D = pairwise_sq_dists(H)
        gap = D if spec.hinge_form == "squared_distance" else np.sqrt(D)
        viol = np.maximum(0.0, spec.margin - gap)
        return float(np.sum(np.where(mask, viol * viol, 0.0)) / mask.sum())
    if v == "covariance":
        return covariance_offdiag_energy(H)
    raise InvalidInputError(f"unknown variant {v!r}")


def covariance_offdiag_energy(H) -> float:
    """Squared Frobenius norm of the off-diagonal centered covariance."""
    H = _batch(H)
    Hc = H - H.mean(axis=0)
    C = Hc.T @ Hc / (H.shape[0] - 1)
    off = C - np.diag(np.diag(C))
    return float(np.sum(off * off))


def _pairwise_l2_backprop(H: np.ndarray, G: np.ndarray) -> np.ndarray:
    # G[i, j] = dL/dD_ij with D_ij = |h_i - h_j|^2, counted once per ordered pair
    S = G + G.T
    return 2.0 * (S.sum(axis=1)[:, None] * H - S @ H)


def dispersive_grad(H, spec: DispersionSpec) -> np.ndarray:
    """Exact gradient of :func:`dispersive_loss` with respect to every row of ``H``.

    Each row enters both as an anchor and as a neighbour of the other anchors;
    both contributions are included. For the InfoNCE variants the pair weights
    factor as ``pi_i * w_ij`` where ``w`` are the per-anchor softmax weights and
    ``pi_i`` is anchor ``i``'s share of the (epsilon-padded) total mass.
    """
    H = _batch(H)
    B = H.shape[0]
    v = spec.variant
    mask = _pair_mask(B, spec.include_self_pairs)
    if v in ("infonce_l2", "infonce_cos"):
        D = _dissimilarity(H, "l2_squared" if v == "infonce_l2" else "cosine")
        logits = -D / spec.tau
        W, log_row = _row_softmax(logits, mask)
        log_total = _masked_logsumexp(logits, mask)
        if spec.epsilon > 0:
            log_total = float(np.logaddexp(log_total, math.log(spec.epsilon * mask.sum())))
        share = np.exp(log_row - log_total)
        G = -(share[:, None] * W) / spec.tau  # dL/dD_ij
        if v == "infonce_l2":
            return _pairwise_l2_backprop(H, G)
        # D = 1 - <u_i, u_j> with unit rows u
        U, norms = _unit_rows(H)
        gU = -(G + G.T) @ U
        radial = np.sum(gU * U, axis=1, keepdims=True)
        return (gU - radial * U) / norms[:, None]
    if v == "hinge":
        n = mask.sum()
        D = pairwise_sq_dists(H)
        if spec.hinge_form == "squared_distance":
            viol = np.where(mask, np.maximum(0.0, spec.margin - D), 0.0)
            G = -2.0 * viol / n
        else:
            r = np.sqrt(D)
            viol = np.where(mask, np.maximum(0.0, spec.margin - r), 0.0)
            # dr/dD = 1/(2r); coincident rows take the zero subgradient
            safe = np.where(r > 0, r, 1.0)
            G = np.where(r > 0, -2.0 * viol / n / (2.0 * safe), 0.0)
        return _pairwise_l2_backprop(H, G)
    if v == "covariance":
        Hc = H - H.mean(axis=0)
        C = Hc.T @ Hc / (B - 1)
        off = C - np.diag(np.diag(C))
        # columns of Hc sum to zero, so the centering Jacobian is absorbed
        return 4.0 * Hc @ off / (B - 1)
    raise InvalidInputError(f"unknown variant {v!r}")


HINGE_SUBGRADIENT_NOTE = (
    "distance-form hinge: at coincident rows (zero distance) the pair contributes the "
    "zero subgradient; at the margin boundary the squared hinge is continuously "
    "differentiable with derivative 0, so no convention is needed there"
)


def _anchor_terms(H, pairing: PositivePairing, tau: float, distance: str, include_self_pairs: bool):
    if not tau > 0:
        raise InvalidInputError("tau must be > 0")
    H = _batch(H)
    B = H.shape[0]
    pairing.validate(B)
    anchors = np.array([i for i, _ in pairing.pairs])
    positives = np.array([p for _, p in pairing.pairs])
    D = _dissimilarity(H, distance)
    return D[anchors], D[anchors, positives], _pair_mask(B, include_self_pairs)[anchors]


def info_nce_per_anchor(H, pairing: PositivePairing, tau: float, distance: str = "l2_squared",
                        include_self_pairs: bool = False) -> np.ndarray:
    """``-log(exp(-D_i+/tau) / sum_j exp(-D_ij/tau))`` for every anchor.

    The denominator runs over the same candidate set the dispersive losses use
    (all ``j != i`` by default, which includes the positive).
    """
    rows, pos, mask = _anchor_terms(H, pairing, tau, distance, include_self_pairs)
    # relative to each row's nearest candidate the denominator is >= 1, and the
    # numerator stays in log form because a distant positive underflows exp()
    d_min = np.min(np.where(mask, rows, np.inf), axis=1)
    den = np.sum(np.exp(np.where(mask, -(rows - d_min[:, None]) / tau, -np.inf)), axis=1)
    return (pos - d_min) / tau + np.log(den)


def info_nce(H, pairing: PositivePairing, tau: float, distance: str = "l2_squared",
             include_self_pairs: bool = False) -> float:
    """Mean InfoNCE over the anchors in ``pairing``."""
    return float(np.mean(info_nce_per_anchor(H, pairing, tau, distance, include_self_pairs)))


def decomposition_terms(H, pairing: PositivePairing, tau: float, distance: str = "l2_squared",
                        include_self_pairs: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor alignment ``D_i+/tau`` and dispersion ``logsumexp_j(-D_ij/tau)``."""
    rows, pos, mask = _anchor_terms(H, pairing, tau, distance, include_self_pairs)
    return pos / tau, _masked_logsumexp(-rows / tau, mask, axis=1)


def decomposition_residual(H, pairing: PositivePairing, tau: float, distance: str = "l2_squared",
                           include_self_pairs: bool = False) -> float:
    """Largest per-anchor gap between InfoNCE and alignment + dispersion.

    Both sides use one candidate set, so the result is pure rounding error.
    """
    nce = info_nce_per_anchor(H, pairing, tau, distance, include_self_pairs)
    align, disp = decomposition_terms(H, pairing, tau, distance, include_self_pairs)
    return float(np.max(np.abs(nce - align - disp)))


def anchor_dispersive_loss(H, tau: float, distance: str = "l2_squared", include_self_pairs: bool = False) -> float:
    """Anchor-averaged log-sum-exp dispersion (the InfoNCE denominator alone)."""
    H = _batch(H)
    D = _dissimilarity(H, distance)
    return float(np.mean(_masked_logsumexp(-D / tau, _pair_mask(H.shape[0], include_self_pairs), axis=1)))


def combined_loss(mask_loss: float, disp_loss: float, lam: float) -> float:
    """Task loss plus ``lam`` times the dispersive regularizer."""
    if not (math.isfinite(mask_loss) and math.isfinite(disp_loss) and math.isfinite(lam)):
        raise InvalidInputError("combined_loss inputs must be finite")
    if lam < 0:
        raise InvalidInputError("lambda must be >= 0")
    return mask_loss + lam * disp_loss
