"""Toy two-layer encoder for watching dispersive regularization fight collapse.

A small MLP maps clustered synthetic inputs to a low-dimensional embedding,
a linear head classifies it with softmax cross-entropy, and a dispersive
penalty is applied either to the hidden layer (``early``) or to the embedding
(``late``). Training follows a two-stage schedule: stage one updates every
parameter at one step size, stage two drops the encoder step tenfold and
raises the dispersion weight.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .dispersion import HINGE_FORMS, VARIANTS, DispersionSpec, covariance_offdiag_energy, dispersive_grad, dispersive_loss
from .errors import ConfigError, DegenerateBatchError, DivergenceError, InvalidInputError, NormalizationError
from .numeric_core import as_matrix, format_csv_matrix, parse_csv_matrix, pairwise_sq_dists
from .telu import ACTIVATIONS

PLACEMENTS = ("early", "late")
DIVERGENCE_LIMIT = 1e6
ENCODER_KEYS = ("W1", "b1", "W2", "b2")
PARAM_KEYS = ENCODER_KEYS + ("head_W", "head_b")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    K: int
    seed: int | None = None


def cluster_means(K: int, D_in: int) -> np.ndarray:
    """Class ``k`` sits on axis ``k mod D_in`` at radius ``1 + k // D_in``."""
    M = np.zeros((K, D_in))
    for k in range(K):
        M[k, k % D_in] = 1.0 + k // D_in
    return M


def generate_clusters(K: int, n_per: int, D_in: int, spread: float, seed: int) -> SyntheticDataset:
    if K < 2 or n_per < 2 or D_in < 1:
        raise InvalidInputError(f"need K >= 2, n_per >= 2, D_in >= 1 (got {K}, {n_per}, {D_in})")
    if not spread > 0:
        raise InvalidInputError("spread must be > 0")
    rng = _rng(seed)
    y = np.repeat(np.arange(K), n_per)
    X = cluster_means(K, D_in)[y] + spread * rng.standard_normal((K * n_per, D_in))
    return SyntheticDataset(X=X, y=y, K=K, seed=seed)


def nearest_centroid_accuracy(X, y) -> float:
    X, y = as_matrix(X, "X"), np.asarray(y)
    classes = np.unique(y)
    centroids = np.stack([X[y == c].mean(axis=0) for c in classes])
    d = ((X[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float(np.mean(classes[np.argmin(d, axis=1)] == y))


def format_dataset_csv(ds: SyntheticDataset) -> str:
    """Feature columns followed by the integer label as the last column."""
    lines = format_csv_matrix(ds.X).splitlines()
    return "".join(f"{line},{int(label)}\n" for line, label in zip(lines, ds.y))


def parse_dataset_csv(text: str, source: str = "<csv>") -> SyntheticDataset:
    M = parse_csv_matrix(text, source)
    if M.shape[1] < 2:
        raise InvalidInputError(f"{source}: need at least one feature column and a label column")
    labels = M[:, -1]
    bad = np.flatnonzero((labels != np.round(labels)) | (labels < 0))
    if bad.size:
        raise InvalidInputError(f"{source}: row {bad[0] + 1}, column {M.shape[1]}: label must be a non-negative integer")
    y = labels.astype(int)
    return SyntheticDataset(X=M[:, :-1].copy(), y=y, K=int(y.max()) + 1)


# ---------------------------------------------------------------- model


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    head_W: np.ndarray
    head_b: np.ndarray
    activation: str = "telu"

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in PARAM_KEYS]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, theta) -> "EncoderParams":
        theta = np.asarray(theta, dtype=np.float64).ravel()
        n = sum(a.size for a in self.arrays())
        if theta.size != n:
            raise InvalidInputError(f"expected {n} parameters, got {theta.size}")
        out, pos = {}, 0
        for k, a in zip(PARAM_KEYS, self.arrays()):
            out[k] = theta[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return EncoderParams(**out, activation=self.activation)

    def copy(self) -> "EncoderParams":
        return self.with_flat(self.flatten())


def init_params(D_in: int, hidden: int, embed: int, K: int, activation: str = "telu", seed: int = 0) -> EncoderParams:
    """Gaussian weights scaled by ``1/sqrt(fan_in)``, zero biases."""
    if activation not in ACTIVATIONS:
        raise InvalidInputError(f"activation must be one of {sorted(ACTIVATIONS)}")
    rng = _rng(seed)
    return EncoderParams(
        W1=rng.standard_normal((D_in, hidden)) / math.sqrt(D_in),
        b1=np.zeros(hidden),
        W2=rng.standard_normal((hidden, embed)) / math.sqrt(hidden),
        b2=np.zeros(embed),
        head_W=rng.standard_normal((embed, K)) / math.sqrt(embed),
        head_b=np.zeros(K),
        activation=activation,
    )


def _check_shapes(params: EncoderParams, X: np.ndarray) -> None:
    D_in, h = params.W1.shape
    h2, d = params.W2.shape
    d2, K = params.head_W.shape
    ok = (
        X.shape[1] == D_in and h2 == h and d2 == d
        and params.b1.shape == (h,) and params.b2.shape == (d,) and params.head_b.shape == (K,)
    )
    if not ok:
        raise InvalidInputError(
            f"shape mismatch: X {X.shape}, W1 {params.W1.shape}, W2 {params.W2.shape}, head_W {params.head_W.shape}"
        )


def _forward(params: EncoderParams, X):
    act, _ = ACTIVATIONS[params.activation]
    A1 = X @ params.W1 + params.b1
    H1 = act(A1)
    A2 = H1 @ params.W2 + params.b2
    H2 = act(A2)
    return A1, H1, A2, H2


def encode(params: EncoderParams, X) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations ``H1`` and embeddings ``H2`` for inputs ``X``."""
    X = as_matrix(X, "X")
    _check_shapes(params, X)
    _, H1, _, H2 = _forward(params, X)
    return H1, H2


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(log_p[np.arange(n), y]))
    grad = np.exp(log_p)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


@dataclass
class ObjectiveValue:
    total: float
    mask_loss: float
    disp_loss: float
    grads: EncoderParams


def evaluate_objective(params: EncoderParams, X, y, lam: float, spec: DispersionSpec,
                       placement: str = "early") -> ObjectiveValue:
    """Cross-entropy on the head plus ``lam`` times dispersion of the placed layer, with gradients.

    The dispersive term is reported whenever the batch has two or more rows,
    even when ``lam`` is zero.
    """
    X = as_matrix(X, "X")
    y = np.asarray(y, dtype=int)
    _check_shapes(params, X)
    if placement not in PLACEMENTS:
        raise InvalidInputError(f"placement must be one of {PLACEMENTS}")
    if lam < 0:
        raise InvalidInputError("lambda must be >= 0")
    B = X.shape[0]
    if B < 2 and lam > 0:
        raise DegenerateBatchError("dispersion needs a batch of at least 2 samples")
    _, d_act = ACTIVATIONS[params.activation]

    A1, H1, A2, H2 = _forward(params, X)
    logits = H2 @ params.head_W + params.head_b
    mask_loss, dZ = softmax_cross_entropy(logits, y)
    target = H1 if placement == "early" else H2
    if B < 2:
        disp = 0.0
    elif lam > 0:
        disp = dispersive_loss(target, spec)
    else:
        # reported only; a dead ReLU row must not abort an unregularized run
        try:
            disp = dispersive_loss(target, spec)
        except NormalizationError:
            disp = math.nan

    g_head_W = H2.T @ dZ
    g_head_b = dZ.sum(axis=0)
    dH2 = dZ @ params.head_W.T
    if lam > 0 and placement == "late":
        dH2 = dH2 + lam * dispersive_grad(H2, spec)
    dA2 = dH2 * d_act(A2)
    g_W2 = H1.T @ dA2
    g_b2 = dA2.sum(axis=0)
    dH1 = dA2 @ params.W2.T
    if lam > 0 and placement == "early":
        dH1 = dH1 + lam * dispersive_grad(H1, spec)
    dA1 = dH1 * d_act(A1)
    grads = EncoderParams(
        W1=X.T @ dA1, b1=dA1.sum(axis=0), W2=g_W2, b2=g_b2,
        head_W=g_head_W, head_b=g_head_b, activation=params.activation,
    )
    total = mask_loss + lam * disp if lam > 0 else mask_loss
    return ObjectiveValue(total=total, mask_loss=mask_loss, disp_loss=disp, grads=grads)


def objective_and_grads(params: EncoderParams, X, y, lam: float, spec: DispersionSpec,
                        placement: str = "early") -> tuple[float, EncoderParams]:
    out = evaluate_objective(params, X, y, lam, spec, placement)
    return out.total, out.grads


# ---------------------------------------------------------------- metrics


def dispersion_metrics(H) -> dict:
    """Mean/min pairwise Euclidean distance over ordered pairs and covariance off-diagonal energy."""
    H = as_matrix(H)
    B = H.shape[0]
    if B < 2:
        raise DegenerateBatchError("dispersion metrics need at least 2 rows")
    dist = np.sqrt(pairwise_sq_dists(H))[~np.eye(B, dtype=bool)]
    return {
        "mean_pairwise_dist": float(dist.mean()),
        "min_pairwise_dist": float(dist.min()),
        "cov_offdiag_energy": covariance_offdiag_energy(H),
    }


def linear_probe_accuracy(H, y, K: int, steps: int = 500, lr: float = 0.5) -> float:
    """Train-set accuracy of a softmax-regression probe on frozen, standardized features."""
    H = as_matrix(H)
    y = np.asarray(y, dtype=int)
    sd = H.std(axis=0)
    Z = (H - H.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    W = np.zeros((Z.shape[1], K))
    b = np.zeros(K)
    for _ in range(steps):
        _, g = softmax_cross_entropy(Z @ W + b, y)
        W -= lr * (Z.T @ g)
        b -= lr * g.sum(axis=0)
    return float(np.mean(np.argmax(Z @ W + b, axis=1) == y))


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    # data
    n_classes: int = 3
    n_per_class: int = 50
    input_dim: int = 8
    spread: float = 0.3
    data_seed: int = 0
    # model
    hidden_dim: int = 16
    embed_dim: int = 2
    activation: str = "telu"
    # schedule
    stage1_epochs: int = 300
    stage2_epochs: int = 300
    lr_stage1: float = 0.1
    lr_encoder_stage2: float | None = None
    lr_head_stage2: float | None = None
    lambda1: float = 0.2
    lambda2: float = 0.6
    batch_size: int | None = None
    seed: int = 0
    # dispersion
    variant: str = "infonce_l2"
    tau: float = 0.8
    epsilon: float = 1e-8
    margin: float = 1.0
    hinge_form: str = "squared_distance"
    placement: str = "early"

    def __post_init__(self):
        problems = _config_problems(asdict(self))
        if problems:
            raise ConfigError(problems)

    @property
    def encoder_lr_stage2(self) -> float:
        return self.lr_stage1 / 10.0 if self.lr_encoder_stage2 is None else self.lr_encoder_stage2

    @property
    def head_lr_stage2(self) -> float:
        return self.lr_stage1 if self.lr_head_stage2 is None else self.lr_head_stage2

    def dispersion_spec(self) -> DispersionSpec:
        return DispersionSpec(variant=self.variant, tau=self.tau, epsilon=self.epsilon,
                              margin=self.margin, hinge_form=self.hinge_form)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload) -> "TrainConfig":
        if not isinstance(payload, dict):
            raise ConfigError(["top level: expected a JSON object"])
        names = {f.name for f in fields(cls)}
        problems = [f"{k}: unknown key" for k in sorted(set(payload) - names)]
        merged = {**asdict(cls()), **{k: v for k, v in payload.items() if k in names}}
        problems += _config_problems(merged)
        if problems:
            raise ConfigError(problems)
        return cls(**merged)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON ({exc})"]) from None
        return cls.from_dict(payload)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _config_problems(d: dict) -> list[str]:
    p = []

    def need_int(key, lo):
        if not (_is_int(d[key]) and d[key] >= lo):
            p.append(f"{key}: must be an integer >= {lo}")

    def need_real(key, positive=True, optional=False):
        v = d[key]
        if optional and v is None:
            return
        if not (_is_real(v) and (v > 0 if positive else v >= 0)):
            p.append(f"{key}: must be a finite real {'> 0' if positive else '>= 0'}")

    need_int("n_classes", 2)
    need_int("n_per_class", 2)
    need_int("input_dim", 1)
    need_int("hidden_dim", 1)
    need_int("embed_dim", 1)
    need_int("stage1_epochs", 0)
    need_int("stage2_epochs", 0)
    need_int("seed", 0)
    need_int("data_seed", 0)
    need_real("spread")
    need_real("lr_stage1")
    need_real("lr_encoder_stage2", optional=True)
    need_real("lr_head_stage2", optional=True)
    need_real("lambda1", positive=False)
    need_real("lambda2", positive=False)
    need_real("tau")
    need_real("epsilon", positive=False)
    need_real("margin")
    if d["batch_size"] is not None and not (_is_int(d["batch_size"]) and d["batch_size"] >= 2):
        p.append("batch_size: must be null (full batch) or an integer >= 2")
    if d["activation"] not in ACTIVATIONS:
        p.append(f"activation: must be one of {', '.join(sorted(ACTIVATIONS))}")
    if d["variant"] not in VARIANTS:
        p.append(f"variant: must be one of {', '.join(VARIANTS)}")
    if d["hinge_form"] not in HINGE_FORMS:
        p.append(f"hinge_form: must be one of {', '.join(HINGE_FORMS)}")
    if d["placement"] not in PLACEMENTS:
        p.append(f"placement: must be one of {', '.join(PLACEMENTS)}")
    return p


@dataclass
class MetricsReport:
    mean_pairwise_dist: float
    min_pairwise_dist: float
    cov_offdiag_energy: float
    probe_accuracy: float
    head_accuracy: float
    final_mask_loss: float
    final_disp_loss: float
    final_total: float
    penalized_layer: dict
    curve: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        """Everything except the per-epoch curve."""
        d = asdict(self)
        d.pop("curve")
        return d


CURVE_COLUMNS = ("epoch", "stage", "mask_loss", "disp_loss", "total")


def _batches(n: int, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    # equal-ish chunks, each at least batch_size rows
    return np.array_split(rng.permutation(n), max(1, n // batch_size))


def train_two_stage(dataset: SyntheticDataset, config: TrainConfig) -> tuple[EncoderParams, MetricsReport]:
    """Two-stage gradient descent; returns final parameters and metrics on the full dataset.

    Embedding metrics are taken on the bottleneck output. Raises
    :class:`DivergenceError` if the loss turns non-finite or exceeds 1e6.
    """
    X = as_matrix(dataset.X, "X")
    y = np.asarray(dataset.y, dtype=int)
    if dataset.K != config.n_classes:
        raise InvalidInputError(f"dataset has {dataset.K} classes, config expects {config.n_classes}")
    if y.min() < 0 or y.max() >= config.n_classes:
        raise InvalidInputError("labels outside 0..n_classes-1")
    params = init_params(X.shape[1], config.hidden_dim, config.embed_dim, config.n_classes,
                         config.activation, config.seed)
    spec = config.dispersion_spec()
    rng = _rng(config.seed + 1)
    stages = [
        (1, config.stage1_epochs, config.lambda1, config.lr_stage1, config.lr_stage1),
        (2, config.stage2_epochs, config.lambda2, config.encoder_lr_stage2, config.head_lr_stage2),
    ]
    curve = []
    epoch = 0
    for stage, n_epochs, lam, lr_enc, lr_head in stages:
        for _ in range(n_epochs):
            epoch += 1
            sums = np.zeros(3)
            batches = _batches(len(y), config.batch_size, rng)
            for idx in batches:
                out = evaluate_objective(params, X[idx], y[idx], lam, spec, config.placement)
                if not math.isfinite(out.total) or abs(out.total) > DIVERGENCE_LIMIT:
                    raise DivergenceError(f"loss {out.total!r} at epoch {epoch} (stage {stage})", epoch)
                sums += (out.mask_loss, out.disp_loss, out.total)
                for k in PARAM_KEYS:
                    lr = lr_enc if k in ENCODER_KEYS else lr_head
                    getattr(params, k)[...] -= lr * getattr(out.grads, k)
            m, dl, t = sums / len(batches)
            curve.append({"epoch": epoch, "stage": stage, "mask_loss": float(m), "disp_loss": float(dl),
                          "total": float(t)})

    H1, H2 = encode(params, X)
    lam_final = config.lambda2 if config.stage2_epochs else config.lambda1
    final = evaluate_objective(params, X, y, lam_final, spec, config.placement)
    logits = H2 @ params.head_W + params.head_b
    emb = dispersion_metrics(H2)
    placed = H1 if config.placement == "early" else H2
    report = MetricsReport(
        **emb,
        probe_accuracy=linear_probe_accuracy(H2, y, config.n_classes),
        head_accuracy=float(np.mean(np.argmax(logits, axis=1) == y)),
        final_mask_loss=final.mask_loss,
        final_disp_loss=final.disp_loss,
        final_total=final.total,
        penalized_layer={"layer": "H1" if config.placement == "early" else "H2", **dispersion_metrics(placed)},
        curve=curve,
    )
    return params, report


def dataset_for(config: TrainConfig) -> SyntheticDataset:
    return generate_clusters(config.n_classes, config.n_per_class, config.input_dim, config.spread, config.data_seed)


def run_config(config: TrainConfig) -> MetricsReport:
    return train_two_stage(dataset_for(config), config)[1]


def compare_with_baseline(config: TrainConfig, seeds=None) -> dict:
    """Train with the configured dispersion weights and with both set to zero, per seed."""
    seeds = [config.seed] if seeds is None else list(seeds)
    rows = []
    for s in seeds:
        cfg = replace(config, seed=s)
        on = run_config(cfg)
        off = run_config(replace(cfg, lambda1=0.0, lambda2=0.0))
        rows.append({
            "seed": s,
            "mean_pairwise_dist": on.mean_pairwise_dist,
            "baseline_mean_pairwise_dist": off.mean_pairwise_dist,
            "probe_accuracy": on.probe_accuracy,
            "baseline_probe_accuracy": off.probe_accuracy,
            "dispersion_wider": on.mean_pairwise_dist > off.mean_pairwise_dist,
        })
    return {
        "seeds": rows,
        "wider_count": sum(r["dispersion_wider"] for r in rows),
        "max_probe_drop": max(r["baseline_probe_accuracy"] - r["probe_accuracy"] for r in rows),
    }
