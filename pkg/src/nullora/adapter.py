"""Cross-frozen, null-space-projected low-rank adapter for one linear layer.

A layer holds the frozen weight ``W0`` (d_out x d_in) and realizes

    delta = P B S1 A_f + B_f S2 A,        P = U_hat U_hat^T

where ``B``/``A``/``s`` are trainable, ``B_f``/``A_f`` are frozen, and
``S1 = diag(s[:h])``, ``S2 = diag(s[h:])`` with ``h = r / 2``. ``P`` is never
materialized; products with it go through ``U_hat``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from nullora import numerics
from nullora.numerics import DEFAULT_TAU, as_matrix, max_abs, numerical_rank


class Mode(str, enum.Enum):
    NULL_LORA = "null"
    ABLATION_RANDOM = "ablation"
    VANILLA_LORA = "lora"


class LayerSkipped(Exception):
    """Raised when a weight has no null space to build an adapter from."""

    def __init__(self, name: str, shape: tuple[int, int]):
        super().__init__(f"layer {name!r} {shape[0]}x{shape[1]} is full rank; no adapter built")
        self.name = name
        self.shape = shape


class ShapeError(ValueError):
    pass


@dataclass
class AdapterLayer:
    name: str
    W0: np.ndarray
    mode: Mode
    r: int
    B_f: np.ndarray
    A_f: np.ndarray
    B: np.ndarray
    A: np.ndarray
    s: np.ndarray
    U_hat: np.ndarray | None = None
    lora_alpha: float | None = None

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def half(self) -> int:
        return self.r // 2

    def trainable_count(self) -> int:
        return int(self.B.size + self.A.size + self.s.size)

    def trainables(self) -> dict[str, np.ndarray]:
        return {"B": self.B, "A": self.A, "s": self.s}

    def project(self, M: np.ndarray) -> np.ndarray:
        """Apply P (identity outside NULL_LORA mode) to the columns of M."""
        if self.U_hat is None:
            return M
        return self.U_hat @ (self.U_hat.T @ M)

    def _scale(self) -> float:
        return self.lora_alpha / self.r


@dataclass
class GradientSet:
    dB: np.ndarray
    dA: np.ndarray
    ds: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"B": self.dB, "A": self.dA, "s": self.ds}

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in (self.dB, self.dA, self.ds))))


@dataclass
class EffectiveRank:
    rank_stacked_B: int
    rank_stacked_A: int
    rank_delta: int


def trainable_count_formula(mode: Mode, r: int, d_out: int, d_in: int) -> int:
    if mode is Mode.VANILLA_LORA:
        return r * (d_out + d_in)
    return r // 2 * (d_out + d_in) + r


# -- construction -----------------------------------------------------------


def init_null_lora(name: str, W0, tau: float = DEFAULT_TAU, max_rank: int | None = None) -> AdapterLayer:
    """Build a NULL_LORA layer whose rank is twice the weight's nullity.

    Raises :class:`LayerSkipped` for full-rank weights.
    """
    W0 = as_matrix(W0, name)
    res = numerics.full_svd(W0, name)
    rank = numerical_rank(res.sigma, tau)
    d_out, d_in = W0.shape
    half = min(d_out - rank, d_in - rank)
    if max_rank is not None:
        if max_rank < 2:
            raise ValueError(f"max_rank must be >= 2, got {max_rank}")
        half = min(half, max_rank // 2)
    if half == 0:
        raise LayerSkipped(name, W0.shape)
    # trailing directions: smallest singular values, then the exact completion
    U_hat = np.ascontiguousarray(res.U[:, d_out - half :])
    V_hat = np.ascontiguousarray(res.Vt[d_in - half :, :])
    return AdapterLayer(
        name=name,
        W0=W0,
        mode=Mode.NULL_LORA,
        r=2 * half,
        B_f=U_hat.copy(),
        A_f=V_hat,
        B=np.zeros((d_out, half)),
        A=np.zeros((half, d_in)),
        s=np.ones(2 * half),
        U_hat=U_hat,
    )


def _child_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def init_ablation(name: str, W0, r: int, seed: int) -> AdapterLayer:
    """Same structure as NULL_LORA but with random orthonormal frozen halves and P = I."""
    W0 = as_matrix(W0, name)
    d_out, d_in = W0.shape
    if r <= 0 or r % 2:
        raise ValueError(f"{name}: ablation rank must be a positive even integer, got {r}")
    half = r // 2
    if half > min(d_out, d_in):
        raise ValueError(f"{name}: r/2={half} exceeds min(d_out, d_in)={min(d_out, d_in)}")
    seed_b, seed_a = _child_seeds(seed, 2)
    return AdapterLayer(
        name=name,
        W0=W0,
        mode=Mode.ABLATION_RANDOM,
        r=r,
        B_f=numerics.random_orthonormal(d_out, half, seed_b),
        A_f=np.ascontiguousarray(numerics.random_orthonormal(d_in, half, seed_a).T),
        B=np.zeros((d_out, half)),
        A=np.zeros((half, d_in)),
        s=np.ones(r),
    )


def init_vanilla_lora(name: str, W0, r: int, seed: int, lora_alpha: float | None = None) -> AdapterLayer:
    """Plain LoRA baseline: delta = (alpha / r) B A with B = 0 at start."""
    W0 = as_matrix(W0, name)
    d_out, d_in = W0.shape
    if r <= 0 or r > min(d_out, d_in):
        raise ValueError(f"{name}: LoRA rank must be in [1, {min(d_out, d_in)}], got {r}")
    rng = np.random.default_rng(seed)
    return AdapterLayer(
        name=name,
        W0=W0,
        mode=Mode.VANILLA_LORA,
        r=r,
        B_f=np.zeros((d_out, 0)),
        A_f=np.zeros((0, d_in)),
        B=np.zeros((d_out, r)),
        A=rng.standard_normal((r, d_in)) / np.sqrt(d_in),
        s=np.zeros(0),
        lora_alpha=float(r if lora_alpha is None else lora_alpha),
    )


# -- forward / backward -----------------------------------------------------


def delta_weight(layer: AdapterLayer) -> np.ndarray:
    if layer.mode is Mode.VANILLA_LORA:
        return layer._scale() * (layer.B @ layer.A)
    h = layer.half
    PB = layer.project(layer.B)
    return (PB * layer.s[:h]) @ layer.A_f + (layer.B_f * layer.s[h:]) @ layer.A


def _check_input(layer: AdapterLayer, X: np.ndarray, what: str, rows: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != rows:
        raise ShapeError(
            f"layer {layer.name!r}: {what} has shape {X.shape}, expected ({rows}, batch)"
        )
    return X


def forward(layer: AdapterLayer, X) -> np.ndarray:
    """Y = W0 X + delta X, evaluated through the low-rank factors."""
    X = _check_input(layer, X, "input", layer.d_in)
    Y = layer.W0 @ X
    if layer.mode is Mode.VANILLA_LORA:
        return Y + layer._scale() * (layer.B @ (layer.A @ X))
    h = layer.half
    PB = layer.project(layer.B)
    Y += PB @ (layer.s[:h, None] * (layer.A_f @ X))
    Y += layer.B_f @ (layer.s[h:, None] * (layer.A @ X))
    return Y


def backward(layer: AdapterLayer, X, G) -> GradientSet:
    """Gradients of the trainables given the upstream gradient G = dL/dY."""
    X = _check_input(layer, X, "input", layer.d_in)
    G = _check_input(layer, G, "upstream gradient", layer.d_out)
    if G.shape[1] != X.shape[1]:
        raise ShapeError(f"layer {layer.name!r}: batch mismatch {X.shape[1]} vs {G.shape[1]}")
    if layer.mode is Mode.VANILLA_LORA:
        c = layer._scale()
        GXt = G @ X.T
        return GradientSet(dB=c * (GXt @ layer.A.T), dA=c * (layer.B.T @ GXt), ds=np.zeros(0))
    h = layer.half
    s1, s2 = layer.s[:h], layer.s[h:]
    # M = G X^T is never formed: M A_f^T = G (A_f X)^T and B_f^T M = (B_f^T G) X^T
    MAft = G @ (layer.A_f @ X).T
    PMAft = layer.project(MAft)
    BftG = layer.B_f.T @ G
    PB = layer.project(layer.B)
    ds = np.empty(layer.r)
    ds[:h] = np.sum(PB * MAft, axis=0)
    ds[h:] = np.sum(BftG * (layer.A @ X), axis=1)
    return GradientSet(dB=PMAft * s1, dA=s2[:, None] * (BftG @ X.T), ds=ds)


def merge(layer: AdapterLayer) -> np.ndarray:
    """Fold the adapter into a single dense weight W0 + delta."""
    delta = delta_weight(layer)
    if not delta.any():
        return layer.W0.copy()
    return layer.W0 + delta


# -- diagnostics ------------------------------------------------------------


def stacked_factors(layer: AdapterLayer) -> tuple[np.ndarray, np.ndarray]:
    """Rank-r factors (d_out x r, r x d_in) whose product is the update."""
    if layer.mode is Mode.VANILLA_LORA:
        return layer._scale() * layer.B, layer.A
    h = layer.half
    left = np.hstack([layer.project(layer.B) * layer.s[:h], layer.B_f * layer.s[h:]])
    right = np.vstack([layer.A_f, layer.A])
    return left, right


def effective_rank(layer: AdapterLayer, tau: float = DEFAULT_TAU) -> EffectiveRank:
    left, right = stacked_factors(layer)
    rank = lambda M: numerical_rank(numerics.svd(M).sigma, tau) if M.size else 0  # noqa: E731
    return EffectiveRank(
        rank_stacked_B=rank(left),
        rank_stacked_A=rank(right),
        rank_delta=rank(delta_weight(layer)),
    )


def null_residual(layer: AdapterLayer, delta: np.ndarray | None = None) -> float:
    """||W0^T delta||_F / (||W0||_F ||delta||_F), zero when delta is zero."""
    if delta is None:
        delta = delta_weight(layer)
    denom = np.linalg.norm(layer.W0) * np.linalg.norm(delta) + np.finfo(np.float64).tiny
    return float(np.linalg.norm(layer.W0.T @ delta) / denom)


def norm_decomposition_error(layer: AdapterLayer, X: np.ndarray) -> float:
    """max over columns of | |W'x|^2 - |W0 x|^2 - |delta x|^2 | / |W'x|^2."""
    delta = delta_weight(layer)
    full = np.sum((layer.W0 @ X + delta @ X) ** 2, axis=0)
    parts = np.sum((layer.W0 @ X) ** 2, axis=0) + np.sum((delta @ X) ** 2, axis=0)
    denom = np.where(full > 0, full, 1.0)
    return float(np.max(np.abs(full - parts) / denom))


def frozen_alignment(layer: AdapterLayer) -> float:
    """max(|W0^T B_f|, |W0 A_f^T|) relative to sigma_max(W0)."""
    smax = np.linalg.norm(layer.W0, 2)
    if smax == 0:
        return 0.0
    return max(max_abs(layer.W0.T @ layer.B_f), max_abs(layer.W0 @ layer.A_f.T)) / smax


@dataclass(frozen=True)
class ToleranceProfile:
    null_residual: float = 1e-8
    norm_decomposition: float = 1e-8
    frozen_alignment: float = 1e-8
    projection: float = 1e-10
    orthonormality: float = 1e-10
    merge_equivalence: float = 1e-10


TOLERANCE_PROFILES = {
    "default": ToleranceProfile(),
    "strict": ToleranceProfile(
        null_residual=1e-11,
        norm_decomposition=1e-11,
        frozen_alignment=1e-11,
        projection=1e-12,
        orthonormality=1e-12,
        merge_equivalence=1e-12,
    ),
}


@dataclass
class InvariantReport:
    layer: str
    mode: Mode
    checks: dict[str, dict] = field(default_factory=dict)

    def add(self, name: str, measured: float, tolerance: float, applicable: bool = True) -> None:
        if name in self.checks:
            raise KeyError(f"invariant {name!r} checked twice")
        self.checks[name] = {
            "measured": float(measured),
            "tolerance": float(tolerance),
            "pass": bool(measured <= tolerance),
            "applicable": applicable,
        }

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks.values() if c["applicable"])

    def to_dict(self) -> dict:
        return {"layer": self.layer, "mode": self.mode.value, "pass": self.passed, "checks": self.checks}


def verify_invariants(
    layer: AdapterLayer,
    tol_profile: ToleranceProfile | str = "default",
    n_probe: int = 16,
    seed: int = 0,
) -> InvariantReport:
    """Measure every structural invariant of ``layer``.

    Null-space checks are still measured for other modes but marked
    not-applicable, so they never fail the overall report there.
    """
    tol = TOLERANCE_PROFILES[tol_profile] if isinstance(tol_profile, str) else tol_profile
    is_null = layer.mode is Mode.NULL_LORA
    report = InvariantReport(layer.name, layer.mode)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((layer.d_in, n_probe))
    X /= np.linalg.norm(X, axis=0)

    report.add("null_residual", null_residual(layer), tol.null_residual, is_null)
    report.add("norm_decomposition", norm_decomposition_error(layer, X), tol.norm_decomposition, is_null)
    report.add("frozen_alignment", frozen_alignment(layer), tol.frozen_alignment, is_null)

    if is_null:
        proj_err = max_abs(layer.project(layer.B_f) - layer.B_f)
        orth = max(
            numerics.orthonormality_error(layer.U_hat),
            numerics.orthonormality_error(layer.B_f),
            numerics.orthonormality_error(layer.A_f.T),
        )
    else:
        proj_err = 0.0
        orth = max(numerics.orthonormality_error(layer.B_f), numerics.orthonormality_error(layer.A_f.T))
    report.add("projection_fixes_frozen", proj_err, tol.projection, is_null)
    report.add(
        "frozen_orthonormality", orth, tol.orthonormality, layer.mode is not Mode.VANILLA_LORA
    )
    report.add("merge_equivalence", max_abs(merge(layer) @ X - forward(layer, X)), tol.merge_equivalence)
    return report
