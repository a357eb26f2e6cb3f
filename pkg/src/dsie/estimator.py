"""Centralized joint state/input estimation cycle and the two baselines.

The per-step cycle is: weighted-least-squares estimation of the previous
state and input from (previous estimate, previous input measurements,
current state measurements), Mahalanobis bad-data screening of that
system's residual, prediction through the discrete model, and a Kalman
measurement update. The snapshot-WLS and tracking (random-walk) baselines
used for comparisons live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.stats import chi2

from . import linalg
from .errors import DimensionMismatch, NotPositiveDefinite, RankDeficient
from .model import DiscreteModel, stacked_design

_S_CLAMP = 1e-10  # relative eigenvalue floor for residual covariances


@dataclass(frozen=True)
class JointEstimate:
    """Joint (state, input) estimate with its full covariance.

    ``cov`` is the (n+m) x (n+m) joint covariance; the block accessors
    slice it consistently with (x, u) stacking.
    """

    x_hat: np.ndarray
    u_hat: np.ndarray
    cov: np.ndarray
    step: int = 0

    @property
    def n(self):
        return self.x_hat.shape[0]

    @property
    def m(self):
        return self.u_hat.shape[0]

    @property
    def p_x(self):
        return self.cov[: self.n, : self.n]

    @property
    def p_xu(self):
        return self.cov[: self.n, self.n :]

    @property
    def p_ux(self):
        return self.cov[self.n :, : self.n]

    @property
    def p_u(self):
        return self.cov[self.n :, self.n :]


@dataclass(frozen=True)
class BddConfig:
    """Bad-data gate: chi-square threshold at ``alpha`` unless ``zeta`` is
    given explicitly; ``policy`` is "alert-only" or "hold"."""

    alpha: float = 0.01
    zeta: float | None = None
    policy: str = "alert-only"

    def threshold(self, dof: int) -> float:
        if self.zeta is not None:
            return float(self.zeta)
        if dof < 1:
            return np.inf
        return float(np.sqrt(chi2.ppf(1.0 - self.alpha, dof)))


@dataclass(frozen=True)
class BddReport:
    distance: float
    threshold: float
    flagged: bool
    residual: np.ndarray
    residual_cov: np.ndarray
    dof: int
    diagonal_fallback: bool = False


@dataclass(frozen=True)
class FilterState:
    """Single-owner filter recursion carrier; advanced by dsie_step."""

    model: DiscreteModel
    x_hat: np.ndarray
    p_x: np.ndarray
    bdd: BddConfig = field(default_factory=BddConfig)
    joint: JointEstimate | None = None
    step: int = 0


def initial_state(model: DiscreteModel, x0, p0, bdd: BddConfig | None = None) -> FilterState:
    x0 = linalg.as_vector(x0, "x0")
    p0 = np.asarray(p0, dtype=float)
    if p0.ndim == 0:
        p0 = float(p0) * np.eye(model.n)
    elif p0.ndim == 1:
        p0 = np.diag(p0)
    if x0.shape[0] != model.n or p0.shape != (model.n, model.n):
        raise DimensionMismatch("initial state/covariance sizes do not match the model")
    return FilterState(model=model, x_hat=x0, p_x=linalg.symmetrize_psd(p0), bdd=bdd or BddConfig())


def _stack_weight(model: DiscreteModel, p_x_prev: np.ndarray) -> np.ndarray:
    e_x = model.c @ model.q @ model.c.T + model.r_x
    return sla.block_diag(p_x_prev, model.r_u, e_x)


def detect_bad_data(joint: JointEstimate, observation, design, weight, config: BddConfig) -> BddReport:
    """Screen the stacked WLS residual with a Mahalanobis gate.

    The residual covariance is the standard WLS form S = R - O U O',
    projected to positive definite by flooring its eigenvalues at
    1e-10 * trace; if even the projected matrix cannot be factored the
    distance falls back to a diagonal normalization (reported).
    """
    observation = linalg.as_vector(observation, "observation")
    est = np.concatenate([joint.x_hat, joint.u_hat])
    residual = observation - design @ est
    s = weight - design @ joint.cov @ design.T
    tr = float(np.trace(0.5 * (s + s.T)))
    floor = _S_CLAMP * max(tr, np.finfo(float).tiny)
    s_pd = linalg.clamp_eigenvalues(s, floor)
    fallback = False
    try:
        distance = linalg.mahalanobis(residual, s_pd)
    except NotPositiveDefinite:
        diag = np.maximum(np.diag(s_pd), floor)
        distance = float(np.sqrt(np.sum(residual**2 / diag)))
        fallback = True
    dof = design.shape[0] - design.shape[1]
    threshold = config.threshold(dof)
    return BddReport(
        distance=distance,
        threshold=threshold,
        flagged=bool(distance >= threshold),
        residual=residual,
        residual_cov=s_pd,
        dof=dof,
        diagonal_fallback=fallback,
    )


def estimate_input(state: FilterState, z_u_prev, z_x_now) -> tuple[JointEstimate, BddReport]:
    """Jointly re-estimate the previous state and input by WLS.

    Stacks the previous estimate, the previous input measurements and the
    current state measurements over the design [[I,0],[0,D],[C A_d, C B_d]]
    with weight diag(P_x, R_u, C Q C' + R_x).
    """
    model = state.model
    z_u_prev = linalg.as_vector(z_u_prev, "z_u_prev")
    z_x_now = linalg.as_vector(z_x_now, "z_x_now")
    if z_u_prev.shape[0] != model.l:
        raise DimensionMismatch(f"z_u_prev must have length {model.l}, got {z_u_prev.shape[0]}")
    if z_x_now.shape[0] != model.p:
        raise DimensionMismatch(f"z_x_now must have length {model.p}, got {z_x_now.shape[0]}")
    design = stacked_design(model)
    p_prev = linalg.symmetrize_psd(state.p_x)
    try:
        np.linalg.cholesky(p_prev)
    except np.linalg.LinAlgError:
        p_prev = p_prev + _S_CLAMP * max(np.trace(p_prev), 1.0) * np.eye(model.n)
    weight = _stack_weight(model, p_prev)
    observation = np.concatenate([state.x_hat, z_u_prev, z_x_now])
    try:
        res = linalg.wls_solve(design, weight, observation)
    except RankDeficient as exc:
        report = check_rank_message(model)
        raise RankDeficient(
            f"joint design rank deficient; unobservable inputs: {report}", rank=exc.rank
        ) from exc
    joint = JointEstimate(
        x_hat=res.estimate[: model.n],
        u_hat=res.estimate[model.n :],
        cov=res.covariance,
        step=state.step,
    )
    report = detect_bad_data(joint, observation, design, weight, state.bdd)
    return joint, report


def check_rank_message(model: DiscreteModel) -> tuple[str, ...]:
    from .model import check_joint_rank

    return check_joint_rank(model).unobservable_inputs


def predict(joint: JointEstimate, model: DiscreteModel):
    """Propagate the joint estimate one step: x = A_d x + B_d u."""
    ab = np.hstack([model.a_d, model.b_d])
    x_pred = ab @ np.concatenate([joint.x_hat, joint.u_hat])
    p_pred = linalg.symmetrize_psd(ab @ joint.cov @ ab.T + model.q)
    return x_pred, p_pred


def update(x_pred, p_pred, z_x_now, model: DiscreteModel):
    """Standard Kalman measurement update; returns (x_hat, p_x)."""
    x_pred = linalg.as_vector(x_pred, "x_pred")
    if model.p == 0:
        return x_pred, linalg.symmetrize_psd(p_pred)
    c = model.c
    s = c @ p_pred @ c.T + model.r_x
    try:
        factor = sla.cho_factor(0.5 * (s + s.T), lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("innovation covariance is not positive definite") from None
    gain = sla.cho_solve(factor, c @ p_pred).T
    x_hat = x_pred + gain @ (z_x_now - c @ x_pred)
    p_x = linalg.symmetrize_psd((np.eye(model.n) - gain @ c) @ p_pred)
    return x_hat, p_x


def dsie_step(state: FilterState, z_u_prev, z_x_now):
    """One full estimation cycle; returns (next state, joint, bad-data report).

    With the "hold" policy a flagged step skips the measurement update and
    carries the prediction forward; "alert-only" (default) always updates.
    """
    joint, report = estimate_input(state, z_u_prev, z_x_now)
    x_pred, p_pred = predict(joint, state.model)
    if report.flagged and state.bdd.policy == "hold":
        x_hat, p_x = x_pred, p_pred
    else:
        x_hat, p_x = update(x_pred, p_pred, z_x_now, state.model)
    next_state = replace(state, x_hat=x_hat, p_x=p_x, joint=joint, step=state.step + 1)
    return next_state, joint, report


@dataclass(frozen=True)
class SnapshotResult:
    x_hat: np.ndarray
    u_hat: np.ndarray
    cov: np.ndarray
    bdd: BddReport


def wls_snapshot(z_x, z_u, model: DiscreteModel, bdd: BddConfig | None = None) -> SnapshotResult:
    """Static single-time WLS over stacked (z_x, z_u); no temporal information."""
    bdd = bdd or BddConfig()
    h = sla.block_diag(model.c, model.d)
    weight = sla.block_diag(model.r_x, model.r_u)
    observation = np.concatenate([linalg.as_vector(z_x, "z_x"), linalg.as_vector(z_u, "z_u")])
    res = linalg.wls_solve(h, weight, observation)
    joint = JointEstimate(
        x_hat=res.estimate[: model.n], u_hat=res.estimate[model.n :], cov=res.covariance
    )
    report = detect_bad_data(joint, observation, h, weight, bdd)
    return SnapshotResult(x_hat=joint.x_hat, u_hat=joint.u_hat, cov=res.covariance, bdd=report)


@dataclass(frozen=True)
class TseState:
    """Forecasting-aided tracking filter over the stacked (x, u) vector."""

    y_hat: np.ndarray
    p: np.ndarray
    step: int = 0

    def x_part(self, model):
        return self.y_hat[: model.n]

    def u_part(self, model):
        return self.y_hat[model.n :]


def initial_tse_state(model: DiscreteModel, x0, u0, p0) -> TseState:
    y0 = np.concatenate([linalg.as_vector(x0, "x0"), linalg.as_vector(u0, "u0")])
    p0 = np.asarray(p0, dtype=float)
    dim = model.n + model.m
    if p0.ndim == 0:
        p0 = float(p0) * np.eye(dim)
    elif p0.ndim == 1:
        p0 = np.diag(p0)
    return TseState(y_hat=y0, p=linalg.symmetrize_psd(p0))


def tse_step(state: TseState, z_x, z_u, model: DiscreteModel, q_tse, bdd: BddConfig | None = None):
    """Random-walk tracking update over (x, u); returns (state, report).

    ``q_tse`` is the per-step random-walk process covariance (scalar,
    diagonal vector, or full matrix over the stacked vector).
    """
    bdd = bdd or BddConfig()
    dim = model.n + model.m
    q = np.asarray(q_tse, dtype=float)
    if q.ndim == 0:
        q = float(q) * np.eye(dim)
    elif q.ndim == 1:
        q = np.diag(q)
    p_pred = linalg.symmetrize_psd(state.p + q)
    h = sla.block_diag(model.c, model.d)
    r = sla.block_diag(model.r_x, model.r_u)
    z = np.concatenate([linalg.as_vector(z_x, "z_x"), linalg.as_vector(z_u, "z_u")])
    innovation = z - h @ state.y_hat
    s = h @ p_pred @ h.T + r
    try:
        factor = sla.cho_factor(0.5 * (s + s.T), lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("tracking innovation covariance not positive definite") from None
    gain = sla.cho_solve(factor, h @ p_pred).T
    y_hat = state.y_hat + gain @ innovation
    p = linalg.symmetrize_psd((np.eye(dim) - gain @ h) @ p_pred)
    distance = linalg.mahalanobis(innovation, s)
    dof = h.shape[0]
    threshold = bdd.threshold(dof)
    report = BddReport(
        distance=distance,
        threshold=threshold,
        flagged=bool(distance >= threshold),
        residual=innovation,
        residual_cov=s,
        dof=dof,
    )
    return TseState(y_hat=y_hat, p=p, step=state.step + 1), report
