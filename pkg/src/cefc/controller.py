"""Coordinated emergency control: activation, one-shot shedding, DC-side LQR.

Decision pipeline on an under-frequency event:
  1. dead-zone activation on the measured COI frequency deviation,
  2. rollout of the lifted model with DC support held at its limit,
  3. if the predicted nadir still breaches the floor, a one-shot load
     shedding amount is optimized (condensed convex QP) and quantized to the
     feeder granularity,
  4. from activation onward the DC references follow a saturated LQR on the
     lifted state, with the gain from a discrete algebraic Riccati equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gridsim, koopman
from .gridsim import GridModel, Scenario
from .koopman import KoopmanModel, lift, predict_rollout, MEASUREMENT_DELAY
from .qp import QPError, solve_qp


class StabilizabilityError(Exception):
    """Riccati iteration failed to converge."""


@dataclass
class ControlLimits:
    ud_min: np.ndarray  # MW per link
    ud_max: np.ndarray  # MW per link
    ul_max: np.ndarray  # max shedding ratio per node
    quantum_mw: float = 10.0  # feeder quantum d
    activation_threshold_hz: float = 0.2  # deviation magnitude triggering EFC
    omega_min: float = -0.02  # nadir floor, p.u. deviation
    ss_floor: float = -0.01  # steady-state floor, p.u. deviation
    planning_margin_pu: float = 0.004  # backoff above the floor used when sizing sheds
    base_frequency: float = 50.0
    ud_support: np.ndarray | None = None  # full-support reference per link, MW

    def __post_init__(self):
        self.ud_min = np.asarray(self.ud_min, dtype=float)
        self.ud_max = np.asarray(self.ud_max, dtype=float)
        self.ul_max = np.asarray(self.ul_max, dtype=float)
        if self.quantum_mw <= 0:
            raise ValueError("feeder quantum must be > 0")
        if self.omega_min >= 0:
            raise ValueError("nadir floor must be negative (deviation form)")
        if self.activation_threshold_pu < -self.omega_min:
            pass  # activation is less severe than the nadir floor
        else:
            raise ValueError("activation threshold must be less severe than the nadir floor")
        if self.ud_support is None:
            self.ud_support = self.ud_max.copy()
        else:
            self.ud_support = np.asarray(self.ud_support, dtype=float)

    @property
    def activation_threshold_pu(self) -> float:
        return self.activation_threshold_hz / self.base_frequency

    @classmethod
    def for_grid(cls, grid: GridModel, **kw) -> "ControlLimits":
        support = np.array(
            [lk.ud_max if lk.end == "receiving" else lk.ud_min for lk in grid.hvdc]
        )
        return cls(
            ud_min=np.array([lk.ud_min for lk in grid.hvdc]),
            ud_max=np.array([lk.ud_max for lk in grid.hvdc]),
            ul_max=np.full(grid.n_loads, kw.pop("ul_max", 0.3)),
            ud_support=support,
            **kw,
        )


@dataclass
class SheddingPlan:
    continuous_ratio: np.ndarray  # optimal shedding ratio per node
    continuous_mw: np.ndarray
    quantized_mw: np.ndarray
    quantized_ratio: np.ndarray
    shed_time: float | None = None
    feasible: bool = True

    @property
    def total_mw(self) -> float:
        return float(np.sum(self.quantized_mw))

    def to_dict(self) -> dict:
        return {
            "continuous_mw": self.continuous_mw.tolist(),
            "quantized_mw": self.quantized_mw.tolist(),
            "shed_time": self.shed_time,
            "feasible": self.feasible,
        }


@dataclass
class LqrWeights:
    q_diag: np.ndarray  # diagonal of Q2, length dim(g)
    r_diag: np.ndarray  # diagonal of R2, length #links

    def __post_init__(self):
        self.q_diag = np.asarray(self.q_diag, dtype=float)
        self.r_diag = np.asarray(self.r_diag, dtype=float)
        if np.any(self.q_diag < 0):
            raise ValueError("Q2 diagonal must be nonnegative")
        if np.any(self.r_diag <= 0):
            raise ValueError("R2 diagonal must be strictly positive")

    @classmethod
    def for_model(cls, model: KoopmanModel, q_omega: float = 2e4, r: float = 1e-4) -> "LqrWeights":
        q = np.zeros(model.dim)
        q[0] = q_omega
        return cls(q_diag=q, r_diag=np.full(model.n_links, r))


@dataclass
class RiccatiSolution:
    P: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int


@dataclass
class CoordinationTrace:
    record: gridsim.TrajectoryRecord
    activation_time: float | None
    plan: SheddingPlan | None
    omega_pred: np.ndarray | None  # model prediction from activation, padded with nan
    ud_commands: np.ndarray  # (n, q) as issued by the controller

    def nadir(self) -> float:
        return float(np.min(self.record.omega))

    def steady_state(self) -> float:
        tail = max(1, int(round(5.0 / self.record.dt)))
        return float(np.mean(self.record.omega[-tail:]))

    def summary(self, base_frequency: float = 50.0) -> dict:
        return {
            "activation_time": self.activation_time,
            "shed": self.plan.to_dict() if self.plan is not None else None,
            "nadir_pu": self.nadir(),
            "nadir_hz": base_frequency * (1.0 + self.nadir()),
            "steady_state_pu": self.steady_state(),
            "steady_state_hz": base_frequency * (1.0 + self.steady_state()),
            "cumulative_abs_ud_mw_s": float(
                np.sum(np.abs(self.ud_commands)) * self.record.dt
            ),
        }


def check_activation(omega: float, limits: ControlLimits) -> bool:
    """Dead-zone test; the boundary counts as activated."""
    return omega <= -limits.activation_threshold_pu


def predict_max_dc(model: KoopmanModel, omega_window, y_window, limits: ControlLimits, steps: int) -> np.ndarray:
    """Rollout with every DC link at full support and no shedding."""
    ul = np.zeros((steps, model.n_loads))
    ud = np.tile(limits.ud_support, (steps, 1))
    return predict_rollout(model, omega_window, y_window, ul, ud, steps)


def needs_shedding(omega_hat, limits: ControlLimits) -> bool:
    """True when the full-support prediction dips under the planning floor."""
    return bool(np.min(omega_hat) < limits.omega_min + limits.planning_margin_pu)


def shedding_sensitivity(model: KoopmanModel, steps: int) -> np.ndarray:
    """Per-step effect of a unit one-shot shedding ratio on predicted omega.

    Row t gives d(omega_t)/d(x) for the shedding vector x applied from the
    second control step onward; rows 0 and 1 are zero.
    """
    C = np.zeros((steps + 1, model.n_loads))
    M = np.zeros((model.dim, model.n_loads))
    for j in range(steps):
        M = model.A @ M + (model.B_l if j >= 1 else 0.0)
        C[j + 1] = M[0]
    return C


def quantize(amounts, d: float):
    """Round each amount to the nearest multiple of the feeder quantum, ties up."""
    amounts = np.asarray(amounts, dtype=float)
    if d <= 0:
        raise ValueError("quantum must be > 0")
    if np.any(amounts < -1e-12):
        raise ValueError("shedding amounts must be nonnegative")
    return np.floor(np.clip(amounts, 0.0, None) / d + 0.5) * d


def solve_shedding(
    model: KoopmanModel,
    omega_window,
    y_window,
    limits: ControlLimits,
    node_base_mw,
    steps: int,
    q1_diag=None,
) -> SheddingPlan:
    """One-shot shedding amount from the condensed convex QP.

    DC support is held at its limit inside the prediction; the decision
    variable is the single vector of shedding ratios held from the second
    step on.  Infeasible problems are clamped to the per-node maximum with
    the feasibility flag cleared.
    """
    node_base_mw = np.asarray(node_base_mw, dtype=float)
    p = model.n_loads
    if q1_diag is None:
        q1_diag = node_base_mw / np.mean(node_base_mw)
    q1_diag = np.asarray(q1_diag, dtype=float)
    if np.any(q1_diag <= 0) or not np.all(np.isfinite(q1_diag)):
        raise ValueError("Q1 diagonal must be positive and finite")

    om_free = predict_max_dc(model, omega_window, y_window, limits, steps)
    C = shedding_sensitivity(model, steps)
    # size the shed against a floor raised by the planning backoff so that
    # prediction error of a plan sitting exactly on the constraint does not
    # turn into a real violation
    floor = limits.omega_min + limits.planning_margin_pu
    margin = om_free - floor  # must stay >= -C x

    def make_plan(x, feasible):
        x = np.clip(x, 0.0, limits.ul_max)
        mw = x * node_base_mw
        qmw = quantize(mw, limits.quantum_mw)
        qmw = np.minimum(qmw, limits.ul_max * node_base_mw)
        return SheddingPlan(
            continuous_ratio=x,
            continuous_mw=mw,
            quantized_mw=qmw,
            quantized_ratio=qmw / node_base_mw,
            feasible=feasible,
        )

    # the shed is applied one step after the decision and acts from the step
    # after that, so rows 0-1 of the sensitivity are identically zero: those
    # steps are outside the decision's reach and are not constrained
    if np.all(margin[2:] >= 0):
        return make_plan(np.zeros(p), True)

    # feasibility at full shedding
    if np.any(margin[2:] + C[2:] @ limits.ul_max < -1e-9):
        return make_plan(limits.ul_max, False)

    # rows with nonnegative margin and a nonnegative sensitivity are satisfied
    # by every x >= 0; dropping them removes the degenerate (slack ~ 0)
    # constraints that stall the active-set iteration
    mask = (margin[2:] < 0) | np.any(C[2:] < 0, axis=1)
    H = 2.0 * (steps - 1) * np.diag(q1_diag)
    c = np.zeros(p)
    G = np.vstack([-C[2:][mask], -np.eye(p), np.eye(p)])
    h = np.concatenate([margin[2:][mask], np.zeros(p), limits.ul_max])
    try:
        x, _ = solve_qp(H, c, G, h, x0=limits.ul_max)
    except QPError:
        return make_plan(limits.ul_max, False)
    return make_plan(x, True)


def solve_dare(A, B, q_diag_or_weights, r_diag=None, tol: float = 1e-10, max_iter: int = 100_000, discount: float = 1.0) -> RiccatiSolution:
    """Fixed-point iteration for the discrete algebraic Riccati equation.

    Accepts either (A, B, LqrWeights) or (A, B, q_diag, r_diag).  Iterates
    from P = Q2 until the equation residual (Frobenius norm) drops below
    `tol` scaled by max(1, ||P||); raises StabilizabilityError if it does
    not converge.  `discount` < 1 solves the discounted problem (A, B scaled
    by the discount), which keeps the iteration bounded when the identified
    A carries marginal modes that the DC inputs cannot move.
    """
    if isinstance(q_diag_or_weights, LqrWeights):
        q_diag = q_diag_or_weights.q_diag
        r_diag = q_diag_or_weights.r_diag
    else:
        q_diag = np.asarray(q_diag_or_weights, dtype=float)
        r_diag = np.asarray(r_diag, dtype=float)
    if not 0.0 < discount <= 1.0:
        raise ValueError("discount must be in (0, 1]")
    A = discount * np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.reshape(A.shape[0], -1)
    B = discount * B
    Q = np.diag(q_diag)
    R = np.diag(r_diag)

    def residual_of(P):
        S = R + B.T @ P @ B
        return A.T @ P @ A - P + Q - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)

    P = Q.copy()
    # overflow before the finiteness check is the divergence signal, not an error
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iter + 1):
            S = R + B.T @ P @ B
            Pn = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
            Pn = 0.5 * (Pn + Pn.T)
            if not np.all(np.isfinite(Pn)):
                raise StabilizabilityError("Riccati iteration diverged; (A, B_d) may not be stabilizable")
            P = Pn
            res = float(np.linalg.norm(residual_of(P)))
            if res < tol * max(1.0, float(np.linalg.norm(P))):
                K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
                return RiccatiSolution(P=P, K=K, residual=res, iterations=it)
    raise StabilizabilityError(
        f"Riccati iteration did not converge in {max_iter} iterations (residual {res:.3e})"
    )


def lqr_step(g, sol: RiccatiSolution, limits: ControlLimits) -> np.ndarray:
    """Saturated LQR feedback on the lifted state."""
    u = -sol.K @ np.asarray(g, dtype=float)
    return np.clip(u, limits.ud_min, limits.ud_max)


def coordinate(
    grid: GridModel,
    scenario: Scenario,
    model: KoopmanModel,
    limits: ControlLimits,
    weights: LqrWeights | None = None,
    prediction_horizon: float = 30.0,
    dc_mode: str = "lqr",
) -> CoordinationTrace:
    """Closed-loop run of the full pipeline against the nonlinear simulator.

    dc_mode "lqr" follows the Riccati feedback after activation; "max" holds
    the DC references at full support (the time-invariant comparison case).
    """
    if dc_mode not in ("lqr", "max"):
        raise ValueError("dc_mode must be 'lqr' or 'max'")
    if weights is None:
        weights = LqrWeights.for_model(model)
    sol = solve_dare(model.A, model.B_d, weights, discount=0.98) if dc_mode == "lqr" else None
    cfg = model.config
    w = cfg.window_len
    dt = scenario.dt
    delay_steps = int(round(MEASUREMENT_DELAY / dt))
    pred_steps = int(round(prediction_horizon / dt))
    p, q = grid.n_loads, grid.n_links
    node_base = np.array([ld.base_power for ld in grid.loads])

    state = {
        "detect_k": None,
        "activated_k": None,
        "plan": None,
        "shed_k": None,
        "pred": None,
        "ud_cmds": [],
    }

    def policy(t, om_hist, y_hist):
        k = len(om_hist) - 1
        om = om_hist[-1]
        if state["detect_k"] is None and om <= -0.25 * limits.activation_threshold_pu:
            state["detect_k"] = k

        ul = np.zeros(p)
        if state["shed_k"] is not None and k >= state["shed_k"]:
            ul = np.minimum(state["plan"].quantized_ratio, 1.0)

        if state["activated_k"] is None:
            ready = (
                state["detect_k"] is not None
                and k - state["detect_k"] >= delay_steps
                and k >= w - 1
            )
            if ready and check_activation(om, limits):
                state["activated_k"] = k
                om_win = om_hist[k - w + 1 : k + 1]
                y_win = y_hist[k - w + 1 : k + 1]
                steps = min(pred_steps, int(round(scenario.horizon / dt)) - k)
                om_hat = predict_max_dc(model, om_win, y_win, limits, steps)
                if needs_shedding(om_hat, limits):
                    plan = solve_shedding(model, om_win, y_win, limits, node_base, steps)
                    plan.shed_time = t + dt
                    state["plan"] = plan
                    state["shed_k"] = k + 1
                    # prediction with the executed (quantized) plan
                    ul_seq = np.tile(plan.quantized_ratio, (steps, 1))
                    ul_seq[0] = 0.0
                    ud_seq = np.tile(limits.ud_support, (steps, 1))
                    om_hat = predict_rollout(model, om_win, y_win, ul_seq, ud_seq, steps)
                state["pred"] = (k, om_hat)
                ud = limits.ud_support.copy()
            else:
                ud = np.zeros(q)
        elif dc_mode == "max":
            ud = limits.ud_support.copy()
        else:
            g = lift(om_hist[k - w + 1 : k + 1], y_hist[k - w + 1 : k + 1], cfg)
            ud = lqr_step(g, sol, limits)
        state["ud_cmds"].append(ud)
        return ul, ud

    rec = gridsim.simulate(grid, scenario, policy)

    n = len(rec)
    ud_cmds = np.zeros((n, q))
    for i, u in enumerate(state["ud_cmds"]):
        ud_cmds[i] = u
    omega_pred = None
    if state["pred"] is not None:
        k0, om_hat = state["pred"]
        omega_pred = np.full(n, np.nan)
        omega_pred[k0 : k0 + len(om_hat)] = om_hat[: n - k0]
    return CoordinationTrace(
        record=rec,
        activation_time=None if state["activated_k"] is None else state["activated_k"] * dt,
        plan=state["plan"],
        omega_pred=omega_pred,
        ud_commands=ud_cmds,
    )
