"""Nonlinear ground-truth simulator of COI frequency dynamics.

Models a center-of-inertia swing equation with per-machine first-order
governors, a 40/60 split of dynamic (motor) and constant-impedance loads,
and rate-limited, lagged HVDC injections.  Voltage proxies at monitored
buses are algebraic functions of net power injections.  This is the "true"
system that the lifted linear model approximates, and the oracle used by
the test suite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

MOTOR_FREQ_SENSITIVITY = 1.5  # p.u. load change per p.u. frequency, dynamic share
GOVERNOR_LIMIT = 0.25  # governor output cap, p.u. on machine base


class SimulationError(Exception):
    """Raised when integration diverges or a policy violates bounds."""


@dataclass(frozen=True)
class Machine:
    inertia: float  # H-constant, s, on machine base
    damping: float  # p.u./p.u. on machine base
    gov_gain: float  # p.u./p.u. on machine base
    gov_tc: float  # s
    capacity: float  # MW
    output: float  # MW dispatched pre-fault; lost if the machine trips
    can_trip: bool = True  # False for the large equivalent unit

    def __post_init__(self):
        if self.inertia <= 0 or self.gov_tc <= 0:
            raise ValueError("machine inertia and governor time constant must be > 0")
        if self.damping < 0:
            raise ValueError("machine damping must be >= 0")


@dataclass(frozen=True)
class LoadNode:
    node: str
    base_power: float  # MW
    dynamic_fraction: float = 0.4
    motor_tc: float = 2.0  # s, recovery time of the dynamic share

    def __post_init__(self):
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValueError("dynamic fraction must lie in [0, 1]")


@dataclass(frozen=True)
class HvdcLink:
    base_setpoint: float  # MW
    ud_min: float  # MW
    ud_max: float  # MW
    ramp_rate: float  # MW/s
    response_lag: float  # s
    end: str = "receiving"  # "sending" | "receiving"

    def __post_init__(self):
        if not self.ud_min <= 0.0 <= self.ud_max:
            raise ValueError("link limits must bracket zero")
        if self.end not in ("sending", "receiving"):
            raise ValueError("link end must be 'sending' or 'receiving'")
        if self.ramp_rate <= 0 or self.response_lag <= 0:
            raise ValueError("ramp rate and response lag must be > 0")

    @property
    def sign(self) -> float:
        """+1 when a positive reference deviation injects power into the study grid."""
        return 1.0 if self.end == "receiving" else -1.0


@dataclass(frozen=True)
class GridModel:
    machines: tuple
    loads: tuple
    hvdc: tuple
    base_frequency: float = 50.0
    # p.u. voltage change per p.u. power change, rows = monitored buses,
    # columns = load nodes followed by HVDC links
    voltage_sensitivity: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "machines", tuple(self.machines))
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "hvdc", tuple(self.hvdc))
        vs = np.atleast_2d(np.asarray(self.voltage_sensitivity, dtype=float))
        n_ch = len(self.loads) + len(self.hvdc)
        if vs.size == 0:
            vs = np.zeros((0, n_ch))
        if vs.shape[1] != n_ch:
            raise ValueError(
                f"voltage sensitivity needs {n_ch} columns (loads then links), got {vs.shape[1]}"
            )
        object.__setattr__(self, "voltage_sensitivity", tuple(map(tuple, vs)))

    # -- aggregates, all on the system base --

    @property
    def s_base(self) -> float:
        return sum(ld.base_power for ld in self.loads)

    @property
    def n_loads(self) -> int:
        return len(self.loads)

    @property
    def n_links(self) -> int:
        return len(self.hvdc)

    @property
    def n_buses(self) -> int:
        return len(self.voltage_sensitivity)

    def total_damping(self) -> float:
        return sum(m.damping * m.capacity for m in self.machines) / self.s_base

    def total_gov_gain(self) -> float:
        return sum(m.gov_gain * m.capacity for m in self.machines) / self.s_base

    def to_dict(self) -> dict:
        return {
            "machines": [vars(m) for m in self.machines],
            "loads": [vars(ld) for ld in self.loads],
            "hvdc": [vars(lk) for lk in self.hvdc],
            "base_frequency": self.base_frequency,
            "voltage_sensitivity": [list(r) for r in self.voltage_sensitivity],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridModel":
        return cls(
            machines=tuple(Machine(**m) for m in d["machines"]),
            loads=tuple(LoadNode(**ld) for ld in d["loads"]),
            hvdc=tuple(HvdcLink(**lk) for lk in d["hvdc"]),
            base_frequency=d.get("base_frequency", 50.0),
            voltage_sensitivity=d.get("voltage_sensitivity", ()),
        )


@dataclass(frozen=True)
class Scenario:
    """Disturbance description: trips, inertia scaling and excitation noise."""

    inertia_scale: float = 1.0
    trip_set: tuple = ()  # machine indices, lost at trip_time
    trip_time: float = 5.0
    extra_deficit: float = 0.0  # p.u. step power loss at trip_time, on top of trips
    noise_amplitude: float = 0.0  # MW, white noise held per sample step
    noise_seed: int = 0
    noise_channels: tuple = ("loads",)  # subset of {"loads", "dc"}
    horizon: float = 60.0
    dt: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "trip_set", tuple(self.trip_set))
        object.__setattr__(self, "noise_channels", tuple(self.noise_channels))
        if self.inertia_scale <= 0:
            raise ValueError("inertia scale must be > 0")
        if self.dt <= 0 or self.horizon < self.dt:
            raise ValueError("invalid horizon / sample step")
        for ch in self.noise_channels:
            if ch not in ("loads", "dc"):
                raise ValueError(f"unknown noise channel {ch!r}")

    def validate(self, grid: GridModel):
        if len(self.trip_set) > 3:
            raise ValueError("at most three simultaneous machine trips are supported")
        for i in self.trip_set:
            if not 0 <= i < len(grid.machines):
                raise ValueError(f"trip index {i} out of range")
            if not grid.machines[i].can_trip:
                raise ValueError(f"machine {i} is not trippable")
        if len(self.trip_set) >= len(grid.machines):
            raise ValueError("cannot trip every machine")
        if (
            not self.trip_set
            and self.extra_deficit == 0.0
            and self.noise_amplitude == 0.0
        ):
            raise ValueError("scenario needs a trip, an extra deficit or noise")

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["trip_set"] = list(self.trip_set)
        d["noise_channels"] = list(self.noise_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(**d)


@dataclass
class TrajectoryRecord:
    """Sampled closed- or open-loop run: COI frequency, voltages and controls."""

    dt: float
    t: np.ndarray  # (n,)
    omega: np.ndarray  # (n,) p.u. COI frequency deviation
    y: np.ndarray  # (n, m) bus-voltage proxies, p.u.
    ul: np.ndarray  # (n, p) shedding ratios, [0, 1]
    ud: np.ndarray  # (n, q) DC reference deviations, MW (as commanded)
    ud_applied: np.ndarray | None = None  # (n, q) after ramp limiting
    scenario: Scenario | None = None
    states: np.ndarray | None = None  # (n, nx) raw simulator state, tests only

    def __len__(self) -> int:
        return len(self.t)

    def write_csv(self, path):
        m, p, q = self.y.shape[1], self.ul.shape[1], self.ud.shape[1]
        header = (
            ["t", "omega"]
            + [f"y_{i + 1}" for i in range(m)]
            + [f"ul_{i + 1}" for i in range(p)]
            + [f"ud_{i + 1}" for i in range(q)]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.t)):
                row = [self.t[k], self.omega[k], *self.y[k], *self.ul[k], *self.ud[k]]
                w.writerow([f"{v:.12g}" for v in row])

    @classmethod
    def read_csv(cls, path) -> "TrajectoryRecord":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        m = sum(h.startswith("y_") for h in header)
        p = sum(h.startswith("ul_") for h in header)
        q = sum(h.startswith("ud_") for h in header)
        t = data[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(
            dt=dt,
            t=t,
            omega=data[:, 1],
            y=data[:, 2 : 2 + m],
            ul=data[:, 2 + m : 2 + m + p],
            ud=data[:, 2 + m + p : 2 + m + p + q],
        )


def default_grid() -> GridModel:
    """Desk-scale testbed: an equivalent unit plus 3 trippable machines,
    3 load nodes and 2 HVDC links."""
    machines = (
        Machine(inertia=5.5, damping=1.0, gov_gain=11.0, gov_tc=5.0, capacity=2200.0, output=800.0, can_trip=False),
        Machine(inertia=1.5, damping=0.3, gov_gain=1.5, gov_tc=5.0, capacity=120.0, output=110.0),
        Machine(inertia=1.5, damping=0.3, gov_gain=1.5, gov_tc=5.5, capacity=110.0, output=100.0),
        Machine(inertia=1.5, damping=0.3, gov_gain=1.5, gov_tc=4.5, capacity=100.0, output=90.0),
    )
    loads = (
        LoadNode("L1", 700.0, 0.4, 2.0),
        LoadNode("L2", 600.0, 0.4, 2.5),
        LoadNode("L3", 500.0, 0.4, 1.8),
    )
    hvdc = (
        HvdcLink(base_setpoint=400.0, ud_min=-80.0, ud_max=80.0, ramp_rate=250.0, response_lag=0.15, end="receiving"),
        HvdcLink(base_setpoint=300.0, ud_min=-80.0, ud_max=80.0, ramp_rate=250.0, response_lag=0.2, end="receiving"),
    )
    vsens = (
        (-0.30, -0.12, -0.08, 0.50, 0.15),
        (-0.10, -0.25, -0.15, 0.18, 0.45),
    )
    return GridModel(machines=machines, loads=loads, hvdc=hvdc, voltage_sensitivity=vsens)


def steady_state_deviation(grid: GridModel, deficit: float) -> float:
    """Closed-form post-event frequency deviation for a pure power deficit."""
    if not np.isfinite(deficit):
        raise ValueError("deficit must be finite")
    return -deficit / (grid.total_damping() + grid.total_gov_gain())


class _Plant:
    """Precomputed per-unit quantities and the ODE right-hand side."""

    def __init__(self, grid: GridModel, scenario: Scenario):
        s = grid.s_base
        self.nm = len(grid.machines)
        self.p = grid.n_loads
        self.q = grid.n_links
        self.M = np.array([m.inertia * m.capacity / s for m in grid.machines])
        self.D = np.array([m.damping * m.capacity / s for m in grid.machines])
        self.K = np.array([m.gov_gain * m.capacity / s for m in grid.machines])
        self.Tg = np.array([m.gov_tc for m in grid.machines])
        self.gov_lim = np.array([GOVERNOR_LIMIT * m.capacity / s for m in grid.machines])
        self.Pl = np.array([ld.base_power / s for ld in grid.loads])
        self.c = np.array(
            [MOTOR_FREQ_SENSITIVITY * ld.dynamic_fraction * ld.base_power / s for ld in grid.loads]
        )
        self.Tm = np.array([ld.motor_tc for ld in grid.loads])
        self.lag = np.array([lk.response_lag for lk in grid.hvdc])
        self.sign = np.array([lk.sign for lk in grid.hvdc])
        self.s_base = s
        self.online = np.ones(self.nm, dtype=bool)
        self.online[list(scenario.trip_set)] = False
        self.trip_deficit = (
            sum(grid.machines[i].output for i in scenario.trip_set) / s
            + scenario.extra_deficit
        )
        self.trip_time = scenario.trip_time
        self.scale = scenario.inertia_scale
        self.vsens = np.asarray(grid.voltage_sensitivity, dtype=float)
        self.nx = 1 + self.nm + self.p + self.q

    def rhs(self, t, x, ul, r, load_noise):
        om = x[0]
        pg = x[1 : 1 + self.nm]
        w = x[1 + self.nm : 1 + self.nm + self.p]
        pdc = x[1 + self.nm + self.p :]
        post = t >= self.trip_time
        act = self.online if post else np.ones(self.nm, dtype=bool)

        dpg = (-self.K * om - pg) / self.Tg
        dw = (om - w) / self.Tm
        dpdc = (r - pdc) / self.lag

        mech = np.sum(np.clip(pg, -self.gov_lim, self.gov_lim)[act])
        dc = np.dot(self.sign, pdc) / self.s_base
        shed = np.dot(ul, self.Pl)
        dyn_load = np.dot((1.0 - ul) * self.c, om - w)
        deficit = (self.trip_deficit if post else 0.0) + np.sum(load_noise) / self.s_base
        d_tot = np.sum(self.D[act])
        m_tot = self.scale * np.sum(self.M[act])
        dom = (mech + dc + shed - deficit - dyn_load - d_tot * om) / m_tot

        dx = np.empty_like(x)
        dx[0] = dom
        dx[1 : 1 + self.nm] = dpg
        dx[1 + self.nm : 1 + self.nm + self.p] = dw
        dx[1 + self.nm + self.p :] = dpdc
        return dx

    def voltages(self, t, x, ul, load_noise):
        om = x[0]
        w = x[1 + self.nm : 1 + self.nm + self.p]
        pdc = x[1 + self.nm + self.p :]
        # PCC-side proxy: converter injections plus the uncontrolled load
        # variation; feeders disconnected by shedding drop off their own
        # radial branch and do not move the monitored buses.
        inj_loads = -(1.0 - ul) * self.c * (om - w) - load_noise / self.s_base
        inj_links = self.sign * pdc / self.s_base
        inj = np.concatenate([inj_loads, inj_links])
        return 1.0 + self.vsens @ inj


def simulate(grid: GridModel, scenario: Scenario, policy=None, substeps: int = 4) -> TrajectoryRecord:
    """Fixed-step RK4 run of one scenario, optionally under a control policy.

    The policy, if given, is called once per sample step as
    ``policy(t, omega_hist, y_hist) -> (ul, ud)`` with measurement history up
    to and including the current sample; controls are applied with zero-order
    hold.  Shedding ratios are monotone (load is not restored within a run)
    and DC commands outside the link limits are rejected.
    """
    scenario.validate(grid)
    if substeps < 4:
        raise ValueError("substeps must be >= 4 (RK4 step <= dt/4)")
    plant = _Plant(grid, scenario)
    dt = scenario.dt
    h = dt / substeps
    n_steps = int(round(scenario.horizon / dt))
    rng = np.random.default_rng(scenario.noise_seed)
    noise_loads = "loads" in scenario.noise_channels and scenario.noise_amplitude > 0
    noise_dc = "dc" in scenario.noise_channels and scenario.noise_amplitude > 0

    ud_lo = np.array([lk.ud_min for lk in grid.hvdc])
    ud_hi = np.array([lk.ud_max for lk in grid.hvdc])
    ramp = np.array([lk.ramp_rate for lk in grid.hvdc])

    x = np.zeros(plant.nx)
    r = np.zeros(plant.q)  # ramp-limited applied DC reference, MW
    ul = np.zeros(plant.p)
    load_noise = np.zeros(plant.p)

    n = n_steps + 1
    t_arr = np.arange(n) * dt
    omega = np.zeros(n)
    y = np.zeros((n, plant.vsens.shape[0]))
    ul_arr = np.zeros((n, plant.p))
    ud_arr = np.zeros((n, plant.q))
    ud_app = np.zeros((n, plant.q))
    states = np.zeros((n, plant.nx))

    for k in range(n):
        t = t_arr[k]
        omega[k] = x[0]
        y[k] = plant.voltages(t, x, ul, load_noise)
        states[k] = x
        if k == n_steps:
            ul_arr[k] = ul
            ud_arr[k] = ud_arr[k - 1] if k > 0 else 0.0
            ud_app[k] = r
            break

        ud_cmd = np.zeros(plant.q)
        if policy is not None:
            out = policy(t, omega[: k + 1], y[: k + 1])
            if out is not None:
                ul_cmd, ud_cmd = out
                ul_cmd = np.asarray(ul_cmd, dtype=float)
                ud_cmd = np.asarray(ud_cmd, dtype=float)
                if np.any(ul_cmd < -1e-12) or np.any(ul_cmd > 1.0 + 1e-12):
                    raise SimulationError("policy returned shedding ratio outside [0, 1]")
                if np.any(ud_cmd < ud_lo - 1e-9) or np.any(ud_cmd > ud_hi + 1e-9):
                    raise SimulationError("policy returned DC command outside link limits")
                ul = np.maximum(ul, np.clip(ul_cmd, 0.0, 1.0))

        if noise_loads:
            load_noise = rng.normal(0.0, scenario.noise_amplitude, plant.p)
        if noise_dc:
            ud_cmd = np.clip(
                ud_cmd + rng.normal(0.0, scenario.noise_amplitude, plant.q), ud_lo, ud_hi
            )
        r = r + np.clip(ud_cmd - r, -ramp * dt, ramp * dt)
        r = np.clip(r, ud_lo, ud_hi)

        ul_arr[k] = ul
        ud_arr[k] = ud_cmd
        ud_app[k] = r

        for _ in range(substeps):
            k1 = plant.rhs(t, x, ul, r, load_noise)
            k2 = plant.rhs(t + h / 2, x + h / 2 * k1, ul, r, load_noise)
            k3 = plant.rhs(t + h / 2, x + h / 2 * k2, ul, r, load_noise)
            k4 = plant.rhs(t + h, x + h * k3, ul, r, load_noise)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        if not np.all(np.isfinite(x)) or abs(x[0]) > 1.0:
            raise SimulationError(f"integration diverged at t={t:.2f}s")

    return TrajectoryRecord(
        dt=dt,
        t=t_arr,
        omega=omega,
        y=y,
        ul=ul_arr,
        ud=ud_arr,
        ud_applied=ud_app,
        scenario=scenario,
        states=states,
    )


def load_grid(path) -> GridModel:
    with open(path) as fh:
        return GridModel.from_dict(json.load(fh))


def save_grid(grid: GridModel, path):
    with open(path, "w") as fh:
        json.dump(grid.to_dict(), fh, indent=2)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return Scenario.from_dict(json.load(fh))
