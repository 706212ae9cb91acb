"""Shared simulation parameters and their default values.

All distances are meters, times are seconds, speeds m/s. Field names follow
the symbol names accepted in scenario files (``params`` overrides).
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


@dataclass(frozen=True)
class Params:
    # robot / metric level
    v_max: float = 0.2          # max linear speed
    R_b: float = 0.47           # robot bounding sphere radius
    D_s: float = 1.2            # safety distance (interference threshold)
    R_c: float = 1.5            # future trail crop radius
    R_t: float = 1.5            # radius for considering teammate trails
    R_v: float = 0.5            # node visit radius
    R_l: float = 2.0            # local replanning horizon
    T_wait: float = 0.5         # wait between initial planning attempts
    # patrolling agent
    T_pcr: float = 5.0          # critical path planning failure time
    T_ncr: float = 5.0          # critical node conflict time
    T_sleep: float = 0.1        # agent sleep time between loops
    T_idln: float = 5.0         # idleness message broadcast period
    T_exp: float = 10.0         # team model entry expiration time
    # traversability
    eps_neigh: float = 0.3      # neighbourhood radius for density/roughness
    exclusion: float = 0.6      # clearance threshold for the traversable map (D_s/2)
    sense_range: float = 1.2    # range at which teammate bodies are sensed as obstacles
    # planner
    lambda_z: float = 2.0       # z-difference weight in the step cost
    lambda_t: float = 1.0       # traversability strength in the step cost
    eps_cost: float = 1e-6      # division guard in the normalized traversability
    max_step: float = 0.5       # cap on the expansion safety radius
    max_children: int = 5       # children sampled per expansion
    goal_tol: float | None = None  # goal acceptance distance; None -> R_v
    l_max: int = 5              # initial planning attempts before failure
    boxed_attempts: int = 3     # corridor-restricted attempts before full map
    replan_period_s: float = 0.5  # continuous replanning cadence
    # agent randomized escape
    d_full: int = 4             # consecutive critical failures before full-graph draw
    # engine
    tick_s: float = 0.1
    deadlock_window_s: float = 60.0
    deadlock_eps_d: float = 0.05
    selected_period_s: float = 0.0  # 0 -> broadcast selected every agent tick

    def goal_tolerance(self) -> float:
        return self.R_v if self.goal_tol is None else self.goal_tol

    def with_overrides(self, overrides: dict) -> "Params":
        """Return a copy with ``overrides`` applied; unknown keys raise."""
        known = {f.name for f in fields(self)}
        bad = set(overrides) - known
        if bad:
            raise KeyError(f"unknown parameter(s): {sorted(bad)}")
        return replace(self, **overrides)


PARAM_NAMES = tuple(f.name for f in fields(Params))
