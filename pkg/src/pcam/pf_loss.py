"""Distance-weighted concentration loss on rollout grids.

Each cell's squared difference from the value at the map's (floored) center
of mass is divided by the cell's distance to the real-valued center, summed
over layers.  Minimizing the positive ("pulling") form drags every cell
toward the central value, hardest near the center; the sign-flipped literal
form is kept behind a flag.  The analytic gradient includes the chain
through the center-of-mass coordinates and is validated against central
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, check_finite

EPS_DIST = 1e-6   # cells closer than this to the center are skipped
SIGN_MODES = ("pulling", "paper")
CENTER_FORMS = ("literal", "normalized")


@dataclass
class CenterOfMass:
    m: float                  # row coordinate, 1-based grid units
    n: float                  # column coordinate
    cell: tuple[int, int]     # floored lookup cell, clamped into the grid
    all_zero: bool = False


def _coords(g: int):
    m = np.arange(1, g + 1, dtype=np.float64)[:, None] * np.ones((1, g))
    n = np.ones((g, 1)) * np.arange(1, g + 1, dtype=np.float64)[None, :]
    return m, n


def center_of_mass(grid: np.ndarray, form: str = "literal") -> CenterOfMass:
    """Mass-weighted mean coordinate of a non-negative map.

    The literal form divides by the squared grid side, which is the exact
    weighted mean only when the map's total mass equals the cell count; the
    normalized form divides by the actual mass and always lands inside the
    grid for non-degenerate maps.
    """
    grid = check_finite("center-of-mass grid", grid)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ContractViolation("center_of_mass expects a square grid")
    if np.any(grid < 0):
        raise ContractViolation("center_of_mass expects a non-negative map")
    if form not in CENTER_FORMS:
        raise ContractViolation(f"unknown center form {form!r}")
    g = grid.shape[0]
    m, n = _coords(g)
    total = float(grid.sum())
    if form == "normalized":
        if total == 0.0:
            c = (g + 1) / 2.0
            return CenterOfMass(m=c, n=c, cell=_clamp_cell(c, c, g), all_zero=True)
        mc = float((m * grid).sum() / total)
        nc = float((n * grid).sum() / total)
    else:
        mc = float((m * grid).sum() / (g * g))
        nc = float((n * grid).sum() / (g * g))
    return CenterOfMass(m=mc, n=nc, cell=_clamp_cell(mc, nc, g), all_zero=(total == 0.0))


def _clamp_cell(mc: float, nc: float, g: int) -> tuple[int, int]:
    cm = min(max(int(np.floor(mc)), 1), g)
    cn = min(max(int(np.floor(nc)), 1), g)
    return cm, cn


def _as_map_list(maps) -> list[np.ndarray]:
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        maps = [maps]
    out = []
    for grid in maps:
        grid = check_finite("loss map", grid)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1] or grid.shape[0] < 2:
            raise ContractViolation("loss maps must be square grids with side >= 2")
        out.append(grid)
    return out


def _layer_terms(grid, center_form):
    g = grid.shape[0]
    com = center_of_mass(grid, form=center_form)
    m, n = _coords(g)
    dist = np.sqrt((m - com.m) ** 2 + (n - com.n) ** 2)
    active = dist >= EPS_DIST
    a_c = grid[com.cell[0] - 1, com.cell[1] - 1]
    return com, m, n, dist, active, a_c


def pf_loss(maps, sign_mode: str = "pulling", center_form: str = "literal") -> float:
    """Sum over layers and cells of (value - center value)^2 / center distance."""
    if sign_mode not in SIGN_MODES:
        raise ContractViolation(f"unknown sign mode {sign_mode!r}")
    total = 0.0
    for grid in _as_map_list(maps):
        com, m, n, dist, active, a_c = _layer_terms(grid, center_form)
        diff = grid - a_c
        total += float(np.sum(diff[active] ** 2 / dist[active]))
    return total if sign_mode == "pulling" else -total


def pf_direct_term(grid: np.ndarray, center_form: str = "literal") -> np.ndarray:
    """The dominant gradient component 2 (A - A_c) / dist, pulling sign.

    Its sign matches sign(A - A_c), so a descent step moves every active
    cell toward the central value, hardest near the center.
    """
    grid = _as_map_list(grid)[0]
    com, m, n, dist, active, a_c = _layer_terms(grid, center_form)
    out = np.zeros_like(grid)
    out[active] = 2.0 * (grid[active] - a_c) / dist[active]
    return out


def pf_loss_grad(maps, sign_mode: str = "pulling", center_form: str = "literal",
                 com_grad: bool = True) -> list[np.ndarray]:
    """Analytic per-cell gradient, one grid per layer.

    Three components per layer: the direct difference term; the collected
    adjoint on the (fixed) center cell's value; and, when com_grad is on,
    the chain through the real-valued center coordinates inside every
    distance denominator.  The floored cell index and the active set are
    locally constant and contribute nothing.
    """
    if sign_mode not in SIGN_MODES:
        raise ContractViolation(f"unknown sign mode {sign_mode!r}")
    grids = _as_map_list(maps)
    out = []
    for grid in grids:
        g = grid.shape[0]
        com, m, n, dist, active, a_c = _layer_terms(grid, center_form)
        diff = grid - a_c
        grad = np.zeros_like(grid)
        grad[active] = 2.0 * diff[active] / dist[active]
        grad[com.cell[0] - 1, com.cell[1] - 1] -= float(np.sum(2.0 * diff[active] / dist[active]))
        if com_grad and not com.all_zero:
            d3 = dist[active] ** 3
            c_m = float(np.sum(diff[active] ** 2 * (m[active] - com.m) / d3))
            c_n = float(np.sum(diff[active] ** 2 * (n[active] - com.n) / d3))
            if center_form == "literal":
                gm, gn = m / (g * g), n / (g * g)
            else:
                total = float(grid.sum())
                gm, gn = (m - com.m) / total, (n - com.n) / total
            grad += gm * c_m + gn * c_n
        out.append(grad if sign_mode == "pulling" else -grad)
    return out
