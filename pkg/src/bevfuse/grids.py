"""Metric bird's-eye-view lattice shared by both branches and the head."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_DIV_TOL = 1e-9


@dataclass(frozen=True)
class BevGrid:
    """Axis-aligned BEV extent split into square cells.

    Columns index x (ego forward), rows index y (ego left). Cell membership
    uses the half-open convention floor((x - x_min) / cell), so a point at
    x_max falls outside.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float

    def __post_init__(self):
        if self.cell <= 0:
            raise ConfigError(f"cell size must be positive, got {self.cell}")
        for lo, hi, name in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            n = (hi - lo) / self.cell
            if hi <= lo or abs(n - round(n)) > _DIV_TOL or round(n) < 1:
                raise ConfigError(
                    f"{name} extent [{lo}, {hi}] is not a positive whole "
                    f"number of {self.cell} m cells"
                )

    @property
    def width(self):
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def height(self):
        return int(round((self.y_max - self.y_min) / self.cell))

    def col_coord(self, x):
        """Continuous column coordinate; integer part is the cell index."""
        return (np.asarray(x, dtype=np.float64) - self.x_min) / self.cell

    def row_coord(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_min) / self.cell

    def contains(self, x, y):
        return (self.x_min <= x < self.x_max) and (self.y_min <= y < self.y_max)

    def cell_center(self, row, col):
        return (
            self.x_min + (np.asarray(col) + 0.5) * self.cell,
            self.y_min + (np.asarray(row) + 0.5) * self.cell,
        )
