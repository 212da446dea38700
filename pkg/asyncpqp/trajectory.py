""" Per-iteration records of a synchronous or asynchronous dual run. """

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

TERMINAL_STATUSES = ("converged", "max_iter", "stalled", "diverged")


@dataclass
class Trajectory:
    """Rows k = 1..K of a run, y^0 kept separately.

    ``delays`` is None for synchronous runs and for asynchronous runs started
    with ``record_delays=False``.
    """

    y0: np.ndarray
    kind: str = "async"
    seed: Optional[int] = None
    terminal_status: Optional[str] = None
    k: np.ndarray = None
    y: np.ndarray = None
    condition: np.ndarray = None
    zeta: np.ndarray = None
    updated: np.ndarray = None
    residual: np.ndarray = None
    delays: Optional[np.ndarray] = None
    _rows: List[tuple] = field(default_factory=list, repr=False)
    _delay_rows: List[np.ndarray] = field(default_factory=list, repr=False)

    def append(self, y, residual, condition=np.nan, zeta=0, updated=True, delays=None):
        self._rows.append(
            (np.array(y, dtype=np.float64), float(residual), float(condition),
             int(zeta), bool(updated))
        )
        if delays is not None:
            self._delay_rows.append(delays)

    def finalize(self, terminal_status: str) -> "Trajectory":
        """Freeze the appended rows into arrays."""
        if terminal_status not in TERMINAL_STATUSES:
            raise ValueError(f"Unknown terminal status {terminal_status!r}")
        self.terminal_status = terminal_status
        if not self._rows:
            return self

        ys, residual, condition, zeta, updated = zip(*self._rows)
        self.y = np.vstack(ys)
        self.residual = np.array(residual)
        self.condition = np.array(condition)
        self.zeta = np.array(zeta, dtype=np.int8)
        self.updated = np.array(updated, dtype=bool)
        self.k = np.arange(1, len(ys) + 1)
        if self._delay_rows:
            self.delays = np.vstack(self._delay_rows)
        self._rows = []
        self._delay_rows = []
        return self

    @property
    def m(self) -> int:
        return len(self.y0)

    @property
    def iterations(self) -> int:
        return 0 if self.y is None else self.y.shape[0]

    @property
    def final_y(self) -> np.ndarray:
        return self.y0 if self.y is None else self.y[-1]

    @property
    def holds(self) -> int:
        return 0 if self.updated is None else int((~self.updated).sum())

    def to_frame(self) -> pd.DataFrame:
        """One row per iteration: k, y_1..y_m, then the run bookkeeping columns."""
        df = pd.DataFrame({"k": self.k})
        for j in range(self.m):
            df[f"y_{j + 1}"] = self.y[:, j]
        if self.kind == "async":
            df["condition_value"] = self.condition
            df["zeta"] = self.zeta
            df["updated"] = self.updated.astype(int)
            if self.delays is not None:
                df["delay_sample"] = [
                    ";".join(str(d) for d in row) for row in self.delays
                ]
        df["residual"] = self.residual
        return df
