import numpy as np
import pytest

from howardweb.point_process import RowPoints, WindowRealization, WindowSpec, UpwardLandings
from howardweb.rng_field import GeometricLaw, ModelConfig


MASTER_SEED = 20260809


@pytest.fixture(scope="session")
def cfg():
    """Default model: p=0.5, two-sided geometric x, geometric y."""
    return ModelConfig(seed=MASTER_SEED, p=0.5, law=GeometricLaw(0.5, 0.5))


def make_realization(rows: dict[int, list[int]], cfg: ModelConfig,
                     x_lo=-10**9, x_hi=10**9) -> WindowRealization:
    """Hand-built realization for stepping-logic fixtures.

    Row bounds default to effectively unbounded so nearest-point lookups
    never raise; pass tight bounds to exercise soundness errors.
    """
    ys = sorted(rows)
    spec = WindowSpec(x_lo=-1000, x_hi=1000, y_lo=ys[0], y_hi=ys[-1] + 1)
    built = {
        y: RowPoints(y=y, xs=sorted(xs), special=[False] * len(xs),
                     x_lo=x_lo, x_hi=x_hi)
        for y, xs in rows.items()
    }
    empty = np.empty(0, dtype=np.int64)
    return WindowRealization(
        spec=spec, margins=(0, 0), rows=built,
        upward=UpwardLandings(x=empty, src_y=empty, land_y=empty),
        cfg=cfg,
    )
