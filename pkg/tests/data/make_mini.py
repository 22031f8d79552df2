"""Regenerate the two-frame miniature dataset in tests/data/mini.

Frames: the contracting-ventricle fixture at t = 0 and t = 1 on a 20x20x10
grid, a coarse annulus mesh of the same wall and six landmarks on the wall
(one deliberately unannotated at end-systole).

    python3 tests/data/make_mini.py
"""
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from helpers import ContractingVentricle, contracting_sequence  # noqa: E402
from warpfib.evaluation import LandmarkSet, write_landmarks  # noqa: E402
from warpfib.mesh import annulus_mesh, write_mesh  # noqa: E402
from warpfib.volume import write_sequence  # noqa: E402


def build(out=HERE / "mini"):
    out.mkdir(parents=True, exist_ok=True)
    field = ContractingVentricle()
    seq = contracting_sequence(dims=(20, 20, 10), lo=(-40, -40, -12), hi=(40, 40, 12), field=field)
    write_sequence(seq, out / "mini.seq.json", description="contracting ventricle, 2 frames")
    write_mesh(annulus_mesh(n_r=2, n_theta=16, n_z=3), out / "mesh.json")
    th = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    ref = np.c_[25 * np.cos(th), 25 * np.sin(th), np.linspace(-6, 6, 6)]
    es = field.forward(1.0, ref)
    es[5] = np.nan
    lms = LandmarkSet([f"P{i}" for i in range(6)], ref, {"ed": 0.0, "es": 1.0},
                      {"ed": ref.copy(), "es": es})
    write_landmarks(lms, out / "landmarks.json")
    return out


if __name__ == "__main__":
    print(build())
