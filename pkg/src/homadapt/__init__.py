"""Homography-set learning laboratory for geometric domain shift in detection.

The package is organized as a library of small, testable pieces:

* :mod:`homadapt.geometry` / :mod:`homadapt.warping` - the 4-parameter
  homography family and differentiable warping with validity masks;
* :mod:`homadapt.mappings` / :mod:`homadapt.approx` - reference dense
  mappings (spherical FoV correction, viewpoint tilt) and fitting of small
  homography sets with per-cell selection;
* :mod:`homadapt.detector` / :mod:`homadapt.multiwarp` - a desk-scale
  single-stage detector and the warp/extract/unwarp/aggregate architecture;
* :mod:`homadapt.synthbench` - a deterministic synthetic benchmark with
  controllable geometric shifts between source and target domains;
* :mod:`homadapt.training` - the three training stages (source-only base,
  aggregator with random homography sets, mean-teacher adaptation);
* :mod:`homadapt.evaluation` - AP@0.5 with PR curves;
* :mod:`homadapt.cli` - experiment orchestration (`homadapt --help`).
"""

__version__ = "0.1.0"

from .geometry import (
    HomographyParams,
    apply_point,
    compose,
    invert,
    solve_point_mapping,
    to_matrix,
)
from .warping import WarpResult, warp

__all__ = [
    "HomographyParams",
    "WarpResult",
    "apply_point",
    "compose",
    "invert",
    "solve_point_mapping",
    "to_matrix",
    "warp",
    "__version__",
]
