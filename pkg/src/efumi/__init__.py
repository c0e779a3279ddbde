"""Multiple-instance target characterization for hyperspectral imagery.

The package estimates a target spectral signature from coarse, bag-level
labels, scores how much each label mattered via exact label-flip reruns
and two cheap surrogates, and exposes the whole loop through a library
API, a command line (``efumi.cli``), and an HTTP service (``efumi.service``).
"""

from .core import (
    Bag,
    BagSet,
    EndmemberSet,
    HsiCube,
    ProportionMatrix,
    Violation,
    global_mean,
    validate_cube,
)
from .em import (
    EfumiConfig,
    EfumiResult,
    load_result,
    run_efumi,
    save_result,
    vca_init,
)
from .influence import (
    DoIReport,
    InfluenceRecord,
    doi,
    emit_scatter,
    exact_influence_sweep,
    flip_labels,
    influence_norm,
    mislabel_recovery,
    rank_units,
    records_to_csv,
    records_to_json,
    reports_to_json,
    spearman,
    surrogate_pt,
    surrogate_re,
    surrogates,
)
from .io import (
    FormatError,
    LabelMask,
    bags_from_json,
    bags_to_json,
    load_cube,
    load_mask,
    mask_to_bags,
    save_cube,
    save_mask,
)
from .rng import Rng
from .superpixel import (
    RegionMetrics,
    SuperpixelMap,
    load_segments,
    region_metrics,
    save_segments,
    segment,
    superpixel_influence,
)
from .synth import SyntheticTruth, generate_synthetic
from .unmix import fcls, kkt_residual, residuals, solve_simplex_lsq, unmix_all

__version__ = "0.1.0"

__all__ = [
    "Bag",
    "BagSet",
    "DoIReport",
    "EfumiConfig",
    "EfumiResult",
    "EndmemberSet",
    "FormatError",
    "HsiCube",
    "InfluenceRecord",
    "LabelMask",
    "ProportionMatrix",
    "RegionMetrics",
    "Rng",
    "SuperpixelMap",
    "SyntheticTruth",
    "Violation",
    "__version__",
    "bags_from_json",
    "bags_to_json",
    "doi",
    "emit_scatter",
    "exact_influence_sweep",
    "fcls",
    "flip_labels",
    "generate_synthetic",
    "global_mean",
    "influence_norm",
    "kkt_residual",
    "load_cube",
    "load_mask",
    "load_result",
    "load_segments",
    "mask_to_bags",
    "mislabel_recovery",
    "rank_units",
    "records_to_csv",
    "records_to_json",
    "region_metrics",
    "reports_to_json",
    "residuals",
    "run_efumi",
    "save_cube",
    "save_mask",
    "save_result",
    "save_segments",
    "segment",
    "solve_simplex_lsq",
    "spearman",
    "superpixel_influence",
    "surrogate_pt",
    "surrogate_re",
    "surrogates",
    "unmix_all",
    "validate_cube",
    "vca_init",
]
