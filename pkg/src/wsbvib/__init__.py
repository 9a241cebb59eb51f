"""wsbvib: weakly supervised Bayesian shape-model prediction from volumetric images."""

from .core import (
    CohortSample,
    LatentGaussian,
    PointSet,
    PredictiveDistribution,
    ShapeModel,
    TriangleMesh,
    Volume,
    read_mesh,
    read_point_set,
    read_volume,
    write_mesh,
    write_point_set,
    write_volume,
)
from .errors import (
    ConfigError,
    DataError,
    IOFormatError,
    MissingFileError,
    RejectedParamsError,
    TrainingError,
    UndefinedStatisticError,
    WsbvibError,
)

__version__ = "0.1.0"
