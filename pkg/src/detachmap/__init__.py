"""detachmap: landslide detachment maps from spatial Poisson point processes
with penalized additive log-intensity models.

The library estimates where shallow landslides *start*: crown locations are
modeled as an inhomogeneous Poisson process whose log-intensity is an
additive function of geophysical covariates. Around that core sit raster
preprocessing, random-forest covariate ranking, cross-valley model selection
under range masking, pattern simulation, semiparametric bootstrap uncertainty
maps and regionalized residual diagnostics.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, DetachmapError, GridFormatError,
                     NumericalError)
from .raster import (CovariateStack, PointPattern, RasterGrid, Window,
                     covariate_at, range_mask, read_ascii_grid, read_points_csv,
                     write_ascii_grid, write_points_csv)
from .preprocess import (CategoricalGrid, FilterSpec, binarize_twi,
                         categorical_from_codes, curvature_sign,
                         gaussian_filter, merge_dusaf)
from .gamcore import (DesignBlock, PenaltyMatrix, PirlsResult, SplineBasis,
                      build_basis, evaluate_smooth, penalty_matrix, pirls_fit)
from .ppm import (FittedModel, IntensityMap, ModelSpec, QuadratureScheme,
                  fit_model, in_range_mask_for, load_model, loglik,
                  make_quadrature, predict_intensity, save_model, select_model)
from .simboot import (BootstrapMaps, SeededRng, expected_count, sample_pattern,
                      semiparametric_bootstrap)
from .rfimportance import (Forest, ForestConfig, ImportanceRanking, LabeledTable,
                           build_rf_dataset, fit_forest, gini_importance,
                           oob_error, split_blocks)
from .diagnostics import (ErrorGrid, LurkingCurve, QQData, ResidualSummary,
                          lurking_curve, qq_data, raw_errors, residual_summary)
from .synthetic import (CovariateField, SyntheticValley, SyntheticValleySpec,
                        TruthTerm, generate_valley, truth_log_intensity)
