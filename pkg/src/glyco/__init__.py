"""Glucose forecasting toolkit.

Implements a prediction-coherent two-output LSTM trained with a
variation-penalized loss, four baseline regressors (ELM, GP, SVR, plain
LSTM), the CGM preprocessing pipeline, moving-average post-smoothing, and
the RMSE / dRMSE / CG-EGA evaluation suite, driven by the ``glyco`` CLI.
"""

__version__ = "0.1.0"

from .data_model import (  # noqa: F401
    DiabetesType,
    EventKind,
    PatientRecord,
    RawEvent,
    UniformSeries,
    export_csv,
    ingest_csv,
    validate,
)
from .metrics import (  # noqa: F401
    CgEgaReport,
    PredictionTrace,
    RatePoint,
    cg_ega_classify,
    cg_ega_report,
    drmse,
    p_ega,
    r_ega,
    rmse,
)
from .models import (  # noqa: F401
    ElmConfig,
    ElmRegressor,
    GpConfig,
    GpRegressor,
    LstmModelConfig,
    LstmPredictor,
    NaivePredictor,
    Predictor,
    SvrConfig,
    SvrRegressor,
    make_lstm,
    make_pclstm,
    predict_trace,
)
from .nnet import LstmParams, TrainConfig, TwoStepPrediction, loss_cmse, loss_mse  # noqa: F401
from .postprocess import SmoothingConfig, moving_average  # noqa: F401
from .preprocess import (  # noqa: F401
    SampleWindow,
    Scaler,
    SplitSpec,
    WindowConfig,
    build_windows,
    preprocess_record,
    standardize_and_window,
)
from .synth import SplitMix64, SynthConfig, generate_cohort, generate_patient  # noqa: F401
