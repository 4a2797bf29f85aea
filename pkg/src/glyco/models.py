"""The predictors: pcLSTM, LSTM, ELM, GP, and epsilon-SVR behind one contract.

Every model is personalized: fit() sees one patient's training and
validation windows and predict() maps windows to two-step predictions.
Single-output models (ELM, GP, SVR, naive) fill the previous-step output
with their own evaluation on the same features, so the contract is uniform;
only the final output ever enters a prediction trace.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import nnet
from .data_model import STEP_MINUTES
from .errors import ContractError, FitError
from .metrics import PredictionTrace
from .nnet import LstmParams, TrainConfig, TwoStepPrediction
from .preprocess import SampleWindow, Scaler, WindowConfig, invert_scaler


def flatten_features(windows: list[SampleWindow]) -> np.ndarray:
    """Stack each H x 3 window into one row vector (glucose/cho/insulin interleaved)."""
    return np.stack([w.features.ravel() for w in windows])


class Predictor:
    """Common fit/predict contract shared by all five models."""

    kind: str = "base"

    def fit(self, train_windows: list[SampleWindow], valid_windows: list[SampleWindow]) -> "Predictor":
        raise NotImplementedError

    def predict(self, windows: list[SampleWindow]) -> list[TwoStepPrediction]:
        raise NotImplementedError

    def _single_output(self, values: np.ndarray) -> list[TwoStepPrediction]:
        if not np.all(np.isfinite(values)):
            raise FitError(f"{self.kind}: non-finite predictions")
        return [TwoStepPrediction(prev=float(v), final=float(v)) for v in values]


class NaivePredictor(Predictor):
    """Sanity baseline: predict the last observed (standardized) glucose."""

    kind = "naive"

    def fit(self, train_windows, valid_windows):
        return self

    def predict(self, windows):
        values = np.array([w.features[-1, 0] for w in windows])
        return self._single_output(values)


@dataclass(frozen=True)
class ElmConfig:
    hidden_neurons: int = 2000  # paper-scale value is 1e5, reachable via the dual form
    l2: float = 500.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden_neurons < 1:
            raise ValueError("hidden_neurons must be >= 1")
        if self.l2 <= 0:
            raise ValueError("l2 must be > 0")


class ElmRegressor(Predictor):
    """Extreme learning machine: seeded random sigmoid layer + ridge readout.

    The ridge system is solved in primal form (n_h x n_h) when the hidden
    layer is no wider than the sample count and in dual Gram form (n x n)
    otherwise; both produce the same minimizer.
    """

    kind = "elm"

    def __init__(self, config: ElmConfig = ElmConfig()):
        self.config = config
        self.w_in: np.ndarray | None = None
        self.b_in: np.ndarray | None = None
        self.beta: np.ndarray | None = None

    def _hidden(self, X: np.ndarray) -> np.ndarray:
        return nnet.sigmoid(X @ self.w_in + self.b_in)

    def fit(self, train_windows, valid_windows=()):
        if not train_windows:
            raise ContractError("ELM needs non-empty training windows")
        X = flatten_features(train_windows)
        y = np.array([w.target_final for w in train_windows])
        n, d = X.shape
        nh = self.config.hidden_neurons
        rng = np.random.Generator(np.random.PCG64(self.config.seed))
        self.w_in = rng.uniform(-1.0, 1.0, (d, nh))
        self.b_in = rng.uniform(-1.0, 1.0, nh)
        H = self._hidden(X)
        lam = self.config.l2
        try:
            if nh <= n:
                A = H.T @ H + lam * np.eye(nh)
                self.beta = np.linalg.solve(A, H.T @ y)
            else:
                G = H @ H.T + lam * np.eye(n)
                self.beta = H.T @ np.linalg.solve(G, y)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"ELM ridge system is singular: {exc}") from exc
        return self

    def predict(self, windows):
        if self.beta is None:
            raise ContractError("ELM predict before fit")
        values = self._hidden(flatten_features(windows)) @ self.beta
        return self._single_output(values)


@dataclass(frozen=True)
class GpConfig:
    sigma0_sq: float = 1e-8   # dot-product kernel inhomogeneity
    noise: float = 1e-2       # observation white-noise variance

    def __post_init__(self):
        if self.noise <= 0:
            raise ValueError("noise must be > 0")
        if self.sigma0_sq < 0:
            raise ValueError("sigma0_sq must be >= 0")


class GpRegressor(Predictor):
    """Gaussian-process posterior mean with the kernel k(x,x') = s0 + x.x'."""

    kind = "gp"

    def __init__(self, config: GpConfig = GpConfig()):
        self.config = config
        self.x_train: np.ndarray | None = None
        self.alpha: np.ndarray | None = None

    def fit(self, train_windows, valid_windows=()):
        if not train_windows:
            raise ContractError("GP needs non-empty training windows")
        X = flatten_features(train_windows)
        y = np.array([w.target_final for w in train_windows])
        K = X @ X.T + self.config.sigma0_sq
        K[np.diag_indices_from(K)] += self.config.noise
        try:
            factor = cho_factor(K, lower=True)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"GP kernel factorization failed; try larger noise ({exc})") from exc
        self.alpha = cho_solve(factor, y)
        self.x_train = X
        return self

    def predict(self, windows):
        if self.alpha is None:
            raise ContractError("GP predict before fit")
        Xq = flatten_features(windows)
        k_star = Xq @ self.x_train.T + self.config.sigma0_sq
        return self._single_output(k_star @ self.alpha)


@dataclass(frozen=True)
class SvrConfig:
    gamma: float = 5e-4       # RBF coefficient
    epsilon: float = 0.1      # no-penalty tube half-width
    c: float = 50.0           # box penalty
    tol: float = 1e-3         # max KKT violation at convergence
    max_iter: int = 2_000_000

    def __post_init__(self):
        if self.gamma <= 0 or self.c <= 0 or self.epsilon < 0:
            raise ValueError("gamma > 0, C > 0, epsilon >= 0 required")


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


class SvrRegressor(Predictor):
    """Epsilon-SVR trained by sequential minimal optimization.

    The dual is solved over (alpha, alpha*) pairs; each iteration picks the
    maximal-KKT-violating pair of directions, solves the two-variable
    subproblem in closed form, and updates the cached gradient.  At
    convergence every pair satisfies the box constraints and
    complementarity alpha_i * alpha*_i = 0.
    """

    kind = "svr"

    def __init__(self, config: SvrConfig = SvrConfig()):
        self.config = config
        self.x_train: np.ndarray | None = None
        self.beta: np.ndarray | None = None
        self.bias: float = 0.0
        self.alpha: np.ndarray | None = None       # kept for diagnostics/tests
        self.alpha_star: np.ndarray | None = None
        self.iterations: int = 0

    def fit(self, train_windows, valid_windows=()):
        if not train_windows:
            raise ContractError("SVR needs non-empty training windows")
        X = flatten_features(train_windows)
        y = np.array([w.target_final for w in train_windows])
        cfg = self.config
        n = len(y)
        K = rbf_kernel(X, X, cfg.gamma)

        alpha = np.zeros(n)
        alpha_star = np.zeros(n)
        u = np.zeros(n)  # K @ (alpha - alpha_star)
        C, eps, tol = cfg.c, cfg.epsilon, cfg.tol

        it = 0
        while True:
            f_a = y - u - eps   # KKT value when increasing alpha_i
            f_s = y - u + eps   # ... when decreasing alpha*_i
            up_vals = np.concatenate([
                np.where(alpha < C, f_a, -np.inf),
                np.where(alpha_star > 0, f_s, -np.inf),
            ])
            low_vals = np.concatenate([
                np.where(alpha > 0, f_a, np.inf),
                np.where(alpha_star < C, f_s, np.inf),
            ])
            p = int(np.argmax(up_vals))
            q = int(np.argmin(low_vals))
            m, M = up_vals[p], low_vals[q]
            violation = m - M
            if violation <= tol:
                break
            if it >= cfg.max_iter:
                raise FitError(
                    f"SVR SMO hit the iteration cap ({cfg.max_iter}); "
                    f"max KKT violation {violation:.3e}")

            i, i_star = p % n, p >= n
            j, j_star = q % n, q >= n
            lam_max = min(
                alpha_star[i] if i_star else C - alpha[i],
                C - alpha_star[j] if j_star else alpha[j],
            )
            eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
            if eta > 1e-12:
                lam = min(lam_max, violation / eta)
            else:
                lam = lam_max
            if i_star:
                alpha_star[i] -= lam
            else:
                alpha[i] += lam
            if j_star:
                alpha_star[j] += lam
            else:
                alpha[j] -= lam
            u += lam * (K[i] - K[j])
            it += 1

        # exact complementarity: shrink jointly-active pairs (never worsens the dual)
        both = np.minimum(alpha, alpha_star)
        alpha -= both
        alpha_star -= both
        np.clip(alpha, 0.0, C, out=alpha)
        np.clip(alpha_star, 0.0, C, out=alpha_star)

        free_a = (alpha > 0) & (alpha < C)
        free_s = (alpha_star > 0) & (alpha_star < C)
        estimates = np.concatenate([(y - u - eps)[free_a], (y - u + eps)[free_s]])
        if len(estimates):
            self.bias = float(np.mean(estimates))
        else:
            self.bias = float((m + M) / 2.0)

        self.iterations = it
        self.alpha, self.alpha_star = alpha, alpha_star
        beta = alpha - alpha_star
        support = beta != 0.0
        self.x_train = X[support]
        self.beta = beta[support]
        return self

    def predict(self, windows):
        if self.beta is None:
            raise ContractError("SVR predict before fit")
        Xq = flatten_features(windows)
        if len(self.beta) == 0:
            values = np.full(len(windows), self.bias)
        else:
            values = rbf_kernel(Xq, self.x_train, self.config.gamma) @ self.beta + self.bias
        return self._single_output(values)

    def dual_objective(self, train_windows) -> float:
        """Value of the maximized dual at the fitted coefficients."""
        X = flatten_features(train_windows)
        y = np.array([w.target_final for w in train_windows])
        K = rbf_kernel(X, X, self.config.gamma)
        beta = self.alpha - self.alpha_star
        return float(-0.5 * beta @ K @ beta
                     - self.config.epsilon * np.sum(self.alpha + self.alpha_star)
                     + y @ beta)


@dataclass(frozen=True)
class LstmModelConfig:
    units: int = 128
    coherence: float = 0.0
    learning_rate: float = 5e-3
    batch_size: int = 10
    l2_penalty: float = 1e-4
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0


class LstmPredictor(Predictor):
    """Two-output LSTM trained on the coherence-penalized loss.

    With coherence 0 this is the plain LSTM baseline; the prediction-
    coherent variant uses a positive coherence factor (default 2).
    """

    def __init__(self, config: LstmModelConfig = LstmModelConfig(), kind: str = "lstm"):
        self.kind = kind
        self.config = config
        self.params: LstmParams | None = None
        self.log = None

    def train_config(self) -> TrainConfig:
        c = self.config
        return TrainConfig(
            learning_rate=c.learning_rate, batch_size=c.batch_size,
            l2_penalty=c.l2_penalty, coherence=c.coherence,
            max_epochs=c.max_epochs, patience=c.patience, seed=c.seed)

    def fit(self, train_windows, valid_windows):
        if not train_windows or not valid_windows:
            raise ContractError("LSTM needs non-empty train and validation windows")
        init = LstmParams.init(self.config.units, seed=self.config.seed)
        self.params, self.log = nnet.train(init, train_windows, valid_windows,
                                           self.train_config())
        return self

    def predict(self, windows):
        if self.params is None:
            raise ContractError("LSTM predict before fit")
        X = np.stack([w.features for w in windows])
        prev, final, _ = nnet.forward_batch(self.params, X)
        return [TwoStepPrediction(prev=float(p), final=float(f))
                for p, f in zip(prev, final)]


DEFAULT_COHERENCE = 2.0  # tuned value reported for the prediction-coherent model


def make_lstm(**overrides) -> LstmPredictor:
    """Plain LSTM baseline: coherence factor pinned to 0."""
    overrides["coherence"] = 0.0
    return LstmPredictor(LstmModelConfig(**overrides), kind="lstm")


def make_pclstm(**overrides) -> LstmPredictor:
    """Prediction-coherent LSTM: same architecture, coherence default 2."""
    overrides.setdefault("coherence", DEFAULT_COHERENCE)
    return LstmPredictor(LstmModelConfig(**overrides), kind="pclstm")


def predict_trace(model: Predictor, windows: list[SampleWindow], scaler: Scaler,
                  config: WindowConfig) -> PredictionTrace:
    """Run a fitted model over ordered windows and de-standardize to mg/dL.

    Only the final output of two-output models enters the trace; the trace
    timestamp is the prediction's target time t + PH.
    """
    preds = model.predict(windows)
    horizon = timedelta(minutes=config.horizon_steps * STEP_MINUTES)
    timestamps = [w.timestamp + horizon for w in windows]
    y_true = invert_scaler(np.array([w.target_final for w in windows]), scaler)
    y_pred = invert_scaler(np.array([p.final for p in preds]), scaler)
    segment_ids = np.array([w.segment_id for w in windows], dtype=int)
    return PredictionTrace(timestamps, y_true, y_pred, segment_ids)


MODEL_TAGS = {"naive": 0, "elm": 1, "gp": 2, "svr": 3, "lstm": 4, "pclstm": 5}
_TAGS_REVERSED = {v: k for k, v in MODEL_TAGS.items()}


def _write_array(fh, a: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_array(fh, shape) -> np.ndarray:
    count = int(np.prod(shape))
    return np.frombuffer(fh.read(count * 8), dtype="<f8", count=count).reshape(shape).astype(float)


def save_model(model: Predictor, config: WindowConfig, path: str | Path) -> None:
    """Tagged binary: kind byte, int32 (H, PH), then the parameter block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Bii", MODEL_TAGS[model.kind],
                             config.history_steps, config.horizon_steps))
        if isinstance(model, ElmRegressor):
            d, nh = model.w_in.shape
            fh.write(struct.pack("<iid", d, nh, model.config.l2))
            _write_array(fh, model.w_in)
            _write_array(fh, model.b_in)
            _write_array(fh, model.beta)
        elif isinstance(model, GpRegressor):
            n, d = model.x_train.shape
            fh.write(struct.pack("<iidd", n, d, model.config.sigma0_sq, model.config.noise))
            _write_array(fh, model.x_train)
            _write_array(fh, model.alpha)
        elif isinstance(model, SvrRegressor):
            n, d = (model.x_train.shape if len(model.beta) else (0, 0))
            fh.write(struct.pack("<iidddd", n, d, model.config.gamma,
                                 model.config.epsilon, model.config.c, model.bias))
            if n:
                _write_array(fh, model.x_train)
                _write_array(fh, model.beta)
        elif isinstance(model, LstmPredictor):
            fh.write(struct.pack("<di", model.config.coherence, model.params.units))
            for a in (model.params.w_x, model.params.w_h, model.params.b, model.params.w_out):
                _write_array(fh, a)
            fh.write(struct.pack("<d", model.params.b_out))
        elif isinstance(model, NaivePredictor):
            pass
        else:
            raise ContractError(f"cannot serialize model kind {model.kind!r}")


def load_model(path: str | Path) -> tuple[Predictor, WindowConfig]:
    """Inverse of save_model; returns the fitted predictor and window config."""
    with open(path, "rb") as fh:
        tag, H, PH = struct.unpack("<Bii", fh.read(9))
        kind = _TAGS_REVERSED.get(tag)
        config = WindowConfig(history_steps=H, horizon_steps=PH)
        if kind == "naive":
            return NaivePredictor(), config
        if kind == "elm":
            d, nh, l2 = struct.unpack("<iid", fh.read(16))
            model = ElmRegressor(ElmConfig(hidden_neurons=nh, l2=l2))
            model.w_in = _read_array(fh, (d, nh))
            model.b_in = _read_array(fh, (nh,))
            model.beta = _read_array(fh, (nh,))
            return model, config
        if kind == "gp":
            n, d, s0, noise = struct.unpack("<iidd", fh.read(24))
            model = GpRegressor(GpConfig(sigma0_sq=s0, noise=noise))
            model.x_train = _read_array(fh, (n, d))
            model.alpha = _read_array(fh, (n,))
            return model, config
        if kind == "svr":
            n, d, gamma, eps, c, bias = struct.unpack("<iidddd", fh.read(40))
            model = SvrRegressor(SvrConfig(gamma=gamma, epsilon=eps, c=c))
            model.bias = bias
            if n:
                model.x_train = _read_array(fh, (n, d))
                model.beta = _read_array(fh, (n,))
            else:
                model.x_train = np.zeros((0, 1))
                model.beta = np.zeros(0)
            model.alpha = np.zeros(0)
            model.alpha_star = np.zeros(0)
            return model, config
        if kind in ("lstm", "pclstm"):
            coherence, units = struct.unpack("<di", fh.read(12))
            model = LstmPredictor(LstmModelConfig(units=units, coherence=coherence), kind=kind)
            w_x = _read_array(fh, (4 * units, nnet.N_FEATURES))
            w_h = _read_array(fh, (4 * units, units))
            b = _read_array(fh, (4 * units,))
            w_out = _read_array(fh, (units,))
            (b_out,) = struct.unpack("<d", fh.read(8))
            model.params = LstmParams(w_x=w_x, w_h=w_h, b=b, w_out=w_out, b_out=b_out)
            return model, config
    raise ContractError(f"{path}: unknown model tag {tag}")
