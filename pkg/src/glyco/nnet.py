"""Numeric core: two-output LSTM forward/backward, losses, Adam, training loop.

The network is a single LSTM layer unrolled over the H history steps with a
shared affine head read out at the last two steps, so the predicted
step-to-step variation is available (and differentiable) during training.
The training objective is

    cMSE = mean[ (y_final - p_final)^2 + c * (dy - dp)^2 ] + l2 * sum(weights^2)

with dy = y_final - y_prev, dp = p_final - p_prev, and c the coherence
weight.  c = 0 reduces the objective to the plain MSE of the final output,
with the identical floating-point operation ordering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericError, TrainingError

MAGIC = b"PCL1"
N_FEATURES = 3
GRAD_CLIP_NORM = 5.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sigmoid(z: np.ndarray) -> np.ndarray:
    # evaluated in two branches to avoid exp overflow warnings on large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmParams:
    """Gate order is i|f|g|o stacked along the first axis (4*units rows)."""

    w_x: np.ndarray    # (4u, 3) input weights
    w_h: np.ndarray    # (4u, u) recurrent weights
    b: np.ndarray      # (4u,) gate biases
    w_out: np.ndarray  # (u,) shared output head
    b_out: float       # output head bias

    @property
    def units(self) -> int:
        return self.w_h.shape[1]

    @classmethod
    def init(cls, units: int, seed: int = 0,
             rng: np.random.Generator | None = None) -> "LstmParams":
        """Seeded init: uniform +-1/sqrt(units) weights, forget bias +1."""
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(seed))
        bound = 1.0 / np.sqrt(units)
        b = np.zeros(4 * units)
        b[units:2 * units] = 1.0  # forget gate bias stabilizes small-data training
        return cls(
            w_x=rng.uniform(-bound, bound, (4 * units, N_FEATURES)),
            w_h=rng.uniform(-bound, bound, (4 * units, units)),
            b=b,
            w_out=rng.uniform(-bound, bound, units),
            b_out=0.0,
        )

    @classmethod
    def zeros(cls, units: int) -> "LstmParams":
        return cls(
            w_x=np.zeros((4 * units, N_FEATURES)),
            w_h=np.zeros((4 * units, units)),
            b=np.zeros(4 * units),
            w_out=np.zeros(units),
            b_out=0.0,
        )

    def arrays(self) -> list[np.ndarray]:
        return [self.w_x, self.w_h, self.b, self.w_out]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()] + [[self.b_out]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, units: int) -> "LstmParams":
        sizes = [4 * units * N_FEATURES, 4 * units * units, 4 * units, units, 1]
        if len(vec) != sum(sizes):
            raise ContractError("vector length does not match parameter shapes")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return cls(
            w_x=parts[0].reshape(4 * units, N_FEATURES).copy(),
            w_h=parts[1].reshape(4 * units, units).copy(),
            b=parts[2].copy(),
            w_out=parts[3].copy(),
            b_out=float(parts[4][0]),
        )

    def copy(self) -> "LstmParams":
        return LstmParams(self.w_x.copy(), self.w_h.copy(), self.b.copy(),
                          self.w_out.copy(), self.b_out)


@dataclass(frozen=True)
class TwoStepPrediction:
    """Model outputs at the last two unrolled steps (t+PH-1 and t+PH)."""

    prev: float
    final: float

    @property
    def variation(self) -> float:
        return self.final - self.prev


def forward_batch(params: LstmParams, X: np.ndarray):
    """Run the LSTM over a batch.

    X has shape (B, H, 3).  Returns (prev, final) arrays of shape (B,) and
    the per-step activation cache needed for backpropagation.
    """
    if X.ndim != 3 or X.shape[2] != N_FEATURES:
        raise ContractError(f"X must be (batch, H, {N_FEATURES})")
    B, H, _ = X.shape
    if H < 2:
        raise ContractError("history must have at least 2 steps")
    u = params.units

    h = np.zeros((B, u))
    c = np.zeros((B, u))
    steps = []
    hidden = np.empty((H, B, u))
    for t in range(H):
        x_t = X[:, t, :]
        z = x_t @ params.w_x.T + h @ params.w_h.T + params.b
        i = sigmoid(z[:, :u])
        f = sigmoid(z[:, u:2 * u])
        g = np.tanh(z[:, 2 * u:3 * u])
        o = sigmoid(z[:, 3 * u:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h_prev = h
        h = o * tc
        hidden[t] = h
        steps.append((x_t, h_prev, c_prev, i, f, g, o, tc))

    prev = hidden[H - 2] @ params.w_out + params.b_out
    final = hidden[H - 1] @ params.w_out + params.b_out
    if not (np.all(np.isfinite(prev)) and np.all(np.isfinite(final))):
        raise NumericError("non-finite activation in LSTM forward pass")
    cache = {"steps": steps, "hidden": hidden, "X_shape": X.shape}
    return prev, final, cache


def lstm_forward(params: LstmParams, X: np.ndarray) -> tuple[TwoStepPrediction, dict]:
    """Single-window forward pass; X has shape (H, 3)."""
    prev, final, cache = forward_batch(params, X[None, :, :])
    return TwoStepPrediction(prev=float(prev[0]), final=float(final[0])), cache


def _as_pair_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray([(p.prev, p.final) if isinstance(p, TwoStepPrediction) else tuple(p)
                      for p in pairs], dtype=float)
    return arr[:, 0], arr[:, 1]


def loss_mse(preds, targets) -> float:
    """Mean squared error over two equal-length sequences."""
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.shape != targets.shape or preds.size == 0:
        raise ContractError("predictions and targets must have equal non-zero length")
    return float(np.mean((preds - targets) ** 2))


def loss_cmse(preds, targets, coherence: float) -> float:
    """Coherence-penalized MSE over (prev, final) pairs.

    The accuracy term penalizes the final step only; the previous step
    exists to form the predicted variation.  With coherence = 0 this is
    numerically identical to loss_mse on the final components.
    """
    if coherence < 0:
        raise ContractError("coherence factor must be >= 0")
    pred_prev, pred_final = _as_pair_arrays(preds)
    tgt_prev, tgt_final = _as_pair_arrays(targets)
    if pred_prev.shape != tgt_prev.shape or pred_prev.size == 0:
        raise ContractError("predictions and targets must have equal non-zero length")
    err = (pred_final - tgt_final) ** 2
    var_err = ((tgt_final - tgt_prev) - (pred_final - pred_prev)) ** 2
    return float(np.mean(err + coherence * var_err))


def _objective_terms(pred_prev, pred_final, tgt_prev, tgt_final, coherence,
                     accuracy_on_both_steps=False):
    err = (pred_final - tgt_final) ** 2
    var_err = ((tgt_final - tgt_prev) - (pred_final - pred_prev)) ** 2
    terms = err + coherence * var_err
    if accuracy_on_both_steps:
        terms = terms + (pred_prev - tgt_prev) ** 2
    return float(np.mean(terms))


def l2_term(params: LstmParams, l2_penalty: float) -> float:
    """l2_penalty * sum of squared weights, biases excluded."""
    if l2_penalty == 0.0:
        return 0.0
    total = float(params.w_x.ravel() @ params.w_x.ravel()
                  + params.w_h.ravel() @ params.w_h.ravel()
                  + params.w_out @ params.w_out)
    return l2_penalty * total


def lstm_backward(params: LstmParams, X: np.ndarray, target_prev: np.ndarray,
                  target_final: np.ndarray, coherence: float,
                  l2_penalty: float = 0.0,
                  accuracy_on_both_steps: bool = False) -> tuple[float, LstmParams]:
    """Exact gradient of the cMSE (+L2) objective via BPTT.

    Returns (objective value, gradients in LstmParams layout).
    """
    target_prev = np.asarray(target_prev, dtype=float)
    target_final = np.asarray(target_final, dtype=float)
    pred_prev, pred_final, cache = forward_batch(params, X)
    B = X.shape[0]
    u = params.units
    H = X.shape[1]

    objective = _objective_terms(pred_prev, pred_final, target_prev, target_final,
                                 coherence, accuracy_on_both_steps)
    objective += l2_term(params, l2_penalty)

    var_err = (pred_final - pred_prev) - (target_final - target_prev)
    d_final = 2.0 * (pred_final - target_final) / B + 2.0 * coherence * var_err / B
    d_prev = -2.0 * coherence * var_err / B
    if accuracy_on_both_steps:
        d_prev = d_prev + 2.0 * (pred_prev - target_prev) / B

    hidden = cache["hidden"]
    steps = cache["steps"]

    g_w_x = np.zeros_like(params.w_x)
    g_w_h = np.zeros_like(params.w_h)
    g_b = np.zeros_like(params.b)
    g_w_out = hidden[H - 1].T @ d_final + hidden[H - 2].T @ d_prev
    g_b_out = float(np.sum(d_final) + np.sum(d_prev))

    dh_next = np.outer(d_final, params.w_out)
    dh_extra = np.outer(d_prev, params.w_out)  # injected at step H-2
    dc_next = np.zeros((B, u))

    for t in range(H - 1, -1, -1):
        x_t, h_prev, c_prev, i, f, g, o, tc = steps[t]
        dh = dh_next
        if t == H - 2:
            dh = dh + dh_extra
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f

        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)

        g_w_x += dz.T @ x_t
        g_w_h += dz.T @ h_prev
        g_b += dz.sum(axis=0)
        dh_next = dz @ params.w_h

    if l2_penalty != 0.0:
        g_w_x += 2.0 * l2_penalty * params.w_x
        g_w_h += 2.0 * l2_penalty * params.w_h
        g_w_out += 2.0 * l2_penalty * params.w_out

    grads = LstmParams(w_x=g_w_x, w_h=g_w_h, b=g_b, w_out=g_w_out, b_out=g_b_out)
    return objective, grads


def clip_gradients(grads: LstmParams, max_norm: float = GRAD_CLIP_NORM) -> LstmParams:
    """Scale the whole gradient so its global L2 norm is at most max_norm."""
    vec = grads.to_vector()
    norm = float(np.sqrt(vec @ vec))
    if norm > max_norm:
        scale = max_norm / norm
        return LstmParams.from_vector(vec * scale, grads.units)
    return grads


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_size(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, params_vec: np.ndarray, grad_vec: np.ndarray,
              lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates state, returns new parameters."""
    if params_vec.shape != grad_vec.shape or params_vec.shape != state.m.shape:
        raise ContractError("parameter/gradient/state shapes disagree")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad_vec
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad_vec * grad_vec
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params_vec - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 10
    l2_penalty: float = 1e-4
    coherence: float = 0.0
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0
    accuracy_on_both_steps: bool = False  # non-default two-term accuracy variant

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.coherence < 0:
            raise ValueError("coherence factor must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float


def windows_to_arrays(windows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack SampleWindows into (X, target_prev, target_final) arrays."""
    X = np.stack([w.features for w in windows])
    yp = np.array([w.target_prev for w in windows])
    yf = np.array([w.target_final for w in windows])
    return X, yp, yf


def valid_loss(params: LstmParams, X: np.ndarray, yp: np.ndarray, yf: np.ndarray,
               coherence: float, accuracy_on_both_steps: bool = False) -> float:
    pred_prev, pred_final, _ = forward_batch(params, X)
    return _objective_terms(pred_prev, pred_final, yp, yf, coherence,
                            accuracy_on_both_steps)


def train(params: LstmParams, train_windows, valid_windows,
          config: TrainConfig) -> tuple[LstmParams, list[EpochRecord]]:
    """Mini-batch Adam with early stopping on the validation cMSE.

    Stops when validation loss has not improved for `patience` epochs (or at
    max_epochs) and returns the parameters of the best validation epoch.
    Fully deterministic for a given seed: seeded shuffles, fixed batch order.
    The monitored validation loss is the data term only; the L2 penalty is
    part of the optimized objective, not of the early-stopping signal.
    """
    if not train_windows or not valid_windows:
        raise ContractError("train and validation window sets must be non-empty")
    Xt, yp_t, yf_t = windows_to_arrays(train_windows)
    Xv, yp_v, yf_v = windows_to_arrays(valid_windows)
    n = len(train_windows)
    rng = np.random.Generator(np.random.PCG64(config.seed))

    vec = params.to_vector()
    units = params.units
    adam = AdamState.for_size(len(vec))

    best_vec = vec.copy()
    best_loss = np.inf
    best_epoch = -1
    since_best = 0
    log: list[EpochRecord] = []

    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            current = LstmParams.from_vector(vec, units)
            objective, grads = lstm_backward(
                current, Xt[idx], yp_t[idx], yf_t[idx],
                coherence=config.coherence, l2_penalty=config.l2_penalty,
                accuracy_on_both_steps=config.accuracy_on_both_steps)
            if not np.isfinite(objective):
                raise TrainingError("training loss diverged", epoch=epoch)
            grads = clip_gradients(grads)
            vec = adam_step(adam, vec, grads.to_vector(), config.learning_rate)
            batch_losses.append(objective)

        current = LstmParams.from_vector(vec, units)
        v_loss = valid_loss(current, Xv, yp_v, yf_v, config.coherence,
                            config.accuracy_on_both_steps)
        if not np.isfinite(v_loss):
            raise TrainingError("validation loss diverged", epoch=epoch)
        log.append(EpochRecord(epoch=epoch, train_loss=float(np.mean(batch_losses)),
                               valid_loss=v_loss))

        if v_loss < best_loss:
            best_loss = v_loss
            best_vec = vec.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break

    return LstmParams.from_vector(best_vec, units), log


def save_params(params: LstmParams, history_steps: int, path) -> None:
    """Flat binary: magic PCL1, little-endian int32 (units, H), float64 blocks.

    Block order: w_x row-major, w_h row-major, b, w_out, b_out.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<ii", params.units, history_steps))
        for a in (params.w_x, params.w_h, params.b, params.w_out):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", params.b_out))


def load_params(path) -> tuple[LstmParams, int]:
    """Read a PCL1 parameter file; returns (params, history_steps)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ContractError(f"{path}: not a PCL1 parameter file")
        units, history = struct.unpack("<ii", fh.read(8))
        u = units

        def block(shape):
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            return data.reshape(shape).astype(float)

        w_x = block((4 * u, N_FEATURES))
        w_h = block((4 * u, u))
        b = block((4 * u,))
        w_out = block((u,))
        (b_out,) = struct.unpack("<d", fh.read(8))
    return LstmParams(w_x=w_x, w_h=w_h, b=b, w_out=w_out, b_out=b_out), history
