"""From-scratch numerical core: logistic regression and a single-layer LSTM.

Forward passes, hand-derived backward passes (backpropagation through
time for the LSTM), weighted binary cross-entropy evaluated in log-space
from logits, an L1 penalty on kernel weights, and inverted dropout on the
final hidden state. Everything is 64-bit numpy; a non-finite value at any
point raises instead of propagating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: "Matrix" throughout this package is a row-major float64 numpy array.
Matrix = np.ndarray


class NumericalError(Exception):
    """Non-finite value produced where the contract requires finiteness."""


def _require_finite(name: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in {name}")


def sigmoid(z):
    """Numerically stable logistic function, elementwise.

    Both branches avoid computing exp of a large positive argument.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out) if out.ndim == 0 else out


def softplus(z):
    """log(1 + e^z) without overflow."""
    return np.logaddexp(0.0, z)


def weighted_bce(logits, labels, weights):
    """Per-sample weighted binary cross-entropy, from logits.

    Equals weight * [-y log p - (1-y) log(1-p)] with p = sigmoid(logit),
    but evaluated as y*softplus(-z) + (1-y)*softplus(z) so extreme logits
    lose no precision to cancellation.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return np.asarray(weights) * (
        labels * softplus(-logits) + (1.0 - labels) * softplus(logits)
    )


# -- logistic regression ------------------------------------------------------

@dataclass
class LrParams:
    """Dense sigmoid classifier: probability = sigmoid(w.x + b)."""

    w: Matrix  # (F,)
    b: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w, [self.b]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_features: int) -> "LrParams":
        return cls(w=vec[:n_features].copy(), b=float(vec[n_features]))

    def copy(self) -> "LrParams":
        return LrParams(w=self.w.copy(), b=self.b)


def init_lr_params(n_features: int) -> LrParams:
    # Zero start: the loss is convex, so no symmetry needs breaking.
    return LrParams(w=np.zeros(n_features), b=0.0)


def lr_logits(params: LrParams, X: Matrix) -> np.ndarray:
    X = np.atleast_2d(X)
    if X.shape[1] != params.w.shape[0]:
        raise ValueError(f"expected {params.w.shape[0]} features, got {X.shape[1]}")
    return X @ params.w + params.b


def lr_forward(params: LrParams, X: Matrix) -> np.ndarray:
    """Probabilities for a batch (n, F) -> (n,)."""
    return sigmoid(lr_logits(params, X))


def lr_l1_penalty(params: LrParams, lam: float) -> float:
    # Kernel only: the bias is never penalized.
    return lam * float(np.abs(params.w).sum())


def lr_loss_and_grads(
    params: LrParams,
    X: Matrix,
    y: np.ndarray,
    sample_weights: np.ndarray,
    lam: float = 0.0,
) -> tuple[float, LrParams]:
    """Mean weighted BCE + L1, with exact analytic gradients.

    The L1 subgradient uses sign(w) with sign(0) = 0.
    """
    X = np.atleast_2d(X)
    n = X.shape[0]
    z = lr_logits(params, X)
    p = sigmoid(z)
    loss = float(np.mean(weighted_bce(z, y, sample_weights))) + lr_l1_penalty(params, lam)
    dz = sample_weights * (p - y) / n
    grad_w = X.T @ dz + lam * np.sign(params.w)
    grad_b = float(dz.sum())
    _require_finite("lr gradients", grad_w, np.array([grad_b, loss]))
    return loss, LrParams(w=grad_w, b=grad_b)


def lr_input_gradients(params: LrParams, X: Matrix) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, d probability / d input) for a batch."""
    p = lr_forward(params, X)
    dX = (p * (1.0 - p))[:, None] * params.w[None, :]
    return p, dX


# -- LSTM ----------------------------------------------------------------------

#: Flattening order of LstmParams fields; fixed so vectors round-trip.
LSTM_FIELDS = (
    "W_i", "W_f", "W_o", "W_g",
    "U_i", "U_f", "U_o", "U_g",
    "b_i", "b_f", "b_o", "b_g",
    "dense_w", "dense_b",
)


@dataclass
class LstmParams:
    """Single-layer LSTM with a dense sigmoid head on the final hidden state.

    Gates i, f, o use the logistic function, candidate g uses tanh:
    c_t = f*c_{t-1} + i*g, h_t = o*tanh(c_t), with c_0 = h_0 = 0.
    """

    W_i: Matrix; W_f: Matrix; W_o: Matrix; W_g: Matrix  # input kernels (F, H)
    U_i: Matrix; U_f: Matrix; U_o: Matrix; U_g: Matrix  # recurrent kernels (H, H)
    b_i: Matrix; b_f: Matrix; b_o: Matrix; b_g: Matrix  # biases (H,)
    dense_w: Matrix  # (H,)
    dense_b: float

    @property
    def n_features(self) -> int:
        return self.W_i.shape[0]

    @property
    def hidden(self) -> int:
        return self.W_i.shape[1]

    def to_vector(self) -> np.ndarray:
        parts = []
        for name in LSTM_FIELDS:
            value = getattr(self, name)
            parts.append(np.atleast_1d(np.asarray(value, dtype=np.float64)).ravel())
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_features: int, hidden: int) -> "LstmParams":
        shapes = _lstm_shapes(n_features, hidden)
        values = {}
        cursor = 0
        for name in LSTM_FIELDS:
            shape = shapes[name]
            size = int(np.prod(shape)) if shape else 1
            chunk = vec[cursor : cursor + size]
            values[name] = float(chunk[0]) if not shape else chunk.reshape(shape).copy()
            cursor += size
        return cls(**values)

    def copy(self) -> "LstmParams":
        return LstmParams(
            **{
                name: (v.copy() if isinstance(v := getattr(self, name), np.ndarray) else v)
                for name in LSTM_FIELDS
            }
        )


def _lstm_shapes(n_features: int, hidden: int) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for gate in "ifog":
        shapes[f"W_{gate}"] = (n_features, hidden)
        shapes[f"U_{gate}"] = (hidden, hidden)
        shapes[f"b_{gate}"] = (hidden,)
    shapes["dense_w"] = (hidden,)
    shapes["dense_b"] = ()
    return shapes


def init_lstm_params(n_features: int, hidden: int, rng: np.random.Generator) -> LstmParams:
    """Uniform(-s, s) with s = 1/sqrt(H); forget-gate bias fixed at 1.

    Parameters are drawn in LSTM_FIELDS order (the forget bias consumes
    no draws), so a given seed always produces the same initialization.
    """
    s = 1.0 / np.sqrt(hidden)
    shapes = _lstm_shapes(n_features, hidden)
    values = {}
    for name in LSTM_FIELDS:
        if name == "b_f":
            values[name] = np.ones(hidden)
        elif name == "dense_b":
            values[name] = float(rng.uniform(-s, s))
        else:
            values[name] = rng.uniform(-s, s, size=shapes[name])
    return LstmParams(**values)


def zero_lstm_grads(params: LstmParams) -> LstmParams:
    return LstmParams(
        **{
            name: (np.zeros_like(v) if isinstance(v := getattr(params, name), np.ndarray) else 0.0)
            for name in LSTM_FIELDS
        }
    )


@dataclass
class LstmTape:
    """Per-timestep activations cached by the forward pass for backward."""

    X: Matrix  # (n, T, F)
    i: Matrix; f: Matrix; o: Matrix; g: Matrix  # (T, n, H)
    c: Matrix; tanh_c: Matrix; h: Matrix  # (T, n, H)
    mask: Matrix  # (n, H) inverted-dropout mask (ones when disabled)
    h_drop: Matrix  # (n, H)
    logits: np.ndarray  # (n,)
    p: np.ndarray  # (n,)


def lstm_forward(
    params: LstmParams,
    X: Matrix,
    dropout_rate: float = 0.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, LstmTape]:
    """Run the recurrence over a batch (n, T, F) -> probabilities (n,).

    Inverted dropout is applied to the final hidden state only, and only
    in train_mode: kept units are scaled by 1/(1-rate) so the expected
    pre-dense activation matches the evaluation-mode forward.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None, :, :]
    n, T, F = X.shape
    if F != params.n_features:
        raise ValueError(f"expected {params.n_features} features, got {F}")
    H = params.hidden
    i_s = np.zeros((T, n, H)); f_s = np.zeros((T, n, H))
    o_s = np.zeros((T, n, H)); g_s = np.zeros((T, n, H))
    c_s = np.zeros((T, n, H)); tc_s = np.zeros((T, n, H)); h_s = np.zeros((T, n, H))
    h = np.zeros((n, H))
    c = np.zeros((n, H))
    for t in range(T):
        x = X[:, t, :]
        i = sigmoid(x @ params.W_i + h @ params.U_i + params.b_i)
        f = sigmoid(x @ params.W_f + h @ params.U_f + params.b_f)
        o = sigmoid(x @ params.W_o + h @ params.U_o + params.b_o)
        g = np.tanh(x @ params.W_g + h @ params.U_g + params.b_g)
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        _require_finite(f"lstm activations at step {t}", c, h)
        i_s[t], f_s[t], o_s[t], g_s[t] = i, f, o, g
        c_s[t], tc_s[t], h_s[t] = c, tc, h
    if train_mode and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("dropout in train_mode requires an rng")
        mask = (rng.random((n, H)) >= dropout_rate) / (1.0 - dropout_rate)
    else:
        mask = np.ones((n, H))
    h_drop = h * mask
    logits = h_drop @ params.dense_w + params.dense_b
    p = sigmoid(logits)
    _require_finite("lstm output", logits)
    return p, LstmTape(
        X=X, i=i_s, f=f_s, o=o_s, g=g_s, c=c_s, tanh_c=tc_s, h=h_s,
        mask=mask, h_drop=h_drop, logits=logits, p=p,
    )


def lstm_backward(
    params: LstmParams, tape: LstmTape, dlogits: np.ndarray
) -> tuple[LstmParams, np.ndarray]:
    """Backpropagation through time from d loss / d logit.

    Returns parameter gradients (same shapes as params) and the gradient
    with respect to the inputs, shape (n, T, F).

    Derivation sketch, per timestep t (elementwise products):
      dh_t collects the head path (t = T only) and the recurrent path;
      dc_t = dc_{t+1}*f_{t+1} + dh_t*o_t*(1 - tanh(c_t)^2)
      d(gate pre-activations): dzi = dc*g*i*(1-i), dzf = dc*c_{t-1}*f*(1-f),
        dzo = dh*tanh(c_t)*o*(1-o), dzg = dc*i*(1-g^2)
      dW_a += x_t^T dza, dU_a += h_{t-1}^T dza, db_a += sum(dza),
      dh_{t-1} = sum_a dza U_a^T, dx_t = sum_a dza W_a^T.
    """
    X = tape.X
    n, T, F = X.shape
    H = params.hidden
    grads = zero_lstm_grads(params)
    dX = np.zeros_like(X)
    dlogits = np.asarray(dlogits, dtype=np.float64)

    grads.dense_w = tape.h_drop.T @ dlogits
    grads.dense_b = float(dlogits.sum())
    dh = (dlogits[:, None] * params.dense_w[None, :]) * tape.mask
    dc_next = np.zeros((n, H))
    for t in reversed(range(T)):
        i, f, o, g = tape.i[t], tape.f[t], tape.o[t], tape.g[t]
        tc = tape.tanh_c[t]
        c_prev = tape.c[t - 1] if t > 0 else np.zeros((n, H))
        h_prev = tape.h[t - 1] if t > 0 else np.zeros((n, H))
        dc = dc_next + dh * o * (1.0 - tc * tc)
        do = dh * tc
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dzi = di * i * (1.0 - i)
        dzf = df * f * (1.0 - f)
        dzo = do * o * (1.0 - o)
        dzg = dg * (1.0 - g * g)
        x = X[:, t, :]
        grads.W_i += x.T @ dzi; grads.U_i += h_prev.T @ dzi; grads.b_i += dzi.sum(axis=0)
        grads.W_f += x.T @ dzf; grads.U_f += h_prev.T @ dzf; grads.b_f += dzf.sum(axis=0)
        grads.W_o += x.T @ dzo; grads.U_o += h_prev.T @ dzo; grads.b_o += dzo.sum(axis=0)
        grads.W_g += x.T @ dzg; grads.U_g += h_prev.T @ dzg; grads.b_g += dzg.sum(axis=0)
        dX[:, t, :] = dzi @ params.W_i.T + dzf @ params.W_f.T + dzo @ params.W_o.T + dzg @ params.W_g.T
        dh = dzi @ params.U_i.T + dzf @ params.U_f.T + dzo @ params.U_o.T + dzg @ params.U_g.T
        dc_next = dc * f
    return grads, dX


def lstm_l1_penalty(params: LstmParams, lam: float) -> float:
    # Input kernels W_* only; recurrent kernels and biases are exempt.
    return lam * float(
        np.abs(params.W_i).sum()
        + np.abs(params.W_f).sum()
        + np.abs(params.W_o).sum()
        + np.abs(params.W_g).sum()
    )


def lstm_loss_and_grads(
    params: LstmParams,
    X: Matrix,
    y: np.ndarray,
    sample_weights: np.ndarray,
    lam: float = 0.0,
    dropout_rate: float = 0.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, LstmParams]:
    """Mean weighted BCE + L1 over a batch, with exact BPTT gradients."""
    p, tape = lstm_forward(params, X, dropout_rate, train_mode, rng)
    n = tape.X.shape[0]
    loss = float(np.mean(weighted_bce(tape.logits, y, sample_weights)))
    loss += lstm_l1_penalty(params, lam)
    dlogits = np.asarray(sample_weights) * (p - np.asarray(y, dtype=np.float64)) / n
    grads, _ = lstm_backward(params, tape, dlogits)
    if lam > 0.0:
        grads.W_i += lam * np.sign(params.W_i)
        grads.W_f += lam * np.sign(params.W_f)
        grads.W_o += lam * np.sign(params.W_o)
        grads.W_g += lam * np.sign(params.W_g)
    _require_finite("lstm loss", np.array([loss]))
    return loss, grads


def lstm_predict_proba(params: LstmParams, X: Matrix) -> np.ndarray:
    """Evaluation-mode probabilities (dropout disabled)."""
    p, _ = lstm_forward(params, X, dropout_rate=0.0, train_mode=False)
    return p


def lstm_input_gradients(params: LstmParams, X: Matrix) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, d probability / d input), dropout disabled.

    The upstream seed is dp/dlogit = p(1-p), so the returned gradients
    are of the output probability itself, as attribution requires.
    """
    p, tape = lstm_forward(params, X, dropout_rate=0.0, train_mode=False)
    _, dX = lstm_backward(params, tape, p * (1.0 - p))
    return p, dX
