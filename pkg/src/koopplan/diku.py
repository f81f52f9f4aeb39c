"""Invertible Koopman surrogate with control: lifting, coupling dynamics,
exact backward evolution, rollouts, and the weighted multi-step training loss.

The lifted state is z = P [x; e(x)] where e is an MLP encoder and P a fixed
seeded permutation that interleaves raw-state and embedded coordinates
across the two coupling halves.  One additive coupling step is

    z1' = z1 + A2(z2) + B1 u
    z2' = z2 + A1(z1') + B2 u

whose inverse is obtained by subtracting the same networks, so backward
evolution is exact for any weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .nets import AdamState, Mlp, adam_step, init_params, mlp_backward, mlp_forward

__all__ = [
    "DikuModel", "TrainConfig", "TrainResult", "TrainingDiverged",
    "create_model", "lift", "recover", "forward_step", "backward_step",
    "rollout_forward", "rollout_backward", "k_step_loss", "train",
    "save_model", "load_model", "DEFAULT_EMBED_DIM",
]

DEFAULT_EMBED_DIM = {
    "double_integrator": 2,
    "poly3d": 5,
    "cartpole": 12,
    "damping_pendulum": 2,
    "undamped_pendulum": 6,
    "acrobot": 12,
    "planar_quadrotor": 14,
}

_MAGIC = b"DIKU1\n"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DikuModel:
    n: int
    m: int
    d: int
    encoder: Mlp
    a1: Mlp
    a2: Mlp
    control_w: np.ndarray      # (c_x, m)
    perm: np.ndarray           # z = z_raw[perm]
    meta: dict = field(default_factory=dict)

    @property
    def c_x(self):
        return self.n + self.d

    @property
    def half(self):
        return self.c_x // 2

    @property
    def inv_perm(self):
        return np.argsort(self.perm)

    def params(self):
        return self.encoder.params() + self.a1.params() + self.a2.params() + [self.control_w]

    def set_params(self, params):
        ne = len(self.encoder.params())
        na = len(self.a1.params())
        self.encoder.set_params(params[:ne])
        self.a1.set_params(params[ne:ne + na])
        self.a2.set_params(params[ne + na:ne + 2 * na])
        self.control_w = params[-1]

    def copy(self):
        return DikuModel(self.n, self.m, self.d, self.encoder.copy(),
                         self.a1.copy(), self.a2.copy(), self.control_w.copy(),
                         self.perm.copy(), dict(self.meta))


@dataclass
class TrainConfig:
    k_steps: int = 15
    gamma: float = 0.9
    lr: float = 1e-3
    batch: int = 1024
    epochs: int = 200
    seed: int = 0
    patience: int = 20
    window_stride: int = 0  # 0 = non-overlapping (stride of k_steps)

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be in (0, 1)")
        if self.k_steps < 1:
            raise ValueError("k_steps must be >= 1")
        if self.window_stride < 0:
            raise ValueError("window_stride must be >= 0")


@dataclass
class TrainResult:
    model: DikuModel
    train_curve: list
    val_curve: list
    best_epoch: int


def _make_perm(n, d, rng):
    """Seeded permutation keeping raw and embedded coords mixed per half."""
    c = n + d
    h = c // 2
    for _ in range(1000):
        p = rng.permutation(c)
        if n < 2 or d < 2:
            return p
        left, right = p[:h], p[h:]
        if (np.any(left < n) and np.any(left >= n)
                and np.any(right < n) and np.any(right >= n)):
            return p
    return p


def create_model(n, m, d, hidden_coupling=(128, 64, 32), hidden_encoder=(64, 64),
                 activation="relu", seed=0, system=None):
    """Build a fresh model; d defaults per system when omitted (d=None)."""
    if d is None:
        if system is None or system not in DEFAULT_EMBED_DIM:
            raise ValueError("embedding dim d required for unknown system")
        d = DEFAULT_EMBED_DIM[system]
    if d < 1:
        raise ValueError("embedding dim d must be >= 1 (c_x must exceed n)")
    c = n + d
    if c % 2 != 0:
        raise ValueError(f"c_x = n + d = {c} must be even")
    h = c // 2
    rng = np.random.default_rng(seed)
    encoder = init_params([n, *hidden_encoder, d], activation, rng)
    a1 = init_params([h, *hidden_coupling, h], activation, rng)
    a2 = init_params([h, *hidden_coupling, h], activation, rng)
    # Zero the coupling output layers: the initial lifted dynamics are the
    # identity, which keeps long rollouts finite from the first update.
    for net in (a1, a2):
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
    control_w = rng.normal(0.0, 0.01, size=(c, m))
    perm = _make_perm(n, d, rng)
    meta = {"seed": seed, "system": system, "activation": activation,
            "hidden_coupling": list(hidden_coupling),
            "hidden_encoder": list(hidden_encoder)}
    return DikuModel(n, m, d, encoder, a1, a2, control_w, perm, meta)


def _as_batch(x, dim, name):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise ValueError(f"{name} has dim {x.shape[-1]}, expected {dim}")
    return x, squeeze


def lift(model, x):
    """z = P [x; e(x)]; returns shape (..., c_x)."""
    xb, squeeze = _as_batch(x, model.n, "state")
    e, _ = mlp_forward(model.encoder, xb)
    z = np.concatenate([xb, e], axis=-1)[:, model.perm]
    return z[0] if squeeze else z


def recover(model, z):
    """First n raw coordinates of the unpermuted lifted state."""
    zb, squeeze = _as_batch(z, model.c_x, "observable")
    x = zb[:, model.inv_perm[: model.n]]
    return x[0] if squeeze else x


def _control_field(model, u):
    return u @ model.control_w.T


def forward_step(model, z, u, with_tape=False):
    zb, squeeze = _as_batch(z, model.c_x, "observable")
    ub, _ = _as_batch(u, model.m, "control")
    h = model.half
    uh = _control_field(model, ub)
    z1, z2 = zb[:, :h], zb[:, h:]
    a2o, t2 = mlp_forward(model.a2, z2)
    z1n = z1 + a2o + uh[:, :h]
    a1o, t1 = mlp_forward(model.a1, z1n)
    z2n = z2 + a1o + uh[:, h:]
    out = np.concatenate([z1n, z2n], axis=-1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite lifted state in forward_step")
    out = out[0] if squeeze else out
    return (out, (t2, t1, ub)) if with_tape else out


def backward_step(model, z, u, with_tape=False):
    """Exact inverse of forward_step for the control of the same transition."""
    zb, squeeze = _as_batch(z, model.c_x, "observable")
    ub, _ = _as_batch(u, model.m, "control")
    h = model.half
    uh = _control_field(model, ub)
    z1, z2 = zb[:, :h], zb[:, h:]
    a1o, t1 = mlp_forward(model.a1, z1)
    z2p = z2 - a1o - uh[:, h:]
    a2o, t2 = mlp_forward(model.a2, z2p)
    z1p = z1 - a2o - uh[:, :h]
    out = np.concatenate([z1p, z2p], axis=-1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite lifted state in backward_step")
    out = out[0] if squeeze else out
    return (out, (t1, t2, ub)) if with_tape else out


def rollout_forward(model, x0, u_seq):
    """Lift once, step K times, recover each step; returns (..., K, n)."""
    xb, squeeze = _as_batch(x0, model.n, "state")
    U = np.asarray(u_seq, dtype=float)
    if squeeze and U.ndim == 2:
        U = U[None]
    K = U.shape[1]
    z = lift(model, xb)
    out = np.empty((xb.shape[0], K, model.n))
    for k in range(K):
        z = forward_step(model, z, U[:, k])
        out[:, k] = recover(model, z)
    return out[0] if squeeze else out


def rollout_backward(model, x_end, u_seq):
    """Backcast: lift the final state and invert steps in reverse control
    order; returns predictions in chronological order, index k = step k."""
    xb, squeeze = _as_batch(x_end, model.n, "state")
    U = np.asarray(u_seq, dtype=float)
    if squeeze and U.ndim == 2:
        U = U[None]
    K = U.shape[1]
    z = lift(model, xb)
    out = np.empty((xb.shape[0], K, model.n))
    for k in range(K - 1, -1, -1):
        z = backward_step(model, z, U[:, k])
        out[:, k] = recover(model, z)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Reverse-mode sweeps through rollouts.
# ---------------------------------------------------------------------------

def _zero_param_grads(model):
    return [np.zeros_like(p) for p in model.params()]


def _accumulate(dst, src):
    for a, b in zip(dst, src):
        a += b


def _forward_rollout_tape(model, z0, U):
    z = z0
    steps = []
    zs = [z0]
    for k in range(U.shape[1]):
        z, tape = forward_step(model, z, U[:, k], with_tape=True)
        steps.append(tape)
        zs.append(z)
    return zs, steps


def _backward_rollout_tape(model, zK, U):
    z = zK
    steps = []
    zs = {U.shape[1]: zK}
    for k in range(U.shape[1] - 1, -1, -1):
        z, tape = backward_step(model, z, U[:, k], with_tape=True)
        steps.append(tape)  # steps[j] used control index K-1-j
        zs[k] = z
    return zs, steps


def _reverse_forward_rollout(model, steps, g_z_list):
    """Backprop through a forward rollout.

    g_z_list[k] is the gradient arriving at z_{k+1} (k = 0..K-1).
    Returns (g_z0, grads_a1, grads_a2, g_cw, gU).
    """
    h = model.half
    K = len(steps)
    B = g_z_list[-1].shape[0]
    ga1 = [np.zeros_like(p) for p in model.a1.params()]
    ga2 = [np.zeros_like(p) for p in model.a2.params()]
    gcw = np.zeros_like(model.control_w)
    gU = np.zeros((B, K, model.m))
    g = np.zeros((B, model.c_x))
    for k in range(K - 1, -1, -1):
        g = g + g_z_list[k]
        g1o, g2o = g[:, :h], g[:, h:]
        t2, t1, u = steps[k]
        gin1, grads1 = mlp_backward(model.a1, t1, g2o)
        _accumulate(ga1, grads1)
        gz1n = g1o + gin1
        gin2, grads2 = mlp_backward(model.a2, t2, gz1n)
        _accumulate(ga2, grads2)
        guh = np.concatenate([gz1n, g2o], axis=-1)
        gcw += guh.T @ u
        gU[:, k] = guh @ model.control_w
        g = np.concatenate([gz1n, g2o + gin2], axis=-1)
    return g, ga1, ga2, gcw, gU


def _reverse_backward_rollout(model, steps, g_z_by_k):
    """Backprop through a backcast rollout.

    g_z_by_k[k] is the gradient arriving at the predicted z_k (k = K-1..0).
    Returns (g_zK, grads_a1, grads_a2, g_cw, gU).
    """
    h = model.half
    K = len(steps)
    B = next(iter(g_z_by_k.values())).shape[0]
    ga1 = [np.zeros_like(p) for p in model.a1.params()]
    ga2 = [np.zeros_like(p) for p in model.a2.params()]
    gcw = np.zeros_like(model.control_w)
    gU = np.zeros((B, K, model.m))
    g = np.zeros((B, model.c_x))
    # steps[j] computed z_{K-1-j} from z_{K-j}; walk forward in time (j desc).
    for j in range(K - 1, -1, -1):
        k = K - 1 - j
        g = g + g_z_by_k.get(k, 0.0)
        g1p, g2p = g[:, :h], g[:, h:]
        t1, t2, u = steps[j]
        gin2, grads2 = mlp_backward(model.a2, t2, -g1p)
        _accumulate(ga2, grads2)
        gz2p = g2p + gin2
        gin1, grads1 = mlp_backward(model.a1, t1, -gz2p)
        _accumulate(ga1, grads1)
        gz1 = g1p + gin1
        guh = np.concatenate([-g1p, -gz2p], axis=-1)
        gcw += guh.T @ u
        gU[:, k] = guh @ model.control_w
        g = np.concatenate([gz1, gz2p], axis=-1)
    return g, ga1, ga2, gcw, gU


def _state_grad_to_lifted(model, gx):
    """Map a gradient on recovered coordinates into lifted space."""
    gz = np.zeros((gx.shape[0], model.c_x))
    gz[:, model.inv_perm[: model.n]] = gx
    return gz


def _lift_with_tape(model, x):
    e, tape = mlp_forward(model.encoder, x)
    z = np.concatenate([x, e], axis=-1)[:, model.perm]
    return z, tape


def _lift_backward(model, tape, gz):
    """Split a lifted-space gradient into (gx, encoder param grads)."""
    graw = np.empty_like(gz)
    graw[:, model.perm] = gz
    gx_direct = graw[:, : model.n]
    gin, grads_enc = mlp_backward(model.encoder, tape, graw[:, model.n:])
    return gx_direct + gin, grads_enc


def forward_rollout_grads(model, x0, U, gX):
    """Gradients of sum_k <gX[:,k], x_hat_k> through a forward rollout.

    Returns (param_grads in model.params() layout, g_x0, g_U).
    """
    z0, enc_tape = _lift_with_tape(model, x0)
    _, steps = _forward_rollout_tape(model, z0, U)
    g_z_list = [_state_grad_to_lifted(model, gX[:, k]) for k in range(U.shape[1])]
    gz0, ga1, ga2, gcw, gU = _reverse_forward_rollout(model, steps, g_z_list)
    gx0, genc = _lift_backward(model, enc_tape, gz0)
    return genc + ga1 + ga2 + [gcw], gx0, gU


def backward_rollout_grads(model, x_end, U, gX):
    """Same as forward_rollout_grads for a backcast rollout; gX[:,k] weights
    the prediction of step k (k = 0..K-1)."""
    zK, enc_tape = _lift_with_tape(model, x_end)
    _, steps = _backward_rollout_tape(model, zK, U)
    g_z_by_k = {k: _state_grad_to_lifted(model, gX[:, k]) for k in range(U.shape[1])}
    gzK, ga1, ga2, gcw, gU = _reverse_backward_rollout(model, steps, g_z_by_k)
    gxK, genc = _lift_backward(model, enc_tape, gzK)
    return genc + ga1 + ga2 + [gcw], gxK, gU


def k_step_loss(model, X, U, gamma, with_grads=True):
    """Bidirectional multi-step loss over a batch of windows.

    X: (B, K+1, n) states; U: (B, K, m) controls.  Horizon-i errors carry
    weight gamma**(i-1) in both directions; the total is normalized by the
    weight sum.  Returns (loss, grads) or just the loss.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.ndim == 2:
        X, U = X[None], U[None]
    B, Kp1, n = X.shape
    K = Kp1 - 1
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must be in (0, 1)")
    weights = gamma ** np.arange(K)
    norm = weights.sum()

    Xf = rollout_forward(model, X[:, 0], U)
    Xb = rollout_backward(model, X[:, K], U)
    err_f = Xf - X[:, 1:]                       # horizon i = k+1
    err_b = Xb - X[:, :K]                       # horizon i = K-k
    wf = weights[np.arange(K)][None, :, None]
    wb = weights[(K - 1) - np.arange(K)][None, :, None]
    mse_f = (wf * err_f ** 2).sum() / (B * n)
    mse_b = (wb * err_b ** 2).sum() / (B * n)
    loss = (mse_f + mse_b) / norm
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite multi-step loss")
    if not with_grads:
        return loss
    scale = 2.0 / (B * n * norm)
    gXf = scale * wf * err_f
    gXb = scale * wb * err_b
    grads_f, _, _ = forward_rollout_grads(model, X[:, 0], U, gXf)
    grads_b, _, _ = backward_rollout_grads(model, X[:, K], U, gXb)
    _accumulate(grads_f, grads_b)
    return loss, grads_f


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def extract_windows(trajectories, k_steps, stride=0):
    """(K+1)-state windows from each trajectory; stride 0 means
    non-overlapping (a stride of k_steps), smaller strides overlap."""
    step = stride if stride else k_steps
    Xs, Us = [], []
    for t in trajectories:
        L = len(t)
        for s in range(0, L - k_steps, step):
            Xs.append(t.states[s: s + k_steps + 1])
            Us.append(t.controls[s: s + k_steps])
    if not Xs:
        raise ValueError("no windows: trajectories shorter than k_steps+1")
    return np.asarray(Xs), np.asarray(Us)


def train(model, dataset, config):
    """Minibatch Adam on the bidirectional k-step loss.

    Tracks per-epoch train/validation curves, returns the best-on-validation
    parameters, and stops early after `patience` epochs without improvement.
    """
    model = model.copy()
    Xtr, Utr = extract_windows(dataset["train"], config.k_steps,
                               config.window_stride)
    Xva, Uva = extract_windows(dataset["val"], config.k_steps,
                               config.window_stride)
    rng = np.random.default_rng(config.seed)
    params = model.params()
    opt = AdamState.for_params(params, lr=config.lr)
    best = ([p.copy() for p in params], np.inf, -1)
    train_curve, val_curve = [], []
    n_tr = Xtr.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n_tr)
        losses = []
        for s in range(0, n_tr, config.batch):
            idx = order[s: s + config.batch]
            loss, grads = k_step_loss(model, Xtr[idx], Utr[idx], config.gamma)
            params = adam_step(opt, params, grads)
            model.set_params(params)
            losses.append(loss)
        val_loss = _eval_loss(model, Xva, Uva, config)
        train_curve.append(float(np.mean(losses)))
        val_curve.append(val_loss)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(
                f"validation loss {val_loss} at epoch {epoch}; "
                f"last train losses {losses[-3:]}")
        if val_loss < best[1]:
            best = ([p.copy() for p in params], val_loss, epoch)
        elif epoch - best[2] >= config.patience:
            break
    model.set_params(best[0])
    model.meta["train"] = {"k_steps": config.k_steps, "gamma": config.gamma,
                           "lr": config.lr, "batch": config.batch,
                           "epochs_run": len(val_curve), "seed": config.seed,
                           "best_epoch": best[2], "best_val": best[1]}
    return TrainResult(model, train_curve, val_curve, best[2])


def _eval_loss(model, X, U, config, chunk=4096):
    total, count = 0.0, 0
    for s in range(0, X.shape[0], chunk):
        xb = X[s: s + chunk]
        total += k_step_loss(model, xb, U[s: s + chunk], config.gamma,
                             with_grads=False) * xb.shape[0]
        count += xb.shape[0]
    return float(total / count)


# ---------------------------------------------------------------------------
# Serialization: JSON header + raw float64 parameter blob in one file.
# ---------------------------------------------------------------------------

def save_model(model, path):
    header = {
        "n": model.n, "m": model.m, "d": model.d,
        "perm": model.perm.tolist(),
        "activation": model.encoder.activation,
        "encoder_dims": model.encoder.layer_dims,
        "coupling_dims": model.a1.layer_dims,
        "meta": model.meta,
    }
    blob = np.concatenate([p.ravel() for p in model.params()])
    hjson = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hjson)))
        fh.write(hjson)
        fh.write(blob.astype("<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a model file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        blob = np.frombuffer(fh.read(), dtype="<f8")
    act = header["activation"]
    enc = Mlp(header["encoder_dims"], act,
              *_alloc(header["encoder_dims"]))
    a1 = Mlp(header["coupling_dims"], act, *_alloc(header["coupling_dims"]))
    a2 = Mlp(header["coupling_dims"], act, *_alloc(header["coupling_dims"]))
    model = DikuModel(header["n"], header["m"], header["d"], enc, a1, a2,
                      np.zeros((header["n"] + header["d"], header["m"])),
                      np.asarray(header["perm"]), header.get("meta", {}))
    params = model.params()
    k = 0
    out = []
    for p in params:
        out.append(blob[k: k + p.size].reshape(p.shape).copy())
        k += p.size
    if k != blob.size:
        raise ValueError("parameter blob size mismatch")
    model.set_params(out)
    return model


def _alloc(dims):
    ws = [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(o) for o in dims[1:]]
    return ws, bs
