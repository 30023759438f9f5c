"""From-scratch LSTM time-slice classifier trained with focal loss, plus a
k-NN baseline and a random-search tuner.

The network is plain numpy: stacked (optionally bidirectional) LSTM layers,
the final hidden state through ReLU dense layers, a scalar sigmoid output.
Gradients come from full backpropagation through time; gradient_check
verifies them against central finite differences. Training is mini-batch
Adam with seeded shuffling and early stopping on validation loss.

Parameter layout per LSTM layer and direction: W [in, 4U], R [U, 4U], b [4U]
with gate order (input, forget, candidate, output).
"""

import json
import logging
import numpy as np
from dataclasses import dataclass, field, asdict

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
P_CLIP = 1e-7
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class ModelConfig:
    lstm_layers: int = 1
    units: int = 32
    bidirectional: bool = False
    dense_layers: int = 1
    dense_units: int = 16
    seq_len: int = 20
    input_channels: int = 5

    def validate(self):
        if min(self.lstm_layers, self.units, self.seq_len, self.input_channels) < 1:
            raise ValueError("layer/unit/sequence sizes must be >= 1")
        if self.dense_layers < 0 or (self.dense_layers > 0 and self.dense_units < 1):
            raise ValueError("invalid dense stack")

    @property
    def directions(self):
        return ("fwd", "bwd") if self.bidirectional else ("fwd",)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3
    patience: int = 10
    gamma: float = 2.0
    seed: int = 0
    threshold: float = 0.5
    hard_targets: bool = False   # ablation: threshold soft labels before training

    def validate(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training sizes")


def param_names(config: ModelConfig) -> list[str]:
    """Canonical parameter order used for serialization and flattening."""
    names = []
    for layer in range(config.lstm_layers):
        for d in config.directions:
            names += [f"lstm{layer}_{d}_W", f"lstm{layer}_{d}_R", f"lstm{layer}_{d}_b"]
    for k in range(config.dense_layers):
        names += [f"dense{k}_W", f"dense{k}_b"]
    names += ["out_W", "out_b"]
    return names


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases with the forget gate biased to 1."""
    config.validate()
    ndir = len(config.directions)
    params: dict[str, np.ndarray] = {}

    def glorot(fan_in, fan_out, shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    in_dim = config.input_channels
    u = config.units
    for layer in range(config.lstm_layers):
        for d in config.directions:
            params[f"lstm{layer}_{d}_W"] = glorot(in_dim, u, (in_dim, 4 * u))
            params[f"lstm{layer}_{d}_R"] = glorot(u, u, (u, 4 * u))
            b = np.zeros(4 * u)
            b[u:2 * u] = 1.0
            params[f"lstm{layer}_{d}_b"] = b
        in_dim = u * ndir
    for k in range(config.dense_layers):
        params[f"dense{k}_W"] = glorot(in_dim, config.dense_units,
                                       (in_dim, config.dense_units))
        params[f"dense{k}_b"] = np.zeros(config.dense_units)
        in_dim = config.dense_units
    params["out_W"] = glorot(in_dim, 1, (in_dim,))
    params["out_b"] = np.zeros(())
    return params


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _lstm_direction_forward(X, W, R, b, reverse, want_cache):
    """Run one direction over [B, T, D]; returns per-step hiddens, final state,
    and the step cache needed for BPTT."""
    B, T, _ = X.shape
    u = R.shape[0]
    h = np.zeros((B, u))
    c = np.zeros((B, u))
    h_seq = np.empty((B, T, u))
    cache = [] if want_cache else None
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = X[:, t, :] @ W + h @ R + b
        i = _sigmoid(z[:, :u])
        f = _sigmoid(z[:, u:2 * u])
        g = np.tanh(z[:, 2 * u:3 * u])
        o = _sigmoid(z[:, 3 * u:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        if want_cache:
            cache.append((t, h, c, i, f, g, o, tc))
        h, c = h_new, c_new
        h_seq[:, t, :] = h
    return h_seq, h, cache


def _lstm_direction_backward(X, W, R, cache, dh_seq, dh_final):
    """BPTT over one direction. dh_seq [B, T, U] carries gradient from the
    layer above (None for the top layer); dh_final hits the last processed step."""
    B, T, _ = X.shape
    u = R.shape[0]
    dW, dR, db = np.zeros_like(W), np.zeros_like(R), np.zeros(4 * u)
    dX = np.empty_like(X)
    dh = dh_final if dh_final is not None else np.zeros((B, u))
    dc = np.zeros((B, u))
    for t, h_prev, c_prev, i, f, g, o, tc in reversed(cache):
        dh_t = dh if dh_seq is None else dh + dh_seq[:, t, :]
        do = dh_t * tc
        dc_t = dc + dh_t * o * (1.0 - tc * tc)
        di = dc_t * g
        df = dc_t * c_prev
        dg = dc_t * i
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                             dg * (1 - g * g), do * o * (1 - o)], axis=1)
        dW += X[:, t, :].T @ dz
        dR += h_prev.T @ dz
        db += dz.sum(axis=0)
        dX[:, t, :] = dz @ W.T
        dh = dz @ R.T
        dc = dc_t * f
    return dX, dW, dR, db


def _forward(params, config: ModelConfig, X, want_cache=False):
    """Full forward pass. Returns (p, ctx); ctx holds activations for backward."""
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None, :, :]
    if X.shape[1] != config.seq_len or X.shape[2] != config.input_channels:
        raise ValueError(
            f"input shape {X.shape[1:]} does not match config "
            f"({config.seq_len}, {config.input_channels})")
    layer_in = X
    lstm_ctx = []
    finals = []
    for layer in range(config.lstm_layers):
        outs, layer_finals, dir_ctx = [], [], []
        for d in config.directions:
            W = params[f"lstm{layer}_{d}_W"]
            R = params[f"lstm{layer}_{d}_R"]
            b = params[f"lstm{layer}_{d}_b"]
            h_seq, h_fin, cache = _lstm_direction_forward(
                layer_in, W, R, b, reverse=(d == "bwd"), want_cache=want_cache)
            outs.append(h_seq)
            layer_finals.append(h_fin)
            dir_ctx.append((layer_in, cache))
        lstm_ctx.append(dir_ctx)
        finals = layer_finals
        layer_in = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=2)
    a = finals[0] if len(finals) == 1 else np.concatenate(finals, axis=1)
    dense_ctx = []
    for k in range(config.dense_layers):
        z = a @ params[f"dense{k}_W"] + params[f"dense{k}_b"]
        a_new = np.maximum(z, 0.0)
        dense_ctx.append((a, z))
        a = a_new
    logit = a @ params["out_W"] + params["out_b"]
    p = _sigmoid(logit)
    ctx = {"X": X, "lstm": lstm_ctx, "dense": dense_ctx, "head": a, "p": p}
    return (p[0] if squeeze else p), (ctx if want_cache else None)


def _backward(params, config: ModelConfig, ctx, dlogit):
    """Gradients of a scalar loss given d(loss)/d(logit) per sample."""
    grads = {}
    a = ctx["head"]
    da = np.outer(dlogit, params["out_W"])
    grads["out_W"] = a.T @ dlogit
    grads["out_b"] = np.asarray(dlogit.sum())
    for k in range(config.dense_layers - 1, -1, -1):
        a_in, z = ctx["dense"][k]
        dz = da * (z > 0)
        grads[f"dense{k}_W"] = a_in.T @ dz
        grads[f"dense{k}_b"] = dz.sum(axis=0)
        da = dz @ params[f"dense{k}_W"].T
    u = config.units
    ndir = len(config.directions)
    d_final = [da[:, i * u:(i + 1) * u] for i in range(ndir)]
    dh_seq_next = None   # gradient flowing into the layer below via its output sequence
    for layer in range(config.lstm_layers - 1, -1, -1):
        dX_parts = []
        for di, d in enumerate(config.directions):
            layer_in, cache = ctx["lstm"][layer][di]
            dh_seq = None
            if dh_seq_next is not None:
                dh_seq = dh_seq_next[:, :, di * u:(di + 1) * u]
            dh_fin = d_final[di] if layer == config.lstm_layers - 1 else None
            dX, dW, dR, db = _lstm_direction_backward(
                layer_in, params[f"lstm{layer}_{d}_W"], params[f"lstm{layer}_{d}_R"],
                cache, dh_seq, dh_fin)
            grads[f"lstm{layer}_{d}_W"] = dW
            grads[f"lstm{layer}_{d}_R"] = dR
            grads[f"lstm{layer}_{d}_b"] = db
            dX_parts.append(dX)
        dh_seq_next = dX_parts[0] if len(dX_parts) == 1 else sum(dX_parts)
    return grads


def forward_many(models: list, X: np.ndarray) -> np.ndarray:
    """Inference for several same-config models in one pass; returns [M, B].

    Stacks member parameters and batches the recurrence over members with
    einsum, which keeps per-sample ensemble scoring out of Python loops.
    """
    cfg = models[0].config
    if any(m.config != cfg for m in models):
        raise ValueError("forward_many requires identical model configs")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None, :, :]
    if len(models) == 1:
        p, _ = _forward(models[0].params, cfg, X)
        return p[None, :]
    P = {k: np.stack([m.params[k] for m in models]) for k in param_names(cfg)}
    B, T = X.shape[0], X.shape[1]
    M, u = len(models), cfg.units
    layer_in, shared = X, True
    finals = []
    for layer in range(cfg.lstm_layers):
        outs, finals = [], []
        keep_seq = layer < cfg.lstm_layers - 1
        for d in cfg.directions:
            W = P[f"lstm{layer}_{d}_W"]
            R = P[f"lstm{layer}_{d}_R"]
            b = P[f"lstm{layer}_{d}_b"]
            h = np.zeros((B, M, u))
            c = np.zeros((B, M, u))
            h_seq = np.empty((B, T, M, u)) if keep_seq else None
            order = range(T - 1, -1, -1) if d == "bwd" else range(T)
            for t in order:
                if shared:
                    z = np.einsum("bd,mdg->bmg", layer_in[:, t, :], W)
                else:
                    z = np.einsum("bmd,mdg->bmg", layer_in[:, t, :, :], W)
                z = z + np.einsum("bmu,mug->bmg", h, R) + b
                i = _sigmoid(z[..., :u])
                f = _sigmoid(z[..., u:2 * u])
                g = np.tanh(z[..., 2 * u:3 * u])
                o = _sigmoid(z[..., 3 * u:])
                c = f * c + i * g
                h = o * np.tanh(c)
                if keep_seq:
                    h_seq[:, t] = h
            finals.append(h)
            if keep_seq:
                outs.append(h_seq)
        if keep_seq:
            layer_in = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=3)
            shared = False
    a = finals[0] if len(finals) == 1 else np.concatenate(finals, axis=2)
    for k in range(cfg.dense_layers):
        a = np.maximum(np.einsum("bmu,muv->bmv", a, P[f"dense{k}_W"])
                       + P[f"dense{k}_b"], 0.0)
    logit = np.einsum("bmu,mu->bm", a, P["out_W"]) + P["out_b"]
    return _sigmoid(logit).T


def focal_loss(p, target, gamma: float = 2.0):
    """Soft-target focal loss, elementwise.

    loss = -q (1-p)^g ln p - (1-q) p^g ln(1-p); reduces to the hard-label
    focal form for q in {0, 1} and to binary cross-entropy at gamma = 0.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLIP, 1.0 - P_CLIP)
    q = np.asarray(target, dtype=np.float64)
    return -q * (1 - p) ** gamma * np.log(p) - (1 - q) * p ** gamma * np.log(1 - p)


def _focal_dlogit(p, q, gamma):
    """d(focal)/d(logit) with p = sigmoid(logit); zero in the clip region."""
    pc = np.clip(p, P_CLIP, 1.0 - P_CLIP)
    # the gamma-weighted terms vanish at gamma = 0; clipping keeps the
    # (gamma - 1) powers finite so 0 * finite stays 0
    dldp = (q * gamma * (1 - pc) ** (gamma - 1) * np.log(pc)
            - q * (1 - pc) ** gamma / pc
            - (1 - q) * gamma * pc ** (gamma - 1) * np.log(1 - pc)
            + (1 - q) * pc ** gamma / (1 - pc)) if gamma > 0 else (
        -q / pc + (1 - q) / (1 - pc))
    inside = (p > P_CLIP) & (p < 1.0 - P_CLIP)
    return dldp * p * (1.0 - p) * inside


def binary_cross_entropy(p, target):
    return focal_loss(p, target, gamma=0.0)


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self):
        return len(self.train_loss)


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict
    history: TrainingHistory | None = None

    def forward(self, channels: np.ndarray) -> float:
        """Incident probability for one slice [H, C]."""
        p, _ = _forward(self.params, self.config, channels)
        return float(p)

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        p, _ = _forward(self.params, self.config, X)
        return p

    def predict_scores(self, X: np.ndarray) -> np.ndarray:
        """Scorer protocol shared with ensembles: [B, H, C] -> [B]."""
        return self.forward_batch(X)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def save(self, path):
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        if self.history is not None:
            arrays["hist_train_loss"] = np.array(self.history.train_loss)
            arrays["hist_val_loss"] = np.array(self.history.val_loss)
            arrays["hist_val_accuracy"] = np.array(self.history.val_accuracy)
            arrays["hist_best_epoch"] = np.array(self.history.best_epoch)
        meta = {"format_version": FORMAT_VERSION, "config": asdict(self.config),
                "param_order": param_names(self.config)}
        # write through a handle so numpy never appends ".npz" to temp names
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                     **arrays)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"unsupported model format {meta.get('format_version')}")
            config = ModelConfig(**meta["config"])
            params = {k: data[f"param_{k}"].copy() for k in meta["param_order"]}
            history = None
            if "hist_train_loss" in data:
                history = TrainingHistory(
                    train_loss=data["hist_train_loss"].tolist(),
                    val_loss=data["hist_val_loss"].tolist(),
                    val_accuracy=data["hist_val_accuracy"].tolist(),
                    best_epoch=int(data["hist_best_epoch"]))
        return cls(config=config, params=params, history=history)


def new_model(config: ModelConfig, seed: int = 0) -> TrainedModel:
    """Seed-initialized, untrained model."""
    return TrainedModel(config, init_params(config, np.random.default_rng(seed)))


def train(config: ModelConfig, X_train: np.ndarray, target_train: np.ndarray,
          X_val: np.ndarray, y_val: np.ndarray,
          tcfg: TrainConfig = TrainConfig()) -> TrainedModel:
    """Mini-batch Adam on mean focal loss with early stopping.

    target_train may be soft probabilities; y_val must be hard 0/1 labels.
    The best-validation-epoch parameters are restored before returning.
    """
    tcfg.validate()
    X_train = np.asarray(X_train, dtype=np.float64)
    q = np.asarray(target_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    n = len(X_train)
    if n == 0 or len(X_val) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if tcfg.hard_targets:
        q = (q > 0.5).astype(np.float64)

    rng = np.random.default_rng(tcfg.seed)
    params = init_params(config, rng)
    m_state = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    history = TrainingHistory()
    best_loss, best_params, wait = np.inf, None, 0

    for epoch in range(1, tcfg.epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, tcfg.batch_size):
            idx = perm[lo:lo + tcfg.batch_size]
            if idx.size == 0:
                raise ValueError("empty batch")
            xb, qb = X_train[idx], q[idx]
            p, ctx = _forward(params, config, xb, want_cache=True)
            losses = focal_loss(p, qb, tcfg.gamma)
            batch_loss = float(losses.mean())
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {lo // tcfg.batch_size}")
            epoch_loss += batch_loss * idx.size
            dlogit = _focal_dlogit(p, qb, tcfg.gamma) / idx.size
            grads = _backward(params, config, ctx, dlogit)
            step += 1
            bc1 = 1.0 - ADAM_BETA1 ** step
            bc2 = 1.0 - ADAM_BETA2 ** step
            for k in params:
                g = grads[k]
                m_state[k] = ADAM_BETA1 * m_state[k] + (1 - ADAM_BETA1) * g
                v_state[k] = ADAM_BETA2 * v_state[k] + (1 - ADAM_BETA2) * g * g
                params[k] = params[k] - tcfg.learning_rate * (
                    (m_state[k] / bc1) / (np.sqrt(v_state[k] / bc2) + ADAM_EPS))
        p_val, _ = _forward(params, config, X_val)
        val_loss = float(focal_loss(p_val, y_val, tcfg.gamma).mean())
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        val_acc = float((((p_val > tcfg.threshold).astype(int)) == y_val.astype(int)).mean())
        history.train_loss.append(epoch_loss / n)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= tcfg.patience:
                break
    return TrainedModel(config, best_params if best_params is not None else params, history)


def train_on_slices(config: ModelConfig, train_slices, val_slices,
                    tcfg: TrainConfig = TrainConfig(), val_labels=None) -> TrainedModel:
    """Train from SliceSets: targets are prob_label, validation labels default
    to thresholded prob_label."""
    q = train_slices.prob
    if np.isnan(q).any():
        raise ValueError("training slices must carry prob_label")
    y_val = (val_slices.prob > 0.5).astype(np.float64) if val_labels is None \
        else np.asarray(val_labels, dtype=np.float64)
    return train(config, train_slices.channels, q, val_slices.channels, y_val, tcfg)


def gradient_check(model: TrainedModel, X: np.ndarray, target: np.ndarray,
                   gamma: float = 2.0, epsilon: float = 1e-5,
                   max_params: int = 500) -> float:
    """Max relative error between BPTT and central-difference gradients."""
    if model.n_params > max_params:
        raise ValueError(f"gradient check limited to {max_params} parameters")
    X = np.asarray(X, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    n = len(X)
    p, ctx = _forward(model.params, model.config, X, want_cache=True)
    grads = _backward(model.params, model.config, ctx, _focal_dlogit(p, q, gamma) / n)

    worst = 0.0
    params = model.params
    for name in param_names(model.config):
        flat = params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lo_p, _ = _forward(params, model.config, X)
            loss_hi = float(focal_loss(lo_p, q, gamma).mean())
            flat[i] = orig - epsilon
            lo_p, _ = _forward(params, model.config, X)
            loss_lo = float(focal_loss(lo_p, q, gamma).mean())
            flat[i] = orig
            g_num = (loss_hi - loss_lo) / (2 * epsilon)
            g_ana = gflat[i]
            err = abs(g_ana - g_num) / max(abs(g_ana), abs(g_num), 1e-8)
            worst = max(worst, err)
    return worst


def knn_predict(train_X: np.ndarray, train_labels: np.ndarray,
                query: np.ndarray, k: int) -> float:
    """Fraction of incident labels among the k nearest flattened slices.

    Distance ties break by training index order (stable sort).
    """
    Xf = np.asarray(train_X, dtype=np.float64).reshape(len(train_X), -1)
    if len(Xf) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(Xf):
        raise ValueError("k must lie in [1, train size]")
    qv = np.asarray(query, dtype=np.float64).reshape(-1)
    d = np.sqrt(((Xf - qv) ** 2).sum(axis=1))
    nearest = np.argsort(d, kind="stable")[:k]
    labels = np.asarray(train_labels, dtype=np.float64) > 0.5
    return float(labels[nearest].mean())


def knn_predict_batch(train_X: np.ndarray, train_labels: np.ndarray,
                      queries: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Vectorized k-NN over many queries (same tie rule as knn_predict)."""
    Xf = np.asarray(train_X, dtype=np.float64).reshape(len(train_X), -1)
    if len(Xf) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(Xf):
        raise ValueError("k must lie in [1, train size]")
    Q = np.asarray(queries, dtype=np.float64).reshape(len(queries), -1)
    labels = np.asarray(train_labels, dtype=np.float64) > 0.5
    out = np.empty(len(Q))
    sq = (Xf ** 2).sum(axis=1)
    for lo in range(0, len(Q), chunk):
        qc = Q[lo:lo + chunk]
        d2 = sq[None, :] - 2.0 * (qc @ Xf.T) + (qc ** 2).sum(axis=1)[:, None]
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[lo:lo + chunk] = labels[nearest].mean(axis=1)
    return out


DEFAULT_SEARCH_SPACE = {
    "lstm_layers": [1, 2],
    "units": [16, 32, 64],
    "bidirectional": [False, True],
    "dense_layers": [0, 1, 2],
    "learning_rate": ("log-uniform", 1e-4, 1e-2),
    "batch_size": [32, 64, 128],
}


@dataclass
class SearchTrial:
    model_config: ModelConfig
    train_config: TrainConfig
    val_bce: float
    val_accuracy: float


@dataclass
class SearchResult:
    best_model_config: ModelConfig
    best_train_config: TrainConfig
    best_val_bce: float
    trials: list


def random_search(space: dict, budget: int, X_train, q_train, X_val, y_val,
                  base_model: ModelConfig = ModelConfig(),
                  base_train: TrainConfig = TrainConfig(),
                  seed: int = 0) -> SearchResult:
    """Uniform random search; model selection minimizes validation BCE."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    best = None
    for trial in range(budget):
        draw = {}
        for key, choices in space.items():
            if isinstance(choices, tuple) and choices[0] == "log-uniform":
                draw[key] = float(np.exp(rng.uniform(np.log(choices[1]), np.log(choices[2]))))
            else:
                draw[key] = choices[int(rng.integers(len(choices)))]
        mc_kw = {k: v for k, v in draw.items() if k in ModelConfig.__dataclass_fields__}
        tc_kw = {k: v for k, v in draw.items() if k in TrainConfig.__dataclass_fields__}
        mcfg = ModelConfig(**{**asdict(base_model), **mc_kw})
        tcfg = TrainConfig(**{**asdict(base_train), **tc_kw,
                              "seed": int(rng.integers(2 ** 31))})
        model = train(mcfg, X_train, q_train, X_val, y_val, tcfg)
        p_val = model.forward_batch(X_val)
        bce = float(binary_cross_entropy(p_val, y_val).mean())
        acc = float(((p_val > tcfg.threshold).astype(int) == np.asarray(y_val).astype(int)).mean())
        trials.append(SearchTrial(mcfg, tcfg, bce, acc))
        if best is None or bce < best.val_bce:
            best = trials[-1]
        log.info("trial %d/%d: val_bce=%.4f val_acc=%.3f", trial + 1, budget, bce, acc)
    return SearchResult(best.model_config, best.train_config, best.val_bce, trials)
