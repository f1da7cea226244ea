"""Log-linear density-ratio estimation for drifting streams.

The estimator models the log of an unnormalized ratio with a network
``psi`` and self-normalizes over samples of the denominator distribution:

    r(x) = exp(psi(x)) / mean_j exp(psi(x_j)),   x_j ~ q.

A single fit of this form against samples of the numerator distribution is
the classic KLIEP estimator. The continual variant never revisits old
numerator samples: at each update it freezes the current parameters as a
snapshot, and fits only the *step* ratio between the two latest denominator
batches through the difference

    phi(x) = psi_new(x) - psi_snapshot(x),
    r_step(x) = exp(phi(x)) / mean_i exp(phi(x_i)),   x_i ~ q_cur,

so the full ratio telescopes through the chain of snapshots. Consistency of
the chain is enforced with a squared penalty on the normalizer identity

    Psi_cur / (Phi_cur * Psi_prev) = 1,

where Psi_cur = mean exp(psi_new) over q_cur, Phi_cur = mean exp(phi) over
q_cur, and Psi_prev = mean exp(psi_snapshot) over q_prev. With a zero
snapshot the penalty and its gradient vanish identically and the update is
exactly a KLIEP fit.

Multiple traced origins share one network with one output head per origin;
the training objective is the average of the per-origin objectives.

All normalizer arithmetic runs through log-mean-exp, so large |psi| cannot
overflow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nets import AdamState, DenseNet, Layer, ShapeError, TrainingError, make_net
from .seeding import INIT, SHUFFLE, substream

MODEL_FORMAT = "driftratio-model/1"


def log_mean_exp(values: np.ndarray) -> float:
    """log((1/n) sum exp(values)), stable against overflow."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("log_mean_exp of an empty array")
    m = float(np.max(values))
    return m + float(np.log(np.mean(np.exp(values - m))))


@dataclass
class TrainConfig:
    """Optimization settings shared by the plain and continual fits.

    lambda_c weights the chain-consistency penalty; it is ignored by plain
    KLIEP fits (the penalty is identically zero there). When
    ``lambda_decay_sqrt_n`` is set, the effective weight is
    ``lambda_c / sqrt(n)`` with n the per-origin sample count, the schedule
    under which the estimator's asymptotic normality is derived; the
    default keeps lambda_c fixed, matching the reference configuration.

    eval_sample_size is the size of the dedicated normalization/evaluation
    batches used by the experiment runners, not by training itself.
    """

    lambda_c: float = 10.0
    learning_rate: float = 1e-5
    batch_size: int = 2000
    epochs: int = 200
    seed: int = 0
    eval_sample_size: int = 10000
    lambda_decay_sqrt_n: bool = False

    def __post_init__(self):
        if self.lambda_c < 0:
            raise ValueError("lambda_c must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_sample_size < 1:
            raise ValueError("batch_size, epochs, eval_sample_size must be positive")


@dataclass
class RatioModel:
    """Current network, frozen snapshot, and the origin/head bookkeeping.

    ``origins[h]`` is the time index whose ratio is read from output head
    ``h``. ``snapshot`` holds the previous step's parameters; heads added
    after the snapshot was frozen implicitly read 0 from it.
    """

    net: DenseNet
    snapshot: DenseNet | None
    origins: list[int]
    current_time: int = 1

    def __post_init__(self):
        if len(self.origins) != self.net.output_dim:
            raise ShapeError(
                f"{len(self.origins)} origins for {self.net.output_dim} heads"
            )
        if len(set(self.origins)) != len(self.origins):
            raise ValueError("duplicate origin indices")
        if self.snapshot is not None and self.snapshot.input_dim != self.net.input_dim:
            raise ShapeError("snapshot input_dim differs from net input_dim")

    def head(self, origin: int) -> int:
        try:
            return self.origins.index(origin)
        except ValueError:
            raise ValueError(f"origin {origin} is not registered") from None


def _as_batch(x: np.ndarray, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :] if dim > 1 else x[:, None]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{name} has shape {x.shape}, expected (n, {dim})")
    if x.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return x


def _snapshot_column(snapshot: DenseNet | None, x: np.ndarray, head: int) -> np.ndarray:
    """Snapshot outputs for one head, zero for heads the snapshot never had."""
    if snapshot is None or head >= snapshot.output_dim:
        return np.zeros(x.shape[0])
    return snapshot.forward(x)[:, head]


def log_normalizer(net: DenseNet, q_samples: np.ndarray, head: int = 0) -> float:
    """log of mean exp(psi) over the normalization batch."""
    q = _as_batch(q_samples, net.input_dim, "q_samples")
    return log_mean_exp(net.forward(q)[:, head])


def normalizer(net: DenseNet, q_samples: np.ndarray, head: int = 0) -> float:
    """Mean of exp(psi) over the batch; always positive."""
    return float(np.exp(log_normalizer(net, q_samples, head)))


def estimate_log_ratio(
    model: RatioModel, x: np.ndarray, q_samples: np.ndarray, head: int = 0
) -> np.ndarray:
    """log of the self-normalized ratio estimate at x.

    q_samples must come from the *current* denominator distribution of the
    given head; the same batch should be reused across evaluations of one
    report so results are reproducible.
    """
    net = model.net
    xb = _as_batch(x, net.input_dim, "x")
    return net.forward(xb)[:, head] - log_normalizer(net, q_samples, head)


def estimate_ratio(
    model: RatioModel, x: np.ndarray, q_samples: np.ndarray, head: int = 0
) -> np.ndarray:
    return np.exp(estimate_log_ratio(model, x, q_samples, head))


def step_log_ratio(
    model: RatioModel, x: np.ndarray, q_cur_samples: np.ndarray, head: int = 0
) -> np.ndarray:
    """log of the fitted ratio between the two latest denominator batches."""
    net = model.net
    xb = _as_batch(x, net.input_dim, "x")
    qb = _as_batch(q_cur_samples, net.input_dim, "q_cur_samples")
    phi_x = net.forward(xb)[:, head] - _snapshot_column(model.snapshot, xb, head)
    phi_q = net.forward(qb)[:, head] - _snapshot_column(model.snapshot, qb, head)
    return phi_x - log_mean_exp(phi_q)


def step_ratio(
    model: RatioModel, x: np.ndarray, q_cur_samples: np.ndarray, head: int = 0
) -> np.ndarray:
    return np.exp(step_log_ratio(model, x, q_cur_samples, head))


def constraint_residual(
    model: RatioModel,
    q_prev_samples: np.ndarray,
    q_cur_samples: np.ndarray,
    head: int = 0,
) -> float:
    """Psi_cur / (Phi_cur * Psi_prev) - 1 on the given batches.

    Zero in population at the optimum; the training penalty is
    lambda_c * residual**2.
    """
    net = model.net
    qp = _as_batch(q_prev_samples, net.input_dim, "q_prev_samples")
    qc = _as_batch(q_cur_samples, net.input_dim, "q_cur_samples")
    psi_cur = net.forward(qc)[:, head]
    phi_cur = psi_cur - _snapshot_column(model.snapshot, qc, head)
    snap_prev = _snapshot_column(model.snapshot, qp, head)
    log_r = log_mean_exp(psi_cur) - log_mean_exp(phi_cur) - log_mean_exp(snap_prev)
    return float(np.expm1(log_r))


def _softmax(values: np.ndarray) -> np.ndarray:
    m = np.max(values)
    e = np.exp(values - m)
    return e / e.sum()


def _origin_terms(a, b, sa, sb, lambda_c):
    """Loss and output-gradients for one origin.

    a, b: network outputs (one head) on the q_prev and q_cur batches.
    sa, sb: snapshot outputs on the same batches (zeros when absent).
    Returns the minimized loss  -[mean(phi_prev) - log Phi] + lambda*res^2
    and its gradients w.r.t. a and b.
    """
    n_prev = a.shape[0]
    phi_prev = a - sa
    phi_cur = b - sb
    log_phi = log_mean_exp(phi_cur)
    data_term = float(np.mean(phi_prev)) - log_phi

    log_psi = log_mean_exp(b)
    log_psi_prev = log_mean_exp(sa)
    log_r = log_psi - log_phi - log_psi_prev
    residual = float(np.expm1(log_r))
    penalty = lambda_c * residual * residual

    grad_a = np.full(n_prev, -1.0 / n_prev)
    sm_phi = _softmax(phi_cur)
    grad_b = sm_phi.copy()
    if residual != 0.0 and lambda_c != 0.0:
        ratio = residual + 1.0
        grad_b += (2.0 * lambda_c * residual * ratio) * (_softmax(b) - sm_phi)

    loss = -data_term + penalty
    return loss, grad_a, grad_b, {"data": data_term, "residual": residual, "penalty": penalty}


def _assemble(net, snapshot, data):
    """Stack per-origin batches into one matrix plus per-origin index ranges."""
    rows = []
    segments = []
    offset = 0
    for x_prev, x_cur, head in data:
        xp = _as_batch(x_prev, net.input_dim, "q_prev batch")
        xc = _as_batch(x_cur, net.input_dim, "q_cur batch")
        sl_p = slice(offset, offset + len(xp))
        sl_c = slice(offset + len(xp), offset + len(xp) + len(xc))
        offset += len(xp) + len(xc)
        rows.append(xp)
        rows.append(xc)
        segments.append(
            (head, sl_p, sl_c, _snapshot_column(snapshot, xp, head), _snapshot_column(snapshot, xc, head))
        )
    return np.concatenate(rows, axis=0), segments


def ckliep_loss_parts(net, snapshot, data, lambda_c):
    """Loss of the continual objective, split into its pieces.

    ``data`` is a list of (q_prev_batch, q_cur_batch, head) triples, one per
    traced origin. The total is the mean of the per-origin losses. Pure: no
    state is touched, so it is safe for finite-difference checks.
    """
    stacked, segments = _assemble(net, snapshot, data)
    out = net.forward(stacked)
    total = 0.0
    per_origin = []
    for head, sl_p, sl_c, sa, sb in segments:
        loss, _, _, part = _origin_terms(out[sl_p, head], out[sl_c, head], sa, sb, lambda_c)
        total += loss / len(segments)
        per_origin.append(part)
    return total, per_origin


def ckliep_loss(net, snapshot, data, lambda_c) -> float:
    total, _ = ckliep_loss_parts(net, snapshot, data, lambda_c)
    return total


def ckliep_loss_and_grads(net, snapshot, data, lambda_c):
    """Loss plus exact parameter gradients of the continual objective."""
    stacked, segments = _assemble(net, snapshot, data)
    return _loss_and_grads_prepared(net, stacked, segments, lambda_c)


def _loss_and_grads_prepared(net, stacked, segments, lambda_c):
    out, cache = net.forward_cached(stacked)
    out_grad = np.zeros_like(out)
    k = len(segments)
    total = 0.0
    for head, sl_p, sl_c, sa, sb in segments:
        loss, grad_a, grad_b, _ = _origin_terms(out[sl_p, head], out[sl_c, head], sa, sb, lambda_c)
        total += loss / k
        out_grad[sl_p, head] += grad_a / k
        out_grad[sl_c, head] += grad_b / k
    return total, net.backward(cache, out_grad)


def _effective_lambda(config: TrainConfig, n: int) -> float:
    if config.lambda_decay_sqrt_n:
        return config.lambda_c / np.sqrt(n)
    return config.lambda_c


def _train(net, snapshot, data, config: TrainConfig, rng) -> float:
    """Minibatch Adam on the continual objective; returns the last loss.

    Normalizers are computed per minibatch. Every sample is visited once
    per epoch (origins with fewer chunks recycle theirs). The snapshot
    columns are precomputed once per fit since the snapshot is frozen.
    """
    prepared = []
    min_n = None
    for x_prev, x_cur, head in data:
        xp = _as_batch(x_prev, net.input_dim, "q_prev batch")
        xc = _as_batch(x_cur, net.input_dim, "q_cur batch")
        sa = _snapshot_column(snapshot, xp, head)
        sb = _snapshot_column(snapshot, xc, head)
        prepared.append((xp, xc, head, sa, sb))
        min_n = len(xp) if min_n is None else min(min_n, len(xp))
        min_n = min(min_n, len(xc))

    lam = _effective_lambda(config, min_n)
    bs = min(config.batch_size, min_n)
    steps_per_epoch = max(
        int(np.ceil(max(len(xp), len(xc)) / bs)) for xp, xc, _, _, _ in prepared
    )
    adam = AdamState.for_net(net, config.learning_rate)
    loss = 0.0
    update = 0
    for _ in range(config.epochs):
        perms = [
            (rng.permutation(len(xp)), rng.permutation(len(xc)))
            for xp, xc, _, _, _ in prepared
        ]
        for s in range(steps_per_epoch):
            rows = []
            segments = []
            offset = 0
            for (xp, xc, head, sa, sb), (pp, pc) in zip(prepared, perms):
                ip = _chunk(pp, s, bs)
                ic = _chunk(pc, s, bs)
                sl_p = slice(offset, offset + len(ip))
                sl_c = slice(offset + len(ip), offset + len(ip) + len(ic))
                offset += len(ip) + len(ic)
                rows.append(xp[ip])
                rows.append(xc[ic])
                segments.append((head, sl_p, sl_c, sa[ip], sb[ic]))
            stacked = np.concatenate(rows, axis=0)
            loss, grads = _loss_and_grads_prepared(net, stacked, segments, lam)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at update {update}")
            adam.update(net, grads)
            update += 1
    return loss


def _chunk(perm: np.ndarray, step: int, batch_size: int) -> np.ndarray:
    n_chunks = int(np.ceil(len(perm) / batch_size))
    j = step % n_chunks
    return perm[j * batch_size : (j + 1) * batch_size]


def kliep_fit(
    p_samples: np.ndarray,
    q_samples: np.ndarray,
    net_arch: tuple[int, ...],
    config: TrainConfig,
    origin: int = 0,
) -> RatioModel:
    """Fit r = p/q from scratch with a fresh single-head network.

    This is the plain estimator used for the first link of a chain and as
    the keep-all-history comparator in the experiments.
    """
    p = np.asarray(p_samples, dtype=np.float64)
    q = np.asarray(q_samples, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[1]:
        raise ShapeError(
            f"p_samples {p.shape} and q_samples {q.shape} must be (n, d) with equal d"
        )
    net = make_net(p.shape[1], tuple(net_arch), 1, substream(config.seed, INIT))
    _train(net, None, [(p, q, 0)], config, substream(config.seed, SHUFFLE, 0))
    return RatioModel(net=net, snapshot=None, origins=[origin], current_time=1)


def add_origin(model: RatioModel, new_origin: int) -> RatioModel:
    """Register a new traced origin by growing the output layer one head.

    Existing head parameters are untouched (old outputs stay bit-identical)
    and the snapshot is unchanged: it reads as 0 for the new head, so the
    head's first training step is an exact plain fit.
    """
    if new_origin in model.origins:
        raise ValueError(f"origin {new_origin} already registered")
    last = model.net.layers[-1]
    grown = Layer(
        np.vstack([last.weights, np.zeros((1, last.in_dim))]),
        np.concatenate([last.bias, [0.0]]),
        "identity",
    )
    net = DenseNet([layer.copy() for layer in model.net.layers[:-1]] + [grown])
    return RatioModel(
        net=net,
        snapshot=model.snapshot,
        origins=model.origins + [new_origin],
        current_time=model.current_time,
    )


def ckliep_step(
    model: RatioModel,
    q_prev: dict[int, np.ndarray],
    q_cur: dict[int, np.ndarray],
    new_origin: tuple[int, np.ndarray] | None = None,
    config: TrainConfig | None = None,
) -> RatioModel:
    """Advance the chain one step using only the two latest sample sets.

    The current network is frozen as the snapshot, an optional new origin
    joins with a fresh head (its numerator batch rides in ``new_origin``),
    and the new network is trained on the averaged per-origin objective.
    Returns a new model; the input model is not mutated.
    """
    if config is None:
        config = TrainConfig()
    for origin in model.origins:
        if origin not in q_prev:
            raise ValueError(f"missing q_prev batch for origin {origin}")
        if origin not in q_cur:
            raise ValueError(f"missing q_cur batch for origin {origin}")

    snapshot = model.net.copy()
    stepped = RatioModel(
        net=model.net.copy(),
        snapshot=snapshot,
        origins=list(model.origins),
        current_time=model.current_time + 1,
    )
    prev = dict(q_prev)
    if new_origin is not None:
        tau, p_batch = new_origin
        stepped = add_origin(stepped, tau)
        if tau not in q_cur:
            raise ValueError(f"missing q_cur batch for new origin {tau}")
        prev[tau] = p_batch

    data = [
        (prev[origin], q_cur[origin], stepped.head(origin)) for origin in stepped.origins
    ]
    _train(
        stepped.net,
        stepped.snapshot,
        data,
        config,
        substream(config.seed, SHUFFLE, stepped.current_time),
    )
    return stepped


def save_model(model: RatioModel, path) -> None:
    """Write the model as versioned JSON; float64 values round-trip exactly."""

    def net_dict(net):
        return [
            {
                "activation": layer.activation,
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in net.layers
        ]

    doc = {
        "format": MODEL_FORMAT,
        "origins": list(model.origins),
        "current_time": model.current_time,
        "net": net_dict(model.net),
        "snapshot": net_dict(model.snapshot) if model.snapshot is not None else None,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> RatioModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {doc.get('format')!r}")

    def net_from(layers):
        return DenseNet(
            [
                Layer(np.array(l["weights"]), np.array(l["bias"]), l["activation"])
                for l in layers
            ]
        )

    return RatioModel(
        net=net_from(doc["net"]),
        snapshot=net_from(doc["snapshot"]) if doc["snapshot"] is not None else None,
        origins=list(doc["origins"]),
        current_time=int(doc["current_time"]),
    )
