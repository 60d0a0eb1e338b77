"""Reverse-mode backpropagation through time, Adam, and the training loop.

The backward pass runs over a :class:`~snnlab.network.Tape`. Per layer
and time step it applies

    dL/du[t] = dL/do[t] * g(u[t]) + dL/du[t+1] * c[t]

where ``g`` is the rectangular pseudo-derivative and ``c[t]`` is the
carry factor of the membrane update: ``k * (1 - o[t])`` when the reset
is enabled, else ``k``. The reset indicator is treated as a constant of
the backward pass, so no gradient flows through the ``(1 - o)`` factor
itself. ``dL/do[t]`` collects three contributions: the readout loss (at
the output layer), the layer above at the same step through its W, and
the layer's own recurrence one step later through V.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .network import (
    Network,
    Tape,
    forward_sequence,
    init_network,
    predict_labels,
    readout_logits,
)
from .neuron import surrogate_pseudo_derivative

__all__ = [
    "Gradients",
    "AdamState",
    "TrainReport",
    "bptt_gradients",
    "adam_init",
    "adam_step",
    "step_lr",
    "softmax_cross_entropy",
    "readout_grad_to_output_grads",
    "batch_loss",
    "evaluate",
    "train_run",
]


@dataclass
class Gradients:
    """Parameter gradients aligned with a network's layers.

    ``weights[n]`` matches layer n's W; ``recurrents[n]`` matches its V
    (``None`` for non-recurrent layers). ``inputs`` and
    ``potential_grads`` are populated on request only.
    """

    weights: list
    recurrents: list
    inputs: Optional[np.ndarray] = None
    potential_grads: Optional[list] = None

    def param_list(self) -> list:
        """Flatten in the canonical (W, V) per-layer order."""
        out = []
        for w, v in zip(self.weights, self.recurrents):
            out.append(w)
            if v is not None:
                out.append(v)
        return out


def bptt_gradients(
    tape: Tape,
    net: Network,
    d_output_spikes=None,
    d_output_potentials=None,
    want_input_grad: bool = False,
    want_potential_grads: bool = False,
) -> Gradients:
    """Reverse pass over a tape.

    Args:
        tape: record produced by :func:`forward_sequence` on ``net``.
        d_output_spikes: (T, B, n_out) loss gradient w.r.t. the output
            layer's spikes, or None.
        d_output_potentials: (T, B, n_out) loss gradient w.r.t. the
            output layer's post-update potentials, or None.
        want_input_grad: also return dL/d(input tensor).
        want_potential_grads: also return dL/du per layer (T, B, width),
            useful for inspecting the temporal credit path.

    Returns:
        :class:`Gradients`.
    """
    layers = net.layers
    L = len(layers)
    T, B = tape.time_steps, tape.batch_size
    for n, layer in enumerate(layers):
        if tape.spikes[n].shape != (T, B, layer.width):
            raise ValueError(
                f"tape layer {n} shape {tape.spikes[n].shape} does not match "
                f"network layer width {layer.width}"
            )
    if d_output_spikes is None and d_output_potentials is None:
        raise ValueError("at least one output gradient must be supplied")

    w_grads = [np.zeros_like(layer.weights) for layer in layers]
    v_grads = [
        None if layer.recurrent_weights is None else np.zeros_like(layer.recurrent_weights)
        for layer in layers
    ]
    du_store = [None] * L
    for n in range(L - 1, -1, -1):
        layer = layers[n]
        pots = tape.potentials[n]
        outs = tape.spikes[n]
        g = surrogate_pseudo_derivative(pots, layer.neuron_cfg)
        k = layer.neuron_cfg.leak
        if layer.neuron_cfg.reset_enabled:
            carry = k * (1.0 - outs)
        else:
            carry = np.full_like(outs, k)

        do = np.zeros((T, B, layer.width))
        if n == L - 1 and d_output_spikes is not None:
            do += np.asarray(d_output_spikes, dtype=np.float64)
        if n < L - 1:
            # spikes feed the layer above at the same step
            do += du_store[n + 1] @ layers[n + 1].weights

        du = np.zeros((T, B, layer.width))
        du_next = np.zeros((B, layer.width))
        for t in range(T - 1, -1, -1):
            do_t = do[t]
            if layer.recurrent_weights is not None:
                do_t = do_t + du_next @ layer.recurrent_weights
            du_t = do_t * g[t] + du_next * carry[t]
            if n == L - 1 and d_output_potentials is not None:
                du_t = du_t + d_output_potentials[t]
            du[t] = du_t
            du_next = du_t
        du_store[n] = du

        below = tape.inputs if n == 0 else tape.spikes[n - 1]
        w_grads[n] = np.tensordot(du, below, axes=([0, 1], [0, 1]))
        if layer.recurrent_weights is not None and T > 1:
            v_grads[n] = np.tensordot(du[1:], outs[:-1], axes=([0, 1], [0, 1]))

    input_grad = du_store[0] @ layers[0].weights if want_input_grad else None
    return Gradients(
        weights=w_grads,
        recurrents=v_grads,
        inputs=input_grad,
        potential_grads=du_store if want_potential_grads else None,
    )


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns (new_params, state)."""
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("parameter/gradient count does not match optimizer state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    new_params = []
    for i, (p, gr) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * gr
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * gr * gr
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_params, state


def step_lr(base_lr: float, epoch: int, step_size: int, gamma: float) -> float:
    """Step decay: base_lr * gamma ** floor(epoch / step_size)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if step_size < 1:
        raise ValueError("step_size must be >= 1")
    return base_lr * gamma ** (epoch // step_size)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch.

    Returns ``(loss, d_logits)`` with ``d_logits = (softmax - onehot) / B``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(B)
    loss = float(-np.mean(np.log(probs[rows, labels] + 1e-300)))
    d = probs.copy()
    d[rows, labels] -= 1.0
    return loss, d / B


def readout_grad_to_output_grads(d_logits, time_steps: int, mode: str):
    """Expand a logit gradient into the per-step output gradients.

    Both readouts average over T, so each step receives d_logits / T.
    Returns ``(d_output_spikes, d_output_potentials)``, one of which is
    None.
    """
    d = np.asarray(d_logits, dtype=np.float64) / time_steps
    per_step = np.broadcast_to(d, (time_steps,) + d.shape)
    if mode == "rate":
        return per_step, None
    if mode == "potential":
        return None, per_step
    raise ValueError(f"unknown readout mode {mode!r}")


def batch_loss(net: Network, inputs, labels) -> float:
    """Forward pass + readout cross-entropy on one batch."""
    _, record = forward_sequence(net, inputs)
    logits = readout_logits(record, net.spec.readout)
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


def evaluate(net: Network, dataset, batch_size: int = 256):
    """Test accuracy plus per-layer mean firing rates.

    Returns ``(accuracy, mean_rates)`` where ``mean_rates[n]`` is the
    mean of layer n's spikes over (samples, time, neurons).
    """
    n = len(dataset.labels)
    correct = 0
    rate_sums = np.zeros(len(net.layers))
    steps = 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x = dataset.inputs_for(idx)
        tape, record = forward_sequence(net, x)
        logits = readout_logits(record, net.spec.readout)
        correct += int(np.sum(predict_labels(logits) == dataset.labels[idx]))
        for li in range(len(net.layers)):
            rate_sums[li] += tape.spikes[li].sum()
        steps += x.shape[0] * len(idx)
    widths = np.array([layer.width for layer in net.layers], dtype=np.float64)
    mean_rates = rate_sums / (steps * widths)
    return correct / n, mean_rates


@dataclass
class TrainReport:
    """One row per completed epoch plus run-level metadata."""

    seed: int
    config_hash: str
    epochs: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    @property
    def final_test_accuracy(self):
        return self.epochs[-1]["test_accuracy"] if self.epochs else None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "wall_clock_seconds": self.wall_clock_seconds,
            "final_test_accuracy": self.final_test_accuracy,
            "epochs": self.epochs,
        }


def _global_norm_clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        return [g * scale for g in grads]
    return grads


def train_run(config, data):
    """Shuffled mini-batch training per an experiment config.

    ``data`` carries ``train`` and ``test`` datasets (see
    :mod:`snnlab.datasets`). Deterministic for a fixed (config, seed):
    batch order derives from the run seed, and gradient accumulation
    follows a fixed order. Returns ``(net, report)``.
    """
    from .config import config_hash, derive_seed  # local import, no cycle at module load

    t0 = time.perf_counter()
    spec = config.network_spec()
    net = init_net = None
    from .network import init_network

    net = init_network(spec, config.seed)
    report = TrainReport(seed=config.seed, config_hash=config_hash(config))
    if config.epochs == 0:
        report.wall_clock_seconds = time.perf_counter() - t0
        return net, report

    params = net.param_arrays()
    opt = adam_init(params)
    n_train = len(data.train.labels)
    batch = min(config.batch_size, n_train)
    for epoch in range(config.epochs):
        lr = step_lr(config.learning_rate, epoch, config.lr_step_size, config.lr_gamma)
        order = np.random.default_rng(
            derive_seed(config.seed, f"epoch-{epoch}")
        ).permutation(n_train)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n_train, batch):
            idx = order[start : start + batch]
            x = data.train.inputs_for(idx)
            y = data.train.labels[idx]
            tape, record = forward_sequence(net, x)
            logits = readout_logits(record, spec.readout)
            loss, d_logits = softmax_cross_entropy(logits, y)
            d_spk, d_pot = readout_grad_to_output_grads(d_logits, x.shape[0], spec.readout)
            grads = bptt_gradients(tape, net, d_spk, d_pot).param_list()
            if config.grad_clip_norm is not None:
                grads = _global_norm_clip(grads, config.grad_clip_norm)
            params, opt = adam_step(params, grads, opt, lr)
            net.set_param_arrays(params)
            loss_sum += loss * len(idx)
            correct += int(np.sum(predict_labels(logits) == y))
        test_acc, mean_rates = evaluate(net, data.test, batch_size=batch)
        report.epochs.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / n_train,
                "train_accuracy": correct / n_train,
                "test_accuracy": test_acc,
                "mean_firing_rates": [float(r) for r in mean_rates],
            }
        )
    report.wall_clock_seconds = time.perf_counter() - t0
    return net, report
