"""Dense LIF layers assembled into time-unrolled networks.

A network is a stack of fully connected LIF layers driven for T steps.
At step t, layer n receives the current

    I[t, n] = W[n] @ o[t, n-1]  (+ V[n] @ o[t-1, n] if the layer is recurrent)

where ``o[t, n-1]`` are the spikes of the layer below at the same step
(the raw input tensor for the first layer) and ``o[t-1, n]`` are the
layer's own spikes from the previous step. The forward pass records a
:class:`Tape` holding every current, potential and spike so that a
reverse pass can be run over it later.

Spike tensors are plain float64 arrays with entries in {0, 1}, shaped
``(time, neurons)`` for a single sample or ``(time, batch, neurons)``
for a batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .neuron import MembraneState, NeuronConfig, lif_step

__all__ = [
    "NetworkSpec",
    "DenseLifLayer",
    "Network",
    "Tape",
    "OutputRecord",
    "init_network",
    "forward_sequence",
    "readout_logits",
    "predict_labels",
    "save_checkpoint",
    "load_checkpoint",
]

READOUT_MODES = ("rate", "potential")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Shape and mode of a network: layer widths, unroll length, readout.

    ``layer_widths`` lists every trainable layer including the output
    layer, so a spec needs at least two entries (one hidden layer plus
    the output). ``recurrent_layers`` flags which layers carry an
    intra-layer feedback matrix; ``None`` means none do.
    ``time_steps`` is the nominal unroll length used when generating or
    training; the forward pass itself follows the length of the input
    it is given (event data re-integrated at a different resolution
    changes T, not the widths).
    """

    input_width: int
    layer_widths: tuple
    time_steps: int
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    recurrent_layers: Optional[tuple] = None
    readout: str = "rate"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")
        if len(widths) < 2:
            raise ValueError(
                "need at least one hidden layer plus an output layer, "
                f"got widths {widths}"
            )
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if self.readout not in READOUT_MODES:
            raise ValueError(
                f"readout must be one of {READOUT_MODES}, got {self.readout!r}"
            )
        if self.recurrent_layers is not None:
            flags = tuple(bool(f) for f in self.recurrent_layers)
            if len(flags) != len(widths):
                raise ValueError(
                    "recurrent_layers must have one flag per layer "
                    f"({len(widths)}), got {len(flags)}"
                )
            object.__setattr__(self, "recurrent_layers", flags)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths)

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    def recurrence_flags(self) -> tuple:
        if self.recurrent_layers is None:
            return tuple(False for _ in self.layer_widths)
        return self.recurrent_layers


@dataclass
class DenseLifLayer:
    """One fully connected LIF layer.

    ``weights`` has shape (out, in); ``recurrent_weights``, when present,
    is square with side equal to the layer width.
    """

    weights: np.ndarray
    recurrent_weights: Optional[np.ndarray]
    neuron_cfg: NeuronConfig

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a 2-D matrix")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if self.recurrent_weights is not None:
            v = np.asarray(self.recurrent_weights, dtype=np.float64)
            if v.shape != (self.width, self.width):
                raise ValueError(
                    f"recurrent weights must be square ({self.width}, "
                    f"{self.width}), got {v.shape}"
                )
            if not np.all(np.isfinite(v)):
                raise ValueError("recurrent weights must be finite")
            self.recurrent_weights = v

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class Network:
    """A spec plus its weight matrices."""

    spec: NetworkSpec
    layers: list

    def param_arrays(self) -> list:
        """All trainable arrays in canonical order: W then V per layer."""
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            if layer.recurrent_weights is not None:
                out.append(layer.recurrent_weights)
        return out

    def set_param_arrays(self, arrays) -> None:
        arrays = list(arrays)
        expected = len(self.param_arrays())
        if len(arrays) != expected:
            raise ValueError(f"expected {expected} arrays, got {len(arrays)}")
        i = 0
        for layer in self.layers:
            layer.weights = np.asarray(arrays[i], dtype=np.float64)
            i += 1
            if layer.recurrent_weights is not None:
                layer.recurrent_weights = np.asarray(arrays[i], dtype=np.float64)
                i += 1

    def copy(self) -> "Network":
        return Network(
            spec=self.spec,
            layers=[
                DenseLifLayer(
                    weights=layer.weights.copy(),
                    recurrent_weights=None
                    if layer.recurrent_weights is None
                    else layer.recurrent_weights.copy(),
                    neuron_cfg=layer.neuron_cfg,
                )
                for layer in self.layers
            ],
        )


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Build a network with uniformly initialised weights.

    Every matrix is drawn i.i.d. uniform on [-b, b] with b = sqrt(1/fan_in)
    (fan_in = layer width for recurrent matrices). Draw order is fixed,
    layer by layer, W before V, so a given (spec, seed) pair always
    produces bit-identical weights.
    """
    rng = np.random.default_rng(seed)
    flags = spec.recurrence_flags()
    layers = []
    fan_in = spec.input_width
    for width, recurrent in zip(spec.layer_widths, flags):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(width, fan_in))
        v = None
        if recurrent:
            rbound = np.sqrt(1.0 / width)
            v = rng.uniform(-rbound, rbound, size=(width, width))
        layers.append(
            DenseLifLayer(weights=w, recurrent_weights=v, neuron_cfg=spec.neuron)
        )
        fan_in = width
    return Network(spec=spec, layers=layers)


@dataclass
class Tape:
    """Time-unrolled record of one forward pass.

    Per layer n, ``currents[n]``, ``potentials[n]`` and ``spikes[n]`` are
    (T, B, width) arrays holding the input current, the post-update
    membrane potential and the emitted spikes at every step. ``inputs``
    is the (T, B, input_width) tensor the network was driven with.
    """

    inputs: np.ndarray
    currents: list
    potentials: list
    spikes: list

    @property
    def time_steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[1]

    def pre_potentials(self, layer: int) -> np.ndarray:
        """Membrane potentials as they stood before each step's update.

        Row t is the post-update potential of step t-1; row 0 is the
        all-zero initial state.
        """
        post = self.potentials[layer]
        pre = np.zeros_like(post)
        pre[1:] = post[:-1]
        return pre


@dataclass
class OutputRecord:
    """Aggregates of the output layer over the full unroll."""

    spike_counts: np.ndarray  # (B, n_out) total spikes per neuron
    potential_sums: np.ndarray  # (B, n_out) summed post-update potentials
    time_steps: int


def _as_time_batch_width(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, None, :], True
    if x.ndim == 3:
        return x, False
    raise ValueError(
        f"input must be (time, width) or (time, batch, width), got shape {x.shape}"
    )


def forward_sequence(net: Network, inputs):
    """Run the time-unrolled forward pass and record a tape.

    ``inputs`` may be a binary spike tensor or a real-valued current
    tensor, shaped (T, width) or (T, B, width). Returns
    ``(tape, record)`` where ``record`` carries the output layer's spike
    counts and potential sums.
    """
    x, _ = _as_time_batch_width(inputs)
    T, B, width = x.shape
    if width != net.spec.input_width:
        raise ValueError(
            f"input width {width} does not match network input width "
            f"{net.spec.input_width}"
        )
    states = [MembraneState.zeros((B, layer.width)) for layer in net.layers]
    currents = [np.empty((T, B, layer.width)) for layer in net.layers]
    potentials = [np.empty((T, B, layer.width)) for layer in net.layers]
    spikes = [np.empty((T, B, layer.width)) for layer in net.layers]

    for t in range(T):
        below = x[t]
        for n, layer in enumerate(net.layers):
            drive = below @ layer.weights.T
            if layer.recurrent_weights is not None:
                # feedback reads the spikes emitted on the previous step
                drive = drive + states[n].last_spikes @ layer.recurrent_weights.T
            states[n], out = lif_step(states[n], drive, layer.neuron_cfg)
            currents[n][t] = drive
            potentials[n][t] = states[n].potentials
            spikes[n][t] = out
            below = out

    tape = Tape(inputs=x, currents=currents, potentials=potentials, spikes=spikes)
    record = OutputRecord(
        spike_counts=spikes[-1].sum(axis=0),
        potential_sums=potentials[-1].sum(axis=0),
        time_steps=T,
    )
    return tape, record


def readout_logits(record: OutputRecord, mode: str = "rate") -> np.ndarray:
    """Per-class logits from the output record.

    ``rate``: mean spike count per output neuron over the unroll.
    ``potential``: mean post-update potential over the unroll.
    """
    if record.time_steps < 1:
        raise ValueError("output record covers zero time steps")
    if mode == "rate":
        return record.spike_counts / record.time_steps
    if mode == "potential":
        return record.potential_sums / record.time_steps
    raise ValueError(f"readout must be one of {READOUT_MODES}, got {mode!r}")


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest index."""
    return np.argmax(logits, axis=-1)


def save_checkpoint(net: Network, path, extra=None) -> None:
    """Write a network to ``path`` as an .npz container.

    Layout (format version 1): a zip of row-major .npy arrays named
    ``layer{i}_w`` / ``layer{i}_v`` plus a ``meta`` JSON string holding
    the format version, the spec fields and any extra metadata.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": {
            "input_width": net.spec.input_width,
            "layer_widths": list(net.spec.layer_widths),
            "time_steps": net.spec.time_steps,
            "readout": net.spec.readout,
            "recurrent_layers": list(net.spec.recurrence_flags()),
            "neuron": {
                "leak": net.spec.neuron.leak,
                "reset_enabled": net.spec.neuron.reset_enabled,
                "threshold": net.spec.neuron.threshold,
                "surrogate_width": net.spec.neuron.surrogate_width,
            },
        },
        "extra": extra or {},
    }
    arrays = {}
    for i, layer in enumerate(net.layers):
        arrays[f"layer{i}_w"] = layer.weights
        if layer.recurrent_weights is not None:
            arrays[f"layer{i}_v"] = layer.recurrent_weights
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns ``(network, extra)``.
    """
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format version {meta.get('format_version')}"
            )
        s = meta["spec"]
        spec = NetworkSpec(
            input_width=s["input_width"],
            layer_widths=tuple(s["layer_widths"]),
            time_steps=s["time_steps"],
            neuron=NeuronConfig(**s["neuron"]),
            recurrent_layers=tuple(s["recurrent_layers"]),
            readout=s["readout"],
        )
        layers = []
        for i in range(spec.n_layers):
            w = data[f"layer{i}_w"]
            v = data[f"layer{i}_v"] if f"layer{i}_v" in data else None
            layers.append(
                DenseLifLayer(weights=w, recurrent_weights=v, neuron_cfg=spec.neuron)
            )
    return Network(spec=spec, layers=layers), meta.get("extra", {})
