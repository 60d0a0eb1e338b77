"""Single-step leaky integrate-and-fire dynamics.

The membrane update implemented here is the discrete-time LIF rule

    u' = k * u * (1 - o_prev) + I     (reset enabled)
    u' = k * u + I                    (reset disabled)
    o' = 1  iff  u' >= threshold

where ``k`` is the leak coefficient in [0, 1], ``o_prev`` is the spike
emitted on the previous step and ``I`` is the incoming synaptic current.
``k = 1`` removes the decay entirely (a pure integrator), ``k = 0`` makes
the neuron stateless, and disabling the reset lets the potential carry
over regardless of firing.

All arithmetic is 64-bit; the functions are pure and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NeuronConfig",
    "MembraneState",
    "lif_step",
    "surrogate_pseudo_derivative",
]


@dataclass(frozen=True)
class NeuronConfig:
    """Parameters shared by every neuron in a layer.

    Attributes:
        leak: carry-over factor ``k`` applied to the previous membrane
            potential each step, in [0, 1].
        reset_enabled: when True, a spike on step t zeroes the potential
            carried into step t+1.
        threshold: firing threshold (> 0).
        surrogate_width: half-width ``a`` of the rectangular
            pseudo-derivative window used in the backward pass (> 0).
    """

    leak: float = 0.3
    reset_enabled: bool = True
    threshold: float = 0.5
    surrogate_width: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.leak <= 1.0:
            raise ValueError(f"leak must be in [0, 1], got {self.leak}")
        if self.threshold <= 0.0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")
        if self.surrogate_width <= 0.0:
            raise ValueError(
                f"surrogate_width must be > 0, got {self.surrogate_width}"
            )


@dataclass
class MembraneState:
    """State carried between time steps: potentials and last emitted spikes.

    Both arrays share one shape, ``(..., width)``; leading axes (e.g. a
    batch axis) are broadcast through :func:`lif_step` unchanged.
    """

    potentials: np.ndarray
    last_spikes: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "MembraneState":
        return cls(
            potentials=np.zeros(shape, dtype=np.float64),
            last_spikes=np.zeros(shape, dtype=np.float64),
        )


def lif_step(state, input_current, cfg):
    """Advance one layer of LIF neurons by a single time step.

    Args:
        state: :class:`MembraneState` holding u and o from the previous step.
        input_current: synaptic drive, same shape as ``state.potentials``.
        cfg: :class:`NeuronConfig`.

    Returns:
        ``(new_state, spikes)`` where ``spikes`` is a {0, 1} float array.
        The returned state aliases nothing in the inputs.
    """
    current = np.asarray(input_current, dtype=np.float64)
    if current.shape != state.potentials.shape:
        raise ValueError(
            f"input current shape {current.shape} does not match layer "
            f"shape {state.potentials.shape}"
        )
    carry = cfg.leak * state.potentials
    if cfg.reset_enabled:
        carry = carry * (1.0 - state.last_spikes)
    potentials = carry + current
    spikes = (potentials >= cfg.threshold).astype(np.float64)
    return MembraneState(potentials, spikes), spikes


def surrogate_pseudo_derivative(u, cfg):
    """Rectangular stand-in for the spike nonlinearity's derivative.

    Returns ``1 / (2a)`` where ``|u - threshold| <= a`` and 0 elsewhere,
    so the window integrates to one. Accepts scalars or arrays.
    """
    u = np.asarray(u, dtype=np.float64)
    a = cfg.surrogate_width
    out = np.where(np.abs(u - cfg.threshold) <= a, 1.0 / (2.0 * a), 0.0)
    return float(out) if out.ndim == 0 else out
