"""Stacked unidirectional LSTM with a softmax output layer.

All arrays are time-major: frames are ``(T, B, D)`` where ``B`` indexes the
parallel training streams.  The forward pass records an
:class:`ActivationTape` that :func:`net_backward` consumes; the backward pass
stops at the first frame of the tape, which is what truncates BPTT to the
unroll window.

Gates are ordered input, forget, output, candidate.  There are no peephole
connections.  Dropout (inverted, resampled every frame) touches only the
non-recurrent connections: the input of every layer and the top hidden
state feeding the output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ctc import NumericError, log_softmax


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    output_dim: int
    layers: int = 1
    cells: int = 32
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if min(self.input_dim, self.output_dim, self.layers, self.cells) < 1:
            raise ValueError("network dimensions must be positive")

    def layer_input(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.cells


def param_layout(config: NetworkConfig) -> dict[str, tuple[int, tuple[int, ...]]]:
    """Name -> (offset, shape) for every parameter block, in storage order."""
    layout = {}
    offset = 0
    H = config.cells

    def add(name, shape):
        nonlocal offset
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))

    for l in range(config.layers):
        add(f"lstm{l}.W", (4 * H, config.layer_input(l) + H))
        add(f"lstm{l}.b", (4 * H,))
    add("out.W", (config.output_dim, H))
    add("out.b", (config.output_dim,))
    return layout


class ParamVector:
    """Flat parameter array with named, reshaped views into it."""

    def __init__(self, config: NetworkConfig, data: np.ndarray | None = None):
        self.config = config
        self.index = param_layout(config)
        size = sum(int(np.prod(s)) for _, s in self.index.values())
        if data is None:
            data = np.zeros(size)
        if data.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {data.shape}")
        self.data = data

    def __len__(self):
        return self.data.size

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.index[name]
        return self.data[offset : offset + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.config, self.data.copy())


def init_params(config: NetworkConfig) -> ParamVector:
    """Uniform(-0.1, 0.1) weights, forget-gate biases 1, other biases 0."""
    rng = np.random.default_rng(config.seed)
    params = ParamVector(config)
    H = config.cells
    for name in params.index:
        block = params[name]
        if name.endswith(".W"):
            block[...] = rng.uniform(-0.1, 0.1, size=block.shape)
        elif name.startswith("lstm"):
            block[H : 2 * H] = 1.0
    return params


@dataclass
class RnnState:
    h: list[np.ndarray]
    c: list[np.ndarray]

    @classmethod
    def zeros(cls, config: NetworkConfig, batch: int = 1) -> "RnnState":
        shape = (batch, config.cells)
        return cls([np.zeros(shape) for _ in range(config.layers)], [np.zeros(shape) for _ in range(config.layers)])

    def copy(self) -> "RnnState":
        return RnnState([a.copy() for a in self.h], [a.copy() for a in self.c])

    def reset(self, streams) -> None:
        """Zero the state of the given stream indices."""
        for a in self.h + self.c:
            a[streams] = 0.0


@dataclass
class LayerTape:
    x: np.ndarray  # (T, B, in), after dropout
    h_prev: np.ndarray  # (T, B, H)
    gates: np.ndarray  # (T, B, 4H), activated
    c_prev: np.ndarray
    c: np.ndarray
    mask: np.ndarray | None  # dropout mask applied to x, pre-scaled


@dataclass
class ActivationTape:
    layers: list[LayerTape]
    top: np.ndarray  # (T, B, H) top hidden after dropout
    top_mask: np.ndarray | None
    logits: np.ndarray  # (T, B, K)
    log_y: np.ndarray = field(repr=False)
    resets: np.ndarray | None = None  # (T, B) state zeroed before the frame

    def __len__(self):
        return self.logits.shape[0]

    def slice(self, start: int, stop: int | None = None) -> "ActivationTape":
        s = slice(start, stop)

        def cut(a):
            return None if a is None else a[s]

        layers = [
            LayerTape(cut(t.x), cut(t.h_prev), cut(t.gates), cut(t.c_prev), cut(t.c), cut(t.mask))
            for t in self.layers
        ]
        return ActivationTape(
            layers, cut(self.top), cut(self.top_mask), cut(self.logits), cut(self.log_y), cut(self.resets)
        )

    @staticmethod
    def concat(first: "ActivationTape | None", second: "ActivationTape") -> "ActivationTape":
        if first is None or len(first) == 0:
            return second

        def cat(a, b):
            return None if a is None else np.concatenate([a, b])

        resets = None
        if first.resets is not None or second.resets is not None:
            resets = np.concatenate([
                np.zeros(first.logits.shape[:2], bool) if first.resets is None else first.resets,
                np.zeros(second.logits.shape[:2], bool) if second.resets is None else second.resets,
            ])

        layers = [
            LayerTape(*(cat(getattr(a, f), getattr(b, f)) for f in ("x", "h_prev", "gates", "c_prev", "c", "mask")))
            for a, b in zip(first.layers, second.layers)
        ]
        return ActivationTape(
            layers,
            cat(first.top, second.top),
            cat(first.top_mask, second.top_mask),
            cat(first.logits, second.logits),
            cat(first.log_y, second.log_y),
            resets,
        )


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def net_forward(
    params: ParamVector,
    frames: np.ndarray,
    state: RnnState,
    dropout_on: bool = False,
    rng: np.random.Generator | None = None,
    resets: np.ndarray | None = None,
) -> tuple[ActivationTape, RnnState]:
    """Run a window of frames ``(T, B, D)`` from ``state``.

    ``resets[t, b]`` zeroes the state of stream ``b`` just before frame ``t``.
    Returns the tape and the state after the last frame; ``state`` is not
    modified.
    """
    cfg = params.config
    if frames.ndim != 3 or frames.shape[2] != cfg.input_dim:
        raise ValueError(f"frames must be (T, B, {cfg.input_dim}), got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise NumericError("non-finite input frames")
    use_dropout = dropout_on and cfg.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout needs a random generator")
    T, B, _ = frames.shape
    H = cfg.cells
    if resets is not None and resets.shape != (T, B):
        raise ValueError("resets must be (T, B)")
    x = frames
    layers = []
    new_h, new_c = [], []
    for l in range(cfg.layers):
        W = params[f"lstm{l}.W"]
        n_in = cfg.layer_input(l)
        mask = None
        if use_dropout:
            mask = _dropout_mask(rng, x.shape, cfg.dropout)
            x = x * mask
        zx = x @ W[:, :n_in].T + params[f"lstm{l}.b"]
        Wh_T = W[:, n_in:].T
        gates = np.empty((T, B, 4 * H))
        h_prev = np.empty((T, B, H))
        c_prev = np.empty((T, B, H))
        cs = np.empty((T, B, H))
        hs = np.empty((T, B, H))
        h, c = state.h[l], state.c[l]
        for t in range(T):
            if resets is not None and resets[t].any():
                keep = ~resets[t][:, None]
                h, c = h * keep, c * keep
            h_prev[t] = h
            c_prev[t] = c
            z = zx[t] + h @ Wh_T
            g = gates[t]
            g[:, : 3 * H] = _sigmoid(z[:, : 3 * H])
            g[:, 3 * H :] = np.tanh(z[:, 3 * H :])
            c = g[:, H : 2 * H] * c + g[:, :H] * g[:, 3 * H :]
            h = g[:, 2 * H : 3 * H] * np.tanh(c)
            cs[t] = c
            hs[t] = h
        layers.append(LayerTape(x, h_prev, gates, c_prev, cs, mask))
        new_h.append(h.copy())
        new_c.append(c.copy())
        x = hs
    top_mask = None
    if use_dropout:
        top_mask = _dropout_mask(rng, x.shape, cfg.dropout)
        x = x * top_mask
    logits = x @ params["out.W"].T + params["out.b"]
    tape = ActivationTape(layers, x, top_mask, logits, log_softmax(logits), resets)
    return tape, RnnState(new_h, new_c)


def _per_stream_outer(d: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum_t d[t, b]^T x[t, b] for every stream b -> (B, dim_d, dim_x)."""
    return np.matmul(d.transpose(1, 2, 0), x.transpose(1, 0, 2))


def net_backward(params: ParamVector, tape: ActivationTape, errors: np.ndarray) -> np.ndarray:
    """Per-stream parameter gradients, shape ``(B, len(params))``.

    ``errors`` are the loss gradients w.r.t. the softmax inputs, aligned with
    the tape.  No error enters at the end of the tape through the recurrence,
    and none leaves through its first frame.
    """
    cfg = params.config
    if errors.shape != tape.logits.shape:
        raise ValueError(f"errors {errors.shape} do not match tape {tape.logits.shape}")
    T, B, _ = errors.shape
    H = cfg.cells
    grads = np.zeros((B, len(params)))

    def put(name, value):
        offset, shape = params.index[name]
        grads[:, offset : offset + int(np.prod(shape))] = value.reshape(B, -1)

    put("out.W", _per_stream_outer(errors, tape.top))
    put("out.b", errors.sum(axis=0))
    d_above = errors @ params["out.W"]
    if tape.top_mask is not None:
        d_above = d_above * tape.top_mask
    for l in range(cfg.layers - 1, -1, -1):
        lt = tape.layers[l]
        W = params[f"lstm{l}.W"]
        n_in = cfg.layer_input(l)
        Wh = W[:, n_in:]
        dz = np.empty((T, B, 4 * H))
        dh_rec = np.zeros((B, H))
        dc_rec = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            g = lt.gates[t]
            i, f, o, cand = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
            tc = np.tanh(lt.c[t])
            dh = d_above[t] + dh_rec
            dc = dc_rec + dh * o * (1.0 - tc * tc)
            d = dz[t]
            d[:, :H] = dc * cand * i * (1.0 - i)
            d[:, H : 2 * H] = dc * lt.c_prev[t] * f * (1.0 - f)
            d[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
            d[:, 3 * H :] = dc * i * (1.0 - cand * cand)
            dh_rec = d @ Wh
            dc_rec = dc * f
            if tape.resets is not None and tape.resets[t].any():
                keep = ~tape.resets[t][:, None]
                dh_rec, dc_rec = dh_rec * keep, dc_rec * keep
        put(f"lstm{l}.W", np.concatenate([_per_stream_outer(dz, lt.x), _per_stream_outer(dz, lt.h_prev)], axis=2))
        put(f"lstm{l}.b", dz.sum(axis=0))
        if l > 0:
            d_above = dz @ W[:, :n_in]
            if lt.mask is not None:
                d_above = d_above * lt.mask
    return grads
