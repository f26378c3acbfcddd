"""Recurrent language-model families with per-word recurrence tensors.

One unified cell covers the simple family: with K = 1 the tensor model is
exactly the plain recurrent net (one shared recurrence matrix), and with
K = V and the identity policy it is the full tensor net with one dedicated
matrix per word. The gated families (GRU, LSTM) slice only the candidate
state recurrence and its bias; every other gate keeps a single shared
matrix.

Conventions:
  - the embedding matrix is (E, V) and applying it to a one-hot input is a
    column lookup, never a dense product; the simple family requires E = H
    because the lookup feeds the pre-activation directly
  - token ids equal rank - 1 (see corpus), so a word's tensor slice is the
    mapping policy applied to id + 1
  - the step consuming input w_t predicts w_{t+1}
  - states and activations are batched row-wise: (batch, H)

All arithmetic is float64. Gradients are computed by truncated
backpropagation through time over one chunk, exact with respect to the
chunk's summed loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import prod

import numpy as np

from .corpus import SequenceChunk
from .linalg import Rng, dropout_mask, sample_gaussian, sample_uniform, softmax
from .mapping import MappingPolicy, slice_assignments, slice_for_rank

FAMILIES = ("rrntn", "mrnn", "gru", "lstm")
GATED = ("gru", "lstm")


class DivergenceError(RuntimeError):
    """Raised when a loss or an update stops being finite."""

    def __init__(self, message: str, *, timestep: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.timestep = timestep
        self.epoch = epoch


@dataclass(frozen=True)
class ModelSpec:
    """Architecture family member plus its dimensions and mapping policy."""

    family: str
    v: int
    h: int
    e: int | None = None
    k: int = 1
    policy: str = "f"
    factor: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.v < 1 or self.h < 1:
            raise ValueError("V and H must be positive")
        if self.e is None:
            object.__setattr__(self, "e", self.h)
        if self.family in ("rrntn", "mrnn") and self.e != self.h:
            raise ValueError("the simple family adds the embedding straight into the "
                             "pre-activation, so E must equal H")
        if not 1 <= self.k <= self.v:
            raise ValueError(f"K must lie in [1, V]; got K={self.k}, V={self.v}")
        if self.family == "mrnn":
            if self.factor < 1:
                raise ValueError("m-RNN needs a positive factor size")
            if self.k != 1:
                raise ValueError("m-RNN does not use recurrence slices; leave K = 1")
        self.mapping_policy().validate_for(self.v)

    def mapping_policy(self) -> MappingPolicy:
        return MappingPolicy.from_name(self.policy, self.k)

    @property
    def is_gated(self) -> bool:
        return self.family in GATED


@dataclass(frozen=True)
class InitScheme:
    """How to draw initial weights; biases follow the same draw unless zeroed."""

    kind: str  # gaussian | uniform
    stddev: float = 0.001
    lo: float = -0.05
    hi: float = 0.05
    bias: str = "same"  # same | zero

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.bias not in ("same", "zero"):
            raise ValueError("bias mode must be 'same' or 'zero'")

    @classmethod
    def gaussian(cls, stddev: float, bias: str = "same") -> "InitScheme":
        return cls(kind="gaussian", stddev=stddev, bias=bias)

    @classmethod
    def uniform(cls, lo: float, hi: float, bias: str = "same") -> "InitScheme":
        return cls(kind="uniform", lo=lo, hi=hi, bias=bias)


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Trainable arrays in their canonical (checkpoint) order."""
    v, e, h, k = spec.v, spec.e, spec.h, spec.k
    shapes: dict[str, tuple[int, ...]] = {"w_emb": (e, v)}
    if spec.family == "rrntn":
        shapes["u_slices"] = (k, h, h)
        shapes["b_slices"] = (k, h)
    elif spec.family == "mrnn":
        f = spec.factor
        shapes["u_left"] = (h, f)
        shapes["u_right"] = (f, h)
        shapes["v_factors"] = (f, v)
        shapes["b_h"] = (h,)
    elif spec.family == "gru":
        for gate in ("reset", "update"):
            shapes[f"w_{gate}"] = (h, e)
            shapes[f"u_{gate}"] = (h, h)
            shapes[f"b_{gate}"] = (h,)
        shapes["w_cand"] = (h, e)
        shapes["u_cand_slices"] = (k, h, h)
        shapes["b_cand_slices"] = (k, h)
    else:  # lstm
        for gate in ("forget", "input", "outgate"):
            shapes[f"w_{gate}"] = (h, e)
            shapes[f"u_{gate}"] = (h, h)
            shapes[f"b_{gate}"] = (h,)
        shapes["w_cand"] = (h, e)
        shapes["u_cand_slices"] = (k, h, h)
        shapes["b_cand_slices"] = (k, h)
    shapes["w_out"] = (v, h)
    shapes["b_out"] = (v,)
    return shapes


def param_count(spec: ModelSpec) -> int:
    """Exact number of trainable scalars, per-slice biases included."""
    return sum(prod(s) for s in param_shapes(spec).values())


def param_count_formula(spec: ModelSpec) -> str:
    """The closed form behind param_count, printed alongside every count."""
    v, e, h, k = spec.v, spec.e, spec.h, spec.k
    if spec.family == "rrntn":
        return f"2*V*H + K*H^2 + K*H + V  (V={v}, H={h}, K={k})"
    if spec.family == "mrnn":
        return f"2*V*H + F*V + 2*H*F + H + V  (V={v}, H={h}, F={spec.factor})"
    gates = 2 if spec.family == "gru" else 3
    return (
        f"E*V + {gates + 1}*H*E + {gates}*(H^2 + H) + K*(H^2 + H) + V*H + V"
        f"  (V={v}, E={e}, H={h}, K={k})"
    )


def init_params(spec: ModelSpec, init: InitScheme, rng: Rng) -> dict[str, np.ndarray]:
    """Draw all parameter arrays in canonical order from one stream."""
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        n = prod(shape)
        if name.startswith("b_") and init.bias == "zero":
            params[name] = np.zeros(shape)
        elif init.kind == "gaussian":
            params[name] = sample_gaussian(rng, 0.0, init.stddev, n).reshape(shape)
        else:
            params[name] = sample_uniform(rng, init.lo, init.hi, n).reshape(shape)
    return params


def zero_state(spec: ModelSpec, batch: int) -> tuple[np.ndarray, ...]:
    if spec.family == "lstm":
        return np.zeros((batch, spec.h)), np.zeros((batch, spec.h))
    return (np.zeros((batch, spec.h)),)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


@lru_cache(maxsize=32)
def _slice_table(spec: ModelSpec) -> np.ndarray:
    return slice_assignments(spec.v, spec.mapping_policy())


def _slices(spec: ModelSpec, x_ids: np.ndarray, slices: np.ndarray | None) -> np.ndarray:
    if slices is not None:
        return slices
    return np.asarray(slice_for_rank(spec.mapping_policy(), x_ids + 1), dtype=np.int64)


def _slice_matvec(u_slices: np.ndarray, s: np.ndarray, x: np.ndarray) -> np.ndarray:
    # One dgemv per lane; lanes may select different slices.
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        out[b] = u_slices[s[b]] @ x[b]
    return out


def _slice_matvec_t(u_slices: np.ndarray, s: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        out[b] = u_slices[s[b]].T @ x[b]
    return out


def rrntn_step(params, spec, x_ids, h_prev, slices=None):
    """One step of the tensor recurrence: logistic(emb + U[slice] h + b[slice]).

    K = 1 reduces to the plain recurrent cell; K = V with the identity policy
    is the full per-word tensor.
    """
    x_ids = np.atleast_1d(np.asarray(x_ids, dtype=np.int64))
    s = _slices(spec, x_ids, slices)
    emb = params["w_emb"][:, x_ids].T
    rec = _slice_matvec(params["u_slices"], s, h_prev)
    h = _sigmoid(emb + rec + params["b_slices"][s])
    return h, {"x": x_ids, "s": s, "h_prev": h_prev, "h": h}


def mrnn_step(params, spec, x_ids, h_prev):
    """One multiplicative step: the per-word recurrence is factored as
    U_left diag(v_word) U_right."""
    x_ids = np.atleast_1d(np.asarray(x_ids, dtype=np.int64))
    emb = params["w_emb"][:, x_ids].T
    q = h_prev @ params["u_right"].T
    vx = params["v_factors"][:, x_ids].T
    r = vx * q
    h = _sigmoid(emb + r @ params["u_left"].T + params["b_h"])
    return h, {"x": x_ids, "h_prev": h_prev, "q": q, "vx": vx, "r": r, "h": h}


def gru_step(params, spec, x_ids, h_prev, emb_mask=None, slices=None):
    """One gated step; only the candidate-state recurrence is sliced.

    emb_mask is the dropout mask applied to the embedding output during
    training (all ones / None at evaluation time).
    """
    x_ids = np.atleast_1d(np.asarray(x_ids, dtype=np.int64))
    s = _slices(spec, x_ids, slices)
    x_in = params["w_emb"][:, x_ids].T
    if emb_mask is not None:
        x_in = x_in * emb_mask
    r = _sigmoid(x_in @ params["w_reset"].T + h_prev @ params["u_reset"].T + params["b_reset"])
    z = _sigmoid(x_in @ params["w_update"].T + h_prev @ params["u_update"].T + params["b_update"])
    rh = r * h_prev
    hh = np.tanh(x_in @ params["w_cand"].T + _slice_matvec(params["u_cand_slices"], s, rh)
                 + params["b_cand_slices"][s])
    h = z * h_prev + (1.0 - z) * hh
    return h, {"x": x_ids, "s": s, "h_prev": h_prev, "x_in": x_in,
               "emb_mask": emb_mask, "r": r, "z": z, "hh": hh, "h": h}


def lstm_step(params, spec, x_ids, h_prev, c_prev, emb_mask=None, slices=None):
    """One LSTM step; only the candidate-cell recurrence is sliced."""
    x_ids = np.atleast_1d(np.asarray(x_ids, dtype=np.int64))
    s = _slices(spec, x_ids, slices)
    x_in = params["w_emb"][:, x_ids].T
    if emb_mask is not None:
        x_in = x_in * emb_mask
    f = _sigmoid(x_in @ params["w_forget"].T + h_prev @ params["u_forget"].T + params["b_forget"])
    i = _sigmoid(x_in @ params["w_input"].T + h_prev @ params["u_input"].T + params["b_input"])
    o = _sigmoid(x_in @ params["w_outgate"].T + h_prev @ params["u_outgate"].T + params["b_outgate"])
    cc = np.tanh(x_in @ params["w_cand"].T + _slice_matvec(params["u_cand_slices"], s, h_prev)
                 + params["b_cand_slices"][s])
    c = i * cc + f * c_prev
    h = o * np.tanh(c)
    return h, c, {"x": x_ids, "s": s, "h_prev": h_prev, "c_prev": c_prev, "x_in": x_in,
                  "emb_mask": emb_mask, "f": f, "i": i, "o": o, "cc": cc, "c": c, "h": h}


def output_distribution(params, h_t, dropout_mask=None):
    """Softmax over the vocabulary from a hidden state (mask applied first)."""
    hd = h_t if dropout_mask is None else h_t * dropout_mask
    return softmax(hd @ params["w_out"].T + params["b_out"])


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one chunk's forward pass."""

    spec: ModelSpec
    inputs: np.ndarray
    targets: np.ndarray
    reset_before: bool
    state_in: tuple[np.ndarray, ...]
    steps: list[dict] = field(default_factory=list)
    out_masks: list = field(default_factory=list)  # per-step (B, H) or None
    probs: list = field(default_factory=list)  # per-step (B, V)
    loss_sum: float = 0.0
    token_count: int = 0

    def replay_loss(self) -> float:
        """Recompute the summed loss from the cached distributions; equals
        loss_sum exactly because the accumulation order is identical."""
        total = 0.0
        b_idx = np.arange(self.inputs.shape[0])
        for t, p in enumerate(self.probs):
            total += float(np.sum(-np.log(p[b_idx, self.targets[:, t]])))
        return total

    def step_losses(self) -> np.ndarray:
        b_idx = np.arange(self.inputs.shape[0])
        return np.array([
            np.sum(-np.log(p[b_idx, self.targets[:, t]])) for t, p in enumerate(self.probs)
        ])


def forward_chunk(
    params,
    spec: ModelSpec,
    chunk: SequenceChunk,
    state_in=None,
    mode: str = "eval",
    rng: Rng | None = None,
    p_drop: float = 0.0,
):
    """Run one chunk and return (loss_sum, token_count, cache, state_out).

    loss_sum is the summed negative log-likelihood of the chunk's targets.
    The incoming state is zeroed when the chunk asks for a reset. In train
    mode with p_drop > 0, dropout masks are drawn from rng per timestep:
    the simple family masks only the hidden state entering the output layer,
    the gated families mask the embedding output as well; recurrent
    connections are never masked.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    b, t_len = chunk.inputs.shape
    if t_len == 0:
        raise ValueError("chunk is empty")
    if state_in is None or chunk.reset_before:
        state_in = zero_state(spec, b)
    dropping = mode == "train" and p_drop > 0.0
    if dropping and rng is None:
        raise ValueError("train-mode dropout needs an rng")

    table = _slice_table(spec)
    cache = ForwardCache(spec=spec, inputs=chunk.inputs, targets=chunk.targets,
                         reset_before=chunk.reset_before, state_in=state_in)
    state = state_in
    b_idx = np.arange(b)
    for t in range(t_len):
        ids = chunk.inputs[:, t]
        s = table[ids]
        emb_mask = None
        if dropping and spec.is_gated:
            emb_mask = dropout_mask(rng, b * spec.e, p_drop).reshape(b, spec.e)
        if spec.family == "rrntn":
            h, entry = rrntn_step(params, spec, ids, state[0], slices=s)
            state = (h,)
        elif spec.family == "mrnn":
            h, entry = mrnn_step(params, spec, ids, state[0])
            state = (h,)
        elif spec.family == "gru":
            h, entry = gru_step(params, spec, ids, state[0], emb_mask=emb_mask, slices=s)
            state = (h,)
        else:
            h, c, entry = lstm_step(params, spec, ids, state[0], state[1],
                                    emb_mask=emb_mask, slices=s)
            state = (h, c)
        out_mask = dropout_mask(rng, b * spec.h, p_drop).reshape(b, spec.h) if dropping else None
        p = output_distribution(params, h, out_mask)
        step_loss = float(np.sum(-np.log(p[b_idx, chunk.targets[:, t]])))
        if not np.isfinite(step_loss):
            raise DivergenceError(f"non-finite loss at timestep {t}", timestep=t)
        cache.steps.append(entry)
        cache.out_masks.append(out_mask)
        cache.probs.append(p)
        cache.loss_sum += step_loss
    cache.token_count = b * t_len
    return cache.loss_sum, cache.token_count, cache, state


def zero_gradients(spec: ModelSpec) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(spec).items()}


def backward_chunk(params, spec: ModelSpec, cache: ForwardCache, state_grad_in=None):
    """Exact gradients of the chunk's summed loss, truncated at the chunk start.

    state_grad_in is the gradient flowing into the chunk's final state from
    later computation; pass None (zero) for truncated training. Returns
    (gradients, state_grad_out) where state_grad_out is the gradient with
    respect to the chunk's incoming state. Recurrence-slice gradients only
    accumulate into slices selected during the forward pass.
    """
    b, t_len = cache.inputs.shape
    grads = zero_gradients(spec)

    # Output layer, vectorized across all timesteps.
    hd = np.stack([
        entry["h"] if mask is None else entry["h"] * mask
        for entry, mask in zip(cache.steps, cache.out_masks)
    ])  # (T, B, H)
    dlogits = np.stack(cache.probs)  # (T, B, V)
    t_idx = np.arange(t_len)[:, None]
    b_idx = np.arange(b)[None, :]
    dlogits[t_idx, b_idx, cache.targets.T] -= 1.0
    flat_dl = dlogits.reshape(t_len * b, spec.v)
    grads["w_out"] += flat_dl.T @ hd.reshape(t_len * b, spec.h)
    grads["b_out"] += flat_dl.sum(axis=0)
    dh_out = (flat_dl @ params["w_out"]).reshape(t_len, b, spec.h)
    for t in range(t_len):
        if cache.out_masks[t] is not None:
            dh_out[t] *= cache.out_masks[t]

    if state_grad_in is None:
        dh_next = np.zeros((b, spec.h))
        dc_next = np.zeros((b, spec.h))
    else:
        dh_next = state_grad_in[0].copy()
        dc_next = state_grad_in[1].copy() if len(state_grad_in) > 1 else np.zeros((b, spec.h))

    for t in reversed(range(t_len)):
        entry = cache.steps[t]
        dh = dh_out[t] + dh_next
        if spec.family == "rrntn":
            dh_next = _rrntn_backward(params, grads, entry, dh)
        elif spec.family == "mrnn":
            dh_next = _mrnn_backward(params, grads, entry, dh)
        elif spec.family == "gru":
            dh_next = _gru_backward(params, grads, entry, dh)
        else:
            dh_next, dc_next = _lstm_backward(params, grads, entry, dh, dc_next)

    if spec.family == "lstm":
        return grads, (dh_next, dc_next)
    return grads, (dh_next,)


def _scatter_emb(g_emb: np.ndarray, x_ids: np.ndarray, d: np.ndarray) -> None:
    np.add.at(g_emb, (slice(None), x_ids), d.T)


def _rrntn_backward(params, grads, entry, dh):
    h, h_prev, s, x = entry["h"], entry["h_prev"], entry["s"], entry["x"]
    dz = dh * h * (1.0 - h)
    _scatter_emb(grads["w_emb"], x, dz)
    u = params["u_slices"]
    gu, gb = grads["u_slices"], grads["b_slices"]
    dh_prev = np.empty_like(dh)
    for i in range(dz.shape[0]):
        gu[s[i]] += np.outer(dz[i], h_prev[i])
        gb[s[i]] += dz[i]
        dh_prev[i] = u[s[i]].T @ dz[i]
    return dh_prev


def _mrnn_backward(params, grads, entry, dh):
    h, h_prev, q, vx, r, x = (entry["h"], entry["h_prev"], entry["q"],
                              entry["vx"], entry["r"], entry["x"])
    dz = dh * h * (1.0 - h)
    _scatter_emb(grads["w_emb"], x, dz)
    grads["b_h"] += dz.sum(axis=0)
    grads["u_left"] += dz.T @ r
    dr = dz @ params["u_left"]
    np.add.at(grads["v_factors"], (slice(None), x), (dr * q).T)
    dq = dr * vx
    grads["u_right"] += dq.T @ h_prev
    return dq @ params["u_right"]


def _gru_backward(params, grads, entry, dh):
    h_prev, x_in, r, z, hh = entry["h_prev"], entry["x_in"], entry["r"], entry["z"], entry["hh"]
    s, x, emb_mask = entry["s"], entry["x"], entry["emb_mask"]
    dz_gate = dh * (h_prev - hh) * z * (1.0 - z)
    dhh_pre = dh * (1.0 - z) * (1.0 - hh * hh)
    dh_prev = dh * z

    rh = r * h_prev
    uc = params["u_cand_slices"]
    guc, gbc = grads["u_cand_slices"], grads["b_cand_slices"]
    d_rh = np.empty_like(dh)
    for i in range(dh.shape[0]):
        guc[s[i]] += np.outer(dhh_pre[i], rh[i])
        gbc[s[i]] += dhh_pre[i]
        d_rh[i] = uc[s[i]].T @ dhh_pre[i]
    dr = d_rh * h_prev
    dh_prev += d_rh * r
    dr_pre = dr * r * (1.0 - r)

    grads["w_reset"] += dr_pre.T @ x_in
    grads["u_reset"] += dr_pre.T @ h_prev
    grads["b_reset"] += dr_pre.sum(axis=0)
    grads["w_update"] += dz_gate.T @ x_in
    grads["u_update"] += dz_gate.T @ h_prev
    grads["b_update"] += dz_gate.sum(axis=0)
    grads["w_cand"] += dhh_pre.T @ x_in
    dh_prev += dr_pre @ params["u_reset"] + dz_gate @ params["u_update"]

    dx_in = dr_pre @ params["w_reset"] + dz_gate @ params["w_update"] + dhh_pre @ params["w_cand"]
    if emb_mask is not None:
        dx_in = dx_in * emb_mask
    _scatter_emb(grads["w_emb"], x, dx_in)
    return dh_prev


def _lstm_backward(params, grads, entry, dh, dc_next):
    h_prev, c_prev, x_in = entry["h_prev"], entry["c_prev"], entry["x_in"]
    f, i, o, cc, c = entry["f"], entry["i"], entry["o"], entry["cc"], entry["c"]
    s, x, emb_mask = entry["s"], entry["x"], entry["emb_mask"]

    tanh_c = np.tanh(c)
    dc = dc_next + dh * o * (1.0 - tanh_c * tanh_c)
    do_pre = dh * tanh_c * o * (1.0 - o)
    df_pre = dc * c_prev * f * (1.0 - f)
    di_pre = dc * cc * i * (1.0 - i)
    dcc_pre = dc * i * (1.0 - cc * cc)
    dc_prev = dc * f

    uc = params["u_cand_slices"]
    guc, gbc = grads["u_cand_slices"], grads["b_cand_slices"]
    dh_prev = np.empty_like(dh)
    for j in range(dh.shape[0]):
        guc[s[j]] += np.outer(dcc_pre[j], h_prev[j])
        gbc[s[j]] += dcc_pre[j]
        dh_prev[j] = uc[s[j]].T @ dcc_pre[j]

    for name, dpre in (("forget", df_pre), ("input", di_pre), ("outgate", do_pre)):
        grads[f"w_{name}"] += dpre.T @ x_in
        grads[f"u_{name}"] += dpre.T @ h_prev
        grads[f"b_{name}"] += dpre.sum(axis=0)
        dh_prev += dpre @ params[f"u_{name}"]
    grads["w_cand"] += dcc_pre.T @ x_in

    dx_in = (df_pre @ params["w_forget"] + di_pre @ params["w_input"]
             + do_pre @ params["w_outgate"] + dcc_pre @ params["w_cand"])
    if emb_mask is not None:
        dx_in = dx_in * emb_mask
    _scatter_emb(grads["w_emb"], x, dx_in)
    return dh_prev, dc_prev
