"""Conditional sequence models p(z_t | z_<t, x) with analytic gradients.

Two backends share one interface:

* ``TabularModel``: a logit table indexed by (context class of x, previous
  token, next token).  Small enough for exact enumeration.
* ``GRUModel``: one-layer GRU encoder and one-layer GRU decoder with a shared
  embedding and a softmax output layer, backpropagated by hand.

Parameters are plain ``dict[str, np.ndarray]`` (float64).  Every model method
is batched; the single-example helpers wrap a batch of one.  The decoder's
first input is the reserved start index ``vocab_size``.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Params = dict

CHECKPOINT_VERSION = 1


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardTrace:
    """Activations recorded while a batch is decoded step by step.

    A GRU batch sampled with a trace can be differentiated without running the
    encoder and decoder again, provided the sampled tokens were fed back.
    """

    encoder: Optional[tuple] = None
    prev: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    logp: list = field(default_factory=list)


@dataclass
class DecoderState:
    hidden: np.ndarray
    step: int = 0
    trace: Optional[ForwardTrace] = None


@dataclass
class GradientBuffer:
    """Dense gradient accumulator congruent with a parameter dict."""

    grads: dict
    count: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "GradientBuffer":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def reset(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)
        self.count = 0

    def flat(self) -> np.ndarray:
        return flatten(self.grads)

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def merge(self, others) -> None:
        """Ordered, deterministic reduction of per-worker buffers into this one."""
        for other in others:
            if other.grads.keys() != self.grads.keys():
                raise ValueError("buffer shapes differ")
            for k, g in other.grads.items():
                self.grads[k] += g
            self.count += other.count


def flatten(arrays: dict) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays.values()])


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def _pad(seqs, fill: int):
    n = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), n), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        mask[i, :len(s)] = True
    return out, mask


class PolicyModel:
    """Shared single-example wrappers and teacher-forced log-likelihoods."""

    vocab_size: int
    t_max: int

    @property
    def start_token(self) -> int:
        return self.vocab_size

    def _check_tokens(self, seq, what):
        for tok in seq:
            if not 0 <= tok < self.vocab_size:
                raise ValueError(f"{what} token {tok} outside vocabulary of size {self.vocab_size}")

    def _decoder_io(self, zs):
        for z in zs:
            self._check_tokens(z, "target")
            if len(z) > self.t_max:
                raise ValueError(f"target length {len(z)} exceeds T_max={self.t_max}")
        targets, valid = _pad(zs, 0)
        prev = np.full_like(targets, self.start_token)
        prev[:, 1:] = targets[:, :-1]
        return prev, targets, valid

    def _coefficients(self, zs, masks, weights, valid):
        coef = np.zeros(valid.shape)
        for i, (z, m) in enumerate(zip(zs, masks)):
            m = np.asarray(m, dtype=bool)
            if m.shape != (len(z),):
                raise ValueError("mask length must equal target length")
            coef[i, :len(z)] = m * float(weights[i])
        return coef

    def new_trace(self) -> Optional[ForwardTrace]:
        """An empty trace for ``encode_batch``, or None if the backend keeps none."""
        return None

    # single-example API
    def encode(self, x, params: Params) -> DecoderState:
        return self.encode_batch([x], params)

    def step(self, state: DecoderState, prev_token: int, params: Params):
        logp, new = self.step_batch(state, np.array([prev_token]), params)
        return logp[0], new

    def sequence_log_likelihood(self, x, z, params: Params) -> float:
        return float(self.masked_loglik([x], [z], [np.ones(len(z), bool)], params)[0])

    def accumulate_masked_loglik_grad(self, x, z, mask, weight, params, buffer) -> float:
        return float(self.accumulate([x], [z], [mask], [weight], params, buffer)[0])

    def masked_loglik(self, xs, zs, masks, params: Params) -> np.ndarray:
        """Per-example sum over unmasked steps of log p(z_t | x, z_<t)."""
        if not zs:
            return np.zeros(0)
        prev, targets, valid = self._decoder_io(zs)
        coef = self._coefficients(zs, masks, np.ones(len(zs)), valid)
        state = self.encode_batch(xs, params)
        out = np.zeros(len(zs))
        rows = np.arange(len(zs))
        for t in range(targets.shape[1]):
            logp, state = self.step_batch(state, prev[:, t], params)
            out += coef[:, t] * logp[rows, targets[:, t]]
        return out


class TabularModel(PolicyModel):
    """Logit table over (context class, previous token, next token)."""

    backend = "tabular"

    def __init__(self, vocab_size: int, t_max: int, n_contexts: int = 1):
        self.vocab_size = vocab_size
        self.t_max = t_max
        self.n_contexts = n_contexts

    def config(self) -> dict:
        return {"backend": self.backend, "vocab_size": self.vocab_size,
                "t_max": self.t_max, "n_contexts": self.n_contexts}

    def context_of(self, x) -> int:
        if self.n_contexts == 1:
            return 0
        data = np.asarray(list(x), dtype=np.int64).tobytes()
        return zlib.crc32(data) % self.n_contexts

    def init_params(self, rng=None, scale: float = 0.0) -> Params:
        shape = (self.n_contexts, self.vocab_size + 1, self.vocab_size)
        if rng is None or scale == 0.0:
            return {"logits": np.zeros(shape)}
        return {"logits": rng.normal(0.0, scale, size=shape)}

    def encode_batch(self, xs, params: Params) -> DecoderState:
        return DecoderState(np.array([self.context_of(x) for x in xs], dtype=np.int64), 0)

    def step_batch(self, state: DecoderState, prev_tokens, params: Params):
        if state.step >= self.t_max:
            raise ValueError(f"cannot step past T_max={self.t_max}")
        rows = params["logits"][state.hidden, np.asarray(prev_tokens)]
        return log_softmax(rows), DecoderState(state.hidden, state.step + 1)

    def accumulate(self, xs, zs, masks, weights, params, buffer, trace=None) -> np.ndarray:
        """buffer += sum_i weight_i * sum_{t: mask_it} d/dtheta log p(z_it | x_i, z_i<t).

        Returns each example's unweighted masked log-likelihood.
        """
        prev, targets, valid = self._decoder_io(zs)
        coef = self._coefficients(zs, masks, weights, valid)
        ctx = self.encode_batch(xs, params).hidden
        out = np.zeros(len(zs))
        if targets.shape[1] == 0:
            return out
        c = np.broadcast_to(ctx[:, None], targets.shape)
        logp = log_softmax(params["logits"][c, prev])
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        mask_total = self._coefficients(zs, masks, np.ones(len(zs)), valid)
        out = (mask_total * np.where(valid, picked, 0.0)).sum(axis=1)
        if not np.any(coef):
            return out
        d = -np.exp(logp) * coef[..., None]
        np.put_along_axis(d, targets[..., None],
                          np.take_along_axis(d, targets[..., None], axis=-1) + coef[..., None], axis=-1)
        sel = coef != 0
        np.add.at(buffer.grads["logits"], (c[sel], prev[sel]), d[sel])
        return out


class GRUModel(PolicyModel):
    """Single-layer GRU encoder/decoder without attention.

    Cell (row-vector convention)::

        r = sig(x Wr + h Ur + br),  u = sig(x Wu + h Uu + bu)
        n = tanh(x Wn + (r * h) Un + bn),  h' = (1 - u) * n + u * h
    """

    backend = "gru"

    def __init__(self, vocab_size: int, t_max: int, emb_dim: int = 32, hidden_dim: int = 32):
        self.vocab_size = vocab_size
        self.t_max = t_max
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim

    def config(self) -> dict:
        return {"backend": self.backend, "vocab_size": self.vocab_size, "t_max": self.t_max,
                "emb_dim": self.emb_dim, "hidden_dim": self.hidden_dim}

    def shapes(self) -> dict:
        V, E, H = self.vocab_size, self.emb_dim, self.hidden_dim
        return {
            "emb": (V + 1, E),
            "enc_Wx": (E, 3 * H), "enc_Wh": (H, 3 * H), "enc_b": (3 * H,),
            "dec_Wx": (E, 3 * H), "dec_Wh": (H, 3 * H), "dec_b": (3 * H,),
            "out_W": (H, V), "out_b": (V,),
        }

    def init_params(self, rng, scale: float = 0.08) -> Params:
        return {k: rng.uniform(-scale, scale, size=s) for k, s in self.shapes().items()}

    # cell
    def _cell(self, e, h, Wx, Wh, b):
        H = self.hidden_dim
        a = e @ Wx + b
        hh = h @ Wh[:, :2 * H]
        r = sigmoid(a[:, :H] + hh[:, :H])
        u = sigmoid(a[:, H:2 * H] + hh[:, H:])
        rh = r * h
        n = np.tanh(a[:, 2 * H:] + rh @ Wh[:, 2 * H:])
        h_new = (1.0 - u) * n + u * h
        return h_new, (e, h, r, u, n, rh)

    def _cell_backward(self, dh_new, cache, Wx, Wh, gWx, gWh, gb):
        e, h, r, u, n, rh = cache
        H = self.hidden_dim
        dn = dh_new * (1.0 - u)
        du = dh_new * (h - n)
        dh = dh_new * u
        dan = dn * (1.0 - n * n)
        gWh[:, 2 * H:] += rh.T @ dan
        drh = dan @ Wh[:, 2 * H:].T
        dh += drh * r
        dar = drh * h * r * (1.0 - r)
        dau = du * u * (1.0 - u)
        dru = np.concatenate([dar, dau], axis=1)
        gWh[:, :2 * H] += h.T @ dru
        dh += dru @ Wh[:, :2 * H].T
        da = np.concatenate([dru, dan], axis=1)
        gWx += e.T @ da
        gb += da.sum(axis=0)
        de = da @ Wx.T
        return de, dh

    def _encode(self, xs, params, keep=False):
        for x in xs:
            if len(x) == 0:
                raise ValueError("input sequence is empty")
            self._check_tokens(x, "input")
        tokens, mask = _pad(xs, 0)
        h = np.zeros((len(xs), self.hidden_dim))
        caches = []
        for t in range(tokens.shape[1]):
            e = params["emb"][tokens[:, t]]
            h_new, cache = self._cell(e, h, params["enc_Wx"], params["enc_Wh"], params["enc_b"])
            m = mask[:, t:t + 1]
            if keep:
                caches.append(cache)
            h = np.where(m, h_new, h)
        return h, (tokens, mask, caches)

    def new_trace(self) -> ForwardTrace:
        return ForwardTrace()

    def encode_batch(self, xs, params: Params, trace: Optional[ForwardTrace] = None) -> DecoderState:
        h, enc = self._encode(xs, params, keep=trace is not None)
        if trace is not None:
            trace.encoder = enc
        return DecoderState(h, 0, trace)

    def step_batch(self, state: DecoderState, prev_tokens, params: Params):
        if state.step >= self.t_max:
            raise ValueError(f"cannot step past T_max={self.t_max}")
        prev = np.array(prev_tokens, dtype=np.int64)
        e = params["emb"][prev]
        h, cache = self._cell(e, state.hidden, params["dec_Wx"], params["dec_Wh"], params["dec_b"])
        logp = log_softmax(h @ params["out_W"] + params["out_b"])
        tr = state.trace
        if tr is not None:
            tr.prev.append(prev)
            tr.caches.append(cache)
            tr.hidden.append(h)
            tr.logp.append(logp)
        return logp, DecoderState(h, state.step + 1, tr)

    def _teacher_forced(self, xs, prev, params) -> ForwardTrace:
        trace = self.new_trace()
        state = self.encode_batch(xs, params, trace)
        for t in range(prev.shape[1]):
            _, state = self.step_batch(state, prev[:, t], params)
        return trace

    @staticmethod
    def _check_trace(trace: ForwardTrace, prev, valid) -> None:
        if len(trace.prev) < prev.shape[1] or trace.encoder is None:
            raise ValueError("trace is shorter than the targets")
        for t in range(prev.shape[1]):
            fed = trace.prev[t]
            if fed.shape != (len(prev),) or np.any((fed != prev[:, t]) & valid[:, t]):
                raise ValueError("trace was not recorded on these targets")

    def accumulate(self, xs, zs, masks, weights, params, buffer, trace=None) -> np.ndarray:
        """buffer += sum_i weight_i * sum_{t: mask_it} d/dtheta log p(z_it | x_i, z_i<t).

        Returns each example's unweighted masked log-likelihood.  ``trace``, if
        given, holds the forward activations of decoding ``zs`` from ``xs``
        with these parameters (as recorded by the SPG sampler).
        """
        prev, targets, valid = self._decoder_io(zs)
        coef = self._coefficients(zs, masks, weights, valid)
        mask_total = self._coefficients(zs, masks, np.ones(len(zs)), valid)
        B, T = targets.shape
        rows = np.arange(B)
        if trace is None:
            trace = self._teacher_forced(xs, prev, params)
        else:
            self._check_trace(trace, prev, valid)
        xtok, xmask, enc_caches = trace.encoder
        dec_caches, hs = trace.caches, trace.hidden
        out = np.zeros(B)
        for t in range(T):
            out += mask_total[:, t] * trace.logp[t][rows, targets[:, t]]
        if not np.any(coef):
            return out
        probs = [np.exp(trace.logp[t]) for t in range(T)]
        g = buffer.grads
        dh = np.zeros((B, self.hidden_dim))
        for t in reversed(range(T)):
            dlogits = -probs[t] * coef[:, t:t + 1]
            dlogits[rows, targets[:, t]] += coef[:, t]
            g["out_W"] += hs[t].T @ dlogits
            g["out_b"] += dlogits.sum(axis=0)
            dh = dh + dlogits @ params["out_W"].T
            de, dh = self._cell_backward(dh, dec_caches[t], params["dec_Wx"], params["dec_Wh"],
                                         g["dec_Wx"], g["dec_Wh"], g["dec_b"])
            np.add.at(g["emb"], prev[:, t], de)
        for t in reversed(range(xtok.shape[1])):
            m = xmask[:, t:t + 1]
            dh_cell = np.where(m, dh, 0.0)
            de, dh_prev = self._cell_backward(dh_cell, enc_caches[t], params["enc_Wx"], params["enc_Wh"],
                                              g["enc_Wx"], g["enc_Wh"], g["enc_b"])
            np.add.at(g["emb"], xtok[:, t], np.where(m, de, 0.0))
            dh = np.where(m, dh_prev, dh)
        return out


def finite_difference_check(model: PolicyModel, x, z, mask, params: Params,
                            epsilon: float = 1e-5, scale_floor: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients of
    the masked log-likelihood.

    Each coordinate's error is ``|a - n| / max(|a|, |n|, scale_floor)``; with a
    relative tolerance ``rtol`` this holds coordinates smaller than the floor
    to the absolute tolerance ``rtol * scale_floor`` (relative error is
    undefined at zero).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    buf = GradientBuffer.zeros_like(params)
    model.accumulate_masked_loglik_grad(x, z, mask, 1.0, params, buf)
    worst = 0.0
    for name, arr in params.items():
        analytic = buf.grads[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + epsilon
            fp = model.masked_loglik([x], [z], [mask], params)[0]
            arr[idx] = orig - epsilon
            fm = model.masked_loglik([x], [z], [mask], params)[0]
            arr[idx] = orig
            num = (fp - fm) / (2 * epsilon)
            scale = max(abs(analytic[idx]), abs(num), scale_floor)
            worst = max(worst, abs(analytic[idx] - num) / scale)
    return worst


def build_model(config: dict) -> PolicyModel:
    cfg = dict(config)
    backend = cfg.pop("backend")
    if backend == "gru":
        return GRUModel(**cfg)
    if backend == "tabular":
        return TabularModel(**cfg)
    raise ValueError(f"unknown backend {backend!r}")


def save_checkpoint(path, model: PolicyModel, params: Params, seed=None, extra=None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "model": model.config(), "seed": seed,
            "shapes": {k: list(v.shape) for k, v in params.items()}, "extra": extra or {}}
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Return ``(model, params, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"checkpoint array {k} has shape {params[k].shape}, header says {shape}")
    return build_model(meta["model"]), params, meta
