"""Residual MLP denoiser with hand-written forward/backward passes.

Architecture: a linear lift of [inputs, sinusoidal time features] to the
hidden width, ``depth`` residual blocks u <- u + gelu(u W + b), and a linear
head.  The final layer is zero-initialized, so a fresh network predicts 0
(or, with preconditioning on, exactly c_skip(t) * x).

Two operating modes:

* raw: inputs standardized by fixed (mean, std), time fed directly to the
  sinusoidal features, network output is the denoiser value;
* preconditioned: m(t, x) = c_skip(t) x + c_out(t) F(c_in(t) x + s_in, sigma(t)).

Parameters live in one flat array (``theta``) with named views in
``params``, so the optimizer can treat the whole model as a single vector.
The backward pass returns exact analytic gradients for any upstream dL/dm;
gradient correctness is checked against central finite differences in the
test suite.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
from scipy import special

from binflow.losses import EPS_CIN, EPS_NOISE, _precond_arrays

__all__ = ["MlpDenoiser", "ema_update", "save_model", "load_model", "CheckpointError"]

_MAGIC = b"BNFW"
_VERSION = 1
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class CheckpointError(IOError):
    """Checkpoint file rejected: bad magic, checksum, version or shape."""


class MlpDenoiser:
    """Denoiser network; callable as ``model(t, x)``.

    Parameters
    ----------
    input_dim : int
        Number of count coordinates d.
    width, depth : int
        Hidden width and number of residual blocks.
    time_dim : int
        Sinusoidal feature count (even); frequencies are geometrically
        spaced in [freq_min, freq_max].
    standardize : (mean, std) or None
        Fixed affine input scaling for the raw path.
    precond : dict or None
        {"mu_data": m, "sigma2_data": v, "eps_cin": ..., "eps_noise": ...};
        enables the preconditioned parameterization.
    seed : int
        Weight initialization seed (final layer starts at zero).
    dtype : numpy dtype
        float64 by default; float32 roughly halves CPU training time.
    """

    def __init__(
        self,
        input_dim: int = 1,
        width: int = 256,
        depth: int = 3,
        time_dim: int = 128,
        freq_min: float = 1.0,
        freq_max: float = 1e4,
        standardize=None,
        precond=None,
        seed: int = 0,
        dtype=np.float64,
    ):
        if time_dim % 2:
            raise ValueError("time_dim must be even")
        if precond is not None and precond.get("sigma2_data", 1.0) <= 0:
            raise ValueError("precond sigma2_data must be > 0")
        self.input_dim = int(input_dim)
        self.width = int(width)
        self.depth = int(depth)
        self.time_dim = int(time_dim)
        self.freq_min = float(freq_min)
        self.freq_max = float(freq_max)
        self.standardize = None if standardize is None else (
            float(standardize[0]), float(standardize[1]))
        self.precond = None if precond is None else {
            "mu_data": float(precond["mu_data"]),
            "sigma2_data": float(precond["sigma2_data"]),
            "eps_cin": float(precond.get("eps_cin", EPS_CIN)),
            "eps_noise": float(precond.get("eps_noise", EPS_NOISE)),
        }
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.freqs = np.geomspace(self.freq_min, self.freq_max, self.time_dim // 2).astype(
            self.dtype)
        self._layout = self._build_layout()
        self.theta = np.zeros(self._layout[-1][3] + self._layout[-1][2], dtype=self.dtype)
        self.params = self._views(self.theta)
        self._init_params(np.random.default_rng(seed))

    def _build_layout(self):
        d_feat = self.input_dim + self.time_dim
        spec = [("w_in", (d_feat, self.width)), ("b_in", (self.width,))]
        for k in range(self.depth):
            spec += [(f"w_res{k}", (self.width, self.width)), (f"b_res{k}", (self.width,))]
        spec += [("w_out", (self.width, self.input_dim)), ("b_out", (self.input_dim,))]
        layout = []
        offset = 0
        for name, shape in spec:
            size = int(np.prod(shape))
            layout.append((name, shape, size, offset))
            offset += size
        return layout

    def _views(self, flat):
        return {
            name: flat[off:off + size].reshape(shape)
            for name, shape, size, off in self._layout
        }

    def _init_params(self, rng):
        d_feat = self.input_dim + self.time_dim
        self.params["w_in"][:] = rng.normal(0.0, 1.0, (d_feat, self.width)) / np.sqrt(d_feat)
        for k in range(self.depth):
            self.params[f"w_res{k}"][:] = rng.normal(
                0.0, 1.0, (self.width, self.width)) / np.sqrt(self.width)
        # biases and the output head stay zero

    def copy(self, params=None) -> "MlpDenoiser":
        clone = MlpDenoiser(
            input_dim=self.input_dim,
            width=self.width,
            depth=self.depth,
            time_dim=self.time_dim,
            freq_min=self.freq_min,
            freq_max=self.freq_max,
            standardize=self.standardize,
            precond=self.precond,
            seed=self.seed,
            dtype=self.dtype,
        )
        if params is None:
            clone.theta[:] = self.theta
        elif isinstance(params, np.ndarray):
            clone.theta[:] = params
        else:
            for name, arr in params.items():
                clone.params[name][:] = arr
        return clone

    # -- forward / backward --------------------------------------------------

    def _prepare(self, t, x):
        x = np.asarray(x, dtype=self.dtype)
        scalar_in = x.ndim == 0
        if scalar_in:
            x = x.reshape(1, 1)
        elif x.ndim == 1:
            x = x[:, None] if self.input_dim == 1 else x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"x has {x.shape[1]} coordinates, model expects {self.input_dim}")
        t = np.broadcast_to(np.asarray(t, dtype=self.dtype), (x.shape[0],))
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("t must lie in [0, 1]")
        if not np.all(np.isfinite(x)):
            raise ValueError("x must be finite")
        return t, x, scalar_in

    def forward(self, t, x, params=None, with_cache=False):
        """Denoiser value m(t, x) for a batch; optionally keep the cache."""
        params = self.params if params is None else params
        t, x, scalar_in = self._prepare(t, x)
        if self.precond is not None:
            pc = self.precond
            c_in, c_skip, c_out, _ = _precond_arrays(
                t.astype(float), pc["mu_data"], pc["sigma2_data"], pc["eps_cin"])
            s_in = -pc["mu_data"] / np.sqrt(pc["sigma2_data"])
            x_in = (c_in.astype(self.dtype)[:, None] * x + self.dtype.type(s_in))
            time_arg = (-np.log(t.astype(float) + pc["eps_noise"])).astype(self.dtype)
            c_skip = c_skip.astype(self.dtype)
            c_out = c_out.astype(self.dtype)
        else:
            c_skip = c_out = None
            if self.standardize is not None:
                mean, std = self.standardize
                x_in = (x - self.dtype.type(mean)) / self.dtype.type(std)
            else:
                x_in = x
            time_arg = t
        ang = time_arg[:, None] * self.freqs[None, :]
        feat = np.concatenate([x_in, np.sin(ang), np.cos(ang)], axis=1)
        u = feat @ params["w_in"] + params["b_in"]
        if not np.all(np.isfinite(u)):
            raise ArithmeticError("non-finite activation in layer 0 (input lift)")
        us = [u]
        zs = []
        phis = []
        sqrt_half = self.dtype.type(np.sqrt(0.5))
        half = self.dtype.type(0.5)
        for k in range(self.depth):
            z = u @ params[f"w_res{k}"] + params[f"b_res{k}"]
            phi = half * (special.erf(z * sqrt_half) + self.dtype.type(1.0))
            u = u + z * phi
            if not np.all(np.isfinite(u)):
                raise ArithmeticError(f"non-finite activation in layer {k + 1}")
            zs.append(z)
            phis.append(phi)
            us.append(u)
        net = u @ params["w_out"] + params["b_out"]
        if self.precond is not None:
            m = c_skip[:, None] * x + c_out[:, None] * net
        else:
            m = net
        if with_cache:
            cache = {"feat": feat, "us": us, "zs": zs, "phis": phis,
                     "c_out": c_out, "params": params}
            return m, cache
        return float(m[0, 0]) if scalar_in else (m[:, 0] if m.shape[1] == 1 else m)

    __call__ = forward

    def backward(self, cache, dm, flat_out=None):
        """Gradients of sum(dm * m) w.r.t. every parameter, as a flat vector."""
        params = cache["params"]
        if flat_out is None:
            flat_out = np.zeros_like(self.theta)
        grads = self._views(flat_out)
        dm = np.asarray(dm, dtype=self.dtype)
        dnet = dm if cache["c_out"] is None else cache["c_out"][:, None] * dm
        u_last = cache["us"][-1]
        grads["w_out"][:] = u_last.T @ dnet
        grads["b_out"][:] = dnet.sum(axis=0)
        du = dnet @ params["w_out"].T
        for k in reversed(range(self.depth)):
            z = cache["zs"][k]
            phi = cache["phis"][k]
            u_prev = cache["us"][k]
            # d gelu(z) = Phi(z) + z phi(z)
            dz = du * (phi + z * np.exp(self.dtype.type(-0.5) * z * z) *
                       self.dtype.type(_INV_SQRT_2PI))
            grads[f"w_res{k}"][:] = u_prev.T @ dz
            grads[f"b_res{k}"][:] = dz.sum(axis=0)
            du = du + dz @ params[f"w_res{k}"].T
        grads["w_in"][:] = cache["feat"].T @ du
        grads["b_in"][:] = du.sum(axis=0)
        return flat_out

    def backward_dict(self, cache, dm):
        flat = self.backward(cache, dm)
        return {name: arr.copy() for name, arr in self._views(flat).items()}

    # -- serialization -------------------------------------------------------

    def _header(self, config_digest=None):
        return {
            "input_dim": self.input_dim,
            "width": self.width,
            "depth": self.depth,
            "time_dim": self.time_dim,
            "freq_min": self.freq_min,
            "freq_max": self.freq_max,
            "standardize": list(self.standardize) if self.standardize else None,
            "precond": self.precond,
            "seed": self.seed,
            "dtype": self.dtype.name,
            "config_digest": config_digest,
        }


def ema_update(shadow, current, decay: float):
    """shadow <- decay * shadow + (1 - decay) * current, elementwise.

    Accepts either two parameter dicts or two flat vectors; returns the new
    shadow in the same form (the inputs are never mutated).
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if isinstance(current, np.ndarray):
        if shadow.shape != current.shape:
            raise ValueError(f"shape mismatch: {shadow.shape} vs {current.shape}")
        return decay * shadow + (1.0 - decay) * current
    out = {}
    for name, cur in current.items():
        sh = shadow[name]
        if sh.shape != cur.shape:
            raise ValueError(f"shape mismatch for {name}: {sh.shape} vs {cur.shape}")
        out[name] = decay * sh + (1.0 - decay) * cur
    return out


def save_model(model: MlpDenoiser, path, config_digest=None) -> None:
    """Write a little-endian BNFW checkpoint; byte-stable for fixed weights."""
    header = json.dumps(model._header(config_digest), sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    blob += struct.pack("<I", len(header))
    blob += header
    names = sorted(model.params)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += arr.tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()[:8]
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_model(path, expected_input_dim=None) -> MlpDenoiser:
    """Read a BNFW checkpoint back into a model, verifying every byte."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a BNFW checkpoint (bad magic)")
    body, checksum = blob[:-8], blob[-8:]
    if hashlib.sha256(body).digest()[:8] != checksum:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    if expected_input_dim is not None and header["input_dim"] != expected_input_dim:
        raise CheckpointError(
            f"{path}: checkpoint input_dim={header['input_dim']} but "
            f"caller expects input_dim={expected_input_dim}"
        )
    model = MlpDenoiser(
        input_dim=header["input_dim"],
        width=header["width"],
        depth=header["depth"],
        time_dim=header["time_dim"],
        freq_min=header["freq_min"],
        freq_max=header["freq_max"],
        standardize=header["standardize"],
        precond=header["precond"],
        seed=header["seed"],
        dtype=np.dtype(header.get("dtype", "float64")),
    )
    (n_arrays,) = struct.unpack_from("<I", body, off)
    off += 4
    seen = set()
    for _ in range(n_arrays):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        if name not in model.params:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
        if arr.shape != model.params[name].shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, expected {model.params[name].shape}"
            )
        model.params[name][:] = arr.astype(model.dtype)
        seen.add(name)
    if seen != set(model.params):
        raise CheckpointError(f"{path}: parameter set mismatch")
    model.config_digest = header.get("config_digest")
    return model
