"""Mask/embedding estimators.

Two interchangeable implementations of the per-iteration estimator that maps
(block magnitudes, phase feature, residual mask, previous speaker embedding)
to (source mask, speaker embedding):

* :class:`OracleMaskEstimator` computes ideal ratio masks from simulator
  ground truth and identifies speakers by fixed per-speaker embeddings.  It
  makes the decoding pipeline deterministic and testable end to end.
* :class:`MaskNet` is a small trainable network: a shared input projection,
  one bidirectional tanh recurrent layer over the block's frames, a sigmoid
  mask head, and a mean-pooled, L2-normalized embedding head.

Both follow the same session protocol: ``begin_block(index)`` once per block,
then one ``estimate(EstimatorInput)`` call per extraction iteration.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dsp import IpdFeature, StftConfig, stft

CHECKPOINT_MAGIC = b"BSPK"
CHECKPOINT_VERSION = 1

DEFAULT_EMBED_DIM = 32
DEFAULT_HIDDEN = 64
DEFAULT_PROJ = 64

# Mean-mask level under which the oracle treats a speaker as silent in a block.
ORACLE_SILENT_MEAN = 0.05
ORACLE_MASK_EPS = 1e-8
_LOG_FLOOR = 1e-5


@dataclass
class EstimatorInput:
    """Per-iteration network input: block features plus recursion state."""

    mag: np.ndarray  # (T, F) mixture magnitudes
    ipd: IpdFeature  # (T, F) cos/sin planes
    residual: np.ndarray  # (T, F) residual mask
    z_prev: np.ndarray  # (D,) previous embedding, or zeros for a new speaker


def speaker_embedding(speaker_id: str, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Deterministic unit-norm embedding derived from the speaker id."""
    digest = hashlib.sha256(speaker_id.encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.normal(0.0, 1.0, dim)
    return v / np.linalg.norm(v)


def is_zero_embedding(z: np.ndarray) -> bool:
    return float(np.linalg.norm(z)) < 1e-6


# ---------------------------------------------------------------------------
# Oracle estimator
# ---------------------------------------------------------------------------


class OracleMaskEstimator:
    """Ideal-ratio-mask estimator backed by simulator ground truth.

    Masks are |S| / (sum of all source magnitudes + |N| + eps) per bin; the
    noise mask uses |N| in the numerator.  The first estimate call in every
    block returns the noise mask, matching the decoder's noise-first slot
    convention.  A unit-norm ``z_prev`` selects the speaker with the closest
    fixed embedding; a zero ``z_prev`` probes the strongest source not yet
    extracted in the block.  Speakers whose mask mean falls below
    ``silent_mean`` yield an all-zero mask.
    """

    def __init__(self, block_mags, noise_mags, embed_dim=DEFAULT_EMBED_DIM,
                 silent_mean=ORACLE_SILENT_MEAN, eps=ORACLE_MASK_EPS):
        # block_mags: list over blocks of {speaker_id: (T, F) magnitude}
        self.block_mags = block_mags
        self.noise_mags = noise_mags
        self.speakers = sorted({s for blk in block_mags for s in blk})
        self.embed_dim = embed_dim
        self.silent_mean = silent_mean
        self.eps = eps
        self.embeddings = {s: speaker_embedding(s, embed_dim) for s in self.speakers}
        self.noise_embedding = speaker_embedding("__noise__", embed_dim)
        self._fallback = speaker_embedding("__none__", embed_dim)
        self._irm = []
        self._noise_irm = []
        for blk, noise in zip(block_mags, noise_mags):
            denom = noise + eps
            for mag in blk.values():
                denom = denom + mag
            self._irm.append({s: mag / denom for s, mag in blk.items()})
            self._noise_irm.append(noise / denom)
        self._block = 0
        self._calls = 0
        self._emitted = set()

    @classmethod
    def from_rendered(cls, rendered, stft_cfg: StftConfig, block_len_s: float,
                      embed_dim=DEFAULT_EMBED_DIM, **kw):
        fs = rendered.mixture.sample_rate
        n = rendered.mixture.n_samples
        block_n = int(round(block_len_s * fs))
        n_blocks = max(1, -(-n // block_n))
        padded = n_blocks * block_n

        def block_mag(sig_samples):
            x = np.zeros(padded)
            x[: sig_samples.size] = sig_samples
            return [
                np.abs(stft(x[b * block_n : (b + 1) * block_n], stft_cfg))
                for b in range(n_blocks)
            ]

        per_spk = {
            spk: block_mag(sig.channel(0))
            for spk, sig in sorted(rendered.references.items())
        }
        noise = block_mag(rendered.noise.channel(0))
        block_mags = [
            {spk: mags[b] for spk, mags in per_spk.items()} for b in range(n_blocks)
        ]
        return cls(block_mags, noise, embed_dim=embed_dim, **kw)

    @property
    def n_blocks(self):
        return len(self.block_mags)

    def begin_block(self, index: int):
        if not 0 <= index < self.n_blocks:
            raise ValueError(f"block index {index} out of range")
        self._block = index
        self._calls = 0
        self._emitted = set()

    def block_irm(self, block: int, speaker: str) -> np.ndarray:
        return self._irm[block][speaker]

    def noise_irm(self, block: int) -> np.ndarray:
        return self._noise_irm[block]

    def match_speaker(self, z: np.ndarray):
        best, best_cos = None, -2.0
        for spk in self.speakers:
            c = float(np.dot(z, self.embeddings[spk]))
            if c > best_cos:
                best, best_cos = spk, c
        return best if best_cos > 0.5 else None

    def estimate(self, inp: EstimatorInput):
        b = self._block
        self._calls += 1
        if self._calls == 1:
            return self._noise_irm[b].copy(), self.noise_embedding.copy()
        if not is_zero_embedding(inp.z_prev):
            spk = self.match_speaker(inp.z_prev)
            if spk is None:
                return np.zeros_like(inp.mag), self._fallback.copy()
            irm = self._irm[b].get(spk)
            emb = self.embeddings[spk].copy()
            if irm is None or float(irm.mean()) < self.silent_mean:
                return np.zeros_like(inp.mag), emb
            self._emitted.add(spk)
            return irm.copy(), emb
        # zero embedding: probe for the strongest source not yet extracted
        best, best_mean = None, self.silent_mean
        for spk in self.speakers:
            if spk in self._emitted or spk not in self._irm[b]:
                continue
            m = float(self._irm[b][spk].mean())
            if m >= best_mean:
                best, best_mean = spk, m
        if best is None:
            return np.zeros_like(inp.mag), self._fallback.copy()
        self._emitted.add(best)
        return self._irm[b][best].copy(), self.embeddings[best].copy()


class FaultInjectionEstimator:
    """Oracle wrapper that splits one speaker into two from a given block.

    At ``split_block`` the victim speaker's mask is returned only partially,
    leaving enough residual for the decoder to probe; the probe then receives
    the remainder under a fresh embedding, creating a spurious speaker.  When
    decoding revisits earlier blocks (indices below ``split_block``), the
    spurious embedding maps to the victim's full mask there, so a consistency
    check sees the "new" speaker as retroactively present and rejects it.
    """

    def __init__(self, inner: OracleMaskEstimator, split_block: int,
                 victim: str | None = None, first_fraction: float = 0.45):
        self.inner = inner
        self.split_block = split_block
        self.first_fraction = first_fraction
        if victim is None:
            means = {
                s: float(inner.block_irm(split_block, s).mean())
                for s in inner.speakers
                if s in inner._irm[split_block]
            }
            victim = max(sorted(means), key=lambda s: means[s])
        self.victim = victim
        self.spurious_embedding = speaker_embedding(f"__split_{victim}__",
                                                    inner.embed_dim)
        self._block = 0
        self._spur_emitted = set()

    @property
    def n_blocks(self):
        return self.inner.n_blocks

    @property
    def embed_dim(self):
        return self.inner.embed_dim

    def begin_block(self, index: int):
        self._block = index
        self.inner.begin_block(index)

    def _is_spurious(self, z):
        return (not is_zero_embedding(z)
                and float(np.dot(z, self.spurious_embedding)) > 0.7)

    def _is_victim(self, z):
        return (not is_zero_embedding(z)
                and float(np.dot(z, self.inner.embeddings[self.victim])) > 0.7)

    def estimate(self, inp: EstimatorInput):
        b = self._block
        victim_irm = self.inner._irm[b].get(self.victim)
        if self._is_spurious(inp.z_prev):
            self.inner._calls += 1
            if b < self.split_block:
                # consistency re-decode path: the spurious speaker "was there"
                return victim_irm.copy(), self.spurious_embedding.copy()
            return ((1.0 - self.first_fraction) * victim_irm,
                    self.spurious_embedding.copy())
        if b >= self.split_block and victim_irm is not None:
            if self._is_victim(inp.z_prev):
                self.inner._calls += 1
                self.inner._emitted.add(self.victim)
                return (self.first_fraction * victim_irm,
                        self.inner.embeddings[self.victim].copy())
            if (is_zero_embedding(inp.z_prev) and self.inner._calls > 0
                    and self.victim in self.inner._emitted
                    and b not in self._spur_emitted):
                self.inner._calls += 1
                self._spur_emitted.add(b)
                return ((1.0 - self.first_fraction) * victim_irm,
                        self.spurious_embedding.copy())
        return self.inner.estimate(inp)


# ---------------------------------------------------------------------------
# Trainable network
# ---------------------------------------------------------------------------

PARAM_ORDER = [
    "w_static", "b_static", "w_res", "w_emb_in",
    "w_xf", "b_f", "w_hf", "w_xb", "b_b", "w_hb",
    "w_mask", "b_mask", "w_embed", "b_embed",
]


@dataclass
class ModelParams:
    """Named parameter tensors plus the metadata needed to reuse them."""

    arrays: dict
    bins: int
    embed_dim: int
    hidden: int
    proj: int
    stft: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def validate_finite(self):
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite model (parameter {name})")

    @property
    def dtype(self):
        return self.arrays["w_static"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.arrays.items()},
            self.bins, self.embed_dim, self.hidden, self.proj,
            dict(self.stft), self.version,
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(bins: int, embed_dim=DEFAULT_EMBED_DIM, hidden=DEFAULT_HIDDEN,
                proj=DEFAULT_PROJ, seed: int = 0, stft_cfg: StftConfig | None = None,
                dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D41534B]))

    def glorot(n_in, n_out):
        bound = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype)

    f, d, h, p = bins, embed_dim, hidden, proj
    arrays = {
        "w_static": glorot(3 * f, p),
        "b_static": np.zeros(p, dtype=dtype),
        "w_res": glorot(f, p),
        "w_emb_in": glorot(d, p),
        "w_xf": glorot(p, h),
        "b_f": np.zeros(h, dtype=dtype),
        "w_hf": (0.9 * glorot(h, h)).astype(dtype),
        "w_xb": glorot(p, h),
        "b_b": np.zeros(h, dtype=dtype),
        "w_hb": (0.9 * glorot(h, h)).astype(dtype),
        "w_mask": glorot(2 * h, f),
        "b_mask": np.zeros(f, dtype=dtype),
        "w_embed": glorot(2 * h, d),
        "b_embed": np.zeros(d, dtype=dtype),
    }
    stft_meta = {}
    if stft_cfg is not None:
        stft_meta = {
            "window_len": stft_cfg.window_len,
            "hop": stft_cfg.hop,
            "window": stft_cfg.window,
        }
    return ModelParams(arrays, f, d, h, p, stft_meta)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class BlockContext:
    """Cached per-block state: static projection and backward accumulators."""

    features: np.ndarray  # (T, 3F) normalized static features
    static_pre: np.ndarray  # (T, P)
    mag_ref: object  # identity of the magnitude array this was built from
    d_static_pre: np.ndarray | None = None


@dataclass
class IterationCache:
    residual: np.ndarray
    z_prev: np.ndarray
    p: np.ndarray
    hf: np.ndarray
    hb_rev: np.ndarray
    hcat: np.ndarray
    mask: np.ndarray
    z_out: np.ndarray
    inv_norm: float


class MaskNet:
    """Trainable recurrent mask estimator (see module docstring)."""

    def __init__(self, params: ModelParams):
        params.validate_finite()
        self.params = params
        self._memo = None  # (mag array, BlockContext) for streaming reuse

    @property
    def embed_dim(self):
        return self.params.embed_dim

    # -- session protocol ---------------------------------------------------

    def begin_block(self, index: int):
        self._memo = None

    def estimate(self, inp: EstimatorInput):
        if self._memo is not None and self._memo[0] is inp.mag:
            ctx = self._memo[1]
        else:
            ctx = self.prepare_block(inp.mag, inp.ipd)
            self._memo = (inp.mag, ctx)
        mask, z_out, _ = self.forward(ctx, inp.residual, inp.z_prev)
        return mask, z_out

    # -- network core -------------------------------------------------------

    def prepare_block(self, mag: np.ndarray, ipd: IpdFeature) -> BlockContext:
        dt = self.params.dtype
        logmag = np.log(np.asarray(mag, dtype=np.float64) + _LOG_FLOOR)
        mu, sigma = logmag.mean(), logmag.std() + 1e-5
        feats = np.concatenate(
            [(logmag - mu) / sigma, ipd.cos, ipd.sin], axis=1
        ).astype(dt)
        static_pre = feats @ self.params.arrays["w_static"] + self.params.arrays["b_static"]
        return BlockContext(feats, static_pre, mag)

    def forward(self, ctx: BlockContext, residual: np.ndarray, z_prev: np.ndarray):
        a = self.params.arrays
        dt = self.params.dtype
        r = np.asarray(residual, dtype=dt)
        z = np.asarray(z_prev, dtype=dt)
        pre = ctx.static_pre + r @ a["w_res"] + z @ a["w_emb_in"]
        p = np.tanh(pre)
        xf = p @ a["w_xf"] + a["b_f"]
        xb = p @ a["w_xb"] + a["b_b"]
        h0 = np.zeros(self.params.hidden, dtype=dt)
        hf = kernels.rnn_seq_forward(np.ascontiguousarray(xf), a["w_hf"], h0)
        hb_rev = kernels.rnn_seq_forward(np.ascontiguousarray(xb[::-1]), a["w_hb"], h0)
        hcat = np.concatenate([hf, hb_rev[::-1]], axis=1)
        mask = _sigmoid(hcat @ a["w_mask"] + a["b_mask"])
        pooled = hcat.mean(axis=0)
        e = pooled @ a["w_embed"] + a["b_embed"]
        # plain-float scalar keeps float32 tensors from promoting to float64
        inv_norm = 1.0 / math.sqrt(float(np.dot(e, e)) + 1e-12)
        z_out = e * inv_norm
        cache = IterationCache(r, z, p, hf, hb_rev, hcat, mask, z_out, inv_norm)
        return mask, z_out, cache

    def backward(self, ctx: BlockContext, cache: IterationCache,
                 d_mask: np.ndarray, d_z_out: np.ndarray, grads: dict):
        """Accumulate parameter gradients for one iteration.

        Returns (d_residual, d_z_prev) so callers can chain gradients through
        the residual recursion and across blocks via the embeddings.
        """
        a = self.params.arrays
        dt = self.params.dtype
        t_len = cache.hcat.shape[0]
        d_mask = np.asarray(d_mask, dtype=dt)
        d_z_out = np.asarray(d_z_out, dtype=dt)

        # embedding head (through the L2 normalization)
        d_e = (d_z_out - cache.z_out * float(np.dot(cache.z_out, d_z_out)))
        d_e = d_e * cache.inv_norm
        pooled = cache.hcat.mean(axis=0)
        grads["w_embed"] += np.outer(pooled, d_e)
        grads["b_embed"] += d_e
        d_hcat = np.tile((a["w_embed"] @ d_e) / t_len, (t_len, 1))

        # mask head
        d_mask_pre = d_mask * cache.mask * (1.0 - cache.mask)
        grads["w_mask"] += cache.hcat.T @ d_mask_pre
        grads["b_mask"] += d_mask_pre.sum(axis=0)
        d_hcat += d_mask_pre @ a["w_mask"].T

        h = self.params.hidden
        d_hf = np.ascontiguousarray(d_hcat[:, :h])
        d_hb_rev = np.ascontiguousarray(d_hcat[:, h:][::-1])
        d_xf = kernels.rnn_seq_backward(cache.hf, a["w_hf"], d_hf)
        d_xb_rev = kernels.rnn_seq_backward(cache.hb_rev, a["w_hb"], d_hb_rev)
        prev_f = np.vstack([np.zeros((1, h), dtype=dt), cache.hf[:-1]])
        prev_b = np.vstack([np.zeros((1, h), dtype=dt), cache.hb_rev[:-1]])
        grads["w_hf"] += prev_f.T @ d_xf
        grads["w_hb"] += prev_b.T @ d_xb_rev
        d_xb = d_xb_rev[::-1]
        grads["w_xf"] += cache.p.T @ d_xf
        grads["b_f"] += d_xf.sum(axis=0)
        grads["w_xb"] += cache.p.T @ d_xb
        grads["b_b"] += d_xb.sum(axis=0)

        d_p = d_xf @ a["w_xf"].T + d_xb @ a["w_xb"].T
        d_pre = d_p * (1.0 - cache.p * cache.p)
        if ctx.d_static_pre is None:
            ctx.d_static_pre = np.zeros_like(ctx.static_pre)
        ctx.d_static_pre += d_pre
        grads["w_res"] += cache.residual.T @ d_pre
        d_pre_sum = d_pre.sum(axis=0)
        grads["w_emb_in"] += np.outer(cache.z_prev, d_pre_sum)
        d_residual = d_pre @ a["w_res"].T
        d_z_prev = a["w_emb_in"] @ d_pre_sum
        return d_residual, d_z_prev

    def finish_block_backward(self, ctx: BlockContext, grads: dict):
        if ctx.d_static_pre is not None:
            grads["w_static"] += ctx.features.T @ ctx.d_static_pre
            grads["b_static"] += ctx.d_static_pre.sum(axis=0)
            ctx.d_static_pre = None


def forward_backward(inp: EstimatorInput, params: ModelParams,
                     d_mask: np.ndarray, d_z_out: np.ndarray):
    """Single-iteration forward plus gradient accumulation.

    Given upstream gradients w.r.t. the produced mask and embedding, returns
    (mask, z_out, gradient dict over all parameter tensors).
    """
    net = MaskNet(params)
    ctx = net.prepare_block(inp.mag, inp.ipd)
    mask, z_out, cache = net.forward(ctx, inp.residual, inp.z_prev)
    grads = params.zeros_like()
    net.backward(ctx, cache, d_mask, d_z_out, grads)
    net.finish_block_backward(ctx, grads)
    return mask, z_out, grads


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_params(params: ModelParams, path) -> None:
    """Write a versioned checkpoint: magic, version, shape table, f32 payload."""
    meta = {
        "bins": params.bins,
        "embed_dim": params.embed_dim,
        "hidden": params.hidden,
        "proj": params.proj,
        "stft": params.stft,
        "shapes": [[name, list(params.arrays[name].shape)] for name in PARAM_ORDER],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in PARAM_ORDER:
            fh.write(params.arrays[name].astype("<f4").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("corrupt checkpoint")
    version, meta_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if len(data) < 12 + meta_len:
        raise ValueError("corrupt checkpoint")
    try:
        meta = json.loads(data[12 : 12 + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError("corrupt checkpoint") from exc
    offset = 12 + meta_len
    arrays = {}
    for name, shape in meta["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise ValueError("corrupt checkpoint")
        arrays[name] = np.frombuffer(
            data, dtype="<f4", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise ValueError("corrupt checkpoint")
    params = ModelParams(arrays, meta["bins"], meta["embed_dim"], meta["hidden"],
                         meta["proj"], meta.get("stft", {}))
    params.validate_finite()
    return params
