"""Frozen pre-norm micro-transformer with LoRA hooks and manual backprop.

Inputs are raw feature vectors. ``tokenize`` turns each one into ``s`` tokens
(a constant CLS token plus ``s - 1`` fixed random linear views of the input);
the stack of ``L`` blocks then runs on batches shaped (N, s, d).

Backbone parameters never receive gradients. ``backward`` only returns the
gradients of the adapter matrices that were active in the forward pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from conec.errors import InvalidInputError, InvalidShapeError
from conec.numkit import make_rng
from conec.serialize import read_container, write_container

LN_EPS = 1e-6
BACKBONE_MAGIC = "CONEC-BB1"
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass
class BackboneConfig:
    num_layers: int = 6
    embed_dim: int = 32
    num_tokens: int = 5
    num_heads: int = 4
    mlp_hidden: int = 64
    input_dim: int = 16
    seed: int = 0
    # None -> 1/sqrt(fan_in)
    weight_std: float | None = None

    def __post_init__(self):
        if self.num_layers < 2:
            raise InvalidInputError("num_layers must be >= 2")
        if self.num_tokens < 2:
            raise InvalidInputError("num_tokens must be >= 2 (CLS plus one patch)")
        if self.embed_dim % self.num_heads:
            raise InvalidInputError("embed_dim must be divisible by num_heads")
        if self.input_dim < 1 or self.mlp_hidden < 1:
            raise InvalidInputError("input_dim and mlp_hidden must be positive")


def gelu(a):
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))


def gelu_grad(a):
    u = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
    return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du


def _layer_norm(z, gain, bias):
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_back(dh, gain, cache):
    xhat, inv = cache
    dx = dh * gain
    return inv * (dx - dx.mean(axis=-1, keepdims=True) - xhat * (dx * xhat).mean(axis=-1, keepdims=True))


@dataclass
class LayerTrace:
    """Token matrices ``z_0 .. z_L``; each entry is (N, s, d) or (s, d)."""

    layers: list[np.ndarray]
    caches: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.layers)

    def cls_at(self, layer: int) -> np.ndarray:
        return self.layers[layer][..., 0, :]


BLOCK_KEYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "c1", "w2", "c2")


class Backbone:
    def __init__(self, config: BackboneConfig | None = None, params: dict | None = None):
        self.config = config or BackboneConfig()
        if params is None:
            params = self._init_params()
        self.tok_proj = params["tok_proj"]
        self.cls_token = params["cls_token"]
        self.blocks = params["blocks"]
        for arr in self._arrays():
            arr.setflags(write=False)

    def _init_params(self) -> dict:
        c = self.config
        rng = make_rng(c.seed)
        d, h = c.embed_dim, c.mlp_hidden

        def w(fan_in, shape):
            std = c.weight_std if c.weight_std is not None else 1.0 / np.sqrt(fan_in)
            return rng.normal(0.0, std, size=shape)

        tok_proj = rng.normal(0.0, 1.0 / np.sqrt(c.input_dim), size=(c.num_tokens - 1, c.input_dim, d))
        cls_token = rng.normal(0.0, 1.0, size=d)
        blocks = []
        for _ in range(c.num_layers):
            blocks.append(
                {
                    "ln1_g": np.ones(d),
                    "ln1_b": np.zeros(d),
                    "wq": w(d, (d, d)),
                    "wk": w(d, (d, d)),
                    "wv": w(d, (d, d)),
                    "wo": w(d, (d, d)),
                    "ln2_g": np.ones(d),
                    "ln2_b": np.zeros(d),
                    "w1": w(d, (d, h)),
                    "c1": np.zeros(h),
                    "w2": w(h, (h, d)),
                    "c2": np.zeros(d),
                }
            )
        return {"tok_proj": tok_proj, "cls_token": cls_token, "blocks": blocks}

    def _arrays(self):
        yield self.tok_proj
        yield self.cls_token
        for blk in self.blocks:
            yield from blk.values()

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @property
    def dim(self) -> int:
        return self.config.embed_dim

    def fingerprint(self) -> bytes:
        """Raw bytes of every parameter, for frozen-contract checks."""
        return b"".join(np.ascontiguousarray(a).tobytes() for a in self._arrays())

    def tokenize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.config.input_dim:
            raise InvalidInputError(f"expected raw inputs of length {self.config.input_dim}, got shape {x.shape}")
        patches = np.einsum("ni,tid->ntd", xb, self.tok_proj)
        cls = np.broadcast_to(self.cls_token, (xb.shape[0], 1, self.dim))
        tokens = np.concatenate([cls, patches], axis=1)
        return tokens[0] if single else tokens

    def _block_forward(self, i, z, adapters, keep):
        p = self.blocks[i]
        c = self.config
        n, s, d = z.shape
        nh = c.num_heads
        dh = d // nh
        h1, ln1c = _layer_norm(z, p["ln1_g"], p["ln1_b"])
        proj = {}
        lora_u = {}
        for t in ("q", "k", "v"):
            out = h1 @ p["w" + t]
            ad = adapters.get(t) if adapters else None
            if ad is not None:
                if ad.b.shape[1] != d or ad.a.shape[0] != d:
                    raise InvalidShapeError(f"adapter on block {i + 1}/{t} has shape a{ad.a.shape} b{ad.b.shape}")
                u = h1 @ ad.b.T
                out = out + u @ ad.a.T
                lora_u[t] = u
            proj[t] = out

        def heads(m):
            return m.reshape(n, s, nh, dh).transpose(0, 2, 1, 3)

        qh, kh, vh = heads(proj["q"]), heads(proj["k"]), heads(proj["v"])
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
        scores = scores - scores.max(axis=-1, keepdims=True)
        pa = np.exp(scores)
        pa /= pa.sum(axis=-1, keepdims=True)
        oh = pa @ vh
        o = oh.transpose(0, 2, 1, 3).reshape(n, s, d)
        z1 = z + o @ p["wo"]
        h2, ln2c = _layer_norm(z1, p["ln2_g"], p["ln2_b"])
        a = h2 @ p["w1"] + p["c1"]
        g = gelu(a)
        z2 = z1 + g @ p["w2"] + p["c2"]
        cache = None
        if keep:
            cache = dict(h1=h1, ln1c=ln1c, lora_u=lora_u, qh=qh, kh=kh, vh=vh, pa=pa, o=o, ln2c=ln2c, a=a, adapters=adapters)
        return z2, cache

    def _block_backward(self, i, dz2, cache):
        p = self.blocks[i]
        n, s, d = dz2.shape
        nh = self.config.num_heads
        dh = d // nh
        dg = dz2 @ p["w2"].T
        da = dg * gelu_grad(cache["a"])
        dh2 = da @ p["w1"].T
        dz1 = dz2 + _layer_norm_back(dh2, p["ln2_g"], cache["ln2c"])
        do = dz1 @ p["wo"].T
        doh = do.reshape(n, s, nh, dh).transpose(0, 2, 1, 3)
        pa = cache["pa"]
        dpa = doh @ cache["vh"].transpose(0, 1, 3, 2)
        dvh = pa.transpose(0, 1, 3, 2) @ doh
        dscores = pa * (dpa - (dpa * pa).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
        dqh = dscores @ cache["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ cache["qh"]

        def merge(m):
            return m.transpose(0, 2, 1, 3).reshape(n, s, d)

        dproj = {"q": merge(dqh), "k": merge(dkh), "v": merge(dvh)}
        h1 = cache["h1"]
        dh1 = np.zeros_like(h1)
        grads = {}
        adapters = cache["adapters"] or {}
        for t, dp in dproj.items():
            dh1 += dp @ p["w" + t].T
            ad = adapters.get(t)
            if ad is not None:
                u = cache["lora_u"][t]
                ga = np.einsum("nsd,nsr->dr", dp, u)
                du = dp @ ad.a
                gb = np.einsum("nsr,nsk->rk", du, h1)
                dh1 += du @ ad.b
                grads[t] = (ga, gb)
        dz = dz1 + _layer_norm_back(dh1, p["ln1_g"], cache["ln1c"])
        return dz, grads

    def run(self, x, block_adapters=None, upto: int | None = None, keep_cache: bool = False) -> LayerTrace:
        """Forward through blocks 1..upto with per-block adapter dicts (None = plain)."""
        z = self.tokenize(x)
        single = z.ndim == 2
        if single:
            z = z[None]
        upto = self.num_layers if upto is None else upto
        if not 0 <= upto <= self.num_layers:
            raise InvalidInputError(f"upto={upto} outside [0, {self.num_layers}]")
        if block_adapters is not None and len(block_adapters) < upto:
            raise InvalidShapeError(f"{len(block_adapters)} adapter slots for {upto} blocks")
        layers = [z]
        caches = []
        for i in range(upto):
            ads = block_adapters[i] if block_adapters is not None else None
            z, cache = self._block_forward(i, z, ads, keep_cache)
            layers.append(z)
            caches.append(cache)
        if single:
            layers = [m[0] for m in layers]
        return LayerTrace(layers, caches if keep_cache else [])

    def forward_plain(self, x) -> LayerTrace:
        return self.run(x)

    def forward_with_adapters(self, x, shared, specific=()) -> LayerTrace:
        """Shared adapters feed blocks 1..len(shared), specific ones the blocks after.

        A shorter adapter list truncates the stack at that block.
        """
        blocks = list(shared) + list(specific)
        return self.run(x, blocks, upto=min(len(blocks), self.num_layers))

    def backward(self, trace: LayerTrace, injections: dict[int, np.ndarray]) -> list[dict]:
        """Adapter gradients given upstream gradients on selected layer outputs.

        ``injections`` maps a layer index (1..L) to d(loss)/d(z_layer) with the
        full (N, s, d) token shape. Returns one ``{target: (grad_a, grad_b)}``
        dict per block that ran in the forward pass.
        """
        if not trace.caches:
            raise InvalidInputError("trace was produced without keep_cache=True")
        nblocks = len(trace.caches)
        top = max(injections)
        if top > nblocks:
            raise InvalidInputError(f"gradient injected at layer {top} but only {nblocks} blocks ran")
        grads: list[dict] = [{} for _ in range(nblocks)]
        dz = None
        for i in range(top, 0, -1):
            inj = injections.get(i)
            if inj is not None:
                dz = inj.copy() if dz is None else dz + inj
            if dz is None:
                continue
            dz, grads[i - 1] = self._block_backward(i - 1, dz, trace.caches[i - 1])
        return grads

    def save(self, path) -> None:
        arrays = {"tok_proj": self.tok_proj, "cls_token": self.cls_token}
        for i, blk in enumerate(self.blocks):
            for k in BLOCK_KEYS:
                arrays[f"block{i}.{k}"] = blk[k]
        write_container(path, BACKBONE_MAGIC, {"config": asdict(self.config)}, arrays)

    @classmethod
    def load(cls, path) -> "Backbone":
        meta, arrays = read_container(path, BACKBONE_MAGIC)
        return cls.from_arrays(BackboneConfig(**meta["config"]), arrays)

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + "tok_proj": self.tok_proj, prefix + "cls_token": self.cls_token}
        for i, blk in enumerate(self.blocks):
            for k in BLOCK_KEYS:
                out[f"{prefix}block{i}.{k}"] = blk[k]
        return out

    @classmethod
    def from_arrays(cls, config: BackboneConfig, arrays: dict, prefix: str = "") -> "Backbone":
        blocks = [
            {k: np.array(arrays[f"{prefix}block{i}.{k}"]) for k in BLOCK_KEYS} for i in range(config.num_layers)
        ]
        params = {
            "tok_proj": np.array(arrays[prefix + "tok_proj"]),
            "cls_token": np.array(arrays[prefix + "cls_token"]),
            "blocks": blocks,
        }
        return cls(config, params)


