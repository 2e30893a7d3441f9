"""Dual-branch classifier trained from image-level labels only.

A shared stem feeds a convolutional branch (optionally boundary-aware: each
block multiplies its conv features by a fixed edge-operator response and adds
the conv features back as a residual) and a transformer branch. A coupling
unit exchanges information between the two every block. Two small heads
produce per-branch logits; the training loss is the plain sum of the two
branch cross-entropies.

Model scale is deliberately tiny (64x64 inputs, 6 blocks by default) so that
training runs in minutes on a CPU.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .imgproc import (
    Image,
    PREWITT_GX,
    PREWITT_GY,
    SOBEL_GX,
    SOBEL_GY,
    bilinear_resize,
    edge_magnitude,
)
from .tensor import PaddingMode, Tensor

CHECKPOINT_MAGIC = b"FLOC1"

EDGE_KERNELS = {
    "sobel": (SOBEL_GX, SOBEL_GY),
    "prewitt": (PREWITT_GX, PREWITT_GY),
}


@dataclass
class ModelConfig:
    """Architecture knobs. cabl_depth = k applies boundary-aware blocks to
    blocks 1..k; 0 disables them everywhere (plain conv baseline)."""

    input_size: int = 64
    blocks: int = 6
    channels: int = 16
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    patch: int = 8
    cabl_depth: Optional[int] = None  # None -> all blocks
    cabl_structure: str = "III"
    edge_operator: str = "sobel"

    def __post_init__(self):
        if self.cabl_depth is None:
            self.cabl_depth = self.blocks
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0 <= self.cabl_depth <= self.blocks:
            raise ValueError(f"cabl_depth {self.cabl_depth} outside 0..{self.blocks}")
        if self.cabl_structure not in ("I", "II", "III"):
            raise ValueError(f"unknown cabl_structure {self.cabl_structure!r}")
        if self.edge_operator not in EDGE_KERNELS:
            raise ValueError(f"unknown edge_operator {self.edge_operator!r}")
        if self.input_size % self.patch != 0 or self.input_size % 4 != 0:
            raise ValueError("input_size must be divisible by the patch size")


@dataclass
class BranchOutputs:
    """Archived forward results needed by the heads and the CAM engine."""

    conv_feats: list  # per-block conv-branch state [N,C,h,w]
    tokens_final: Tensor  # post final-norm tokens [N,T,D]
    attns: list
    qs: list  # per-block Q projections [N,T,D]
    ks: list
    conv_logits: Tensor
    trans_logits: Tensor

    def __post_init__(self):
        if self.conv_logits.shape[-1] != 2 or self.trans_logits.shape[-1] != 2:
            raise ValueError("branch logits must have shape [N,2]")
        if len(self.qs) != len(self.ks):
            raise ValueError("per-layer Q/K archives out of sync")


def feature_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Smooth per-position channel normalization of an NCHW tensor:
    x / sqrt(mean_c(x^2) + 1), then per-channel scale and shift.

    The +1 keeps the map well-conditioned at small activations (identity-like
    there) while still bounding large ones; unlike LayerNorm it has no
    eps-singularity on constant or all-zero channel vectors.
    """
    c = x.shape[1]
    ms = T.mean(T.mul(x, x), axes=(1,), keepdims=True)
    denom = T.sqrt(ms + T._as_tensor(1.0))
    g = T.reshape(gamma, (1, c, 1, 1))
    b = T.reshape(beta, (1, c, 1, 1))
    return T.mul(g, T.div(x, denom)) + b


def edge_response(x: Tensor, operator: str) -> Tensor:
    """Per-channel gradient magnitude with fixed kernels (replicate pad).

    The edge branch is a stop-gradient feature extractor: its kernels are
    never trained and no gradient flows through it, so the result carries
    no autodiff graph.
    """
    gx_k, gy_k = EDGE_KERNELS[operator]
    return Tensor(edge_magnitude(x.data, gx_k, gy_k))


class CablBlock:
    """One conv-branch block.

    Structure III (normative): out = edge ⊙ conv + conv.
    Structure I: out = conv + edge. Structure II: out = conv(edge ⊙ input).
    A depth-disabled block is the bare conv path.

    ``edge_override`` substitutes a fixed edge map for the next forward
    calls; gradient-check harnesses use it to freeze the (stop-gradient)
    edge branch so finite differences probe the differentiated function.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, use_edge: bool):
        c = cfg.channels
        self.cfg = cfg
        self.use_edge = use_edge
        self.edge_override: Optional[np.ndarray] = None
        self.ln_g = T.ones_param((c,))
        self.ln_b = T.zeros_param((c,))
        self.w = T.he_uniform(rng, (c, c, 3, 3), fan_in=c * 9)
        self.b = T.zeros_param((c,))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.ln_g": self.ln_g,
            f"{prefix}.ln_b": self.ln_b,
            f"{prefix}.w": self.w,
            f"{prefix}.b": self.b,
        }

    def conv_path(self, x: Tensor) -> Tensor:
        h = feature_norm(x, self.ln_g, self.ln_b)
        return T.relu(T.conv2d(h, self.w, 1, PaddingMode.ZERO, self.b))

    def edge_path(self, x: Tensor) -> Tensor:
        if self.edge_override is not None:
            return Tensor(self.edge_override)
        h = feature_norm(x, self.ln_g, self.ln_b)
        return edge_response(h, self.cfg.edge_operator)

    def forward(self, x: Tensor) -> Tensor:
        if not self.use_edge:
            return self.conv_path(x)
        edge = self.edge_path(x)
        self.last_edge = edge.data
        structure = self.cfg.cabl_structure
        if structure == "III":
            conv = self.conv_path(x)
            return T.mul(edge, conv) + conv
        if structure == "I":
            return self.conv_path(x) + edge
        # II: edge-gated input
        return self.conv_path(T.mul(edge, x))


class TransBlock:
    """Pre-norm transformer block; archives (attn, Q, K) each call."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.dim
        dm = d * cfg.mlp_ratio
        self.heads = cfg.heads
        self.ln1_g = T.ones_param((d,))
        self.ln1_b = T.zeros_param((d,))
        self.wq = T.scaled_normal(rng, (d, d), d)
        self.wk = T.scaled_normal(rng, (d, d), d)
        self.wv = T.scaled_normal(rng, (d, d), d)
        self.wo = T.scaled_normal(rng, (d, d), d)
        self.ln2_g = T.ones_param((d,))
        self.ln2_b = T.zeros_param((d,))
        self.w1 = T.scaled_normal(rng, (d, dm), d)
        self.b1 = T.zeros_param((dm,))
        self.w2 = T.scaled_normal(rng, (dm, d), dm)
        self.b2 = T.zeros_param((d,))

    def params(self, prefix: str) -> dict[str, Tensor]:
        names = ["ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"]
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def forward(self, tokens: Tensor):
        h = T.layer_norm(tokens, self.ln1_g, self.ln1_b)
        att, attn, q, k = T.multi_head_attention(h, self.wq, self.wk, self.wv, self.wo, self.heads)
        x = tokens + att
        h2 = T.layer_norm(x, self.ln2_g, self.ln2_b)
        m = T.matmul(T.relu(T.matmul(h2, self.w1) + self.b1), self.w2) + self.b2
        return x + m, attn, q, k


def fcu_exchange(
    conv_feat: Tensor, tokens: Tensor, w_ct: Tensor, w_tc: Tensor
) -> tuple[Tensor, Tensor]:
    """Bidirectional feature coupling, both directions from the inputs.

    conv->token: average-pool the conv map to the patch grid, project to
    token dim, add to the patch tokens (class token untouched).
    token->conv: project patch tokens back, nearest-upsample, add.
    """
    n, c, h, w = conv_feat.shape
    t = tokens.shape[1]
    p = t - 1
    grid = int(round(p**0.5))
    if grid * grid != p:
        raise ValueError(f"{p} patch tokens do not form a square grid")
    if h % grid or w % grid or h // grid != w // grid:
        raise ValueError(f"conv grid {h}x{w} incompatible with token grid {grid}x{grid}")
    factor = h // grid

    pooled = T.avg_pool2d(conv_feat, factor)
    pooled_seq = T.transpose(T.reshape(pooled, (n, c, p)), (0, 2, 1))
    delta_tok = T.matmul(pooled_seq, w_ct)

    cls = T.narrow(tokens, 1, 0, 1)
    patch = T.narrow(tokens, 1, 1, p)
    back = T.transpose(T.matmul(patch, w_tc), (0, 2, 1))
    back = T.nearest_upsample(T.reshape(back, (n, c, grid, grid)), factor)

    conv_out = conv_feat + back
    tokens_out = T.concat([cls, patch + delta_tok], axis=1)
    return conv_out, tokens_out


class Stem:
    """Two strided convs (H/4 features) plus patch-token projection."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, d = cfg.channels, cfg.dim
        self.cfg = cfg
        self.w1 = T.he_uniform(rng, (c, 3, 3, 3), fan_in=27)
        self.b1 = T.zeros_param((c,))
        self.w2 = T.he_uniform(rng, (c, c, 3, 3), fan_in=c * 9)
        self.b2 = T.zeros_param((c,))
        self.tok_w = T.scaled_normal(rng, (c, d), c)
        self.cls = Tensor(rng.normal(0.0, 0.3, size=(1, 1, d)), requires_grad=True)
        t0 = (cfg.input_size // cfg.patch) ** 2 + 1
        self.pos = Tensor(rng.normal(0.0, 0.3, size=(1, t0, d)), requires_grad=True)

    def params(self, prefix: str) -> dict[str, Tensor]:
        names = ["w1", "b1", "w2", "b2", "tok_w", "cls", "pos"]
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def _pos_for(self, t: int) -> Tensor:
        """Positional table for t tokens; off-size grids are interpolated
        from the trained table (inference-only path, no gradient)."""
        if t == self.pos.shape[1]:
            return self.pos
        d = self.pos.shape[2]
        g0 = int(round((self.pos.shape[1] - 1) ** 0.5))
        g1 = int(round((t - 1) ** 0.5))
        grid = self.pos.data[0, 1:, :].reshape(g0, g0, d)
        interp = np.stack(
            [bilinear_resize(grid[:, :, i], g1, g1) for i in range(d)], axis=-1
        ).reshape(1, g1 * g1, d)
        return Tensor(np.concatenate([self.pos.data[:, :1, :], interp], axis=1))

    def forward(self, img: Tensor) -> tuple[Tensor, Tensor]:
        n, _, h, w = img.shape
        if h % self.cfg.patch or w % self.cfg.patch:
            raise ValueError(f"input {h}x{w} not divisible by patch size {self.cfg.patch}")
        f = T.relu(T.conv2d(img, self.w1, 2, PaddingMode.ZERO, self.b1))
        f = T.relu(T.conv2d(f, self.w2, 2, PaddingMode.ZERO, self.b2))
        gh, gw = h // self.cfg.patch, w // self.cfg.patch
        pooled = T.avg_pool2d(f, f.shape[2] // gh)
        seq = T.transpose(T.reshape(pooled, (n, self.cfg.channels, gh * gw)), (0, 2, 1))
        tok = T.matmul(seq, self.tok_w)
        cls = self.cls + Tensor(np.zeros((n, 1, tok.shape[2]), dtype=np.float32))
        tokens = T.concat([cls, tok], axis=1) + self._pos_for(gh * gw + 1)
        return f, tokens


class DualBranchModel:
    """Conv branch + transformer branch with per-block coupling and two heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        c, d = cfg.channels, cfg.dim
        self.stem = Stem(cfg, rng)
        self.conv_blocks = [
            CablBlock(cfg, rng, use_edge=(i < cfg.cabl_depth)) for i in range(cfg.blocks)
        ]
        self.trans_blocks = [TransBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.fcu_ct = [T.scaled_normal(rng, (c, d), c) for _ in range(cfg.blocks)]
        self.fcu_tc = [T.scaled_normal(rng, (d, c), d) for _ in range(cfg.blocks)]
        self.fin_g = T.ones_param((d,))
        self.fin_b = T.zeros_param((d,))
        # small head init: near-uncommitted start without a symmetric saddle
        self.conv_head_w = Tensor(rng.normal(0.0, 0.1 / c**0.5, size=(2, c)), requires_grad=True)
        self.conv_head_b = T.zeros_param((2,))
        self.trans_head_w = Tensor(rng.normal(0.0, 0.1 / d**0.5, size=(2, d)), requires_grad=True)
        self.trans_head_b = T.zeros_param((2,))

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.stem.params("stem"))
        for i, blk in enumerate(self.conv_blocks):
            params.update(blk.params(f"conv{i}"))
        for i, blk in enumerate(self.trans_blocks):
            params.update(blk.params(f"trans{i}"))
        for i in range(self.cfg.blocks):
            params[f"fcu{i}.ct"] = self.fcu_ct[i]
            params[f"fcu{i}.tc"] = self.fcu_tc[i]
        params.update(
            {
                "fin_g": self.fin_g,
                "fin_b": self.fin_b,
                "conv_head.w": self.conv_head_w,
                "conv_head.b": self.conv_head_b,
                "trans_head.w": self.trans_head_w,
                "trans_head.b": self.trans_head_b,
            }
        )
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def forward(self, img: Tensor) -> BranchOutputs:
        feat, tokens = self.stem.forward(img)
        conv_feats, attns, qs, ks = [], [], [], []
        for i in range(self.cfg.blocks):
            fc = self.conv_blocks[i].forward(feat)
            feat, tokens = fcu_exchange(fc, tokens, self.fcu_ct[i], self.fcu_tc[i])
            tokens, attn, q, k = self.trans_blocks[i].forward(tokens)
            conv_feats.append(feat)
            attns.append(attn)
            qs.append(q)
            ks.append(k)

        gap = T.global_avg_pool(feat)
        conv_logits = T.matmul(gap, T.transpose(self.conv_head_w, (1, 0))) + self.conv_head_b
        tok_final = T.layer_norm(tokens, self.fin_g, self.fin_b)
        cls_tok = T.reshape(T.narrow(tok_final, 1, 0, 1), (img.shape[0], self.cfg.dim))
        trans_logits = T.matmul(cls_tok, T.transpose(self.trans_head_w, (1, 0))) + self.trans_head_b

        return BranchOutputs(
            conv_feats=conv_feats,
            tokens_final=tok_final,
            attns=attns,
            qs=qs,
            ks=ks,
            conv_logits=conv_logits,
            trans_logits=trans_logits,
        )


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def classify_heads(out: BranchOutputs) -> tuple[Tensor, Tensor, np.ndarray]:
    """Image score = mean of the two branches' manipulated-class softmax."""
    pc = _softmax_rows(out.conv_logits.data)
    pt = _softmax_rows(out.trans_logits.data)
    score = 0.5 * (pc[:, 1] + pt[:, 1])
    return out.conv_logits, out.trans_logits, score


def total_loss(conv_logits: Tensor, trans_logits: Tensor, labels) -> Tensor:
    """Unweighted sum of the two branch cross-entropies."""
    return T.bce_with_logits(conv_logits, labels) + T.bce_with_logits(trans_logits, labels)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def images_to_input(images: list[Image], size: Optional[int] = None) -> Tensor:
    """Stack u8 images into a [-1, 1] float NCHW batch, resizing if asked."""
    arrs = []
    for img in images:
        if size is not None and (img.height != size or img.width != size):
            img = bilinear_resize(img, size, size)
        px = img.pixels
        if px.shape[2] == 1:
            px = np.repeat(px, 3, axis=2)
        arrs.append(px)
    x = np.stack(arrs).astype(np.float32) / 255.0 * 2.0 - 1.0
    return Tensor(x.transpose(0, 3, 1, 2))


def _augment_rescale(img: Image, rng: np.random.Generator, out_size: int) -> Image:
    """Random rescale in [0.75, 1.25], then crop or replicate-pad back."""
    s = rng.uniform(0.75, 1.25)
    new = max(8, int(round(out_size * s)))
    scaled = bilinear_resize(img, new, new)
    px = scaled.pixels
    if new > out_size:
        oy = int(rng.integers(0, new - out_size + 1))
        ox = int(rng.integers(0, new - out_size + 1))
        px = px[oy : oy + out_size, ox : ox + out_size]
    elif new < out_size:
        extra = out_size - new
        oy = int(rng.integers(0, extra + 1))
        ox = int(rng.integers(0, extra + 1))
        px = np.pad(px, ((oy, extra - oy), (ox, extra - ox), (0, 0)), mode="edge")
    return Image(px)


@dataclass
class EpochStats:
    loss: float
    accuracy: float


def train_epoch(
    model: DualBranchModel,
    dataset: list[tuple[Image, int]],
    state: T.OptimState,
    seed: int,
    epoch: int = 0,
    batch_size: int = 8,
    augment: bool = True,
) -> EpochStats:
    """One shuffled pass; deterministic for a given (seed, epoch)."""
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset))
    size = model.cfg.input_size
    params = model.parameters()

    losses, hits, seen = [], 0, 0
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        imgs, labels = [], []
        for i in idx:
            img, lab = dataset[int(i)]
            if augment:
                img = _augment_rescale(img, rng, size)
            imgs.append(img)
            labels.append(lab)
        x = images_to_input(imgs, size)
        out = model.forward(x)
        loss = total_loss(out.conv_logits, out.trans_logits, labels)
        model.zero_grad()
        T.backward(loss)
        T.adamw_step(params, state)

        _, _, scores = classify_heads(out)
        hits += int(((scores > 0.5).astype(int) == np.asarray(labels)).sum())
        seen += len(labels)
        losses.append(loss.item() * len(labels))
    return EpochStats(loss=float(np.sum(losses) / seen), accuracy=hits / seen)


# ---------------------------------------------------------------------------
# checkpoint i/o
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: DualBranchModel) -> None:
    """FLOC1 container: canonical-JSON config then length-prefixed named
    little-endian f32 blobs."""
    cfg_json = json.dumps(asdict(model.cfg), sort_keys=True).encode("utf-8")
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", p.data.ndim))
        for d in p.data.shape:
            buf.write(struct.pack("<I", d))
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> DualBranchModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    off = 5

    def u32() -> int:
        nonlocal off
        (v,) = struct.unpack_from("<I", raw, off)
        off += 4
        return v

    cfg_len = u32()
    cfg = ModelConfig(**json.loads(raw[off : off + cfg_len].decode("utf-8")))
    off += cfg_len
    model = DualBranchModel(cfg, seed=0)
    params = model.parameters()
    n = u32()
    if n != len(params):
        raise ValueError(f"checkpoint has {n} params, model expects {len(params)}")
    for _ in range(n):
        name_len = u32()
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        ndim = u32()
        shape = tuple(u32() for _ in range(ndim))
        nbytes = u32()
        data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        off += nbytes
        if name not in params:
            raise ValueError(f"unknown parameter {name!r} in checkpoint")
        if params[name].data.shape != shape:
            raise ValueError(f"shape mismatch for {name!r}")
        params[name].data = np.ascontiguousarray(data, dtype=np.float32)
    return model
