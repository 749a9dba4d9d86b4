"""Camera branch: strided image encoder, cross-view attention from BEV
queries onto the union of all cameras' feature tokens, and an upsampling
decoder that emits the camera BEV feature map.
"""

import math

import numpy as np

from . import autodiff as ad
from .cameras import CameraGeometryEmbedding, init_bev_positional_embedding
from .errors import ConfigError


class Conv:
    """Convolution layer with bias; ReLU is applied by callers."""

    def __init__(self, prefix, c_in, c_out, k, stride, padding, rng, dtype,
                 init_std=None):
        std = math.sqrt(2.0 / (c_in * k * k)) if init_std is None else init_std
        self.w = ad.parameter(rng.normal(0.0, std, (c_out, c_in, k, k)), dtype=dtype)
        self.b = ad.parameter(np.zeros((c_out, 1, 1)), dtype=dtype)
        self.stride = stride
        self.padding = padding
        self.prefix = prefix

    def parameters(self):
        return {f"{self.prefix}.w": self.w, f"{self.prefix}.b": self.b}

    def __call__(self, x):
        return ad.add(ad.conv2d(x, self.w, self.stride, self.padding), self.b)


class Linear:
    def __init__(self, prefix, d_in, d_out, rng, dtype, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / d_in), (d_in, d_out))
        self.w = ad.parameter(w, dtype=dtype)
        self.b = ad.parameter(np.zeros(d_out), dtype=dtype)
        self.prefix = prefix

    def parameters(self):
        return {f"{self.prefix}.w": self.w, f"{self.prefix}.b": self.b}

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class ImageEncoder:
    """Four conv blocks with feature taps at strides 4 and 8.

    Spatial reduction happens in 2x2 average pools after the first three
    blocks, so every conv keeps an exactly integral output size.
    """

    def __init__(self, c_in, c_img, rng, dtype, prefix="encoder"):
        self.blocks = [
            Conv(f"{prefix}.b1", c_in, c_img, 3, 1, 1, rng, dtype),
            Conv(f"{prefix}.b2", c_img, c_img, 3, 1, 1, rng, dtype),
            Conv(f"{prefix}.b3", c_img, c_img, 3, 1, 1, rng, dtype),
            Conv(f"{prefix}.b4", c_img, c_img, 3, 1, 1, rng, dtype),
        ]

    def parameters(self):
        out = {}
        for b in self.blocks:
            out.update(b.parameters())
        return out

    def __call__(self, image):
        """3xHxW image -> [stride-4 map, stride-8 map]."""
        x = ad.avgpool2x2(ad.relu(self.blocks[0](image)))
        x4 = ad.avgpool2x2(ad.relu(self.blocks[1](x)))
        x8 = ad.avgpool2x2(ad.relu(self.blocks[2](x4)))
        x8 = ad.relu(self.blocks[3](x8))
        return [x4, x8]


def attention(q, k, v):
    """Single-head scaled dot-product attention; returns (output, weights)."""
    d = q.shape[-1]
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    weights = ad.softmax(logits, axis=-1)
    return ad.matmul(weights, v), weights


class CrossAttentionLayer:
    """One attention layer: queries attend to the key/value union, with a
    residual connection and a pre-normalized two-layer feed-forward block."""

    def __init__(self, width, rng, dtype, prefix="attn"):
        self.ln_g = ad.parameter(np.ones(width), dtype=dtype)
        self.ln_b = ad.parameter(np.zeros(width), dtype=dtype)
        self.ffn1 = Linear(f"{prefix}.ffn1", width, 2 * width, rng, dtype)
        self.ffn2 = Linear(f"{prefix}.ffn2", 2 * width, width, rng, dtype)
        self.prefix = prefix

    def parameters(self):
        out = {f"{self.prefix}.ln_g": self.ln_g, f"{self.prefix}.ln_b": self.ln_b}
        out.update(self.ffn1.parameters())
        out.update(self.ffn2.parameters())
        return out

    def __call__(self, state, pos, keys, values):
        q = ad.add(state, pos)
        attended, _ = attention(q, keys, values)
        state = ad.add(state, attended)
        h = ad.layer_norm(state, self.ln_g, self.ln_b)
        h = self.ffn2(ad.relu(self.ffn1(h)))
        return ad.add(state, h)


class BevDecoder:
    """Nearest-upsample + conv blocks from the query grid to BEV resolution."""

    def __init__(self, d_in, c_out, hq, wq, h_bev, w_bev, rng, dtype, prefix="decoder"):
        ratio_h = h_bev / hq
        ratio_w = w_bev / wq
        if ratio_h != ratio_w or ratio_h < 1 or ratio_h != 2 ** round(math.log2(ratio_h)):
            raise ConfigError(
                f"BEV size {h_bev}x{w_bev} must be a shared power-of-2 multiple "
                f"of the query grid {hq}x{wq}"
            )
        n_up = round(math.log2(ratio_h))
        self.blocks = []
        c_prev = d_in
        for i in range(n_up):
            self.blocks.append(Conv(f"{prefix}.b{i}", c_prev, c_out, 3, 1, 1, rng, dtype))
            c_prev = c_out
        if n_up == 0:
            self.blocks.append(Conv(f"{prefix}.b0", d_in, c_out, 1, 1, 0, rng, dtype))
        self.n_up = n_up

    def parameters(self):
        out = {}
        for b in self.blocks:
            out.update(b.parameters())
        return out

    def __call__(self, x):
        if self.n_up == 0:
            return ad.relu(self.blocks[0](x))
        for b in self.blocks:
            x = ad.relu(b(ad.upsample_nearest2(x)))
        return x


class CameraBranch:
    """Images from a calibrated rig -> camera BEV feature map."""

    def __init__(self, cfg, rng, dtype=ad.DEFAULT_DTYPE, prefix="camera"):
        d = cfg.d_embed
        self.cfg = cfg
        self.prefix = prefix
        self.encoder = ImageEncoder(3, cfg.c_img, rng, dtype, f"{prefix}.encoder")
        self.cam_embed = CameraGeometryEmbedding(d, rng, dtype, f"{prefix}.embed")
        self.bev_pos = init_bev_positional_embedding(d, cfg.query_h, cfg.query_w, rng, dtype)
        # one feature projection and one attention layer per scale,
        # applied coarse (stride 8) to fine (stride 4)
        self.projs = [
            Linear(f"{prefix}.proj{s}", cfg.c_img, d, rng, dtype) for s in (8, 4)
        ]
        self.attn = [
            CrossAttentionLayer(d, rng, dtype, f"{prefix}.attn{s}") for s in (8, 4)
        ]
        self.decoder = BevDecoder(
            d, cfg.c_cam, cfg.query_h, cfg.query_w,
            cfg.bev_height, cfg.bev_width, rng, dtype, f"{prefix}.decoder",
        )

    def parameters(self):
        out = {f"{self.prefix}.bev_pos": self.bev_pos}
        out.update(self.encoder.parameters())
        out.update(self.cam_embed.parameters())
        for p in self.projs:
            out.update(p.parameters())
        for a in self.attn:
            out.update(a.parameters())
        out.update(self.decoder.parameters())
        return out

    def encode_images(self, images):
        return [self.encoder(img) for img in images]

    def __call__(self, images, rig):
        if len(images) != len(rig):
            raise ConfigError(f"{len(images)} images for a rig of {len(rig)} cameras")
        feats = self.encode_images(images)
        d = self.cfg.d_embed
        hq, wq = self.cfg.query_h, self.cfg.query_w
        nq = hq * wq
        pos = ad.transpose(ad.reshape(self.bev_pos, (d, nq)))
        state = ad.constant(np.zeros((nq, d)), dtype=self.bev_pos.dtype)
        # feats holds [stride4, stride8] per camera; attend coarse-to-fine
        for layer_idx, scale_idx in enumerate((1, 0)):
            keys, values = [], []
            for cam_idx, view in enumerate(rig):
                f = feats[cam_idx][scale_idx]
                c, h, w = f.shape
                tokens = ad.transpose(ad.reshape(f, (c, h * w)))
                proj = self.projs[layer_idx](tokens)
                emb = self.cam_embed(view, (h, w))
                emb_tok = ad.transpose(ad.reshape(emb, (d, h * w)))
                keys.append(ad.add(proj, emb_tok))
                values.append(proj)
            k = ad.concat(keys, axis=0)
            v = ad.concat(values, axis=0)
            state = self.attn[layer_idx](state, pos, k, v)
        bev_tokens = ad.reshape(ad.transpose(state), (d, hq, wq))
        return self.decoder(bev_tokens)
