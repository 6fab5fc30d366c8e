"""Configurable feature extractor with swappable heads.

The trunk is deliberately small: a 2-4 layer perceptron for vector inputs or
a two-convolution net for grayscale images, each finished by one
squeeze-excitation gate over its channels. Two heads plug onto the trunk:
a raw-logit classification head used for the pretraining stage, and a
unit-normalized embedding head (plus an attached pair discriminator) used for
the cross-modality stage. ``swap_head`` moves a pretrained trunk to the
second stage bit-exactly while initializing fresh head parameters from a
recorded seed.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .autograd import Tensor
from .discriminator import DEFAULT_HIDDEN, PairDiscriminator, glorot_uniform


@dataclass
class BackboneConfig:
    mode: str = "vector"                     # "vector" or "image"
    input_dim: int = 64                      # vector mode
    input_shape: tuple | None = None         # (H, W), image mode, grayscale
    hidden: tuple = (128, 64)                # perceptron widths, vector mode
    conv_channels: tuple = (8, 16)           # image mode
    embedding_dim: int = 256
    se_reduction: int = 16
    num_classes: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.input_shape is not None:
            self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.mode not in ("vector", "image"):
            raise ValueError(f"mode must be 'vector' or 'image', got {self.mode!r}")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.mode == "vector":
            if not (1 <= len(self.hidden) <= 4):
                raise ValueError("vector trunk takes 1-4 hidden layers")
        else:
            if self.input_shape is None or len(self.input_shape) != 2:
                raise ValueError("image mode needs input_shape=(H, W)")
            if len(self.conv_channels) != 2:
                raise ValueError("image trunk takes exactly 2 conv layers")
            h, w = self.input_shape
            for _ in self.conv_channels:
                h, w = h - 2, w - 2
                if h < 2 or w < 2 or h % 2 or w % 2:
                    raise ValueError(
                        f"input_shape {self.input_shape} incompatible with conv3x3+pool2 twice")
                h, w = h // 2, w // 2
        if self.trunk_width % self.se_reduction:
            raise ValueError(
                f"se_reduction {self.se_reduction} must divide trunk channel count {self.trunk_width}")

    @property
    def trunk_width(self):
        return self.hidden[-1] if self.mode == "vector" else self.conv_channels[-1]


class SEBlock:
    """Channel recalibration: squeeze to per-channel averages, gate, rescale.

    The gate for channel c is sigmoid of a two-layer bottleneck (C -> C/r -> C,
    no biases) over the squeezed vector; the input is multiplied channel-wise
    by the resulting (0, 1) weights. Accepts b x C features or b x H x W x C maps.
    """

    def __init__(self, w1: Tensor, w2: Tensor):
        self.w1 = w1  # C x C/r
        self.w2 = w2  # C/r x C

    @classmethod
    def initialize(cls, channels, reduction, rng, dtype):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channel count {channels}")
        mid = channels // reduction
        return cls(Tensor(glorot_uniform(rng, (channels, mid), dtype), requires_grad=True),
                   Tensor(glorot_uniform(rng, (mid, channels), dtype), requires_grad=True))

    def __call__(self, x) -> Tensor:
        x = ag.as_tensor(x)
        squeeze = ag.mean_spatial(x) if x.data.ndim == 4 else x
        gates = ag.sigmoid(ag.matmul(ag.relu(ag.matmul(squeeze, self.w1)), self.w2))
        if x.data.ndim == 4:
            return ag.scale_channels(x, gates)
        return ag.mul(x, gates)


class Network:
    """Trunk plus the head matching its training stage.

    stage 'pretrained': classification head only (use ``classify``).
    stage 'hfr': embedding head and optional pair discriminator (use ``embed``).
    """

    def __init__(self, cfg: BackboneConfig, stage, params, embedding_dim=None,
                 disc: PairDiscriminator | None = None, disc_hidden=DEFAULT_HIDDEN):
        self.cfg = cfg
        self.stage = stage
        self.params = params
        self.embedding_dim = embedding_dim
        self.disc = disc
        self.disc_hidden = tuple(disc_hidden)
        self.se = SEBlock(params["trunk.se.w1"], params["trunk.se.w2"])

    @property
    def dtype(self):
        return self.params["trunk.se.w1"].dtype

    def named_parameters(self):
        return dict(self.params)

    def trunk_parameter_names(self):
        return [n for n in self.params if n.startswith("trunk.")]

    def _prepare_input(self, x) -> Tensor:
        arr = np.asarray(x, dtype=self.dtype)
        if self.cfg.mode == "image" and arr.ndim == 3:
            arr = arr[..., None]
        return Tensor(arr)

    def features(self, x) -> Tensor:
        """SE-gated trunk output, b x trunk_width."""
        t = self._prepare_input(x)
        if self.cfg.mode == "vector":
            h = t
            for i in range(len(self.cfg.hidden)):
                h = ag.relu(ag.add_bias(ag.matmul(h, self.params[f"trunk.dense{i}.w"]),
                                        self.params[f"trunk.dense{i}.b"]))
            return self.se(h)
        h = t
        for i in range(len(self.cfg.conv_channels)):
            h = ag.relu(ag.conv2d(h, self.params[f"trunk.conv{i}.w"],
                                  self.params[f"trunk.conv{i}.b"]))
            h = ag.avg_pool2d(h, 2)
        return ag.mean_spatial(self.se(h))

    def classify(self, x) -> Tensor:
        """Raw logits for the pretraining softmax, b x num_classes."""
        if self.stage != ckpt.STAGE_PRETRAINED:
            raise ValueError(f"classify() needs a pretrain-stage network, this one is {self.stage!r}")
        feats = self.features(x)
        return ag.add_bias(ag.matmul(feats, self.params["head.classify.w"]),
                           self.params["head.classify.b"])

    def embed(self, x) -> Tensor:
        """Unit-L2-norm embeddings, b x embedding_dim."""
        if self.stage != ckpt.STAGE_HFR:
            raise ValueError(f"embed() needs an hfr-stage network, this one is {self.stage!r}")
        feats = self.features(x)
        raw = ag.add_bias(ag.matmul(feats, self.params["head.embed.w"]),
                          self.params["head.embed.b"])
        return ag.l2_normalize(raw)


def build_pretrain_network(cfg: BackboneConfig, seed=0, dtype=np.float32) -> Network:
    """Fresh stage-'pretrained' network; parameter draw order is fixed, so a
    given seed always yields the same initialization."""
    rng = np.random.default_rng(seed)
    params = {}
    if cfg.mode == "vector":
        widths = [cfg.input_dim, *cfg.hidden]
        for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"trunk.dense{i}.w"] = Tensor(glorot_uniform(rng, (w_in, w_out), dtype), requires_grad=True)
            params[f"trunk.dense{i}.b"] = Tensor(np.zeros(w_out, dtype=dtype), requires_grad=True)
    else:
        chans = [1, *cfg.conv_channels]
        for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:])):
            params[f"trunk.conv{i}.w"] = Tensor(glorot_uniform(rng, (3, 3, c_in, c_out), dtype), requires_grad=True)
            params[f"trunk.conv{i}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    se = SEBlock.initialize(cfg.trunk_width, cfg.se_reduction, rng, dtype)
    params["trunk.se.w1"] = se.w1
    params["trunk.se.w2"] = se.w2
    params["head.classify.w"] = Tensor(glorot_uniform(rng, (cfg.trunk_width, cfg.num_classes), dtype),
                                       requires_grad=True)
    params["head.classify.b"] = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)
    return Network(cfg, ckpt.STAGE_PRETRAINED, params)


def swap_head(net: Network, seed=0, embedding_dim=None, disc_hidden=DEFAULT_HIDDEN,
              with_disc=True) -> Network:
    """Move a pretrained network to the hfr stage.

    Trunk tensors are copied bit-exactly; the softmax head is dropped and a
    fresh unit-norm embedding head (plus discriminator, unless disabled) is
    drawn from ``seed``. Two swaps of the same checkpoint with the same seed
    produce identical heads.
    """
    if net.stage != ckpt.STAGE_PRETRAINED:
        raise ValueError(f"swap_head() needs a pretrain-stage network, this one is {net.stage!r}")
    d = int(embedding_dim if embedding_dim is not None else net.cfg.embedding_dim)
    dtype = net.dtype
    rng = np.random.default_rng(seed)
    params = {name: Tensor(t.data.copy(), requires_grad=True)
              for name, t in net.params.items() if name.startswith("trunk.")}
    params["head.embed.w"] = Tensor(glorot_uniform(rng, (net.cfg.trunk_width, d), dtype), requires_grad=True)
    params["head.embed.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    disc = None
    if with_disc:
        disc = PairDiscriminator.initialize(2 * d, hidden=disc_hidden,
                                            seed=rng.integers(0, 2**31 - 1), dtype=dtype)
        params.update(disc.named_parameters())
    return Network(net.cfg, ckpt.STAGE_HFR, params, embedding_dim=d,
                   disc=disc, disc_hidden=disc_hidden)


def save_network(net: Network, path, meta=None, extra_tensors=None):
    """Checkpoint the network; ``extra_tensors`` rides along (optimizer state)."""
    tensors = {name: t.data for name, t in sorted(net.params.items())}
    if extra_tensors:
        tensors.update(extra_tensors)
    full_meta = {
        "stage": net.stage,
        "backbone": asdict(net.cfg),
        "embedding_dim": net.embedding_dim,
        "disc_hidden": list(net.disc_hidden),
        "has_disc": net.disc is not None,
    }
    full_meta.update(meta or {})
    ckpt.save_tensors(path, tensors, full_meta)


def load_network(path):
    """Rebuild a Network from a checkpoint; returns (net, meta, extra_tensors)."""
    tensors, meta = ckpt.load_tensors(path)
    cfg_dict = dict(meta["backbone"])
    cfg = BackboneConfig(**cfg_dict)
    params = {name: Tensor(arr, requires_grad=True)
              for name, arr in tensors.items() if not name.startswith("optim.")}
    extra = {name: arr for name, arr in tensors.items() if name.startswith("optim.")}
    stage = meta["stage"]
    disc = None
    disc_hidden = tuple(meta.get("disc_hidden", DEFAULT_HIDDEN))
    if stage == ckpt.STAGE_HFR and meta.get("has_disc"):
        disc = PairDiscriminator.from_named(params, hidden_count=len(disc_hidden))
    net = Network(cfg, stage, params, embedding_dim=meta.get("embedding_dim"),
                  disc=disc, disc_hidden=disc_hidden)
    return net, meta, extra
