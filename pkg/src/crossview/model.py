"""Two-branch weight-shared encoder with permutation-branch attention.

The encoder is a compact stack of stride-2 conv stages.  Its feature map is
refined by four parallel branches: each permutes the (C, H, W) axes into a
different order, applies a channel-plus-spatial attention gate in that order,
multiplies, and restores the original order; the four results are summed.
Five classifier streams (the fused map plus the four branch maps, globally
average-pooled) each project to a bottleneck vector and a class-logit vector.
Both views share every parameter; the spatial-gate conv is additionally
shared across the four branches unless configured otherwise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import cten
from . import tensor as T
from .errors import CheckpointError, ConfigError, NormalizationError, ShapeError
from .tensor import Tensor

BRANCH_NAMES = tuple(T.BRANCH_ORDERS)
STREAM_NAMES = ("fused",) + BRANCH_NAMES
_NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    n_classes: int
    in_channels: int = 3
    input_hw: tuple = (16, 16)
    widths: tuple = (16, 32)
    bottleneck: int = 512
    caci_reduction: int = 4
    caci_weight_sharing: bool = True
    spatial_kernel: int = 7
    n_streams: int = 5

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.widths = tuple(int(v) for v in self.widths)
        self.validate()

    @property
    def c_out(self) -> int:
        return self.widths[-1]

    @property
    def feature_hw(self) -> tuple:
        f = 2 ** len(self.widths)
        return (self.input_hw[0] // f, self.input_hw[1] // f)

    def branch_axis_size(self, branch: str) -> int:
        fh, fw = self.feature_hw
        return {"CHW": self.c_out, "HWC": fh, "WCH": fw, "CWH": self.c_out}[branch]

    def validate(self) -> None:
        if self.n_streams != 5:
            raise ConfigError(f"classifier head uses 5 streams, got {self.n_streams}")
        if self.bottleneck <= 0:
            raise ConfigError(f"bottleneck must be positive, got {self.bottleneck}")
        if self.n_classes <= 0:
            raise ConfigError(f"n_classes must be positive, got {self.n_classes}")
        if not self.widths:
            raise ConfigError("at least one backbone stage is required")
        if self.caci_reduction < 1:
            raise ConfigError(f"caci_reduction must be >= 1, got {self.caci_reduction}")
        if self.c_out % self.caci_reduction != 0:
            raise ConfigError(
                f"caci_reduction {self.caci_reduction} does not divide c_out {self.c_out}"
            )
        if self.spatial_kernel % 2 != 1:
            raise ConfigError(f"spatial_kernel must be odd, got {self.spatial_kernel}")
        f = 2 ** len(self.widths)
        if self.input_hw[0] % f or self.input_hw[1] % f:
            raise ShapeError(f"input {self.input_hw} not divisible by total stride {f}")


@dataclass
class ModelOutput:
    fused: Tensor
    branches: list
    bottlenecks: list = field(default_factory=list)
    logits: list = field(default_factory=list)


def _uniform(rng, shape, fan_in):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 1:
        out = T.matmul(T.reshape(x, (1, x.shape[0])), w) + b
        return T.reshape(out, (out.shape[1],))
    return T.matmul(x, w) + b


def _standardize(v: Tensor, eps: float = _NORM_EPS) -> Tensor:
    """Zero-mean unit-variance over the last axis, per sample."""
    centered = v - T.tmean(v, axis=-1, keepdims=True)
    var = T.tmean(centered * centered, axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps)


class CrossViewModel:
    """Parameter container plus the forward operations of the encoder."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "CrossViewModel":
        rng = np.random.default_rng([int(seed), 7])
        p = {}

        cin = cfg.in_channels
        for i, width in enumerate(cfg.widths):
            p[f"backbone.stage{i}.conv.w"] = _uniform(rng, (width, cin, 3, 3), cin * 9)
            p[f"backbone.stage{i}.conv.b"] = np.zeros(width)
            if i != len(cfg.widths) - 1:
                p[f"backbone.stage{i}.norm.gamma"] = np.ones(width)
                p[f"backbone.stage{i}.norm.beta"] = np.zeros(width)
            cin = width

        k = cfg.spatial_kernel
        for branch in BRANCH_NAMES:
            ca = cfg.branch_axis_size(branch)
            hidden = max(1, ca // cfg.caci_reduction)
            p[f"caci.{branch}.mlp.w0"] = _uniform(rng, (ca, hidden), ca)
            p[f"caci.{branch}.mlp.b0"] = np.zeros(hidden)
            p[f"caci.{branch}.mlp.w1"] = _uniform(rng, (hidden, ca), hidden)
            p[f"caci.{branch}.mlp.b1"] = np.zeros(ca)
            if not cfg.caci_weight_sharing:
                p[f"caci.{branch}.spatial.w"] = _uniform(rng, (1, 2, k, k), 2 * k * k)
                p[f"caci.{branch}.spatial.b"] = np.zeros(1)
        if cfg.caci_weight_sharing:
            p["caci.shared.spatial.w"] = _uniform(rng, (1, 2, k, k), 2 * k * k)
            p["caci.shared.spatial.b"] = np.zeros(1)

        for stream in STREAM_NAMES:
            p[f"head.{stream}.bottleneck.w"] = _uniform(rng, (cfg.c_out, cfg.bottleneck), cfg.c_out)
            p[f"head.{stream}.bottleneck.b"] = np.zeros(cfg.bottleneck)
            p[f"head.{stream}.classifier.w"] = _uniform(rng, (cfg.bottleneck, cfg.n_classes), cfg.bottleneck)
            p[f"head.{stream}.classifier.b"] = np.zeros(cfg.n_classes)

        params = {name: Tensor(arr, requires_grad=True) for name, arr in p.items()}
        return cls(cfg, params)

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def param_groups(self) -> dict:
        groups = {"backbone": [], "new": []}
        for name, t in self.params.items():
            key = "backbone" if name.startswith("backbone.") else "new"
            groups[key].append((name, t))
        return groups

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- forward ------------------------------------------------------------

    def backbone_forward(self, x) -> Tensor:
        """Encode (N,C,H,W) or (C,H,W) pixels into the shared feature map.

        Every stage is conv(s2) + per-channel normalization + relu except the
        last, which stays unnormalized: standardizing each channel right
        before global pooling would erase most inter-sample variance.
        """
        x = T.as_tensor(x)
        hh, ww = x.shape[-2], x.shape[-1]
        f = 2 ** len(self.cfg.widths)
        if hh % f or ww % f:
            raise ShapeError(f"spatial dims ({hh},{ww}) not divisible by total stride {f}")
        out = x
        last = len(self.cfg.widths) - 1
        for i in range(len(self.cfg.widths)):
            w = self.params[f"backbone.stage{i}.conv.w"]
            b = self.params[f"backbone.stage{i}.conv.b"]
            out = T.conv2d(out, w, b, stride=2, padding=1)
            if i != last:
                out = self._channel_norm(out, i)
            out = T.relu(out)
        return out

    def _channel_norm(self, x: Tensor, stage: int) -> Tensor:
        gamma = self.params[f"backbone.stage{stage}.norm.gamma"]
        beta = self.params[f"backbone.stage{stage}.norm.beta"]
        mu = T.tmean(x, axis=(-2, -1), keepdims=True)
        centered = x - mu
        var = T.tmean(centered * centered, axis=(-2, -1), keepdims=True)
        normed = centered / T.sqrt(var + _NORM_EPS)
        shape = (gamma.shape[0], 1, 1)
        return normed * T.reshape(gamma, shape) + T.reshape(beta, shape)

    def caci_forward(self, x, branch: str = "CHW"):
        """Channel gate (pooled MLP) times spatial gate (pooled-pair conv).

        Returns (attended, scale); every scale entry lies strictly in (0, 1).
        """
        x = T.as_tensor(x)
        ca = x.shape[-3]
        if ca < self.cfg.caci_reduction:
            raise ConfigError(f"channel axis {ca} smaller than reduction {self.cfg.caci_reduction}")
        w0 = self.params[f"caci.{branch}.mlp.w0"]
        if w0.shape[0] != ca:
            raise ShapeError(f"branch {branch} expects channel axis {w0.shape[0]}, got {ca}")
        b0 = self.params[f"caci.{branch}.mlp.b0"]
        w1 = self.params[f"caci.{branch}.mlp.w1"]
        b1 = self.params[f"caci.{branch}.mlp.b1"]
        sp = "caci.shared.spatial" if self.cfg.caci_weight_sharing else f"caci.{branch}.spatial"
        wsp = self.params[f"{sp}.w"]
        bsp = self.params[f"{sp}.b"]

        pooled = T.global_avg_pool(x)
        gate = T.sigmoid(_linear(T.relu(_linear(pooled, w0, b0)), w1, b1))
        channel_map = T.reshape(gate, gate.shape + (1, 1))

        pair = T.concat([T.channel_avg_pool(x), T.channel_max_pool(x)], axis=-3)
        spatial_map = T.sigmoid(T.conv2d(pair, wsp, bsp, stride=1, padding=self.cfg.spatial_kernel // 2))

        scale = channel_map * spatial_map
        return scale * x, scale

    def rca_forward(self, f):
        """Run all four permutation branches and sum their restored outputs."""
        f = T.as_tensor(f)
        branches = []
        fused = None
        for name, order in T.BRANCH_ORDERS.items():
            if f.ndim == 3:
                axes = order.order
            elif f.ndim == 4:
                axes = (0,) + tuple(a + 1 for a in order.order)
            else:
                raise ShapeError(f"rca_forward needs rank 3 or 4, got {f.shape}")
            permuted = T.permute(f, axes)
            attended, _ = self.caci_forward(permuted, branch=name)
            restored = T.inverse_permute(attended, axes)
            branches.append(restored)
            fused = restored if fused is None else fused + restored
        return fused, branches

    def head_forward(self, fused, branches):
        """Project the five pooled streams to bottlenecks and class logits.

        Each pooled vector is standardized over its channels first; without
        this the gated maps feed the head at a scale too small to train.
        """
        streams = [fused] + list(branches)
        if len(streams) != len(STREAM_NAMES):
            raise ShapeError(f"expected {len(STREAM_NAMES) - 1} branch maps, got {len(branches)}")
        bottlenecks, logits = [], []
        for name, stream in zip(STREAM_NAMES, streams):
            v = _standardize(T.global_avg_pool(stream))
            bn = _linear(v, self.params[f"head.{name}.bottleneck.w"], self.params[f"head.{name}.bottleneck.b"])
            lg = _linear(bn, self.params[f"head.{name}.classifier.w"], self.params[f"head.{name}.classifier.b"])
            bottlenecks.append(bn)
            logits.append(lg)
        return bottlenecks, logits

    def forward(self, x) -> ModelOutput:
        fmap = self.backbone_forward(x)
        fused, branches = self.rca_forward(fmap)
        bottlenecks, logits = self.head_forward(fused, branches)
        return ModelOutput(fused=fused, branches=branches, bottlenecks=bottlenecks, logits=logits)

    def extract_embedding(self, x) -> Tensor:
        """Concatenated bottleneck features, L2-normalized to unit length."""
        out = self.forward(x)
        emb = T.concat(out.bottlenecks, axis=-1)
        return l2_normalize(emb)

    # -- checkpointing --------------------------------------------------------

    def config_lines(self) -> list:
        c = self.cfg
        return [
            f"model.n_classes={c.n_classes}",
            f"model.in_channels={c.in_channels}",
            f"model.input_hw={c.input_hw[0]},{c.input_hw[1]}",
            "model.widths=" + ",".join(str(w) for w in c.widths),
            f"model.bottleneck={c.bottleneck}",
            f"model.caci_reduction={c.caci_reduction}",
            f"model.caci_weight_sharing={int(c.caci_weight_sharing)}",
            f"model.spatial_kernel={c.spatial_kernel}",
            f"model.n_streams={c.n_streams}",
        ]

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        lines = ["version 1"]
        lines += [f"config {line}" for line in self.config_lines()]
        for name in sorted(self.params):
            rel = os.path.join("tensors", name + ".cten")
            cten.write_tensor(os.path.join(directory, rel), self.params[name].data)
            lines.append(f"tensor {name} {rel}")
        with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory: str, expected: ModelConfig | None = None) -> "CrossViewModel":
        manifest = os.path.join(directory, "manifest.txt")
        if not os.path.isfile(manifest):
            raise CheckpointError(f"missing manifest under {directory}")
        config_kv = {}
        tensor_paths = {}
        with open(manifest, encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line:
                    continue
                kind, _, rest = line.partition(" ")
                if kind == "version":
                    if rest.strip() != "1":
                        raise CheckpointError(f"unsupported checkpoint version {rest!r}")
                elif kind == "config":
                    key, _, value = rest.partition("=")
                    config_kv[key.strip()] = value.strip()
                elif kind == "tensor":
                    name, _, rel = rest.partition(" ")
                    tensor_paths[name] = rel.strip()
                else:
                    raise CheckpointError(f"unknown manifest entry {line!r}")
        cfg = _config_from_kv(config_kv)
        if expected is not None and _config_from_kv(dict_kv(expected)) != cfg:
            raise CheckpointError(
                f"checkpoint config {cfg} does not match requested config {expected}"
            )
        blank = cls.init(cfg, seed=0)
        if set(tensor_paths) != set(blank.params):
            missing = sorted(set(blank.params) - set(tensor_paths))
            extra = sorted(set(tensor_paths) - set(blank.params))
            raise CheckpointError(f"parameter set mismatch: missing {missing}, extra {extra}")
        params = {}
        for name, rel in tensor_paths.items():
            arr = cten.read_tensor(os.path.join(directory, rel))
            if arr.shape != blank.params[name].shape:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {blank.params[name].shape}")
            params[name] = Tensor(arr, requires_grad=True)
        return cls(cfg, params)


def dict_kv(cfg: ModelConfig) -> dict:
    return {line.split("=", 1)[0]: line.split("=", 1)[1] for line in CrossViewModel(cfg, {}).config_lines()}


def _config_from_kv(kv: dict) -> ModelConfig:
    try:
        return ModelConfig(
            n_classes=int(kv["model.n_classes"]),
            in_channels=int(kv["model.in_channels"]),
            input_hw=tuple(int(v) for v in kv["model.input_hw"].split(",")),
            widths=tuple(int(v) for v in kv["model.widths"].split(",")),
            bottleneck=int(kv["model.bottleneck"]),
            caci_reduction=int(kv["model.caci_reduction"]),
            caci_weight_sharing=bool(int(kv["model.caci_weight_sharing"])),
            spatial_kernel=int(kv["model.spatial_kernel"]),
            n_streams=int(kv["model.n_streams"]),
        )
    except KeyError as e:
        raise CheckpointError(f"manifest lacks config key {e}") from e


def l2_normalize(emb: Tensor) -> Tensor:
    norm = T.sqrt(T.tsum(emb * emb, axis=-1, keepdims=True))
    if np.any(norm.data == 0.0):
        raise NormalizationError("cannot normalize an all-zero embedding")
    return emb / norm
