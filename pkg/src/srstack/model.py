"""The student network: shared per-frame encoder, optional cross-time fusion,
mean fusion over time, and a x8 residual upsampling decoder with 5 heads.

The encoder is a small two-branch multi-resolution trunk (full-res branch
plus a half-res branch merged back bilinearly) with a stride-1 root, so
features keep the input's spatial extents. Frames are carried in the batch
axis; encoder weights are therefore shared across time by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .scene import CHANNEL_ORDER
from .stack import METADATA_ORDER, Frame, encode_metadata_channels, scale_azimuth, scale_zenith

CH = {name: i for i, name in enumerate(CHANNEL_ORDER)}
HEIGHT_CAP_M = 100.0


@dataclass(frozen=True)
class ModelConfig:
    upscale_factor: int = 8
    frames: int = 8
    band_count: int = 4
    encoder_widths: tuple[int, int] = (12, 16)
    fusion_mode: str = "cross_time"
    decoder_widths: tuple[int, ...] = (36, 18, 9)
    output_channels: int = 5
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.upscale_factor != 2 ** len(self.decoder_widths):
            raise ValueError(
                f"upscale factor {self.upscale_factor} != 2^{len(self.decoder_widths)} decoder blocks"
            )
        if self.output_channels != len(CHANNEL_ORDER):
            raise ValueError(f"model predicts the {len(CHANNEL_ORDER)} fixed output channels")
        if self.fusion_mode not in ("none", "cross_time"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.frames < 1:
            raise ValueError("need at least one frame")

    @property
    def in_channels(self) -> int:
        return self.band_count + len(METADATA_ORDER)


@dataclass
class Prediction:
    """Model output over the high-resolution footprint.

    ``node`` is the (1, gH, gW, 5) sigmoid output in the autodiff graph;
    the named arrays are read-only numpy views of it. Heights are the
    sigmoid channel scaled to the 100 m cap.
    """

    node: T.TensorNode

    def _chan(self, name: str) -> np.ndarray:
        return self.node.value[0, :, :, CH[name]]

    @property
    def building(self) -> np.ndarray:
        return self._chan("building")

    @property
    def road(self) -> np.ndarray:
        return self._chan("road")

    @property
    def centroid(self) -> np.ndarray:
        return self._chan("centroid")

    @property
    def grayscale(self) -> np.ndarray:
        return self._chan("grayscale")

    @property
    def height_m(self) -> np.ndarray:
        return HEIGHT_CAP_M * self._chan("height_m")

    @property
    def shape(self) -> tuple[int, int]:
        return self.node.value.shape[1:3]


class StudentModel:
    """Owns parameters and batch-norm state; builds a fresh graph per call."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, T.TensorNode] = {}
        self.bn_states: dict[str, T.BatchNormState] = {}
        self._rng = np.random.default_rng((seed, 0x30DE))
        self._build_params()

    # -- parameter construction -------------------------------------------

    def _conv_p(self, name, kh, kw, cin, cout, bias=True):
        # convs feeding straight into batch norm get no bias: BN's mean
        # subtraction would cancel it exactly, leaving a dead parameter
        fan = kh * kw * cin
        self.params[f"{name}.w"] = T.parameter(
            T.uniform_init(self._rng, (kh, kw, cin, cout), fan, self.dtype), name=f"{name}.w"
        )
        if bias:
            self.params[f"{name}.b"] = T.parameter(np.zeros(cout, dtype=self.dtype), name=f"{name}.b")

    def _pconv_p(self, name, cin, cout, bias=True):
        self.params[f"{name}.w"] = T.parameter(
            T.uniform_init(self._rng, (cin, cout), cin, self.dtype), name=f"{name}.w"
        )
        if bias:
            self.params[f"{name}.b"] = T.parameter(np.zeros(cout, dtype=self.dtype), name=f"{name}.b")

    def _bn_p(self, name, c):
        self.params[f"{name}.gamma"] = T.parameter(np.ones(c, dtype=self.dtype), name=f"{name}.gamma")
        self.params[f"{name}.beta"] = T.parameter(np.zeros(c, dtype=self.dtype), name=f"{name}.beta")
        self.bn_states[name] = T.BatchNormState(c, dtype=self.dtype)

    def _build_params(self):
        cfg = self.cfg
        w0, w1 = cfg.encoder_widths
        cin = cfg.in_channels
        self._conv_p("enc.root1", 3, 3, cin, w0, bias=False)
        self._bn_p("enc.root1.bn", w0)
        self._conv_p("enc.root2", 3, 3, w0, w0, bias=False)
        self._bn_p("enc.root2.bn", w0)
        self._conv_p("enc.full", 3, 3, w0, w0, bias=False)
        self._bn_p("enc.full.bn", w0)
        self._conv_p("enc.half1", 3, 3, w0, w1, bias=False)
        self._bn_p("enc.half1.bn", w1)
        self._conv_p("enc.half2", 3, 3, w1, w1, bias=False)
        self._bn_p("enc.half2.bn", w1)
        feat = w0 + w1
        self._pconv_p("enc.merge", feat, feat, bias=False)
        self._bn_p("enc.merge.bn", feat)

        if cfg.fusion_mode == "cross_time":
            # biases here would be constant per channel after the time mean
            # and die in the decoder's leading batch norm, so there are none
            t, c = cfg.frames, feat
            self.params["fuse.depthwise.w"] = T.parameter(
                T.uniform_init(self._rng, (t, t, c), t, self.dtype), name="fuse.depthwise.w"
            )
            self._pconv_p("fuse.pointwise", c, c, bias=False)

        c_in = feat
        for i, n in enumerate(cfg.decoder_widths):
            pre = f"dec{i}"
            self._bn_p(f"{pre}.bn1", c_in)
            self._conv_p(f"{pre}.conv1", 3, 3, c_in, n, bias=False)
            self._bn_p(f"{pre}.bn2", n)
            self._conv_p(f"{pre}.conv2", 3, 3, n, n, bias=False)
            self._bn_p(f"{pre}.bn3", n)
            if c_in != n:
                self._pconv_p(f"{pre}.shortcut", c_in, n, bias=False)
            self._conv_p(f"{pre}.up", 4, 4, n, n, bias=False)
            c_in = n
        self._conv_p("head.conv", 3, 3, c_in, c_in, bias=False)
        self._bn_p("head.bn", c_in)
        self._pconv_p("head.out", c_in, cfg.output_channels)

    # -- graph builders ----------------------------------------------------

    def _conv(self, name, x, stride=1):
        return T.conv2d(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"), stride=stride)

    def _pconv(self, name, x):
        return T.pointwise_conv(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"))

    def _bn(self, name, x, training):
        return T.batch_norm(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.bn_states[name],
            training=training,
            momentum=self.cfg.bn_momentum,
            eps=self.cfg.bn_eps,
        )

    def encode_frames(self, x: T.TensorNode, training: bool) -> T.TensorNode:
        """Encode a (T, H, W, B+9) stack; output keeps (T, H, W) extents."""
        if x.shape[3] != self.cfg.in_channels:
            raise T.ShapeMismatch(
                f"encoder expects {self.cfg.in_channels} input channels, got {x.shape[3]} (dimension 'channels')"
            )
        h = T.relu(self._bn("enc.root1.bn", self._conv("enc.root1", x), training))
        h = T.relu(self._bn("enc.root2.bn", self._conv("enc.root2", h), training))
        full = T.relu(self._bn("enc.full.bn", self._conv("enc.full", h), training))
        half = T.relu(self._bn("enc.half1.bn", self._conv("enc.half1", h, stride=2), training))
        half = T.relu(self._bn("enc.half2.bn", self._conv("enc.half2", half), training))
        half_up = T.bilinear_resize(half, h.shape[1], h.shape[2])
        merged = T.concat_channels([full, half_up])
        return T.relu(self._bn("enc.merge.bn", self._pconv("enc.merge", merged), training))

    def encode_frame(self, frame_channels: np.ndarray, training: bool = False) -> T.TensorNode:
        """Encode one (H, W, B+9) frame; same weights as the stacked path."""
        x = T.constant(frame_channels[None].astype(self.dtype))
        return self.encode_frames(x, training)

    def cross_time_fuse(self, feats: T.TensorNode) -> T.TensorNode:
        """Depthwise time mixing + shared pointwise map, added residually."""
        mixed = T.depthwise_conv1d_time(feats, self.params["fuse.depthwise.w"])
        mixed = self._pconv("fuse.pointwise", mixed)
        return T.add(feats, mixed)

    def _decoder_block(self, i, x, training):
        pre = f"dec{i}"
        n = self.cfg.decoder_widths[i]
        h = self._conv(f"{pre}.conv1", T.relu(self._bn(f"{pre}.bn1", x, training)))
        h = self._conv(f"{pre}.conv2", T.relu(self._bn(f"{pre}.bn2", h, training)))
        h = T.relu(self._bn(f"{pre}.bn3", h, training))
        shortcut = self._pconv(f"{pre}.shortcut", x) if x.shape[3] != n else x
        h = T.add(h, shortcut)
        return T.transposed_conv2d(h, self.params[f"{pre}.up.w"], stride=2)

    def fuse_and_decode(self, feats: T.TensorNode, training: bool) -> Prediction:
        """Average over time, upsample x8 through the residual decoder, 5 heads."""
        h = T.mean_over_time(feats)
        for i in range(len(self.cfg.decoder_widths)):
            h = self._decoder_block(i, h, training)
        h = T.relu(self._bn("head.bn", self._conv("head.conv", h), training))
        out = T.sigmoid(self._pconv("head.out", h))
        return Prediction(out)

    def forward(
        self,
        frames: list[Frame],
        hr_incidence_override_deg: tuple[float, float] | None = None,
        training: bool = False,
    ) -> Prediction:
        """Full pass over T frames; optionally force the hr-incidence planes."""
        if len(frames) != self.cfg.frames:
            raise ValueError(f"model configured for {self.cfg.frames} frames, got {len(frames)}")
        stack = np.stack([encode_metadata_channels(f) for f in frames]).astype(self.dtype)
        if hr_incidence_override_deg is not None:
            az, zen = hr_incidence_override_deg
            b = self.cfg.band_count
            stack[:, :, :, b + METADATA_ORDER.index("hr_incidence_azimuth")] = scale_azimuth(az)
            stack[:, :, :, b + METADATA_ORDER.index("hr_incidence_zenith")] = scale_zenith(zen)
        x = T.constant(stack, name="input_stack")
        feats = self.encode_frames(x, training)
        if self.cfg.fusion_mode == "cross_time":
            feats = self.cross_time_fuse(feats)
        return self.fuse_and_decode(feats, training)

    # -- bookkeeping --------------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, s in self.bn_states.items():
            for key, arr in s.as_arrays().items():
                out[f"{name}.{key}"] = arr
        return out

    def load_arrays(self, params: dict[str, np.ndarray], states: dict[str, np.ndarray] | None = None):
        for k, node in self.params.items():
            node.value[...] = params[k]
        if states:
            for name, s in self.bn_states.items():
                s.running_mean[...] = states[f"{name}.running_mean"]
                s.running_var[...] = states[f"{name}.running_var"]

    def zero_param_grads(self):
        for node in self.params.values():
            node.grad[...] = 0.0

    def fusion_param_count(self) -> int:
        return sum(self.params[k].size for k in self.params if k.startswith("fuse."))
