"""Two-branch disentangling forecaster.

Each frame is encoded into a latent map that feeds two recurrent branches in
parallel: a PhyCell (physical part ``h_p``) and a ConvLSTM (residual part
``h_r``). Their sum ``h_p + h_r`` is decoded into the next frame.

Unrolling over ``T`` observed frames and ``delta`` forecast steps:

* observed step: both branches receive ``E(u_t)``; PhyCell assimilates;
* missing observed step: the frame is replaced by zeros, the residual branch
  receives ``E(0)`` and PhyCell only predicts (K = 0);
* forecast step: the residual branch receives ``E(u_hat_t)`` (its own
  prediction re-encoded) while PhyCell only predicts. PhyCell never sees
  predicted frames.

Parameters are grouped as ``w_p`` (PhyCell), ``w_r`` (ConvLSTM) and ``w_s``
(shared encoder/decoder) via name prefixes ``phy.``, ``res.``, ``enc.``/``dec.``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cells import ASSIMILATE, PREDICT, ConvLSTM, PhyCell
from .config import ModelConfig
from .tensor import ShapeError, Tensor

MISSING_SKIP = "skip"
MISSING_ASSIMILATE = "assimilate"

# Initial output logit. Frames are mostly dark background; starting the
# sigmoid at 0.5 makes early training drive it into saturation (all-black
# output with vanishing gradients).
OUTPUT_BIAS_INIT = -2.0


def _conv_init(rng, cout, cin, k, dtype):
    bound = 1.0 / math.sqrt(cin * k * k)
    return rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)


class EncoderDecoder:
    """Strided conv encoder (stride 2, 2, 1) and its transposed-conv mirror."""

    def __init__(self, channels: int, latent: int, hidden: tuple[int, int], rng, dtype=np.float32):
        c1, c2 = hidden
        self.channels, self.latent = channels, latent
        p = T.parameter
        self.enc = {
            "conv0.w": p(_conv_init(rng, c1, channels, 3, dtype)),
            "conv0.b": p(np.zeros(c1, dtype)),
            "conv1.w": p(_conv_init(rng, c2, c1, 3, dtype)),
            "conv1.b": p(np.zeros(c2, dtype)),
            "conv2.w": p(_conv_init(rng, latent, c2, 3, dtype)),
            "conv2.b": p(np.zeros(latent, dtype)),
        }
        # transposed-conv kernels are laid out [Cin, Cout, k, k]
        self.dec = {
            "deconv0.w": p(_conv_init(rng, latent, c2, 3, dtype)),
            "deconv0.b": p(np.zeros(c2, dtype)),
            "deconv1.w": p(_conv_init(rng, c2, c1, 3, dtype)),
            "deconv1.b": p(np.zeros(c1, dtype)),
            "deconv2.w": p(_conv_init(rng, c1, channels, 3, dtype)),
            "deconv2.b": p(np.full(channels, OUTPUT_BIAS_INIT, dtype)),
        }

    def encode(self, u: Tensor) -> Tensor:
        e = self.enc
        if u.ndim != 4 or u.shape[1] != self.channels:
            raise ShapeError(f"encode: expected [B,{self.channels},H,W], got {u.shape}")
        if u.shape[2] % 4 or u.shape[3] % 4:
            raise ShapeError(f"encode: frame {u.shape[2:]} not divisible by total stride 4")
        x = T.leaky_relu(T.conv2d(u, e["conv0.w"], e["conv0.b"], padding="same", stride=2))
        x = T.leaky_relu(T.conv2d(x, e["conv1.w"], e["conv1.b"], padding="same", stride=2))
        return T.conv2d(x, e["conv2.w"], e["conv2.b"], padding="same", stride=1)

    def decode(self, h: Tensor) -> Tensor:
        d = self.dec
        if h.ndim != 4 or h.shape[1] != self.latent:
            raise ShapeError(f"decode: expected [B,{self.latent},h,w], got {h.shape}")
        x = T.leaky_relu(T.conv2d_transpose(h, d["deconv0.w"], d["deconv0.b"], stride=1, padding=1))
        x = T.leaky_relu(
            T.conv2d_transpose(x, d["deconv1.w"], d["deconv1.b"], stride=2, padding=1, output_padding=1)
        )
        x = T.conv2d_transpose(x, d["deconv2.w"], d["deconv2.b"], stride=2, padding=1, output_padding=1)
        return T.sigmoid(x)


class IdentityCoder:
    """Pixel-space latent: ``E`` and ``D`` are the identity."""

    def __init__(self, channels: int):
        self.channels = self.latent = channels
        self.enc, self.dec = {}, {}

    def encode(self, u: Tensor) -> Tensor:
        if u.ndim != 4 or u.shape[1] != self.channels:
            raise ShapeError(f"encode: expected [B,{self.channels},H,W], got {u.shape}")
        return u

    def decode(self, h: Tensor) -> Tensor:
        return h


@dataclass
class SeqOutput:
    predictions: list  # u_hat for steps 2..T+delta, each [B,C,H,W]
    latents: list  # (h_p, h_r) per step; None for an absent branch
    T: int
    horizon: int

    @property
    def forecasts(self) -> list:
        return self.predictions[self.T - 1 :]


class PhyDNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        if cfg.encoder == "identity":
            self.coder = IdentityCoder(cfg.channels)
        else:
            self.coder = EncoderDecoder(
                cfg.channels, cfg.latent_channels, tuple(cfg.encoder_channels), rng, self.dtype
            )
        cl = self.coder.latent
        self.phycell = None
        self.residual = None
        if cfg.branch_mode in ("full", "phycell_only"):
            self.phycell = PhyCell(cl, cfg.phycell.k, rng, cfg.phycell.depth, self.dtype)
        if cfg.branch_mode in ("full", "residual_only"):
            self.residual = ConvLSTM(cl, cfg.residual.channels, cfg.residual.layers, cl, rng, self.dtype)

    # -- parameters -------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors in declaration order."""
        out: dict[str, Tensor] = {}
        for name, p in self.coder.enc.items():
            out[f"enc.{name}"] = p
        for name, p in self.coder.dec.items():
            out[f"dec.{name}"] = p
        if self.phycell is not None:
            for name, p in self.phycell.parameters().items():
                out[f"phy.{name}"] = p
        if self.residual is not None:
            for name, p in self.residual.parameters().items():
                out[f"res.{name}"] = p
        return out

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        groups: dict[str, dict[str, Tensor]] = {"w_p": {}, "w_r": {}, "w_s": {}}
        for name, p in self.parameters().items():
            key = {"phy": "w_p", "res": "w_r"}.get(name.split(".", 1)[0], "w_s")
            groups[key][name] = p
        return groups

    @property
    def banks(self):
        return [] if self.phycell is None else self.phycell.banks

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # -- building blocks --------------------------------------------------

    def encode(self, u) -> Tensor:
        return self.coder.encode(T._as_tensor(u))

    def decode(self, h: Tensor) -> Tensor:
        return self.coder.decode(h)

    def latent_shape(self, height: int, width: int) -> tuple[int, int]:
        if isinstance(self.coder, IdentityCoder):
            return height, width
        return height // 4, width // 4

    # -- unrolled forward -------------------------------------------------

    def forward(
        self,
        frames,
        horizon: int,
        mask=None,
        missing_policy: str = MISSING_SKIP,
        initial_state=None,
    ) -> SeqOutput:
        """Unroll over the observed ``frames[B,T,C,H,W]`` and ``horizon`` forecasts.

        ``mask[B,T]`` marks observed frames (True). With ``missing_policy``
        ``"assimilate"`` PhyCell still assimilates the zeroed frames, which is
        the naive alternative to skipping them.
        """
        frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
        if frames.ndim != 5:
            raise ShapeError(f"forward: expected frames [B,T,C,H,W], got {frames.shape}")
        B, Tn, C, H, W = frames.shape
        if horizon < 1:
            raise ShapeError(f"forward: horizon must be >= 1, got {horizon}")
        if Tn < 1:
            raise ShapeError("forward: need at least one observed frame")
        if missing_policy not in (MISSING_SKIP, MISSING_ASSIMILATE):
            raise ValueError(f"unknown missing_policy {missing_policy!r}")
        frames = frames.astype(self.dtype, copy=False)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim != 2 or mask.shape[0] != B or mask.shape[1] > Tn:
                raise ShapeError(f"forward: mask {mask.shape} does not fit frames {frames.shape}")
            if mask.shape[1] < Tn:
                mask = np.concatenate([mask, np.ones((B, Tn - mask.shape[1]), bool)], axis=1)
            frames = frames * mask[:, :, None, None, None].astype(self.dtype)

        hl, wl = self.latent_shape(H, W)
        phy_state = None if self.phycell is None else self.phycell.init_state(B, hl, wl, self.dtype)
        res_state = None if self.residual is None else self.residual.init_state(B, hl, wl, self.dtype)
        if initial_state is not None:
            phy_state = list(initial_state)

        preds, latents = [], []
        prev_pred = None
        for t in range(Tn + horizon - 1):
            observed = t < Tn
            if observed:
                e_u = self.encode(frames[:, t])
            else:
                e_u = self.encode(prev_pred) if self.residual is not None else None

            h_p = h_r = None
            if self.phycell is not None:
                if not observed:
                    phy_state = self.phycell.step(phy_state, None, PREDICT)
                elif mask is None or missing_policy == MISSING_ASSIMILATE or mask[:, t].all():
                    phy_state = self.phycell.step(phy_state, e_u, ASSIMILATE)
                elif not mask[:, t].any():
                    phy_state = self.phycell.step(phy_state, None, PREDICT)
                else:
                    rows = mask[:, t][:, None, None, None]
                    keep = np.broadcast_to(rows, e_u.shape).astype(self.dtype)
                    phy_state = self.phycell.step(phy_state, e_u, ASSIMILATE, gain_mask=keep)
                h_p = phy_state[-1]
            if self.residual is not None:
                res_state, h_r = self.residual.step(res_state, e_u)

            h = h_p if h_r is None else (h_r if h_p is None else T.add(h_p, h_r))
            prev_pred = self.decode(h)
            preds.append(prev_pred)
            latents.append((h_p, h_r))
        return SeqOutput(preds, latents, Tn, horizon)
