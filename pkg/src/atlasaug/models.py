"""Learned spatial and appearance transform models.

Both models share an encoder-decoder conv net with skip connections. The
spatial model holds two identical nets, one per direction (atlas->subject
and subject->atlas); the appearance model holds one net emitting an
additive per-voxel intensity delta in the atlas frame. Final layers are
zero-initialized so an untrained model is an exact identity transform.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import engine, fields, vtf
from .engine import Adam, Graph, NumericError, ShapeError, Tensor
from .fields import DisplacementField


class UNet:
    """Encoder-decoder with skips: conv+LeakyReLU blocks, maxpool down,
    nearest upsample + concat up, zero-initialized final conv."""

    def __init__(self, in_channels: int, out_channels: int, spatial_ndim: int = 2,
                 widths=(16, 32, 32), convs_per_level: int = 2,
                 kernel_size: int = 3, slope: float = 0.2, seed: int = 0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spatial_ndim = spatial_ndim
        self.widths = tuple(widths)
        self.convs_per_level = convs_per_level
        self.kernel_size = kernel_size
        self.slope = slope
        self.params: list[Tensor] = []
        self._layers: list[tuple[Tensor, Tensor]] = []
        rng = np.random.default_rng(seed)

        def make_conv(cin, cout, name, zero=False):
            ksh = (cout, cin) + (kernel_size,) * spatial_ndim
            if zero:
                k = np.zeros(ksh, dtype=np.float32)
            else:
                std = np.sqrt(2.0 / (cin * kernel_size ** spatial_ndim))
                k = rng.normal(0.0, std, size=ksh).astype(np.float32)
            kernel = Tensor(k, requires_grad=True, name=f"{name}.kernel")
            bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True,
                          name=f"{name}.bias")
            self.params += [kernel, bias]
            self._layers.append((kernel, bias))
            return len(self._layers) - 1

        enc, dec = self.widths[:-1], self.widths[:-1][::-1]
        bott = self.widths[-1]
        self._enc_blocks = []
        c = in_channels
        for li, w in enumerate(enc):
            block = []
            for ci in range(convs_per_level):
                block.append(make_conv(c, w, f"enc{li}.conv{ci}"))
                c = w
            self._enc_blocks.append(block)
        self._bott_block = []
        for ci in range(convs_per_level):
            self._bott_block.append(make_conv(c, bott, f"bott.conv{ci}"))
            c = bott
        self._dec_blocks = []
        for li, w in enumerate(dec):
            block = []
            cin = c + enc[len(enc) - 1 - li]  # concat with the skip
            for ci in range(convs_per_level):
                block.append(make_conv(cin if ci == 0 else w, w, f"dec{li}.conv{ci}"))
            c = w
            self._dec_blocks.append(block)
        self._final = make_conv(c, out_channels, "final", zero=True)

    def parameters(self) -> list[Tensor]:
        return self.params

    def _conv(self, x, layer_idx, activate=True):
        k, b = self._layers[layer_idx]
        y = engine.convolve(x, k, b)
        return engine.leaky_relu(y, self.slope) if activate else y

    def forward(self, x: Tensor) -> Tensor:
        D = self.spatial_ndim
        ch_axis = x.ndim - D - 1
        skips = []
        for block in self._enc_blocks:
            for idx in block:
                x = self._conv(x, idx)
            skips.append(x)
            x = engine.maxpool2(x, spatial_ndim=D)
        for idx in self._bott_block:
            x = self._conv(x, idx)
        for block, skip in zip(self._dec_blocks, reversed(skips)):
            x = engine.upsample2_nearest(x, spatial_ndim=D)
            x = engine.concat(x, skip, axis=ch_axis)
            for idx in block:
                x = self._conv(x, idx)
        return self._conv(x, self._final, activate=False)

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.data) for p in self.params]

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.params:
            arr = tensors[p.name]
            if arr.shape != p.data.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(np.float32)

    def clone_state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}


@dataclass
class SpatialModel:
    forward_net: UNet
    inverse_net: UNet
    smoothness_weight: float = 1.0
    ncc_window: int = 9
    loss_history: list = dc_field(default_factory=list)

    @staticmethod
    def create(spatial_ndim: int = 2, widths=(16, 32, 32), smoothness_weight: float = 1.0,
               ncc_window: int = 9, seed: int = 0) -> "SpatialModel":
        fwd = UNet(2, spatial_ndim, spatial_ndim=spatial_ndim, widths=widths, seed=seed)
        inv = UNet(2, spatial_ndim, spatial_ndim=spatial_ndim, widths=widths, seed=seed + 1)
        return SpatialModel(fwd, inv, smoothness_weight, ncc_window)


@dataclass
class AppearanceModel:
    net: UNet
    lambda_a: float = 0.02
    loss_history: list = dc_field(default_factory=list)

    def __post_init__(self):
        if self.lambda_a <= 0:
            raise ValueError(f"lambda_a must be > 0, got {self.lambda_a}")

    @staticmethod
    def create(spatial_ndim: int = 2, widths=(16, 32, 32), lambda_a: float = 0.02,
               seed: int = 0) -> "AppearanceModel":
        return AppearanceModel(UNet(2, 1, spatial_ndim=spatial_ndim, widths=widths,
                                    seed=seed), lambda_a)


def _stack_pair(source: np.ndarray, target: np.ndarray) -> Tensor:
    if source.shape != target.shape:
        raise ShapeError(f"grid mismatch: {source.shape} vs {target.shape}")
    return Tensor(np.stack([source, target]).astype(np.float32))


def predict_displacement(net: UNet, source: np.ndarray, target: np.ndarray) -> DisplacementField:
    """Displacement registering source toward target: warp(source, u) ~ target."""
    out = net.forward(_stack_pair(source, target))
    return DisplacementField(out.data)


def predict_appearance(model: AppearanceModel, atlas: np.ndarray,
                       registered_subject: np.ndarray) -> np.ndarray:
    """Additive intensity delta on the atlas grid."""
    out = model.net.forward(_stack_pair(atlas, registered_subject))
    return out.data[0]


def smoothness_loss(psi: Tensor, boundary: np.ndarray) -> Tensor:
    """Mean squared forward difference of psi, gated off at label boundaries."""
    gate = Tensor((1.0 - boundary).astype(np.float32))
    total = None
    for ax in range(psi.ndim):
        d = engine.spatial_diff(psi, ax)
        s = engine.sum_all(engine.mul(engine.square(d), gate))
        total = s if total is None else engine.add(total, s)
    return engine.scale(total, 1.0 / (psi.data.size * psi.ndim))


def appearance_total_loss(atlas: np.ndarray, subject: np.ndarray, phi: Tensor,
                          psi: Tensor, boundary: np.ndarray, lambda_a: float) -> Tensor:
    """Similarity in the subject frame plus boundary-gated smoothness."""
    if lambda_a < 0:
        raise ValueError(f"lambda_a must be >= 0, got {lambda_a}")
    corrected = engine.add(Tensor(atlas), psi)
    warped = fields.warp_linear(corrected, phi)
    sim = engine.loss_mse(warped, Tensor(subject))
    smooth = smoothness_loss(psi, boundary)
    return engine.add(sim, engine.scale(smooth, lambda_a))


def train_spatial(model: SpatialModel, atlas: np.ndarray, unlabeled: list[np.ndarray],
                  steps: int, seed: int, learning_rate: float = 5e-4) -> SpatialModel:
    """Train both direction nets: NCC similarity plus field smoothness."""
    if not unlabeled:
        raise ValueError("unlabeled set is empty")
    rng = np.random.default_rng(seed)
    opt_f = Adam(model.forward_net.parameters(), learning_rate)
    opt_i = Adam(model.inverse_net.parameters(), learning_rate)
    for step in range(steps):
        y = unlabeled[int(rng.integers(len(unlabeled)))]
        pair_losses = []
        for net, opt, src, tgt in ((model.forward_net, opt_f, atlas, y),
                                   (model.inverse_net, opt_i, y, atlas)):
            with Graph() as g:
                u = net.forward(_stack_pair(src, tgt))
                warped = fields.warp_linear(Tensor(src), u)
                sim = engine.loss_ncc(warped, Tensor(tgt), model.ncc_window)
                reg = engine.scale(engine.loss_gradmag(u), model.smoothness_weight)
                loss = engine.add(sim, reg)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"non-finite spatial loss at step {step}")
            grads = engine.backprop(g, loss, net.parameters())
            opt.step(grads)
            pair_losses.append(val)
        model.loss_history.append(tuple(pair_losses))
    return model


def train_appearance(model: AppearanceModel, atlas: np.ndarray,
                     atlas_labels: np.ndarray, unlabeled: list[np.ndarray],
                     spatial: SpatialModel, steps: int, seed: int,
                     learning_rate: float = 5e-4) -> AppearanceModel:
    """Train the appearance net against frozen spatial nets."""
    if not unlabeled:
        raise ValueError("unlabeled set is empty")
    rng = np.random.default_rng(seed)
    opt = Adam(model.net.parameters(), learning_rate)
    boundary = fields.boundary_mask(atlas_labels).astype(np.float32)
    for step in range(steps):
        y = unlabeled[int(rng.integers(len(unlabeled)))]
        inv = predict_displacement(spatial.inverse_net, y, atlas)
        fwd = predict_displacement(spatial.forward_net, atlas, y)
        y_reg = fields.warp_linear_raw(y, inv)
        with Graph() as g:
            out = model.net.forward(_stack_pair(atlas, y_reg))
            psi = engine.reshape(out, atlas.shape)
            phi = Tensor(fwd.components)
            loss = appearance_total_loss(atlas, y, phi, psi, boundary, model.lambda_a)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericError(f"non-finite appearance loss at step {step}")
        grads = engine.backprop(g, loss, model.net.parameters())
        opt.step(grads)
        model.loss_history.append(val)
    return model


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then VTF records in header order


def _net_meta(net: UNet) -> dict:
    return {"in_channels": net.in_channels, "out_channels": net.out_channels,
            "spatial_ndim": net.spatial_ndim, "widths": list(net.widths),
            "convs_per_level": net.convs_per_level, "kernel_size": net.kernel_size,
            "slope": net.slope}


def _save_nets(path, nets: dict[str, UNet], hyper: dict) -> None:
    names = []
    blobs = []
    for prefix, net in nets.items():
        for name, arr in net.state_tensors():
            names.append({"name": f"{prefix}/{name}", "shape": list(arr.shape)})
            blobs.append(vtf.encode(arr))
    header = {"tensors": names, "hyper": hyper,
              "nets": {prefix: _net_meta(net) for prefix, net in nets.items()}}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for blob in blobs:
            fh.write(blob)


def _load_nets(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    buf = Path(path).read_bytes()
    nl = buf.index(b"\n")
    header = json.loads(buf[:nl].decode())
    offset = nl + 1
    per_net: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        arr, offset = vtf.decode(buf, offset)
        prefix, name = entry["name"].split("/", 1)
        per_net.setdefault(prefix, {})[name] = arr
    return header, per_net


def save_spatial(path, model: SpatialModel) -> None:
    _save_nets(path, {"forward": model.forward_net, "inverse": model.inverse_net},
               {"smoothness_weight": model.smoothness_weight,
                "ncc_window": model.ncc_window})


def load_spatial(path) -> SpatialModel:
    header, tensors = _load_nets(path)
    meta = header["nets"]["forward"]
    model = SpatialModel.create(spatial_ndim=meta["spatial_ndim"],
                                widths=tuple(meta["widths"]),
                                smoothness_weight=header["hyper"]["smoothness_weight"],
                                ncc_window=header["hyper"]["ncc_window"])
    model.forward_net.load_state(tensors["forward"])
    model.inverse_net.load_state(tensors["inverse"])
    return model


def save_appearance(path, model: AppearanceModel) -> None:
    _save_nets(path, {"net": model.net}, {"lambda_a": model.lambda_a})


def load_appearance(path) -> AppearanceModel:
    header, tensors = _load_nets(path)
    meta = header["nets"]["net"]
    model = AppearanceModel.create(spatial_ndim=meta["spatial_ndim"],
                                   widths=tuple(meta["widths"]),
                                   lambda_a=header["hyper"]["lambda_a"])
    model.net.load_state(tensors["net"])
    return model
