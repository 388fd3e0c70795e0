"""Early-fusion U-Net: input arms, network assembly and slice-wise inference.

Every arm stacks its (time point, sequence) slots as channels, each slot
contributing the slab of slices ``z-1, z, z+1``. The pre-diagnosis scan is
therefore just more input channels for a single 2D network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffops as ops
from .errors import ConfigError, GeometryError, ShapeError
from .volume import Volume

PRE, DX = "prediag", "diagnosis"


@dataclass(frozen=True)
class InputConfiguration:
    name: str
    slots: tuple  # ((timepoint, sequence), ...) in channel order
    half_width: int = 1

    @property
    def slab_size(self):
        return 2 * self.half_width + 1

    @property
    def n_channels(self):
        return len(self.slots) * self.slab_size

    @property
    def needs_prediag(self):
        return any(tp == PRE for tp, _ in self.slots)

    def channel_labels(self):
        offsets = range(-self.half_width, self.half_width + 1)
        return [f"{tp}:{seq}:z{o:+d}" for tp, seq in self.slots for o in offsets]

    def to_dict(self):
        return {"name": self.name, "slots": [list(s) for s in self.slots], "half_width": self.half_width}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(tuple(s) for s in d["slots"]), d.get("half_width", 1))


def _both(*seqs):
    return tuple((PRE, s) for s in seqs) + tuple((DX, s) for s in seqs)


def _dx(*seqs):
    return tuple((DX, s) for s in seqs)


# row order of the results tables
ARMS = {
    "dual_all": _both("ceT1w", "T1w", "T2w", "FLAIR"),
    "dual_ce": _both("ceT1w"),
    "dual_native": _both("T1w", "T2w", "FLAIR"),
    "dual_nT1": _both("T1w"),
    "dual_T2": _both("T2w"),
    "dual_FLAIR": _both("FLAIR"),
    "dual_ce+FLAIR": _both("ceT1w", "FLAIR"),
    "T1n_ce": ((PRE, "T1w"), (DX, "ceT1w")),
    "all": _dx("ceT1w", "T1w", "T2w", "FLAIR"),
    "ce": _dx("ceT1w"),
    "ce+FLAIR": _dx("ceT1w", "FLAIR"),
}
ARM_ORDER = tuple(ARMS)


def get_config(name, half_width=1):
    if isinstance(name, InputConfiguration):
        return name
    if name not in ARMS:
        raise ConfigError(f"unknown arm {name!r}; known arms: {', '.join(ARM_ORDER)}")
    return InputConfiguration(name, ARMS[name], half_width)


def slot_stack(case, config, dtype=np.float32):
    """Z-scored volumes for every slot, shape (n_slots, nx, ny, nz)."""
    grid = case.grid
    out = []
    for tp, seq in config.slots:
        vol = case.volume(tp, seq)
        if vol is None:
            raise ConfigError(f"arm {config.name!r} needs {tp} {seq}, which case {case.case_id} lacks")
        if not vol.grid.same_as(grid):
            raise GeometryError(f"{tp} {seq} of case {case.case_id} is not on the diagnosis ceT1w grid; align first")
        d = vol.data.astype(np.float64)
        sd = d.std()
        out.append(((d - d.mean()) / (sd if sd > 0 else 1.0)).astype(dtype))
    return np.stack(out)


def slab(stack, z, half_width=1):
    """Channels for slice ``z``: slot-major, offsets ascending, edges clamped."""
    nz = stack.shape[-1]
    idx = np.clip(np.arange(z - half_width, z + half_width + 1), 0, nz - 1)
    return stack[..., idx].transpose(0, 3, 1, 2).reshape(-1, *stack.shape[1:3])


def assemble_input(case, config, z):
    config = get_config(config)
    return slab(slot_stack(case, config), z, config.half_width)


class UNet:
    """Parameters and forward/backward passes of a 2D U-Net.

    ``depth`` counts pooling steps; encoder level ``l`` carries
    ``base_features * 2**l`` feature maps and the bottleneck sits at level
    ``depth``.
    """

    def __init__(self, in_channels, base_features=8, depth=4, params=None, config=None):
        self.in_channels = in_channels
        self.base_features = base_features
        self.depth = depth
        self.config = config
        self.params = params if params is not None else {}

    # -- structure -----------------------------------------------------
    def layer_shapes(self):
        shapes = {}
        f = [self.base_features * 2**lvl for lvl in range(self.depth + 1)]
        cin = self.in_channels
        for lvl in range(self.depth):
            shapes[f"enc{lvl}.conv0"] = (f[lvl], cin, 3, 3)
            shapes[f"enc{lvl}.conv1"] = (f[lvl], f[lvl], 3, 3)
            cin = f[lvl]
        shapes["bottleneck.conv0"] = (f[self.depth], cin, 3, 3)
        shapes["bottleneck.conv1"] = (f[self.depth], f[self.depth], 3, 3)
        cin = f[self.depth]
        for lvl in reversed(range(self.depth)):
            shapes[f"dec{lvl}.up"] = (f[lvl], cin, 3, 3)
            shapes[f"dec{lvl}.conv0"] = (f[lvl], 2 * f[lvl], 3, 3)
            shapes[f"dec{lvl}.conv1"] = (f[lvl], f[lvl], 3, 3)
            cin = f[lvl]
        shapes["head"] = (2, cin, 1, 1)
        return shapes

    def init_params(self, seed=0, dtype=np.float32, head_gain=0.1, foreground_prior=0.01):
        """He initialisation with a damped head whose bias starts every voxel at
        ``foreground_prior``, so training skips the collapse from 0.5 to background."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.layer_shapes().items():
            fan_in = shape[1] * shape[2] * shape[3]
            std = np.sqrt(2.0 / fan_in) * (head_gain if name == "head" else 1.0)
            params[f"{name}.weight"] = (rng.standard_normal(shape) * std).astype(dtype)
            params[f"{name}.bias"] = np.zeros(shape[0], dtype)
        if not 0.0 < foreground_prior < 1.0:
            raise ConfigError(f"foreground_prior must lie in (0, 1), got {foreground_prior}")
        params["head.bias"][1] = np.log(foreground_prior / (1.0 - foreground_prior))
        self.params = params
        return self

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    # -- passes ----------------------------------------------------------
    def _conv(self, x, name, tape, relu=True, padding="same"):
        y, cache = ops.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], 1, padding)
        tape.append(("conv", name, cache))
        if relu:
            y, mask = ops.relu(y)
            tape.append(("relu", name, mask))
        return y

    def forward(self, x, tape=None):
        """Logits (B, 2, H, W). Pass a list as ``tape`` to record for backward."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected input (B, {self.in_channels}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        div = 2**self.depth
        if h % div or w % div:
            raise ShapeError(f"spatial size {h}x{w} must be divisible by {div}; pad the input grid")
        tape = [] if tape is None else tape
        skips = []
        for lvl in range(self.depth):
            x = self._conv(x, f"enc{lvl}.conv0", tape)
            x = self._conv(x, f"enc{lvl}.conv1", tape)
            skips.append(x)
            x, cache = ops.maxpool2(x)
            tape.append(("pool", lvl, cache))
        x = self._conv(x, "bottleneck.conv0", tape)
        x = self._conv(x, "bottleneck.conv1", tape)
        for lvl in reversed(range(self.depth)):
            name = f"dec{lvl}.up"
            x, cache = ops.upconv2(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
            tape.append(("upconv", name, cache))
            x, mask = ops.relu(x)
            tape.append(("relu", name, mask))
            x, split = ops.concat(skips[lvl], x)
            tape.append(("concat", lvl, split))
            x = self._conv(x, f"dec{lvl}.conv0", tape)
            x = self._conv(x, f"dec{lvl}.conv1", tape)
        return self._conv(x, "head", tape, relu=False)

    def backward(self, dlogits, tape):
        """Parameter gradients from a recorded tape; also returns d_input."""
        grads = {}
        skip_grads = {}
        d = dlogits
        for kind, key, cache in reversed(tape):
            if kind == "relu":
                d = ops.relu_backward(d, cache)
            elif kind == "conv":
                d, dw, db = ops.conv2d_backward(d, cache)
                grads[f"{key}.weight"], grads[f"{key}.bias"] = dw, db
            elif kind == "upconv":
                d, dw, db = ops.upconv2_backward(d, cache)
                grads[f"{key}.weight"], grads[f"{key}.bias"] = dw, db
            elif kind == "concat":
                dskip, d = ops.concat_backward(d, cache)
                skip_grads[key] = dskip
            elif kind == "pool":
                d = ops.maxpool2_backward(d, cache) + skip_grads.pop(key)
        return grads, d

    def predict_proba(self, x):
        """Foreground probability (B, H, W)."""
        return ops.softmax(self.forward(x))[:, 1]

    # -- persistence -------------------------------------------------------
    def save(self, path, extra=None):
        """Write ``<path>.npz`` with named arrays and ``<path>.json`` as index."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        stem = path.with_suffix("") if path.suffix in (".json", ".npz") else path
        np.savez(stem.with_suffix(".npz"), **self.params)
        index = {
            "format": "dualcad-checkpoint",
            "in_channels": self.in_channels,
            "base_features": self.base_features,
            "depth": self.depth,
            "config": self.config.to_dict() if self.config is not None else None,
            "arrays": {k: {"shape": list(v.shape), "dtype": v.dtype.str} for k, v in self.params.items()},
            **(extra or {}),
        }
        stem.with_suffix(".json").write_text(json.dumps(index, indent=1))
        return stem.with_suffix(".json")

    @classmethod
    def load(cls, path):
        path = Path(path)
        stem = path.with_suffix("") if path.suffix in (".json", ".npz") else path
        index = json.loads(stem.with_suffix(".json").read_text())
        with np.load(stem.with_suffix(".npz")) as z:
            params = {k: z[k] for k in index["arrays"]}
        config = InputConfiguration.from_dict(index["config"]) if index.get("config") else None
        return cls(index["in_channels"], index["base_features"], index["depth"], params, config)


def build_unet(config, base_features=8, depth=4, seed=0, dtype=np.float32, foreground_prior=0.01):
    if base_features < 2:
        raise ConfigError("base_features must be at least 2")
    if depth < 2:
        raise ConfigError("depth must be at least 2")
    config = get_config(config)
    return UNet(config.n_channels, base_features, depth, config=config).init_params(seed, dtype, foreground_prior=foreground_prior)


def infer_volume(net, case, config=None, batch_size=8):
    """Foreground probability heat map on the diagnosis ceT1w grid."""
    config = get_config(config if config is not None else net.config)
    stack = slot_stack(case, config, dtype=next(iter(net.params.values())).dtype)
    nz = stack.shape[-1]
    out = np.zeros(case.grid.dims, np.float32)
    for start in range(0, nz, batch_size):
        zs = range(start, min(nz, start + batch_size))
        x = np.stack([slab(stack, z, config.half_width) for z in zs])
        probs = net.predict_proba(x)
        for i, z in enumerate(zs):
            out[:, :, z] = probs[i]
    return Volume(np.clip(out, 0.0, 1.0), case.grid)
