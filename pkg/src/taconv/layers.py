"""TAConv layers, residual blocks, network assembly and weight transfer.

Activation placement in the desk networks: a standard conv or residual block
is followed by relu.  A TAConv layer is *not* followed by a separate relu:
with the inactive branch coefficients initialized to zero, the per-pixel max
against those all-zero branches already rectifies the identity branch, so a
fresh TAConv layer outputs exactly relu(conv(f, branch-0 kernels)).  An
extra relu there would zero the gradient of every inactive coefficient
(relu'(0) = 0) and the extra branches could never switch on.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .basis import BasisBank, BasisSpec, eval_basis, project_kernel
from .errors import DataError, ShapeError
from .tensor import (Tensor, add, conv2d, global_avg_pool, linear, matmul, max_over, mul,
                     no_grad, relu, reshape, stack, take, transpose)
from .transforms import IDENTITY, TransformSpec, bank_from_dict, build_transform_bank, default_branch_specs

MAGIC = b"TACV1"
LAYER_KINDS = ("conv", "taconv", "resblock", "taresblock")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _init_beta(n_branches: int) -> np.ndarray:
    beta = np.zeros(n_branches)
    beta[0] = 1.0
    return beta


def synthesize_bank_kernels(w: Tensor, bank: BasisBank) -> Tensor:
    """Kernels for every branch: [B, O, C, k, k] from shared weights w [O, C, n]."""
    o, c, n = w.shape
    b, nb, k, _ = bank.branches.shape
    if nb != n:
        raise ShapeError(f"weights carry {n} basis coefficients, bank has {nb} functions")
    basis = Tensor(bank.branches.transpose(1, 0, 2, 3).reshape(n, b * k * k))
    flat = matmul(reshape(w, (o * c, n)), basis)
    return transpose(reshape(flat, (o, c, b, k, k)), (2, 0, 1, 3, 4))


class Conv2d:
    """Bias-free standard convolution."""

    def __init__(self, weight: np.ndarray, stride: int = 1, pad: int | None = None):
        self.weight = Tensor(weight, requires_grad=True, name="weight")
        self.stride = stride
        self.pad = weight.shape[-1] // 2 if pad is None else pad

    def parameters(self):
        return [("weight", self.weight)]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.pad)


class TAConvLayer:
    """max_b beta_b * conv(f, sum_i w_i T_b[psi_i]), per pixel."""

    def __init__(self, w: np.ndarray, bank: BasisBank, stride: int = 1, pad: int | None = None,
                 beta: np.ndarray | None = None):
        if w.ndim != 3 or w.shape[-1] != bank.n_basis:
            raise ShapeError(f"TAConv weights {w.shape} do not match a bank of {bank.n_basis} functions")
        self.w = Tensor(w, requires_grad=True, name="w")
        self.beta = Tensor(_init_beta(bank.n_branches) if beta is None else beta,
                           requires_grad=True, name="beta")
        self.bank = bank
        self.stride = stride
        self.pad = bank.k // 2 if pad is None else pad

    def parameters(self):
        return [("w", self.w), ("beta", self.beta)]

    def kernels(self) -> Tensor:
        return synthesize_bank_kernels(self.w, self.bank)

    def branch_kernels(self) -> np.ndarray:
        with no_grad():
            return self.kernels().data.copy()

    def __call__(self, f: Tensor) -> Tensor:
        return taconv_forward(self, f)


def taconv_forward(layer: TAConvLayer, f: Tensor) -> Tensor:
    o, c, _ = layer.w.shape
    b, k = layer.bank.n_branches, layer.bank.k
    kern = reshape(layer.kernels(), (b * o, c, k, k))
    y = conv2d(f, kern, layer.stride, layer.pad)
    n, _, h, w = y.shape
    y = reshape(y, (n, b, o, h, w))
    scaled = mul(y, reshape(layer.beta, (1, b, 1, 1, 1)))
    return max_over(scaled, axis=1)


class ResBlock:
    """f + G(f), G = relu(conv2(relu(conv1(f)))); 1x1 projection on channel change."""

    def __init__(self, w1: np.ndarray, w2: np.ndarray, proj: np.ndarray | None = None):
        self.conv1 = Conv2d(w1)
        self.conv2 = Conv2d(w2)
        self.proj = Conv2d(proj) if proj is not None else None

    def parameters(self):
        ps = [("conv1", self.conv1.weight), ("conv2", self.conv2.weight)]
        if self.proj is not None:
            ps.append(("proj", self.proj.weight))
        return ps

    def skip(self, f: Tensor) -> Tensor:
        return self.proj(f) if self.proj is not None else f

    def __call__(self, f: Tensor) -> Tensor:
        g = relu(self.conv2(relu(self.conv1(f))))
        return add(self.skip(f), g)


class TAResBlock:
    """f + max_b beta_b G(f, T_b[k1], T_b[k2]) with one shared beta."""

    def __init__(self, w1: np.ndarray, w2: np.ndarray, bank: BasisBank,
                 proj: np.ndarray | None = None, beta: np.ndarray | None = None):
        for w in (w1, w2):
            if w.ndim != 3 or w.shape[-1] != bank.n_basis:
                raise ShapeError(f"TAResBlock weights {w.shape} do not match the bank")
        self.w1 = Tensor(w1, requires_grad=True, name="w1")
        self.w2 = Tensor(w2, requires_grad=True, name="w2")
        self.beta = Tensor(_init_beta(bank.n_branches) if beta is None else beta,
                           requires_grad=True, name="beta")
        self.bank = bank
        self.proj = Conv2d(proj) if proj is not None else None

    def parameters(self):
        ps = [("w1", self.w1), ("w2", self.w2), ("beta", self.beta)]
        if self.proj is not None:
            ps.append(("proj", self.proj.weight))
        return ps

    def __call__(self, f: Tensor) -> Tensor:
        return taresblock_forward(self, f)


def taresblock_forward(block: TAResBlock, f: Tensor) -> Tensor:
    b, k = block.bank.n_branches, block.bank.k
    pad = k // 2
    o1, c1, _ = block.w1.shape
    k1 = synthesize_bank_kernels(block.w1, block.bank)
    k2 = synthesize_bank_kernels(block.w2, block.bank)
    h1 = relu(conv2d(f, reshape(k1, (b * o1, c1, k, k)), 1, pad))
    n, _, hh, ww = h1.shape
    h1 = reshape(h1, (n, b, o1, hh, ww))
    outs = [relu(conv2d(take(h1, i, axis=1), take(k2, i, axis=0), 1, pad)) for i in range(b)]
    g = stack(outs, axis=1)
    scaled = mul(g, reshape(block.beta, (1, b, 1, 1, 1)))
    skip = block.proj(f) if block.proj is not None else f
    return add(skip, max_over(scaled, axis=1))


# ---------------------------------------------------------------------------
# configuration and assembly
# ---------------------------------------------------------------------------

@dataclass
class LayerConfig:
    kind: str
    out_channels: int
    k: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.k % 2 == 0 or self.k < 1 or self.stride < 1 or self.out_channels < 1:
            raise ValueError(f"invalid layer config {self}")
        if self.kind in ("resblock", "taresblock") and self.stride != 1:
            raise ValueError("residual blocks use stride 1")


@dataclass
class NetworkConfig:
    layers: list
    in_channels: int = 1
    n_classes: int = 6
    transform: str = IDENTITY
    n_branches: int = 4
    strength: float = 1.0
    basis_sigma: float = 1.5
    n_basis: int | None = None
    seed: int = 0
    bank_seed: int = 0
    branch_specs: list | None = None

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerConfig) else LayerConfig(**l) for l in self.layers]
        if self.branch_specs is not None:
            self.branch_specs = [s if isinstance(s, TransformSpec) else TransformSpec.from_dict(s)
                                 for s in self.branch_specs]
        if self.in_channels < 1 or self.n_classes < 2:
            raise ValueError("need at least one input channel and two classes")

    @property
    def variant(self) -> str:
        uses_ta = any(l.kind.startswith("ta") for l in self.layers)
        return self.transform if uses_ta and self.transform != IDENTITY else "standard"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_specs"] = None if self.branch_specs is None else [s.to_dict() for s in self.branch_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def desk_config(transform: str = IDENTITY, in_channels: int = 1, n_classes: int = 6,
                widths=(16, 32, 48, 64), seed: int = 0, **kw) -> NetworkConfig:
    """Four conv layers (5x5 first, then 3x3 stride 2, 2, 1), avg pool, linear head.

    With a transform kind other than identity the first layer becomes TAConv.
    """
    first = "conv" if transform == IDENTITY else "taconv"
    layers = [LayerConfig(first, widths[0], k=5, stride=1),
              LayerConfig("conv", widths[1], k=3, stride=2),
              LayerConfig("conv", widths[2], k=3, stride=2),
              LayerConfig("conv", widths[3], k=3, stride=1)]
    return NetworkConfig(layers=layers, in_channels=in_channels, n_classes=n_classes,
                         transform=transform, seed=seed, **kw)


def basis_spec_for(config: NetworkConfig, k: int) -> BasisSpec:
    return BasisSpec.with_size(k, config.basis_sigma, n_basis=config.n_basis)


def bank_for(config: NetworkConfig, k: int, layer_index: int = 0) -> BasisBank:
    spec = basis_spec_for(config, k)
    if config.branch_specs is not None:
        specs = config.branch_specs
    elif config.transform == IDENTITY:
        specs = []
    else:
        specs = default_branch_specs(config.transform, config.n_branches,
                                     seed=config.bank_seed + 1000 * layer_index,
                                     strength=config.strength)
    return build_transform_bank(eval_basis(spec), specs, spec)


class Network:
    """Sequential conv stack + global average pool + linear head."""

    def __init__(self, config: NetworkConfig, layers: list, head_w: np.ndarray, head_b: np.ndarray):
        self.config = config
        self.layers = layers
        self.head_w = Tensor(head_w, requires_grad=True, name="head.weight")
        self.head_b = Tensor(head_b, requires_grad=True, name="head.bias")

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def transform(self) -> str:
        return self.config.transform if self.variant != "standard" else IDENTITY

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{n}", p) for n, p in layer.parameters())
        out.append(("head.weight", self.head_w))
        out.append(("head.bias", self.head_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def features(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
            if not isinstance(layer, TAConvLayer):
                x = relu(x)
        return x

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected input [N, {self.config.in_channels}, H, W], got {x.shape}")
        return linear(global_avg_pool(self.features(x)), self.head_w, self.head_b)

    forward = __call__

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self(Tensor(images[i:i + batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes))

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return np.argmax(self.logits(images, batch_size), axis=1)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ShapeError(f"state keys differ: {sorted(set(params) ^ set(state))}")
        for n, p in params.items():
            if p.shape != state[n].shape:
                raise ShapeError(f"{n}: shape {state[n].shape} does not match {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    def clone(self) -> "Network":
        return from_bytes(to_bytes(self))

    def banks(self) -> dict[int, BasisBank]:
        return {i: l.bank for i, l in enumerate(self.layers) if hasattr(l, "bank")}


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def assemble(config: NetworkConfig, banks: dict | None = None) -> Network:
    """Build a network with seeded initialisation.

    TAConv weights are initialised by projecting the same He-normal draw a
    standard conv would receive, so standard and TAConv networks built from
    one seed start with identical branch-0 kernels.
    """
    rng = np.random.default_rng(config.seed)
    banks = dict(banks or {})
    layers = []
    c = config.in_channels
    for i, lc in enumerate(config.layers):
        o, k = lc.out_channels, lc.k
        if lc.kind in ("taconv", "taresblock") and i not in banks:
            banks[i] = bank_for(config, k, i)
        if lc.kind == "conv":
            layers.append(Conv2d(_he(rng, (o, c, k, k), c * k * k), lc.stride))
        elif lc.kind == "taconv":
            bank = banks[i]
            if bank.k != k:
                raise ShapeError(f"layer {i}: bank size {bank.k} != kernel size {k}")
            w, _ = project_kernel(_he(rng, (o, c, k, k), c * k * k), bank.branches[0])
            layers.append(TAConvLayer(w, bank, lc.stride))
        else:
            w1 = _he(rng, (o, c, k, k), c * k * k)
            w2 = _he(rng, (o, o, k, k), o * k * k) * 0.5
            proj = _he(rng, (o, c, 1, 1), c) if o != c else None
            if lc.kind == "resblock":
                layers.append(ResBlock(w1, w2, proj))
            else:
                bank = banks[i]
                p1, _ = project_kernel(w1, bank.branches[0])
                p2, _ = project_kernel(w2, bank.branches[0])
                layers.append(TAResBlock(p1, p2, bank, proj))
        c = o
    head_w = rng.standard_normal((c, config.n_classes)) * np.sqrt(1.0 / c)
    return Network(config, layers, head_w, np.zeros(config.n_classes))


def expected_parameter_count(config: NetworkConfig) -> int:
    total, c = 0, config.in_channels
    nb = config.n_basis
    for lc in config.layers:
        o, k = lc.out_channels, lc.k
        n = nb if nb is not None else k * k
        b = 1 + (len(config.branch_specs) if config.branch_specs is not None
                 else (config.n_branches if config.transform != IDENTITY else 0))
        if lc.kind == "conv":
            total += o * c * k * k
        elif lc.kind == "taconv":
            total += o * c * n + b
        else:
            per = k * k if lc.kind == "resblock" else n
            total += o * c * per + o * o * per + (o * c if o != c else 0)
            total += b if lc.kind == "taresblock" else 0
        c = o
    return total + c * config.n_classes + config.n_classes


# ---------------------------------------------------------------------------
# weight transfer
# ---------------------------------------------------------------------------

def weight_transfer(standard: Network, target: Network, tol: float = 1e-8) -> Network:
    """Initialise ``target`` so that its forward equals ``standard``'s.

    Inactive branch coefficients are zeroed (beta = [1, 0, ...]), kernels of
    matching size are projected onto the branch-0 basis by least squares, and
    plain convolutions, projections and the head are copied.
    """
    if len(standard.layers) != len(target.layers):
        raise ShapeError("architectures differ in depth")
    for i, (src, dst) in enumerate(zip(standard.layers, target.layers)):
        if isinstance(dst, Conv2d):
            if not isinstance(src, Conv2d) or src.weight.shape != dst.weight.shape or src.stride != dst.stride:
                raise ShapeError(f"layer {i}: conv layers do not correspond")
            dst.weight.data = src.weight.data.copy()
        elif isinstance(dst, TAConvLayer):
            if not isinstance(src, Conv2d) or src.stride != dst.stride:
                raise ShapeError(f"layer {i}: TAConv needs a standard conv with the same stride")
            o, c, k, _ = src.weight.shape
            if (o, c) != dst.w.shape[:2] or k != dst.bank.k:
                raise ShapeError(f"layer {i}: kernel shape {src.weight.shape} does not fit TAConv")
            dst.w.data = _project_or_fail(src.weight.data, dst.bank, tol, i)
            dst.beta.data = _init_beta(dst.bank.n_branches)
        elif isinstance(dst, ResBlock):
            if not isinstance(src, ResBlock):
                raise ShapeError(f"layer {i}: residual blocks do not correspond")
            for a, b in zip(src.parameters(), dst.parameters()):
                if a[1].shape != b[1].shape:
                    raise ShapeError(f"layer {i}: {a[0]} shape mismatch")
                b[1].data = a[1].data.copy()
        elif isinstance(dst, TAResBlock):
            if not isinstance(src, ResBlock) or (src.proj is None) != (dst.proj is None):
                raise ShapeError(f"layer {i}: TAResBlock needs a matching ResBlock")
            dst.w1.data = _project_or_fail(src.conv1.weight.data, dst.bank, tol, i)
            dst.w2.data = _project_or_fail(src.conv2.weight.data, dst.bank, tol, i)
            if dst.proj is not None:
                dst.proj.weight.data = src.proj.weight.data.copy()
            dst.beta.data = _init_beta(dst.bank.n_branches)
    if standard.head_w.shape != target.head_w.shape:
        raise ShapeError("classifier heads differ")
    target.head_w.data = standard.head_w.data.copy()
    target.head_b.data = standard.head_b.data.copy()
    return target


def _project_or_fail(kernel: np.ndarray, bank: BasisBank, tol: float, index: int) -> np.ndarray:
    if kernel.shape[-1] != bank.k:
        raise ShapeError(f"layer {index}: kernel size {kernel.shape[-1]} != basis size {bank.k}")
    w, rel = project_kernel(kernel, bank.branches[0])
    if rel > tol:
        raise ShapeError(f"layer {index}: basis cannot represent the kernel (relative residual {rel:.3g})")
    return w


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _meta(model: Network) -> dict:
    return {"config": model.config.to_dict(),
            "banks": {str(i): b.to_dict() for i, b in model.banks().items()}}


def to_bytes(model: Network) -> bytes:
    """TACV1 container: shape table, float64 payload, canonical JSON metadata."""
    params = model.named_parameters()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
    for _, p in params:
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    meta = canonical_json(_meta(model)).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def from_bytes(blob: bytes) -> Network:
    if blob[:5] != MAGIC:
        raise DataError(f"not a TACV1 checkpoint (bad magic at offset 0: {blob[:5]!r})")
    try:
        pos = 5
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        table = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + ln].decode()
            pos += ln
            (nd,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", blob, pos)
            pos += 4 * nd
            table.append((name, shape))
        state = {}
        for name, shape in table:
            n = int(np.prod(shape))
            if pos + 8 * n > len(blob):
                raise DataError("checkpoint payload truncated")
            state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        meta = json.loads(blob[pos:pos + ln].decode())
    except struct.error as exc:
        raise DataError(f"checkpoint truncated: {exc}") from exc
    config = NetworkConfig.from_dict(meta["config"])
    banks = {int(i): bank_from_dict(b) for i, b in meta["banks"].items()}
    model = assemble(config, banks)
    model.load_state(state)
    return model


def save_checkpoint(model: Network, path) -> str:
    blob = to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def model_hash(model: Network) -> str:
    return hashlib.sha256(to_bytes(model)).hexdigest()
