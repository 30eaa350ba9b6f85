"""Layer forward/backward passes and the 25-layer keypoint network.

Convolutions are valid cross-correlations (stride 1, no padding) computed
through an im2col expansion so the inner loop is a batched matrix multiply.
Each layer caches what its backward pass needs; backward must follow a
forward on the same batch.
"""

from __future__ import annotations

import numpy as np

from .tensor import Rng, glorot_uniform_init, uniform_init

# Structure of the full 96x96 network: four conv blocks with exponentially
# growing filter counts and linearly shrinking kernels, then three dense
# layers. Dropout probability ramps 0.1 -> 0.6 through the depth.
CONV_FILTERS = (32, 64, 128, 256)
CONV_KERNELS = (4, 3, 2, 1)
DENSE_UNITS = (1000, 1000)
OUTPUT_DIM = 2
DROPOUT_PROBS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
INPUT_HW = 96
# Conv weights draw from a small symmetric uniform range; dense weights use
# Glorot uniform. Biases start at zero.
CONV_INIT_LO = -0.05
CONV_INIT_HI = 0.05

# Expected per-layer output shapes for the standard build, input row included.
EXPECTED_LAYER_SHAPES = (
    ("input_1", (1, 96, 96)),
    ("conv2d_1", (32, 93, 93)),
    ("activation_1", (32, 93, 93)),
    ("maxpool2d_1", (32, 46, 46)),
    ("dropout_1", (32, 46, 46)),
    ("conv2d_2", (64, 44, 44)),
    ("activation_2", (64, 44, 44)),
    ("maxpool2d_2", (64, 22, 22)),
    ("dropout_2", (64, 22, 22)),
    ("conv2d_3", (128, 21, 21)),
    ("activation_3", (128, 21, 21)),
    ("maxpool2d_3", (128, 10, 10)),
    ("dropout_3", (128, 10, 10)),
    ("conv2d_4", (256, 10, 10)),
    ("activation_4", (256, 10, 10)),
    ("maxpool2d_4", (256, 5, 5)),
    ("dropout_4", (256, 5, 5)),
    ("flatten_1", (6400,)),
    ("dense_1", (1000,)),
    ("activation_5", (1000,)),
    ("dropout_5", (1000,)),
    ("dense_2", (1000,)),
    ("activation_6", (1000,)),
    ("dropout_6", (1000,)),
    ("dense_3", (2,)),
)
EXPECTED_PARAM_COUNT = 7_488_962


class ShapeError(ValueError):
    """Input shape incompatible with a layer or the network."""


class Parameter:
    """Trainable array plus a gradient buffer of the same shape."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return []

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*kh*kw, OH*OW) patch matrix for valid windows."""
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + oh, j : j + ow]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int) -> np.ndarray:
    """Scatter-add the patch-matrix gradient back onto the input grid."""
    n, c, h, w = x_shape
    oh, ow = h - kh + 1, w - kw + 1
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + oh, j : j + ow] += d6[:, :, i, j]
    return dx


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name: str, in_channels: int, filters: int, kernel: int,
                 rng: Rng, dtype=np.float32):
        super().__init__(name)
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        w = uniform_init((filters, in_channels, kernel, kernel),
                         CONV_INIT_LO, CONV_INIT_HI, rng, dtype)
        self.weights = Parameter(f"{name}.weights", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(filters, dtype=dtype))

    def parameters(self):
        return [self.weights, self.bias]

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.kernel
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {c}")
        if k > h or k > w:
            raise ShapeError(f"{self.name}: kernel {k}x{k} larger than input {h}x{w}")
        oh, ow = h - k + 1, w - k + 1
        cols = _im2col(x, k, k)
        wmat = self.weights.data.reshape(self.filters, -1)
        out = np.matmul(wmat, cols) + self.bias.data[:, None]
        self._cache = (x.shape, cols)
        return out.reshape(n, self.filters, oh, ow)

    def backward(self, grad):
        x_shape, cols = self._take_cache()
        n = x_shape[0]
        k = self.kernel
        oh, ow = x_shape[2] - k + 1, x_shape[3] - k + 1
        if grad.shape != (n, self.filters, oh, ow):
            raise ShapeError(f"{self.name}: upstream gradient shape {grad.shape} does not "
                             f"match forward output {(n, self.filters, oh, ow)}")
        up = grad.reshape(n, self.filters, oh * ow)
        self.bias.grad = up.sum(axis=(0, 2))
        wmat_grad = np.einsum("nfp,nkp->fk", up, cols, optimize=True)
        self.weights.grad = wmat_grad.reshape(self.weights.data.shape)
        wmat = self.weights.data.reshape(self.filters, -1)
        dcols = np.matmul(wmat.T, up)
        return _col2im(dcols, x_shape, k, k)


class MaxPool2d(Layer):
    """2x2 pooling with non-overlapping stride; odd trailing row/column dropped.

    Ties go to the first maximum in row-major window order.
    """

    kind = "maxpool2d"

    def forward(self, x):
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"{self.name}: spatial dims {h}x{w} too small to pool")
        oh, ow = h // 2, w // 2
        windows = (x[:, :, : 2 * oh, : 2 * ow]
                   .reshape(n, c, oh, 2, ow, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, oh, ow, 4))
        argmax = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, argmax)
        return out

    def backward(self, grad):
        x_shape, argmax = self._take_cache()
        n, c, h, w = x_shape
        oh, ow = h // 2, w // 2
        if grad.shape != (n, c, oh, ow):
            raise ShapeError(f"{self.name}: upstream gradient shape {grad.shape} does not "
                             f"match forward output {(n, c, oh, ow)}")
        dwin = np.zeros((n, c, oh, ow, 4), dtype=grad.dtype)
        np.put_along_axis(dwin, argmax[..., None], grad[..., None], axis=-1)
        dx = np.zeros(x_shape, dtype=grad.dtype)
        dx[:, :, : 2 * oh, : 2 * ow] = (dwin.reshape(n, c, oh, ow, 2, 2)
                                        .transpose(0, 1, 2, 4, 3, 5)
                                        .reshape(n, c, 2 * oh, 2 * ow))
        return dx


class Elu(Layer):
    """x for x > 0, alpha * (e^x - 1) otherwise."""

    kind = "elu"

    def __init__(self, name: str, alpha: float = 1.0):
        super().__init__(name)
        self.alpha = alpha

    def forward(self, x):
        pos = x > 0
        y = np.where(pos, x, self.alpha * np.expm1(x))
        self._cache = (pos, y)
        return y

    def backward(self, grad):
        pos, y = self._take_cache()
        # negative-branch derivative alpha*e^x equals y + alpha
        return grad * np.where(pos, np.ones((), dtype=y.dtype), y + self.alpha)


class LinearActivation(Layer):
    """Identity; kept as an explicit pipeline stage."""

    kind = "linear_activation"

    def forward(self, x):
        self._cache = True
        return x

    def backward(self, grad):
        self._take_cache()
        return grad


class Dropout(Layer):
    """Inverted dropout: train-time masking with 1/(1-p) survivor scaling.

    Inference mode is an exact identity. Requires an attached Rng when
    training so masks come from the seeded stream.
    """

    kind = "dropout"

    def __init__(self, name: str, p: float):
        super().__init__(name)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"{self.name}: dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.training = True
        self.rng: Rng | None = None

    def forward(self, x):
        if not self.training:
            self._cache = (None,)
            return x
        if self.rng is None:
            raise RuntimeError(f"{self.name}: no rng attached for train-mode dropout")
        mask = self.rng.random(x.shape) >= self.p
        scale = 1.0 / (1.0 - self.p)
        self._cache = (mask,)
        return x * mask * scale

    def backward(self, grad):
        (mask,) = self._take_cache()
        if mask is None:
            return grad
        return grad * mask * (1.0 / (1.0 - self.p))


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, d_in: int, d_out: int, rng: Rng, dtype=np.float32):
        super().__init__(name)
        self.d_in = d_in
        self.d_out = d_out
        w = glorot_uniform_init(d_in, d_out, (d_in, d_out), rng, dtype)
        self.weights = Parameter(f"{name}.weights", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out, dtype=dtype))

    def parameters(self):
        return [self.weights, self.bias]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"{self.name}: expected (N, {self.d_in}) input, got {x.shape}")
        self._cache = x
        return x @ self.weights.data + self.bias.data

    def backward(self, grad):
        x = self._take_cache()
        if grad.shape != (x.shape[0], self.d_out):
            raise ShapeError(f"{self.name}: upstream gradient shape {grad.shape} does not "
                             f"match forward output {(x.shape[0], self.d_out)}")
        self.weights.grad = x.T @ grad
        self.bias.grad = grad.sum(axis=0)
        return grad @ self.weights.data.T


class Model:
    """Ordered layer pipeline with a train/eval switch for dropout."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int]):
        self.layers = layers
        self.input_shape = input_shape
        self.training = True
        self.geometry = None     # filled in by the builder; needed to rebuild
        self._forward_done = False

    def train(self):
        self.training = True
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.training = True
        return self

    def eval(self):
        self.training = False
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.training = False
        return self

    def set_rng(self, rng: Rng):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng
        return self

    def _check_input(self, x):
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"model: expected (N, {', '.join(map(str, self.input_shape))}) "
                             f"input, got {x.shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        for layer in self.layers:
            x = layer.forward(x)
        self._forward_done = True
        return x

    def forward_with_shapes(self, x: np.ndarray):
        """Forward pass that also records each layer's per-sample output shape."""
        self._check_input(x)
        shapes = [("input_1", self.input_shape)]
        for layer in self.layers:
            x = layer.forward(x)
            shapes.append((layer.name, x.shape[1:]))
        self._forward_done = True
        return x, shapes

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if not self._forward_done:
            raise RuntimeError("model: backward called before forward")
        self._forward_done = False
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> list[Parameter]:
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def count_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


def build_keypoint_net(rng: Rng, *, input_hw: int = INPUT_HW,
                       filters=CONV_FILTERS, kernels=CONV_KERNELS,
                       dense_units=DENSE_UNITS, out_dim: int = OUTPUT_DIM,
                       dtype=np.float32) -> Model:
    """Assemble the 25-layer pipeline; widths can shrink for cheap test clones.

    Raises ShapeError when the spatial chain collapses (a kernel exceeding its
    input, or a pooling stage reaching a sub-2x2 map).
    """
    if len(filters) != 4 or len(kernels) != 4 or len(dense_units) != 2:
        raise ValueError("network structure is fixed at 4 conv blocks and 3 dense layers")
    layers: list[Layer] = []
    c, hw = 1, input_hw
    for i, (f, k) in enumerate(zip(filters, kernels), start=1):
        if k > hw:
            raise ShapeError(f"conv2d_{i}: kernel {k}x{k} larger than its {hw}x{hw} input")
        layers.append(Conv2d(f"conv2d_{i}", c, f, k, rng, dtype))
        layers.append(Elu(f"activation_{i}"))
        hw = hw - k + 1
        if hw < 2:
            raise ShapeError(f"maxpool2d_{i}: cannot pool a {hw}x{hw} map")
        layers.append(MaxPool2d(f"maxpool2d_{i}"))
        hw //= 2
        layers.append(Dropout(f"dropout_{i}", DROPOUT_PROBS[i - 1]))
        c = f
    layers.append(Flatten("flatten_1"))
    d_in = c * hw * hw
    layers.append(Dense("dense_1", d_in, dense_units[0], rng, dtype))
    layers.append(Elu("activation_5"))
    layers.append(Dropout("dropout_5", DROPOUT_PROBS[4]))
    layers.append(Dense("dense_2", dense_units[0], dense_units[1], rng, dtype))
    layers.append(LinearActivation("activation_6"))
    layers.append(Dropout("dropout_6", DROPOUT_PROBS[5]))
    layers.append(Dense("dense_3", dense_units[1], out_dim, rng, dtype))
    model = Model(layers, (1, input_hw, input_hw))
    model.geometry = {"input_hw": input_hw, "filters": list(filters),
                      "kernels": list(kernels), "dense_units": list(dense_units),
                      "out_dim": out_dim}
    return model


def build_reduced_net(rng: Rng, dtype=np.float64) -> Model:
    """Smallest clone that keeps every layer and the 4/3/2/1 kernel chain.

    27x27 is the minimum input for which all four pool stages stay >= 2x2
    (four halvings alone need 16; the kernel shrinkage pushes it to 27).
    Used by gradient checks, so float64 by default.
    """
    return build_keypoint_net(rng, input_hw=27, filters=(2, 2, 2, 2),
                              dense_units=(8, 8), out_dim=2, dtype=dtype)
