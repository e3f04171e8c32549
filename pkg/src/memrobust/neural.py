"""Small dense networks with multiplicative multinomial weight noise.

A noise site attached to a layer multiplies that layer's weight matrix
elementwise by a mask whose entries are 0 (prob ``p1``), 0.5 (prob ``p2``)
or 1 (prob ``1 - p1 - p2``).  Biases are never masked.  Masks are drawn once
per forward pass and shared by every example in the batch.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputError, TrainingError
from .fileio import read_json, write_json

ACTIVATIONS = {"identity": kernels.ACT_IDENTITY, "relu": kernels.ACT_RELU,
               "softmax": kernels.ACT_SOFTMAX}
SPLITS = ("train", "val", "test")
MASK_LEVELS = np.array([0.0, 0.5, 1.0])


def as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class MultinomialNoiseSpec:
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        p1, p2 = float(self.p1), float(self.p2)
        if p1 < 0 or p2 < 0 or not (math.isfinite(p1) and math.isfinite(p2)):
            raise InputError(f"noise probabilities must be non-negative, got p1={p1}, p2={p2}")
        if p1 + p2 > 1 + 1e-12:
            raise InputError(f"p1 + p2 must be <= 1, got {p1 + p2}")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p2", p2)

    @property
    def p3(self):
        return max(1.0 - self.p1 - self.p2, 0.0)

    @property
    def mean(self):
        return self.p3 + 0.5 * self.p2

    @property
    def is_trivial(self):
        return self.p1 == 0.0 and self.p2 == 0.0

    def to_dict(self):
        return {"p1": self.p1, "p2": self.p2}


def sample_noise_mask(spec, shape, seed=None):
    """I.i.d. mask with entries in {0, 0.5, 1}."""
    if not isinstance(spec, MultinomialNoiseSpec):
        spec = MultinomialNoiseSpec(*spec)
    u = as_rng(seed).random(shape)
    mask = np.ones(shape)
    mask[u < spec.p1 + spec.p2] = 0.5
    mask[u < spec.p1] = 0.0
    return mask


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    noise: MultinomialNoiseSpec | None = None

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise InputError("bias length must equal the layer's output width")
        if self.noise is not None and not isinstance(self.noise, MultinomialNoiseSpec):
            self.noise = MultinomialNoiseSpec(**self.noise) if isinstance(self.noise, dict) \
                else MultinomialNoiseSpec(*self.noise)

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]


@dataclass
class DenseNetwork:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise InputError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise InputError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise InputError("softmax is only allowed on the final layer")
        if self.layers[-1].noise is not None:
            raise InputError("the final layer cannot carry a noise site")

    @classmethod
    def init(cls, sizes, seed=0, noise=None, hidden="relu", output="softmax"):
        """He-uniform initialised network with the given layer widths.

        ``noise`` (a spec or ``(p1, p2)``) is attached to every layer except
        the last.
        """
        rng = as_rng(seed)
        if noise is not None and not isinstance(noise, MultinomialNoiseSpec):
            noise = MultinomialNoiseSpec(*noise)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            bound = math.sqrt(6.0 / n_in)
            layers.append(DenseLayer(
                weights=rng.uniform(-bound, bound, size=(n_out, n_in)),
                bias=np.zeros(n_out),
                activation=output if last else hidden,
                noise=None if last else noise,
            ))
        return cls(layers)

    @property
    def sizes(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def theta_count(self):
        return sum(layer.weights.size for layer in self.layers)

    @property
    def noise_sites(self):
        return [layer.noise for layer in self.layers]

    def copy(self):
        return DenseNetwork([DenseLayer(l.weights.copy(), l.bias.copy(), l.activation, l.noise)
                             for l in self.layers])

    def with_noise(self, spec):
        """Copy with ``spec`` on every non-final layer (``None`` clears them)."""
        if spec is not None and not isinstance(spec, MultinomialNoiseSpec):
            spec = MultinomialNoiseSpec(*spec)
        net = self.copy()
        for layer in net.layers[:-1]:
            layer.noise = spec
        return net

    def with_weights(self, weights):
        net = self.copy()
        for layer, w in zip(net.layers, weights):
            layer.weights = np.array(w, dtype=np.float64)
        return net

    # flat representation used by the kernels ------------------------------

    def layout(self):
        dims = np.array(self.sizes, dtype=np.int64)
        acts = np.array([ACTIVATIONS[l.activation] for l in self.layers], dtype=np.int64)
        w_off, b_off = [], []
        off = 0
        for layer in self.layers:
            w_off.append(off)
            off += layer.weights.size
            b_off.append(off)
            off += layer.bias.size
        return dims, acts, np.array(w_off, dtype=np.int64), np.array(b_off, dtype=np.int64)

    def flat_params(self):
        return np.concatenate([np.concatenate((l.weights.ravel(), l.bias)) for l in self.layers])

    def weight_indices(self, noisy_only=False):
        """Flat indices of weight entries, optionally only on noise sites."""
        _, _, w_off, _ = self.layout()
        idx = [np.arange(off, off + l.weights.size) for off, l in zip(w_off, self.layers)
               if not noisy_only or l.noise is not None]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)

    # serialisation ---------------------------------------------------------

    def to_dict(self):
        return {
            "format": 1,
            "sizes": self.sizes,
            "layers": [{
                "in": l.n_in, "out": l.n_out,
                "weights": l.weights.tolist(),
                "bias": l.bias.tolist(),
                "activation": l.activation,
                "noise": None if l.noise is None else l.noise.to_dict(),
            } for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != 1:
            raise InputError(f"unsupported model format {d.get('format')!r}")
        layers = []
        for ld in d["layers"]:
            w = np.array(ld["weights"], dtype=np.float64).reshape(ld["out"], ld["in"])
            noise = None if ld.get("noise") is None else MultinomialNoiseSpec(**ld["noise"])
            layers.append(DenseLayer(w, ld["bias"], ld["activation"], noise))
        return cls(layers)

    def save(self, path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise InputError("inputs must be (n, d) with one label per row")
        if self.split.shape != self.labels.shape or not np.isin(self.split, SPLITS).all():
            raise InputError("every example needs a split tag in {train, val, test}")
        if np.any(self.labels < 0):
            raise InputError("labels must be non-negative")

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def part(self, name):
        keep = self.split == name
        return self.inputs[keep], self.labels[keep]

    def __len__(self):
        return self.labels.shape[0]


def make_moons(n=300, noise_std=0.1, seed=0):
    """Two interleaving half circles with a 70/15/15 train/val/test split.

    Class 0 is the upper unit half circle; class 1 is the lower half circle
    shifted to start at (1, 0.5) and dip to (1, -0.5) at its base, as in the
    usual two-moons construction.
    """
    if n < 4:
        raise InputError("make_moons needs n >= 4")
    rng = as_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0, np.pi, n0)
    t1 = np.linspace(0, np.pi, n1)
    upper = np.column_stack((np.cos(t0), np.sin(t0)))
    lower = np.column_stack((1.0 - np.cos(t1), 0.5 - np.sin(t1)))
    X = np.vstack((upper, lower))
    y = np.concatenate((np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)))
    if noise_std > 0:
        X = X + rng.normal(0.0, noise_std, size=X.shape)
    order = rng.permutation(n)
    X, y = X[order], y[order]
    n_train = int(round(0.70 * n))
    n_val = int(round(0.15 * n))
    split = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    return Dataset(X, y, split)


def load_csv_dataset(path, seed=0):
    """Dataset from a CSV whose last column is the integer label.

    An optional ``split`` column (train/val/test) is honoured; otherwise a
    seeded 70/15/15 split is drawn.
    """
    import csv

    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise InputError(f"{path}: no data rows")
    split = None
    if "split" in header:
        k = header.index("split")
        split = np.array([r[k].strip() for r in body])
        body = [r[:k] + r[k + 1:] for r in body]
    data = np.array(body, dtype=np.float64)
    X, y = data[:, :-1], data[:, -1].astype(np.int64)
    if split is None:
        n = len(y)
        order = as_rng(seed).permutation(n)
        tags = np.empty(n, dtype="<U5")
        n_train, n_val = int(round(0.7 * n)), int(round(0.15 * n))
        tags[order[:n_train]] = "train"
        tags[order[n_train:n_train + n_val]] = "val"
        tags[order[n_train + n_val:]] = "test"
        split = tags
    return Dataset(X, y, split)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z, name):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softmax":
        return _softmax(z)
    return z


def draw_masks(net, rng, spec=None):
    """One mask per layer (``None`` where the layer has no noise site)."""
    masks = []
    for layer in net.layers:
        s = spec if (spec is not None and layer.noise is not None) else layer.noise
        masks.append(None if s is None else sample_noise_mask(s, layer.weights.shape, rng))
    return masks


def _check_input(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.layers[0].n_in:
        raise InputError(f"input width {x.shape[-1]} does not match network input {net.layers[0].n_in}")
    return x


def forward(net, x, mode="clean", seed=None, masks=None):
    """Class probabilities for ``x`` (one example or a batch).

    ``mode="noisy"`` multiplies every noise-site weight matrix by a fresh
    mask drawn from ``seed``; explicit ``masks`` (one entry per layer, may be
    ``None``) override the draw.
    """
    if mode not in ("clean", "noisy"):
        raise InputError(f"mode must be 'clean' or 'noisy', got {mode!r}")
    h = _check_input(net, x)
    if mode == "noisy" and masks is None:
        masks = draw_masks(net, as_rng(seed))
    for i, layer in enumerate(net.layers):
        W = layer.weights
        if mode == "noisy" and masks[i] is not None:
            W = W * masks[i]
        h = _activate(h @ W.T + layer.bias, layer.activation)
    return h


def predict(net, x):
    return np.argmax(forward(net, x), axis=-1)


def accuracy(net, X, y):
    if len(y) == 0:
        raise InputError("cannot score an empty dataset")
    return float(np.mean(predict(net, X) == y))


def loss_and_grads(net, X, y, masks=None):
    """Mean cross-entropy and its gradient w.r.t. every weight and bias.

    With ``masks`` the effective weights are ``W * mask``; the returned
    weight gradient is taken w.r.t. the raw ``W`` with the mask held fixed.
    The final layer must be softmax.
    """
    X = _check_input(net, X)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    acts = [X]
    pre = []
    eff = []
    h = X
    for i, layer in enumerate(net.layers):
        W = layer.weights if masks is None or masks[i] is None else layer.weights * masks[i]
        eff.append(W)
        z = h @ W.T + layer.bias
        pre.append(z)
        h = _activate(z, layer.activation)
        acts.append(h)
    # log-softmax for a stable loss
    z = pre[-1]
    zmax = z.max(axis=1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(n), y]))
    delta = acts[-1].copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        gW = delta.T @ acts[i]
        gb = delta.sum(axis=0)
        if masks is not None and masks[i] is not None:
            gW = gW * masks[i]
        grads[i] = (gW, gb)
        if i > 0:
            delta = delta @ eff[i]
            act = net.layers[i - 1].activation
            if act == "relu":
                delta = delta * (pre[i - 1] > 0)
            elif act != "identity":
                raise InputError("hidden layers must be relu or identity")
    return loss, grads


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_accuracy))


def train(net, dataset, method="erm", spec=None, lr=0.1, epochs=500, batch=32, seed=0):
    """Mini-batch SGD on cross-entropy.

    ``method="bayesmulti"`` attaches ``spec`` (or keeps the network's own
    specs when ``spec`` is None) to every hidden layer and trains with a
    fresh mask per mini-batch.  ``"erm"`` trains without noise and strips
    the noise sites.  Returns ``(trained_net, history)``; the input network
    is left untouched.
    """
    if method not in ("erm", "bayesmulti"):
        raise InputError(f"unknown training method {method!r}")
    if lr <= 0 or epochs < 1 or batch < 1:
        raise InputError("lr must be > 0, epochs and batch >= 1")
    X, y = dataset.part("train")
    if len(y) == 0:
        raise InputError("training split is empty")
    Xv, yv = dataset.part("val")
    if method == "erm":
        net = net.with_noise(None)
    elif spec is not None:
        net = net.with_noise(spec)
    else:
        net = net.copy()
    noisy = method == "bayesmulti" and any(l.noise is not None for l in net.layers)
    order_rng = np.random.default_rng([seed, 0])
    mask_rng = np.random.default_rng([seed, 1])
    history = TrainHistory()
    n = len(y)
    for epoch in range(1, epochs + 1):
        perm = order_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = perm[lo:lo + batch]
            masks = draw_masks(net, mask_rng) if noisy else None
            # divergence is reported below, not as floating-point warnings
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(net, X[idx], y[idx], masks)
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
            total += loss * len(idx)
            for layer, (gW, gb) in zip(net.layers, grads):
                layer.weights -= lr * gW
                layer.bias -= lr * gb
        history.epochs.append(epoch)
        history.train_loss.append(total / n)
        history.val_accuracy.append(accuracy(net, Xv, yv) if len(yv) else float("nan"))
    return net, history


def smoothed_predict(net, x, spec=None, n_samples=1000, seed=0, use_numba=None):
    """Monte-Carlo estimate of the noise-averaged class probabilities.

    ``spec`` overrides the per-site specs on every noise-site layer.
    Returns ``(mean, standard_error)`` arrays over classes.
    """
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    x = _check_input(net, x).reshape(-1)
    rng = as_rng(seed)
    params = net.flat_params()
    _, _, w_off, _ = net.layout()
    batch = np.repeat(params[None, :], n_samples, axis=0)
    for layer, off in zip(net.layers, w_off):
        s = spec if (spec is not None and layer.noise is not None) else layer.noise
        if s is None:
            continue
        mask = sample_noise_mask(s, (n_samples, layer.weights.size), rng)
        batch[:, off:off + layer.weights.size] *= mask
    probs = kernels.forward_batch(batch, net.layout(), x, use_numba=use_numba)
    mean = probs.mean(axis=0)
    se = probs.std(axis=0, ddof=1) / math.sqrt(n_samples) if n_samples > 1 else np.zeros_like(mean)
    return mean, se
