"""Frozen toy models with named adapter sites, and planted-increment tasks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .adapters import adapted_forward, merge_into_base
from .autodiff import ShapeError, Tape, Tensor, constant, cross_entropy, relu, scale, sq_frobenius, tanh

SITE_KINDS = ("Wq", "Wk", "Wv", "f1", "f2")
NONLINEARITIES = ("none", "relu", "tanh")
LOSS_KINDS = ("mse", "cross-entropy")


@dataclass
class Site:
    name: str
    weight: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class ModelSpec:
    """A chain of frozen weights applied in order, with a nonlinearity in between."""

    sites: list[Site]
    nonlinearity: str = "relu"
    attachment: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.sites:
            raise ValueError("model needs at least one site")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}, got {self.nonlinearity!r}")
        for prev, cur in zip(self.sites, self.sites[1:]):
            if prev.shape[1] != cur.shape[0]:
                raise ShapeError(f"{prev.name} {prev.shape} does not compose with {cur.name} {cur.shape}")
        names = self.names
        if len(set(names)) != len(names):
            raise ValueError("duplicate site names")
        unknown = [a for a in self.attachment if a not in names]
        if unknown:
            raise KeyError(f"attachment names unknown sites: {unknown}")
        self.attachment = tuple(self.attachment)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.sites]

    @property
    def din(self) -> int:
        return self.sites[0].shape[0]

    @property
    def dout(self) -> int:
        return self.sites[-1].shape[1]

    def site(self, name: str) -> Site:
        for s in self.sites:
            if s.name == name:
                return s
        raise KeyError(f"unknown site {name!r}")

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> "ModelSpec":
        sites = [Site(s.name, np.asarray(weights.get(s.name, s.weight))) for s in self.sites]
        return ModelSpec(sites, self.nonlinearity, self.attachment)


def site_name(layer: int, kind: str) -> str:
    return f"L{layer}.{kind}"


def parse_site_name(name: str) -> tuple[int, str]:
    layer, _, kind = name.partition(".")
    if not layer.startswith("L") or not kind:
        raise ValueError(f"site name {name!r} is not of the form L<layer>.<kind>")
    return int(layer[1:]), kind


def build_model(
    n_layers: int = 1,
    dim: int = 16,
    ffn_dim: int | None = None,
    kinds: Sequence[str] = SITE_KINDS,
    nonlinearity: str = "relu",
    attach: Sequence[str] | str = "all",
    seed: int = 0,
) -> ModelSpec:
    """A chain of ``n_layers`` blocks, each applying the site kinds in order.

    ``f1`` maps ``dim -> ffn_dim`` and ``f2`` maps back; every other kind is
    square.  Weights are Gaussian with variance ``gain / fan_in``.
    """
    ffn_dim = ffn_dim or dim
    rng = np.random.default_rng(seed)
    gain = 2.0 if nonlinearity == "relu" else 1.0
    sites = []
    width = dim
    for layer in range(n_layers):
        for kind in kinds:
            if kind not in SITE_KINDS:
                raise ValueError(f"unknown site kind {kind!r}")
            out = ffn_dim if kind == "f1" else dim
            sites.append(Site(site_name(layer, kind), rng.normal(0.0, np.sqrt(gain / width), (width, out))))
            width = out
    names = [s.name for s in sites]
    if isinstance(attach, str):
        attach = [attach]
    chosen: list[str] = []
    for a in attach:
        if a == "all":
            chosen.extend(names)
        elif a == "none":
            continue
        elif "." in a:
            chosen.append(a)
        else:
            chosen.extend(site_name(i, a) for i in range(n_layers))
    attach = [n for n in names if n in set(chosen)]
    unknown = sorted(set(chosen) - set(names))
    if unknown:
        raise KeyError(f"attachment names unknown sites: {unknown}")
    return ModelSpec(sites, nonlinearity, tuple(attach))


def _activate(h: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(h)
    if kind == "tanh":
        return tanh(h)
    return h


def model_forward(spec: ModelSpec, adapters: Mapping[str, object], x, leaves=None):
    """Apply the chain, routing attached sites through their adapters.

    ``leaves`` maps site -> factor -> tensor when gradients are wanted.
    Returns a tensor for tensor input, an array otherwise.
    """
    as_array = not isinstance(x, Tensor)
    h = constant(x) if as_array else x
    names = spec.names
    for site in adapters:
        if site not in names:
            raise KeyError(f"unknown site {site!r}")
    if h.shape[1] != spec.din:
        raise ShapeError(f"input {h.shape} does not match model din={spec.din}")
    last = len(spec.sites) - 1
    for i, s in enumerate(spec.sites):
        ad = adapters.get(s.name)
        if ad is None:
            h = h @ constant(s.weight)
        else:
            h = adapted_forward(ad, s.weight, h, None if leaves is None else leaves[s.name])
        if i != last:
            h = _activate(h, spec.nonlinearity)
    return h.value if as_array else h


def bind_adapters(tape: Tape, adapters: Mapping[str, object]) -> dict[str, dict[str, Tensor]]:
    """Register every adapter factor as a trainable leaf named ``<site>.<factor>``."""
    return {
        site: {f: tape.leaf(f"{site}.{f}", v) for f, v in ad.params().items()} for site, ad in adapters.items()
    }


def merged_spec(spec: ModelSpec, adapters: Mapping[str, object]) -> ModelSpec:
    return spec.with_weights({site: merge_into_base(ad, spec.site(site).weight) for site, ad in adapters.items()})


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray  # n x dout targets, or n integer labels

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(f"{self.x.shape[0]} inputs but {self.y.shape[0]} targets")

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.x[idx], self.y[idx])


def task_loss(pred, batch: Batch, kind: str = "mse"):
    """Mean squared error over all entries, or mean cross-entropy over rows."""
    as_float = not isinstance(pred, Tensor)
    p = constant(pred) if as_float else pred
    if kind == "mse":
        if p.shape != batch.y.shape:
            raise ShapeError(f"prediction {p.shape} vs target {batch.y.shape}")
        out = scale(sq_frobenius(p - constant(batch.y)), 1.0 / batch.y.size)
    elif kind == "cross-entropy":
        out = cross_entropy(p, batch.y)
    else:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    return out.item() if as_float else out


@dataclass
class PlantedTask:
    """Regression (or classification) data from a frozen model plus planted increments."""

    spec: ModelSpec
    delta_star: dict[str, np.ndarray]
    train: Batch
    eval: Batch
    noise_std: float = 0.0
    seed: int = 0
    kind: str = "mse"
    ranks: dict[str, int] = field(default_factory=dict)

    @property
    def w0(self) -> np.ndarray:
        return self.spec.sites[0].weight

    def true_spec(self) -> ModelSpec:
        return self.spec.with_weights({s: self.spec.site(s).weight + d for s, d in self.delta_star.items()})


def planted_delta(din: int, dout: int, rho: int, rng: np.random.Generator) -> np.ndarray:
    """Sum of ``rho`` outer products of unit vectors, scaled to unit Frobenius norm."""
    if rho < 0 or rho > min(din, dout):
        raise ValueError(f"rho must lie in [0, {min(din, dout)}], got {rho}")
    delta = np.zeros((din, dout))
    for _ in range(rho):
        left = rng.normal(size=din)
        right = rng.normal(size=dout)
        delta += np.outer(left / np.linalg.norm(left), right / np.linalg.norm(right))
    if rho:
        delta /= np.linalg.norm(delta)
    return delta


def gen_planted_model_task(
    spec: ModelSpec,
    ranks: Mapping[str, int],
    noise_std: float = 0.0,
    seed: int = 0,
    n_train: int = 256,
    n_eval: int = 128,
    kind: str = "mse",
) -> PlantedTask:
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if n_train < 1 or n_eval < 1:
        raise ValueError("sample counts must be positive")
    rng = np.random.default_rng(seed)
    deltas = {}
    for site, rho in ranks.items():
        din, dout = spec.site(site).shape
        deltas[site] = planted_delta(din, dout, int(rho), rng)
    teacher = spec.with_weights({s: spec.site(s).weight + d for s, d in deltas.items()})

    def sample(n):
        x = rng.normal(size=(n, spec.din))
        y = model_forward(teacher, {}, x)
        if kind == "cross-entropy":
            return Batch(x, np.argmax(y, axis=1))
        if noise_std > 0:
            y = y + rng.normal(0.0, noise_std, y.shape)
        return Batch(x, y)

    train = sample(n_train)
    evaluation = sample(n_eval)
    return PlantedTask(spec, deltas, train, evaluation, noise_std, seed, kind, dict(ranks))


def gen_planted_task(
    din: int,
    dout: int,
    rho: int,
    noise_std: float = 0.0,
    seed: int = 0,
    n_train: int = 256,
    n_eval: int = 128,
    kind: str = "mse",
    site: str = "L0.Wq",
) -> PlantedTask:
    """Single frozen ``din x dout`` weight with a planted rank-``rho`` increment."""
    if rho < 0 or rho > min(din, dout):
        raise ValueError(f"rho must lie in [0, {min(din, dout)}], got {rho}")
    rng = np.random.default_rng([seed, 1])
    w0 = rng.normal(0.0, 1.0 / np.sqrt(din), (din, dout))
    spec = ModelSpec([Site(site, w0)], "none", (site,))
    return gen_planted_model_task(spec, {site: rho}, noise_std, seed, n_train, n_eval, kind)


# -- plain-text dataset files -------------------------------------------------


def save_dataset(path, batch: Batch, kind: str = "mse", dout: int | None = None):
    """Header ``din dout n kind`` then one space-separated sample per line.

    For cross-entropy each line ends with the integer label and ``dout`` is
    the number of classes.
    """
    n, din = batch.x.shape
    if kind == "mse":
        dout = batch.y.shape[1]
    elif dout is None:
        dout = int(batch.y.max()) + 1
    lines = [f"{din} {dout} {n} {kind}"]
    for i in range(n):
        xs = [repr(float(v)) for v in batch.x[i]]
        ys = [repr(float(v)) for v in batch.y[i]] if kind == "mse" else [str(int(batch.y[i]))]
        lines.append(" ".join(xs + ys))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> tuple[Batch, str]:
    text = Path(path).read_text().splitlines()
    head = text[0].split(" ")
    if len(head) != 4:
        raise ValueError(f"bad dataset header {text[0]!r}")
    din, dout, n, kind = int(head[0]), int(head[1]), int(head[2]), head[3]
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    rows = [line.split(" ") for line in text[1:] if line]
    if len(rows) != n:
        raise ValueError(f"header declares {n} samples, found {len(rows)}")
    width = din + (dout if kind == "mse" else 1)
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ValueError(f"sample {i} has {len(r)} fields, expected {width}")
    x = np.array([[float(v) for v in r[:din]] for r in rows])
    if kind == "mse":
        y = np.array([[float(v) for v in r[din:]] for r in rows])
    else:
        y = np.array([int(r[din]) for r in rows])
        if y.min() < 0 or y.max() >= dout:
            raise ValueError("label out of range")
    return Batch(x, y), kind
