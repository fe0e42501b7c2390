"""Incremental-update parametrizations of a frozen ``din x dout`` weight.

* :class:`LoraAdapter`   -- ``delta = b @ a``
* :class:`SvdAdapter`    -- ``delta = p @ diag(lam) @ q``
* :class:`Lora2Adapter`  -- ``delta = (u_out @ u_in) @ diag(lam) @ (v_in @ v_out)``

For the five-factor adapter the two large factors (``u_out``: din x k and
``v_out``: k x dout) sit on the outside of the chain and the two small ones
(``u_in``: k x r and ``v_in``: r x k) sit next to the diagonal.  Only the
small factors and ``lam`` carry per-index structure, which is what the rank
allocator scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from .autodiff import ShapeError, Tensor, as_matrix, constant, diag, matmul, mul

LORA2_FACTORS = ("u_out", "u_in", "lam", "v_in", "v_out")
INNER_FACTORS = ("u_in", "v_in")
OUTER_FACTORS = ("u_out", "v_out")


@dataclass(frozen=True)
class Lora2Config:
    din: int
    dout: int
    k: int
    r_init: int
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("din", "dout", "k", "r_init"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.init_std > 0:
            raise ValueError(f"init_std must be positive, got {self.init_std}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass
class Lora2Adapter:
    u_out: np.ndarray
    u_in: np.ndarray
    lam: np.ndarray
    v_in: np.ndarray
    v_out: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if self.mask is None:
            self.mask = np.ones(self.lam.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        self.check_shapes()

    @property
    def din(self) -> int:
        return self.u_out.shape[0]

    @property
    def dout(self) -> int:
        return self.v_out.shape[1]

    @property
    def k(self) -> int:
        return self.u_out.shape[1]

    @property
    def r(self) -> int:
        return self.lam.shape[0]

    def check_shapes(self):
        din, k = self.u_out.shape
        r = self.lam.shape[0]
        expected = {"u_in": (k, r), "v_in": (r, self.v_out.shape[0]), "mask": (r,)}
        actual = {"u_in": self.u_in.shape, "v_in": self.v_in.shape, "mask": self.mask.shape}
        for name, shape in expected.items():
            if actual[name] != shape:
                raise ShapeError(f"{name} has shape {actual[name]}, expected {shape}")
        if self.v_in.shape[1] != self.v_out.shape[0]:
            raise ShapeError(f"v_in {self.v_in.shape} does not chain into v_out {self.v_out.shape}")

    def params(self) -> dict[str, np.ndarray]:
        """Trainable factors as 2-D arrays, ``lam`` as a 1 x r row."""
        return {
            "u_out": self.u_out,
            "u_in": self.u_in,
            "lam": self.lam.reshape(1, -1),
            "v_in": self.v_in,
            "v_out": self.v_out,
        }

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Lora2Adapter":
        return Lora2Adapter(
            u_out=np.array(params["u_out"], dtype=np.float64),
            u_in=np.array(params["u_in"], dtype=np.float64),
            lam=np.array(params["lam"], dtype=np.float64).reshape(-1),
            v_in=np.array(params["v_in"], dtype=np.float64),
            v_out=np.array(params["v_out"], dtype=np.float64),
            mask=self.mask.copy(),
        )

    def copy(self) -> "Lora2Adapter":
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})


@dataclass
class LoraAdapter:
    b: np.ndarray
    a: np.ndarray

    @property
    def din(self) -> int:
        return self.b.shape[0]

    @property
    def dout(self) -> int:
        return self.a.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"b": self.b, "a": self.a}

    def with_params(self, params) -> "LoraAdapter":
        return LoraAdapter(np.array(params["b"], dtype=np.float64), np.array(params["a"], dtype=np.float64))

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.b.copy(), self.a.copy())


@dataclass
class SvdAdapter:
    p: np.ndarray
    lam: np.ndarray
    q: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if self.mask is None:
            self.mask = np.ones(self.lam.shape[0], dtype=bool)

    @property
    def din(self) -> int:
        return self.p.shape[0]

    @property
    def dout(self) -> int:
        return self.q.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"p": self.p, "lam": self.lam.reshape(1, -1), "q": self.q}


def init_lora2(cfg: Lora2Config) -> Lora2Adapter:
    """Gaussian outer and inner factors, zero singular values, full mask."""
    rng = np.random.default_rng(cfg.seed)
    k, r = cfg.k, cfg.r_init
    u_out = rng.normal(0.0, cfg.init_std, (cfg.din, k))
    u_in = rng.normal(0.0, cfg.init_std, (k, r))
    v_in = rng.normal(0.0, cfg.init_std, (r, k))
    v_out = rng.normal(0.0, cfg.init_std, (k, cfg.dout))
    return Lora2Adapter(u_out, u_in, np.zeros(r), v_in, v_out, np.ones(r, dtype=bool))


def init_lora(din: int, dout: int, r: int, init_std: float = 0.02, seed: int = 0) -> LoraAdapter:
    rng = np.random.default_rng(seed)
    return LoraAdapter(np.zeros((din, r)), rng.normal(0.0, init_std, (r, dout)))


def init_svd(din: int, dout: int, r: int, init_std: float = 0.02, seed: int = 0) -> SvdAdapter:
    rng = np.random.default_rng(seed)
    p = rng.normal(0.0, init_std, (din, r))
    q = rng.normal(0.0, init_std, (r, dout))
    return SvdAdapter(p, np.zeros(r), q)


def masked_lam(ad) -> np.ndarray:
    return np.where(ad.mask, ad.lam, 0.0)


def delta_matrix(ad) -> np.ndarray:
    """The materialized increment ``delta`` (din x dout)."""
    if isinstance(ad, LoraAdapter):
        return matmul(ad.b, ad.a)
    if isinstance(ad, SvdAdapter):
        return matmul(matmul(ad.p, np.diag(masked_lam(ad))), ad.q)
    ad.check_shapes()
    left = matmul(ad.u_out, ad.u_in)
    right = matmul(ad.v_in, ad.v_out)
    return matmul(matmul(left, np.diag(masked_lam(ad))), right)


def delta_forward(ad, x: Tensor, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """``x @ delta`` built factor by factor on the tape.

    ``leaves`` supplies tensors for the adapter factors (so gradients reach
    them); otherwise the current values enter as constants.
    """
    if leaves is None:
        leaves = {n: constant(v) for n, v in ad.params().items()}
    if isinstance(ad, LoraAdapter):
        return (x @ leaves["b"]) @ leaves["a"]
    keep = constant(ad.mask.astype(np.float64).reshape(1, -1))
    lam = diag(mul(leaves["lam"], keep))
    if isinstance(ad, SvdAdapter):
        return ((x @ leaves["p"]) @ lam) @ leaves["q"]
    h = (x @ leaves["u_out"]) @ leaves["u_in"]
    return (((h @ lam) @ leaves["v_in"]) @ leaves["v_out"])


def adapted_forward(ad, w0, x, leaves: Mapping[str, Tensor] | None = None) -> Tensor | np.ndarray:
    """``x @ (w0 + delta)`` without materializing ``delta``.

    Returns a tensor when ``x`` is a tensor, otherwise an array.
    """
    as_array = not isinstance(x, Tensor)
    xt = constant(x) if as_array else x
    w0 = w0 if isinstance(w0, Tensor) else constant(w0)
    if w0.shape != (ad.din, ad.dout):
        raise ShapeError(f"base weight {w0.shape} does not match adapter ({ad.din}, {ad.dout})")
    if xt.shape[1] != ad.din:
        raise ShapeError(f"input {xt.shape} does not match din={ad.din}")
    out = xt @ w0 + delta_forward(ad, xt, leaves)
    return out.value if as_array else out


def merge_into_base(ad, w0) -> np.ndarray:
    w0 = as_matrix(w0, "w0")
    if w0.shape != (ad.din, ad.dout):
        raise ShapeError(f"base weight {w0.shape} does not match adapter ({ad.din}, {ad.dout})")
    return w0 + delta_matrix(ad)


def param_count(ad) -> int:
    """Number of trainable scalars."""
    if isinstance(ad, Lora2Config):
        din, dout, k, r = ad.din, ad.dout, ad.k, ad.r_init
        return din * k + k * r + r + r * k + k * dout
    if isinstance(ad, Lora2Adapter):
        return ad.din * ad.k + 2 * ad.k * ad.r + ad.r + ad.k * ad.dout
    if isinstance(ad, LoraAdapter):
        r = ad.b.shape[1]
        return ad.din * r + r * ad.dout
    if isinstance(ad, SvdAdapter):
        r = ad.lam.shape[0]
        return ad.din * r + r + r * ad.dout
    raise TypeError(f"no parameter count for {type(ad).__name__}")


def effective_rank(ad) -> int:
    return int(np.count_nonzero(ad.mask))
