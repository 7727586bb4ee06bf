"""MetaMF: a meta network that generates each user's rating model.

Forward pass for user u and item i::

    c_u  = memory^T softmax(e_u)                      collaborative vector
    h    = relu(c_u W_h + b_h)                        meta hidden state
    W1, b1, W2, b2 = heads(h)                         private rating network
    P, Q = itemgen heads(h)                           low-rank opinion transform
    E_u[i] = B[i] (I + P Q)                           personalized item embedding
    r_hat = W2 relu(W1 E_u[i] + b1) + b2

Weights are stored input-major, so every linear layer is ``x @ W + b``.
In the NoMetaMF variant all meta parameters enter through
``stop_gradient``; only the user embeddings and the memory learn.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, IngestionError

METAMF = "MetaMF"
NOMETAMF = "NoMetaMF"
VARIANTS = (METAMF, NOMETAMF)

# parameters that keep learning under NoMetaMF
NON_META = ("user_embeddings", "memory")


def parse_variant(name: str) -> str:
    for v in VARIANTS:
        if name.lower() == v.lower():
            return v
    raise ContractError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class ModelConfig:
    d_user: int = 32
    d_collab: int = 32
    d_hidden_meta: int = 64
    d_item: int = 16
    d_rp_hidden: int = 8
    r_lowrank: int = 4
    variant: str = METAMF

    def __post_init__(self):
        for f in fields(self):
            if f.name != "variant" and getattr(self, f.name) < 1:
                raise ContractError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.r_lowrank > self.d_item:
            raise ContractError(f"r_lowrank ({self.r_lowrank}) exceeds d_item ({self.d_item})")
        object.__setattr__(self, "variant", parse_variant(self.variant))

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


def parameter_shapes(cfg: ModelConfig, n_users: int, n_items: int) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in checkpoint order."""
    hm = cfg.d_hidden_meta
    shapes = {
        "user_embeddings": (n_users, cfg.d_user),
        "memory": (cfg.d_user, cfg.d_collab),
        "meta_hidden.weight": (cfg.d_collab, hm),
        "meta_hidden.bias": (hm,),
    }
    heads = {
        "w1_head": cfg.d_rp_hidden * cfg.d_item,
        "b1_head": cfg.d_rp_hidden,
        "w2_head": cfg.d_rp_hidden,
        "b2_head": 1,
        "p_head": cfg.d_item * cfg.r_lowrank,
        "q_head": cfg.r_lowrank * cfg.d_item,
    }
    for name, width in heads.items():
        shapes[f"{name}.weight"] = (hm, width)
        shapes[f"{name}.bias"] = (width,)
    shapes["base_item_embeddings"] = (n_items, cfg.d_item)
    return shapes


class MetaParams:
    """All shared learnable tensors plus the metadata needed to rebuild them."""

    def __init__(self, config: ModelConfig, n_users: int, n_items: int, seed: int,
                 tensors: dict[str, Tensor]):
        self.config = config
        self.n_users = n_users
        self.n_items = n_items
        self.seed = seed
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, n_users: int, n_items: int, seed: int = 0,
                   dtype=np.float32) -> "MetaParams":
        """Seeded initialization.

        Linear weights are Uniform(+-1/sqrt(fan_in)). Embedding tables and
        the memory are N(0, 1). Biases are zero, except the biases of the
        heads that emit the rating network: those start as a standard
        initialization of the generated layer itself (bound 1/sqrt of that
        layer's fan-in), so the generated network has a usable scale at
        step 0 instead of collapsing towards zero.
        """
        if n_users < 1 or n_items < 1:
            raise ContractError("need at least one user and one item")
        rng = np.random.default_rng(seed)
        generated_fan_in = {
            "w1_head.bias": config.d_item,
            "b1_head.bias": config.d_item,
            "w2_head.bias": config.d_rp_hidden,
            "b2_head.bias": config.d_rp_hidden,
        }
        tensors = {}
        for name, shape in parameter_shapes(config, n_users, n_items).items():
            if name in generated_fan_in:
                bound = 1.0 / np.sqrt(generated_fan_in[name])
                values = rng.uniform(-bound, bound, size=shape)
            elif name.endswith(".bias"):
                values = np.zeros(shape)
            elif name.endswith(".weight"):
                bound = 1.0 / np.sqrt(shape[0])
                values = rng.uniform(-bound, bound, size=shape)
            else:
                values = rng.normal(0.0, 1.0, size=shape)
            tensors[name] = Tensor(values, requires_grad=True, name=name, dtype=dtype)
        return cls(config, n_users, n_items, seed, tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    @property
    def frozen_names(self) -> list[str]:
        if self.config.variant == NOMETAMF:
            return [n for n in self.tensors if n not in NON_META]
        return []

    def trainable(self) -> list[Tensor]:
        frozen = set(self.frozen_names)
        return [t for n, t in self.tensors.items() if n not in frozen]

    def use(self, name: str) -> Tensor:
        """The tensor as seen by the forward pass (detached if frozen)."""
        t = self.tensors[name]
        if self.config.variant == NOMETAMF and name not in NON_META:
            return ad.stop_gradient(t)
        return t

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.tensors.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            self.tensors[n].values[...] = v

    def copy(self) -> "MetaParams":
        tensors = {n: Tensor(t.values, requires_grad=True, name=n, dtype=t.dtype) for n, t in self.tensors.items()}
        return MetaParams(self.config, self.n_users, self.n_items, self.seed, tensors)

    def with_variant(self, variant: str) -> "MetaParams":
        return MetaParams(self.config.replace(variant=variant), self.n_users, self.n_items, self.seed, self.tensors)


@dataclass
class PerUserModel:
    W1: np.ndarray  # d_rp_hidden x d_item
    b1: np.ndarray  # d_rp_hidden
    W2: np.ndarray  # 1 x d_rp_hidden
    b2: float
    item_embeddings: np.ndarray | None = None  # n_items x d_item


def _linear(params: MetaParams, x: Tensor, name: str) -> Tensor:
    return ad.add(ad.matmul(x, params.use(f"{name}.weight")), params.use(f"{name}.bias"))


def _check_users(params: MetaParams, users):
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    if users.size and (users.min() < 0 or users.max() >= params.n_users):
        raise ContractError(f"user index out of range [0, {params.n_users})")
    return users


def _check_items(params: MetaParams, items):
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    if items.size and (items.min() < 0 or items.max() >= params.n_items):
        raise ContractError(f"item index out of range [0, {params.n_items})")
    return items


def collaborative_vectors(params: MetaParams, users) -> Tensor:
    """Rows c_u = memory^T softmax(e_u), one per entry of ``users``."""
    users = _check_users(params, users)
    e = ad.take_rows(params.use("user_embeddings"), users)
    return ad.matmul(ad.softmax(e), params.use("memory"))


def collaborative_vector(params: MetaParams, u: int) -> Tensor:
    return ad.reshape(collaborative_vectors(params, [u]), (params.config.d_collab,))


def meta_hidden(params: MetaParams, c: Tensor) -> Tensor:
    return ad.relu(_linear(params, c, "meta_hidden"))


def _as_batch(params: MetaParams, c: Tensor) -> Tensor:
    if c.values.ndim == 1:
        c = ad.reshape(c, (1, c.shape[0]))
    if c.shape[-1] != params.config.d_collab:
        raise ContractError(f"collaborative vector has width {c.shape[-1]}, expected {params.config.d_collab}")
    return c


def rating_network(params: MetaParams, h: Tensor):
    """Generated (W1, b1, W2, b2) for a batch of hidden states."""
    cfg = params.config
    n = h.shape[0]
    W1 = ad.reshape(_linear(params, h, "w1_head"), (n, cfg.d_rp_hidden, cfg.d_item))
    b1 = _linear(params, h, "b1_head")
    W2 = ad.reshape(_linear(params, h, "w2_head"), (n, 1, cfg.d_rp_hidden))
    b2 = _linear(params, h, "b2_head")
    return W1, b1, W2, b2


def lowrank_factors(params: MetaParams, h: Tensor):
    cfg = params.config
    n = h.shape[0]
    P = ad.reshape(_linear(params, h, "p_head"), (n, cfg.d_item, cfg.r_lowrank))
    Q = ad.reshape(_linear(params, h, "q_head"), (n, cfg.r_lowrank, cfg.d_item))
    return P, Q


def generate_rating_model(params: MetaParams, c_u: Tensor) -> PerUserModel:
    """Materialize the private rating network for one collaborative vector."""
    cfg = params.config
    h = meta_hidden(params, _as_batch(params, c_u))
    W1, b1, W2, b2 = rating_network(params, h)
    return PerUserModel(
        W1=W1.values.reshape(cfg.d_rp_hidden, cfg.d_item).copy(),
        b1=b1.values.reshape(cfg.d_rp_hidden).copy(),
        W2=W2.values.reshape(1, cfg.d_rp_hidden).copy(),
        b2=float(b2.values.reshape(-1)[0]),
    )


def generate_item_embeddings(params: MetaParams, c_u: Tensor) -> Tensor:
    """E_u = B (I + P_u Q_u) over all items, as an (n_items, d_item) tensor."""
    h = meta_hidden(params, _as_batch(params, c_u))
    P, Q = lowrank_factors(params, h)
    cfg = params.config
    P = ad.reshape(P, (cfg.d_item, cfg.r_lowrank))
    Q = ad.reshape(Q, (cfg.r_lowrank, cfg.d_item))
    base = params.use("base_item_embeddings")
    return ad.add(base, ad.matmul(ad.matmul(base, P), Q))


def user_model(params: MetaParams, u: int, with_items: bool = True) -> PerUserModel:
    c = collaborative_vector(params, u)
    model = generate_rating_model(params, c)
    if with_items:
        model.item_embeddings = generate_item_embeddings(params, c).values.copy()
    return model


def forward(params: MetaParams, users, items) -> Tensor:
    """Predicted ratings, shape (n, 1), for parallel arrays of users and items.

    Every example gets its own generated network; nothing is cached, so the
    result always reflects the current parameter values.
    """
    users = _check_users(params, users)
    items = _check_items(params, items)
    if len(users) != len(items):
        raise ContractError("users and items must have the same length")
    cfg = params.config
    n = len(users)
    h = meta_hidden(params, collaborative_vectors(params, users))
    W1, b1, W2, b2 = rating_network(params, h)
    P, Q = lowrank_factors(params, h)

    base = ad.reshape(ad.take_rows(params.use("base_item_embeddings"), items), (n, 1, cfg.d_item))
    opinion = ad.bmm(ad.bmm(base, P), Q)
    emb = ad.add(base, opinion)  # (n, 1, d_item)

    hidden = ad.bmm(W1, ad.reshape(emb, (n, cfg.d_item, 1)))
    hidden = ad.relu(ad.add(ad.reshape(hidden, (n, cfg.d_rp_hidden)), b1))
    out = ad.bmm(W2, ad.reshape(hidden, (n, cfg.d_rp_hidden, 1)))
    return ad.add(ad.reshape(out, (n, 1)), b2)


def predict(params: MetaParams, users, items, batch_size: int = 4096) -> np.ndarray:
    """Inference-only predictions as a float64 vector."""
    users = np.asarray(users)
    items = np.asarray(items)
    out = np.empty(len(users), dtype=np.float64)
    for start in range(0, len(users), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = forward(params, users[sl], items[sl]).values.reshape(-1)
    return out


def predict_rating(params: MetaParams, u: int, i: int) -> float:
    return float(predict(params, [u], [i])[0])


def extract_first_layer_weights(params: MetaParams, users) -> np.ndarray:
    """Row k is the flattened first-layer weight matrix of ``users[k]``."""
    users = _check_users(params, users)
    cfg = params.config
    if users.size == 0:
        return np.zeros((0, cfg.d_rp_hidden * cfg.d_item))
    h = meta_hidden(params, collaborative_vectors(params, users))
    return _linear(params, h, "w1_head").values.astype(np.float64)


def personalized_item_embeddings(params: MetaParams, u: int) -> np.ndarray:
    return generate_item_embeddings(params, collaborative_vector(params, u)).values.astype(np.float64)


def expected_parameter_count(cfg: ModelConfig, n_users: int, n_items: int) -> int:
    hm = cfg.d_hidden_meta
    head_out = (
        cfg.d_rp_hidden * cfg.d_item + cfg.d_rp_hidden + cfg.d_rp_hidden + 1
        + 2 * cfg.d_item * cfg.r_lowrank
    )
    return (
        n_users * cfg.d_user
        + cfg.d_user * cfg.d_collab
        + cfg.d_collab * hm + hm
        + (hm + 1) * head_out
        + n_items * cfg.d_item
    )


# ---------------------------------------------------------------- checkpoint

MAGIC = b"MMF1"


def _manifest(params: MetaParams) -> dict:
    return {
        "config": asdict(params.config),
        "seed": params.seed,
        "variant": params.config.variant,
        "n_users": params.n_users,
        "n_items": params.n_items,
    }


def save_checkpoint(params: MetaParams, path) -> None:
    """Binary layout: magic, manifest (u32 length + JSON), then tensors.

    Each tensor is (u32 name length, name, u32 rank, u32 dims..., float32
    little-endian payload). All integers are little-endian.
    """
    manifest = json.dumps(_manifest(params), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for name, t in params.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.values.ndim))
            fh.write(struct.pack(f"<{t.values.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.values, dtype="<f4").tobytes())


def load_checkpoint(path, expect_config: ModelConfig | None = None, dtype=np.float32) -> MetaParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise IngestionError(f"{path}: not an MMF1 checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise IngestionError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    manifest = json.loads(take(mlen).decode("utf-8"))
    config = ModelConfig(**manifest["config"])
    if expect_config is not None and expect_config != config:
        raise ContractError(f"checkpoint config {config} does not match requested {expect_config}")
    tensors = {}
    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = Tensor(values, requires_grad=True, name=name, dtype=dtype)
    expected = parameter_shapes(config, manifest["n_users"], manifest["n_items"])
    got = {n: t.shape for n, t in tensors.items()}
    if got != expected:
        raise IngestionError(f"{path}: tensor layout does not match its manifest")
    return MetaParams(config, manifest["n_users"], manifest["n_items"], manifest["seed"], tensors)


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
