"""Environment construction: colored/rotated digits, linear SEMs, client partitions.

Two data families are supported:

* the colored + rotated digit law (binarize with label noise, color a 2-channel
  image by label with per-context probability ``p_e``, rotate per client,
  2x2 average-pool down), fed from IDX files;
* a linear structural equation model per client, where the label is caused by
  hidden features H through coefficients rho and a spurious block Z tracks the
  label with an environment-dependent strength.

Generators are pure functions of (spec, seed): the same seed reproduces
bit-identical environments. Context-keyed RNG streams let distinct
environments generate independently.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from math import asin, erf, pi, sqrt
from typing import Sequence

import numpy as np

from .numerics import Tensor

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803

ENV_FILE_MAGIC = b"PINVENV1"


class DataError(Exception):
    """Base class for data-construction failures."""


class IdxFormatError(DataError):
    pass


class CapacityError(DataError):
    pass


class SemSpecError(DataError):
    pass


@dataclass(frozen=True)
class GenParams:
    """Generation parameters recorded on an environment."""

    p_e: float | None = None
    rotation_deg: int | None = None
    sem_spec_id: str | None = None

    def __post_init__(self):
        if self.p_e is not None and not (0.0 <= self.p_e <= 1.0):
            raise DataError(f"p_e must lie in [0, 1], got {self.p_e}")
        if self.rotation_deg is not None and self.rotation_deg not in (0, 90, 180, 270):
            raise DataError(f"rotation must be one of 0/90/180/270, got {self.rotation_deg}")


@dataclass(frozen=True)
class Environment:
    """A labeled dataset tagged with its context identity and generation law."""

    context_id: str
    inputs: Tensor
    labels: np.ndarray
    gen_params: GenParams = field(default_factory=GenParams)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.inputs.shape[0] < 1:
            raise DataError("environment must contain at least one sample")
        if labels.shape != (self.inputs.shape[0],):
            raise DataError("labels must be a vector with one entry per sample")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def merge_environments(envs: Sequence[Environment], context_id: str) -> Environment:
    """Concatenate environments into one dataset (the whole-client view D_i)."""
    if not envs:
        raise DataError("cannot merge zero environments")
    inputs = np.concatenate([e.inputs.data for e in envs], axis=0)
    labels = np.concatenate([e.labels for e in envs])
    return Environment(context_id, Tensor(inputs), labels)


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------


def parse_idx(data: bytes):
    """Parse an IDX byte stream.

    Magic 0x00000801 (1-D unsigned-byte) -> int64 label vector.
    Magic 0x00000803 (3-D unsigned-byte) -> float64 images [n, rows, cols]
    rescaled to [0, 1]. Dimension sizes are big-endian 32-bit.
    """
    if len(data) < 4:
        raise IdxFormatError("truncated IDX stream: missing magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise IdxFormatError(f"unsupported IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError("truncated IDX stream: incomplete dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    count = int(np.prod(dims))
    payload = data[header_len:]
    if len(payload) < count:
        raise IdxFormatError(
            f"truncated IDX stream: expected {count} payload bytes, got {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8, count=count)
    if magic == IDX_MAGIC_LABELS:
        return raw.astype(np.int64)
    images = raw.reshape(dims).astype(np.float64) / 255.0
    return Tensor(images)


def write_idx_labels(labels: np.ndarray) -> bytes:
    """Inverse of parse_idx for 1-D label data (fixture/testing helper)."""
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_MAGIC_LABELS, labels.size) + labels.tobytes()


def write_idx_images(images: np.ndarray) -> bytes:
    """Inverse of parse_idx for [n, rows, cols] images with values in [0, 1]."""
    arr = np.asarray(images, dtype=np.float64)
    raw = np.round(arr * 255.0).astype(np.uint8)
    n, rows, cols = raw.shape
    return struct.pack(">IIII", IDX_MAGIC_IMAGES, n, rows, cols) + raw.tobytes()


# ---------------------------------------------------------------------------
# Colored/rotated digit law
# ---------------------------------------------------------------------------


def _rng_for(seed, context_id: str | None = None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if context_id is None:
        return np.random.default_rng(seed)
    stream = zlib.crc32(context_id.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def binarize_and_noise(labels, noise_rate: float = 0.25, seed=0) -> np.ndarray:
    """Digits < 5 map to class 0, >= 5 to class 1; flip with prob noise_rate."""
    if not (0.0 <= noise_rate <= 0.5):
        raise DataError(f"noise_rate must lie in [0, 0.5], got {noise_rate}")
    labels = np.asarray(labels)
    binary = (labels >= 5).astype(np.int64)
    if noise_rate > 0.0:
        rng = _rng_for(seed)
        flips = rng.random(binary.size) < noise_rate
        binary = np.where(flips, 1 - binary, binary)
    return binary


def colorize_images(images, labels, p_e: float, seed=0) -> np.ndarray:
    """Colored 2-channel images [n, h, w, 2]; channel 0 is red, channel 1 green.

    Label-0 images go green with probability p_e (else red); label-1 images go
    red with probability p_e (else green). The chosen channel carries the
    grayscale image unchanged, the other channel is zero.
    """
    if not (0.0 <= p_e <= 1.0):
        raise DataError(f"p_e must lie in [0, 1], got {p_e}")
    images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise DataError("colorize requires binary labels; run binarize_and_noise first")
    rng = _rng_for(seed)
    primary = rng.random(labels.size) < p_e
    # channel index per sample: label 0 -> green (1) on primary draw, label 1 -> red (0)
    channel = np.where(labels == 0, np.where(primary, 1, 0), np.where(primary, 0, 1))
    n, h, w = images.shape
    out = np.zeros((n, h, w, 2), dtype=np.float64)
    out[np.arange(n), :, :, 0] = np.where(channel[:, None, None] == 0, images, 0.0)
    out[np.arange(n), :, :, 1] = np.where(channel[:, None, None] == 1, images, 0.0)
    return out


def colorize(images, labels, p_e: float, seed=0, context_id: str = "colored") -> Environment:
    """Colorize and wrap as a flattened environment (no rotation/pooling)."""
    colored = colorize_images(images, labels, p_e, seed)
    return Environment(
        context_id,
        Tensor(flatten_images(colored)),
        np.asarray(labels, dtype=np.int64),
        GenParams(p_e=p_e),
    )


def rotate(images, degrees: int) -> np.ndarray:
    """Exact pixel-permutation rotation (counter-clockwise), square images only."""
    if degrees not in (0, 90, 180, 270):
        raise DataError(f"rotation must be one of 0/90/180/270, got {degrees}")
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    if images.shape[1] != images.shape[2]:
        raise DataError("rotation requires square images")
    if degrees == 0:
        return images.copy()
    return np.ascontiguousarray(np.rot90(images, k=degrees // 90, axes=(1, 2)))


def downsample(images) -> np.ndarray:
    """2x2 average pooling over the spatial axes of [n, h, w, ...] images."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    n, h, w = images.shape[:3]
    if h % 2 or w % 2:
        raise DataError(f"downsample requires even spatial dims, got {h}x{w}")
    trailing = images.shape[3:]
    pooled = images.reshape((n, h // 2, 2, w // 2, 2) + trailing).mean(axis=(2, 4))
    return pooled


def flatten_images(images) -> np.ndarray:
    """Row-major flatten of per-sample image arrays to [n, d]."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    return images.reshape(images.shape[0], -1)


# ---------------------------------------------------------------------------
# Linear SEM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SemSpec:
    """Per-client structural equation model.

    Labels follow sign(H . rho + noise) with H standard normal; the spurious
    block tracks the +/-1 label with environment strength
    ``spurious_strength * (2 p_e - 1)``. Inputs mix [H, Z] through a fixed
    seeded orthogonal matrix (or an explicit matrix, checked for
    invertibility).
    """

    dim_h: int
    dim_z: int
    rho: tuple[float, ...]
    noise_std: float
    spurious_strength: float
    mixing: int | np.ndarray = 0
    spec_id: str = "sem"

    def __post_init__(self):
        if self.dim_h < 1 or self.dim_z < 0:
            raise SemSpecError("dim_h must be >= 1 and dim_z >= 0")
        if len(self.rho) != self.dim_h:
            raise SemSpecError("rho must have length dim_h")
        if self.noise_std < 0:
            raise SemSpecError("noise_std must be non-negative")

    @property
    def dim(self) -> int:
        return self.dim_h + self.dim_z


def mixing_matrix(spec: SemSpec) -> np.ndarray:
    """The input mixing G; random orthogonal when seeded, validated if explicit."""
    d = spec.dim
    if isinstance(spec.mixing, np.ndarray):
        g = np.asarray(spec.mixing, dtype=np.float64)
        if g.shape != (d, d):
            raise SemSpecError(f"mixing matrix must be {d}x{d}, got {g.shape}")
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.mixing), 0x6D69]))
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        g = q * np.sign(np.diag(r))
    cond = np.linalg.cond(g)
    if not np.isfinite(cond) or cond > 1e12:
        raise SemSpecError(f"mixing matrix is numerically singular (cond={cond:.3g})")
    return g


def strength_for_p(spec: SemSpec, p_e: float) -> float:
    """Map a color-style probability to a signed spurious strength.

    p_e = 1 gives full positive tracking, 0.5 gives independence, and values
    below 0.5 flip the sign (the out-of-distribution regime).
    """
    return spec.spurious_strength * (2.0 * p_e - 1.0)


def generate_sem_env(
    spec: SemSpec, env_strength: float, n: int, seed=0, context_id: str | None = None
) -> Environment:
    """Sample n points (X, Y) from the SEM at the given spurious strength."""
    if n < 1:
        raise DataError("n must be >= 1")
    g = mixing_matrix(spec)
    ctx = context_id or f"{spec.spec_id}/strength={env_strength:g}"
    rng = _rng_for(seed, ctx)
    h = rng.standard_normal((n, spec.dim_h))
    eps = rng.standard_normal(n) * spec.noise_std
    rho = np.asarray(spec.rho, dtype=np.float64)
    y = (h @ rho + eps > 0).astype(np.int64)
    ypm = 2.0 * y - 1.0
    z = env_strength * ypm[:, None] + rng.standard_normal((n, spec.dim_z))
    x = np.concatenate([h, z], axis=1) @ g.T
    p_e = 0.5 * (env_strength / spec.spurious_strength + 1.0) if spec.spurious_strength else None
    return Environment(
        ctx,
        Tensor(x),
        y,
        GenParams(p_e=p_e if p_e is not None and 0 <= p_e <= 1 else None, sem_spec_id=spec.spec_id),
    )


def _phi(x: float) -> float:
    return 0.5 * (1.0 + erf(x / sqrt(2.0)))


def invariant_bayes_accuracy(spec: SemSpec) -> float:
    """Accuracy of the optimal classifier restricted to the causal block H.

    Closed form: the score H . rho and the label's latent H . rho + eps are
    jointly normal with correlation 1/sqrt(1 + (noise_std/|rho|)^2), and the
    sign-agreement probability of such a pair is 1/2 + arcsin(corr)/pi.
    Environment-independent by construction.
    """
    norm_rho = float(np.linalg.norm(spec.rho))
    if norm_rho == 0.0:
        return 0.5
    if spec.noise_std == 0.0:
        return 1.0
    corr = 1.0 / sqrt(1.0 + (spec.noise_std / norm_rho) ** 2)
    return 0.5 + asin(corr) / pi


def spurious_bayes_accuracy(spec: SemSpec, env_strength: float) -> float:
    """Accuracy on an environment of the Z-only rule fitted to positive tracking.

    The rule predicts the label sign from sum(Z); under strength s the sum is
    N(s * dim_z * ypm, dim_z), so accuracy is Phi(s * sqrt(dim_z)). Below 0.5
    whenever the environment flips the spurious correlation.
    """
    if spec.dim_z == 0:
        return 0.5
    return _phi(env_strength * sqrt(spec.dim_z))


# ---------------------------------------------------------------------------
# Federation specs and client partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextSpec:
    p_e: float
    rotation_deg: int | None = None
    n: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_e <= 1.0):
            raise DataError(f"p_e must lie in [0, 1], got {self.p_e}")


@dataclass(frozen=True)
class ClientSpec:
    train_contexts: tuple[ContextSpec, ...]
    test_context: ContextSpec

    def __post_init__(self):
        if not self.train_contexts:
            raise DataError("each client needs at least one training context")


@dataclass(frozen=True)
class FederationSpec:
    """Per-client context schedule plus shared generation knobs."""

    clients: tuple[ClientSpec, ...]
    noise_rate: float = 0.25

    def __post_init__(self):
        if not self.clients:
            raise DataError("federation needs at least one client")

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def with_p_test(self, p_test: float) -> "FederationSpec":
        clients = tuple(
            ClientSpec(
                c.train_contexts,
                ContextSpec(p_test, c.test_context.rotation_deg, c.test_context.n),
            )
            for c in self.clients
        )
        return FederationSpec(clients, self.noise_rate)


DEFAULT_P_TRAIN = (0.95, 0.90, 0.85, 0.80)
DEFAULT_ROTATIONS = (0, 90, 180, 270)


def default_federation_spec(
    p_train: Sequence[float] = DEFAULT_P_TRAIN,
    rotations: Sequence[int] = DEFAULT_ROTATIONS,
    p_test: float = 0.10,
    n_train: int = 12500,
    n_test: int = 2500,
    noise_rate: float = 0.25,
) -> FederationSpec:
    """The standard 4-client digit schedule: one train context per client."""
    clients = tuple(
        ClientSpec(
            (ContextSpec(p, rot, n_train),),
            ContextSpec(p_test, rot, n_test),
        )
        for p, rot in zip(p_train, rotations)
    )
    return FederationSpec(clients, noise_rate)


def default_sem_federation_spec(
    p_train: Sequence[float] = DEFAULT_P_TRAIN,
    contexts_per_client: int = 2,
    p_gap: float = 0.45,
    p_test: float = 0.10,
    n_train: int = 1200,
    n_test: int = 2000,
) -> FederationSpec:
    """SEM schedule: each client gets several contexts stepping down in p."""
    clients = []
    for p in p_train:
        per_ctx = n_train // contexts_per_client
        contexts = tuple(
            ContextSpec(max(0.0, min(1.0, p - j * p_gap)), None, per_ctx)
            for j in range(contexts_per_client)
        )
        clients.append(ClientSpec(contexts, ContextSpec(p_test, None, n_test)))
    return FederationSpec(tuple(clients), noise_rate=0.0)


@dataclass(frozen=True)
class ClientData:
    """One client's materialized training environments and held-out test set."""

    id: int
    train_envs: tuple[Environment, ...]
    test_env: Environment

    @property
    def merged_train(self) -> Environment:
        return merge_environments(self.train_envs, f"client{self.id}/all")


def _make_digit_env(
    images: np.ndarray,
    digit_labels: np.ndarray,
    ctx: ContextSpec,
    noise_rate: float,
    seed: int,
    context_id: str,
) -> Environment:
    rng = _rng_for(seed, context_id)
    labels = binarize_and_noise(digit_labels, noise_rate, rng)
    colored = colorize_images(images, labels, ctx.p_e, rng)
    if ctx.rotation_deg:
        colored = rotate(colored, ctx.rotation_deg)
    pooled = downsample(colored)
    return Environment(
        context_id,
        Tensor(flatten_images(pooled)),
        labels,
        GenParams(p_e=ctx.p_e, rotation_deg=ctx.rotation_deg),
    )


def partition_clients(
    spec: FederationSpec,
    train_images,
    train_labels,
    test_images,
    test_labels,
    seed: int = 0,
) -> list[ClientData]:
    """Assign disjoint source samples to every client context, then build envs.

    Training contexts draw without replacement from the train pool; test
    contexts draw (also disjointly) from the held-out test pool. Per-client
    rotation applies to both splits.
    """
    train_images = train_images.data if isinstance(train_images, Tensor) else np.asarray(train_images)
    test_images = test_images.data if isinstance(test_images, Tensor) else np.asarray(test_images)
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)

    need_train = sum(c.n for cl in spec.clients for c in cl.train_contexts)
    need_test = sum(cl.test_context.n for cl in spec.clients)
    if need_train > train_images.shape[0]:
        raise CapacityError(
            f"train pool has {train_images.shape[0]} samples, need {need_train}"
        )
    if need_test > test_images.shape[0]:
        raise CapacityError(f"test pool has {test_images.shape[0]} samples, need {need_test}")

    rng = _rng_for(seed, "partition")
    train_order = rng.permutation(train_images.shape[0])
    test_order = rng.permutation(test_images.shape[0])

    clients = []
    t_off = 0
    s_off = 0
    for cid, cl in enumerate(spec.clients):
        envs = []
        for j, ctx in enumerate(cl.train_contexts):
            idx = train_order[t_off : t_off + ctx.n]
            t_off += ctx.n
            context_id = f"client{cid}/train{j}/p={ctx.p_e:g}"
            envs.append(
                _make_digit_env(
                    train_images[idx], train_labels[idx], ctx, spec.noise_rate, seed, context_id
                )
            )
        tctx = cl.test_context
        idx = test_order[s_off : s_off + tctx.n]
        s_off += tctx.n
        test_env = _make_digit_env(
            test_images[idx],
            test_labels[idx],
            tctx,
            spec.noise_rate,
            seed,
            f"client{cid}/test/p={tctx.p_e:g}",
        )
        clients.append(ClientData(cid, tuple(envs), test_env))
    return clients


def build_sem_federation(
    spec: FederationSpec, sem_specs: Sequence[SemSpec], seed: int = 0
) -> list[ClientData]:
    """Materialize a SEM federation: one SemSpec per client, contexts per spec."""
    if len(sem_specs) != spec.num_clients:
        raise DataError("need exactly one SemSpec per client")
    clients = []
    for cid, (cl, sem) in enumerate(zip(spec.clients, sem_specs)):
        envs = []
        for j, ctx in enumerate(cl.train_contexts):
            context_id = f"client{cid}/train{j}/p={ctx.p_e:g}"
            envs.append(
                generate_sem_env(sem, strength_for_p(sem, ctx.p_e), ctx.n, seed, context_id)
            )
        tctx = cl.test_context
        test_env = generate_sem_env(
            sem, strength_for_p(sem, tctx.p_e), tctx.n, seed, f"client{cid}/test/p={tctx.p_e:g}"
        )
        clients.append(ClientData(cid, tuple(envs), test_env))
    return clients


# ---------------------------------------------------------------------------
# Environment file format (documented in README)
# ---------------------------------------------------------------------------


def save_environment(env: Environment, path) -> None:
    """Write magic + JSON header line + little-endian float64/int64 payload."""
    header = {
        "format": "env-v1",
        "context_id": env.context_id,
        "shape": list(env.inputs.shape),
        "gen_params": {
            "p_e": env.gen_params.p_e,
            "rotation_deg": env.gen_params.rotation_deg,
            "sem_spec_id": env.gen_params.sem_spec_id,
        },
    }
    with open(path, "wb") as fh:
        fh.write(ENV_FILE_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(env.inputs.data.astype("<f8").tobytes())
        fh.write(env.labels.astype("<i8").tobytes())


def load_environment(path) -> Environment:
    with open(path, "rb") as fh:
        magic = fh.read(len(ENV_FILE_MAGIC))
        if magic != ENV_FILE_MAGIC:
            raise DataError(f"not an environment file (magic {magic!r})")
        header = json.loads(fh.readline().decode())
        shape = tuple(header["shape"])
        count = int(np.prod(shape))
        inputs = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
        labels = np.frombuffer(fh.read(8 * shape[0]), dtype="<i8")
    gp = header.get("gen_params", {})
    return Environment(
        header["context_id"],
        Tensor(inputs),
        labels,
        GenParams(gp.get("p_e"), gp.get("rotation_deg"), gp.get("sem_spec_id")),
    )
