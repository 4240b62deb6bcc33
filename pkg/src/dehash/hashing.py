"""Binary hashing of VLAD vectors and its reversal into approximated VLADs.

Bit k of a code is ``(sgn(w_k^T (x - mean)) + 1) / 2`` with ``sgn(0)`` mapped
to bit 1.  Projection layouts:

* ``joint``        - one (D*N x K) PCA basis over the full vector; an optional
                     random orthogonal rotation can be applied on the PCA
                     coordinates to spread variance across bits.
* ``independent``  - one (D x K/N) PCA basis per sub-vector.
* ``shared``       - a single (D x K/N) basis, trained on all sub-vectors
                     pooled together and reused for each of them.
* ``sign``         - component-wise sign of the raw vector (K = D*N).
* ``rp``           - seeded Gaussian random projections; benchmarking only,
                     codes are not reversible.

Because PCA bases are orthonormal, a code reverses to ``mean + W * s`` where
``s`` carries per-bit signs scaled by the mean absolute projection magnitude
seen in training; re-encoding an approximated VLAD reproduces its code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .aggregate import VladVector

if TYPE_CHECKING:
    from .reconstruct import ContextTag

MODEL_MAGIC = b"DHHASH01"
CODE_MAGIC = b"DHCODE01"

VARIANTS = ("joint", "independent", "shared", "sign", "rp")
_VARIANT_CODES = {"joint": 0, "independent": 1, "shared": 2, "sign": 3, "rp": 4, "joint-rr": 5}
_CODE_VARIANTS = {v: k for k, v in _VARIANT_CODES.items()}

GPS_PAYLOAD_BYTES = 16  # two float64 coordinates
CATEGORY_PAYLOAD_BYTES = 4  # one uint32 label

_SCALE_FLOOR = 1e-12


@dataclass(eq=False)
class BinaryCode:
    """Bit-packed hash of one image (little-endian bit order)."""

    packed: np.ndarray  # uint8
    nbits: int

    def __post_init__(self) -> None:
        self.packed = np.asarray(self.packed, dtype=np.uint8)
        if self.packed.shape != ((self.nbits + 7) // 8,):
            raise ValueError("packed length does not match bit count")

    def bits(self) -> np.ndarray:
        return np.unpackbits(self.packed, bitorder="little")[: self.nbits]

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BinaryCode":
        bits = np.asarray(bits, dtype=np.uint8)
        return cls(np.packbits(bits, bitorder="little"), int(bits.shape[0]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BinaryCode)
            and self.nbits == other.nbits
            and np.array_equal(self.packed, other.packed)
        )


@dataclass(eq=False)
class HashingModel:
    """Trained projection stack; immutable after training."""

    variant: str
    dim: int  # D, per sub-vector
    num_centers: int  # N
    nbits: int  # K
    mean: np.ndarray  # float32; (D*N,) for joint/independent/rp, (D,) shared, (0,) sign
    projections: np.ndarray  # float32; see encode() for the per-variant shape
    reversal_scales: np.ndarray  # (K,) float32; zeros for rp
    rotation: np.ndarray | None = None  # (K, K) float32, joint only

    @property
    def total_dim(self) -> int:
        return self.dim * self.num_centers

    @property
    def bits_per_center(self) -> int:
        return self.nbits // self.num_centers


def _top_eigenvectors(cov: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenpairs of a symmetric matrix, descending, sign-canonicalized."""
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals, kind="stable")[::-1][:k]
    vals = eigvals[order]
    vecs = eigvecs[:, order]
    # Deterministic sign: largest-magnitude component of each direction is positive.
    anchor = np.argmax(np.abs(vecs), axis=0)
    flips = np.sign(vecs[anchor, np.arange(vecs.shape[1])])
    flips[flips == 0] = 1.0
    return vecs * flips, vals


def _pca(x_centered: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    cov = (x_centered.T @ x_centered) / x_centered.shape[0]
    return _top_eigenvectors(cov, k)


def random_rotation(k: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix via QR of a seeded Gaussian."""
    rng = np.random.default_rng([seed, 0x5254])  # distinct stream from other uses of seed
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def _stack_training(vlads: Sequence[VladVector]) -> np.ndarray:
    return np.stack([v.flattened() for v in vlads]).astype(np.float64)


def train_hashing(
    training_vlads: Sequence[VladVector],
    variant: str,
    nbits: int,
    seed: int = 0,
    rotate: bool = False,
) -> HashingModel:
    """Fit a hashing model on raw (unnormalized) training VLADs.

    PCA bases keep the top eigenvectors of the training covariance; the rank
    bound ``K <= min(D*N, n-1)`` (or ``K/N <= D`` per sub-vector for the split
    variants) is enforced rather than silently padded.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if rotate and variant != "joint":
        raise ValueError("rotation is only defined for the joint variant")
    if len(training_vlads) == 0:
        raise ValueError("training set must be nonempty")
    first = training_vlads[0]
    n_centers, dim = first.num_centers, first.dim
    total = n_centers * dim
    X = _stack_training(training_vlads)
    if X.shape[1] != total:
        raise ValueError("training vectors disagree on dimensionality")
    n = X.shape[0]

    if variant == "sign":
        if nbits != total:
            raise ValueError("sign variant emits exactly one bit per component")
        scales = np.maximum(np.mean(np.abs(X), axis=0), _SCALE_FLOOR)
        return HashingModel(
            variant="sign",
            dim=dim,
            num_centers=n_centers,
            nbits=nbits,
            mean=np.zeros(0, dtype=np.float32),
            projections=np.zeros((0, 0), dtype=np.float32),
            reversal_scales=scales.astype(np.float32),
        )

    if variant == "rp":
        if nbits < 1:
            raise ValueError("nbits must be >= 1")
        mean = X.mean(axis=0)
        rng = np.random.default_rng([seed, 0x5250])
        w = rng.standard_normal((total, nbits))
        return HashingModel(
            variant="rp",
            dim=dim,
            num_centers=n_centers,
            nbits=nbits,
            mean=mean.astype(np.float32),
            projections=w.astype(np.float32),
            reversal_scales=np.zeros(nbits, dtype=np.float32),
        )

    if variant == "joint":
        if nbits > min(total, n - 1):
            raise ValueError(
                f"joint PCA rank bound: nbits={nbits} exceeds min(D*N={total}, n-1={n - 1})"
            )
        mean = X.mean(axis=0)
        Xc = X - mean
        w, _ = _pca(Xc, nbits)
        rotation = random_rotation(nbits, seed) if rotate else None
        proj = Xc @ w
        if rotation is not None:
            proj = proj @ rotation.T
        scales = np.maximum(np.mean(np.abs(proj), axis=0), _SCALE_FLOOR)
        return HashingModel(
            variant="joint",
            dim=dim,
            num_centers=n_centers,
            nbits=nbits,
            mean=mean.astype(np.float32),
            projections=w.astype(np.float32),
            reversal_scales=scales.astype(np.float32),
            rotation=None if rotation is None else rotation.astype(np.float32),
        )

    # Split variants share validation.
    if nbits % n_centers != 0:
        raise ValueError("nbits must be divisible by the number of sub-vectors")
    per = nbits // n_centers
    if per > dim:
        raise ValueError(f"per-sub-vector bits {per} exceed sub-vector dim {dim}")
    blocks = X.reshape(n, n_centers, dim)

    if variant == "independent":
        if per > n - 1:
            raise ValueError(f"PCA rank bound: {per} bits need at least {per + 1} samples")
        mean = X.mean(axis=0)
        centered = blocks - mean.reshape(n_centers, dim)
        ws = np.empty((n_centers, dim, per), dtype=np.float64)
        scales = np.empty(nbits, dtype=np.float64)
        for i in range(n_centers):
            w, _ = _pca(centered[:, i, :], per)
            ws[i] = w
            scales[i * per : (i + 1) * per] = np.mean(np.abs(centered[:, i, :] @ w), axis=0)
        return HashingModel(
            variant="independent",
            dim=dim,
            num_centers=n_centers,
            nbits=nbits,
            mean=mean.astype(np.float32),
            projections=ws.astype(np.float32),
            reversal_scales=np.maximum(scales, _SCALE_FLOOR).astype(np.float32),
        )

    # shared: pool every sub-vector of every training VLAD as one sample set
    pooled = blocks.reshape(n * n_centers, dim)
    if per > pooled.shape[0] - 1:
        raise ValueError(f"PCA rank bound: {per} bits need at least {per + 1} pooled samples")
    mean = pooled.mean(axis=0)
    pooled_c = pooled - mean
    w, _ = _pca(pooled_c, per)
    proj = pooled_c @ w  # (n*N, per)
    per_center = np.mean(np.abs(proj).reshape(n, n_centers, per), axis=0)
    scales = np.maximum(per_center.reshape(nbits), _SCALE_FLOOR)
    return HashingModel(
        variant="shared",
        dim=dim,
        num_centers=n_centers,
        nbits=nbits,
        mean=mean.astype(np.float32),
        projections=w.astype(np.float32),
        reversal_scales=scales.astype(np.float32),
    )


def _project(model: HashingModel, x: np.ndarray) -> np.ndarray:
    """Real-valued projections feeding the sign function, shape (K,)."""
    if model.variant == "sign":
        return x
    mean = np.asarray(model.mean, dtype=np.float64)
    if model.variant in ("joint", "rp"):
        proj = np.asarray(model.projections, dtype=np.float64).T @ (x - mean)
        if model.rotation is not None:
            proj = np.asarray(model.rotation, dtype=np.float64) @ proj
        return proj
    blocks = x.reshape(model.num_centers, model.dim)
    if model.variant == "independent":
        centered = blocks - mean.reshape(model.num_centers, model.dim)
        ws = np.asarray(model.projections, dtype=np.float64)
        return np.einsum("idk,id->ik", ws, centered).reshape(model.nbits)
    # shared
    centered = blocks - mean
    w = np.asarray(model.projections, dtype=np.float64)
    return (centered @ w).reshape(model.nbits)


def encode(model: HashingModel, v: VladVector) -> BinaryCode:
    """Hash a raw VLAD into its bit-packed code (bit = 1 when projection >= 0)."""
    x = v.flattened()
    if x.shape[0] != model.total_dim:
        raise ValueError(f"vector dim {x.shape[0]} != model dim {model.total_dim}")
    bits = (_project(model, x) >= 0.0).astype(np.uint8)
    return BinaryCode.from_bits(bits)


def approximate_vlad(model: HashingModel, code: BinaryCode) -> VladVector:
    """Reverse a code into a raw-space approximated VLAD.

    Signs come from the bits; magnitudes are restored with the stored per-bit
    training scales, so re-encoding the result reproduces ``code``.
    """
    if code.nbits != model.nbits:
        raise ValueError(f"code length {code.nbits} != model bits {model.nbits}")
    if model.variant == "rp":
        raise ValueError("random-projection codes have no reversal path")
    signs = 2.0 * code.bits().astype(np.float64) - 1.0
    scaled = signs * np.asarray(model.reversal_scales, dtype=np.float64)
    if model.variant == "sign":
        flat = scaled
    elif model.variant == "joint":
        if model.rotation is not None:
            scaled = np.asarray(model.rotation, dtype=np.float64).T @ scaled
        flat = np.asarray(model.projections, dtype=np.float64) @ scaled
        flat += np.asarray(model.mean, dtype=np.float64)
    elif model.variant == "independent":
        ws = np.asarray(model.projections, dtype=np.float64)
        blocks = np.einsum(
            "idk,ik->id", ws, scaled.reshape(model.num_centers, model.bits_per_center)
        )
        flat = (blocks + np.asarray(model.mean, dtype=np.float64).reshape(blocks.shape)).reshape(-1)
    else:  # shared
        w = np.asarray(model.projections, dtype=np.float64)
        blocks = scaled.reshape(model.num_centers, model.bits_per_center) @ w.T
        flat = (blocks + np.asarray(model.mean, dtype=np.float64)).reshape(-1)
    return VladVector.from_flat(flat, model.num_centers)


def transmission_size(code: BinaryCode, context: "ContextTag | None" = None) -> int:
    """Payload bytes sent per query: packed bits plus any context fields."""
    size = (code.nbits + 7) // 8
    if context is not None:
        if context.gps is not None:
            size += GPS_PAYLOAD_BYTES
        if context.category is not None:
            size += CATEGORY_PAYLOAD_BYTES
    return size


def projection_bytes(variant: str, dim: int, num_centers: int, nbits: int) -> int:
    """Device-side float32 footprint of the projection matrices."""
    if variant in ("joint", "rp"):
        return dim * num_centers * nbits * 4
    if variant == "independent":
        return dim * nbits * 4
    if variant == "shared":
        if nbits % num_centers != 0:
            raise ValueError("nbits must be divisible by the number of sub-vectors")
        return dim * (nbits // num_centers) * 4
    if variant == "sign":
        return 0
    raise ValueError(f"unknown variant {variant!r}")


def quantizer_bytes(dim: int, branch: int, vlad_level: int) -> int:
    """Device-side float32 footprint of the coarse quantization tree
    (all levels down to and including the VLAD level)."""
    nodes = sum(branch**level for level in range(1, vlad_level + 1))
    return dim * nodes * 4


def mobile_memory_bytes(
    variant: str, dim: int, num_centers: int, nbits: int, branch: int, vlad_level: int
) -> int:
    """Total device-side footprint: projections plus quantization tree."""
    return projection_bytes(variant, dim, num_centers, nbits) + quantizer_bytes(
        dim, branch, vlad_level
    )


def save_model(model: HashingModel, path) -> None:
    variant_key = "joint-rr" if (model.variant == "joint" and model.rotation is not None) else model.variant
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<B3I", _VARIANT_CODES[variant_key], model.dim, model.num_centers, model.nbits))
        f.write(np.ascontiguousarray(model.mean, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(model.projections, dtype="<f4").tobytes())
        if model.rotation is not None:
            f.write(np.ascontiguousarray(model.rotation, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(model.reversal_scales, dtype="<f4").tobytes())


def _model_shapes(variant: str, dim: int, n_centers: int, nbits: int):
    total = dim * n_centers
    if variant in ("joint", "joint-rr", "rp"):
        return (total,), (total, nbits)
    if variant == "independent":
        return (total,), (n_centers, dim, nbits // n_centers)
    if variant == "shared":
        return (dim,), (dim, nbits // n_centers)
    return (0,), (0, 0)  # sign


def load_model(path) -> HashingModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic, not a hashing model file")
    variant_code, dim, n_centers, nbits = struct.unpack_from("<B3I", data, 8)
    if variant_code not in _CODE_VARIANTS:
        raise ValueError(f"{path}: unknown variant byte {variant_code}")
    variant_key = _CODE_VARIANTS[variant_code]
    mean_shape, proj_shape = _model_shapes(variant_key, dim, n_centers, nbits)
    off = 8 + struct.calcsize("<B3I")

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += count * 4
        return arr

    mean = take(mean_shape)
    projections = take(proj_shape)
    rotation = take((nbits, nbits)) if variant_key == "joint-rr" else None
    scales = take((nbits,))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after offset {off}")
    return HashingModel(
        variant="joint" if variant_key == "joint-rr" else variant_key,
        dim=int(dim),
        num_centers=int(n_centers),
        nbits=int(nbits),
        mean=mean,
        projections=projections,
        reversal_scales=scales,
        rotation=rotation,
    )


def save_code(code: BinaryCode, path) -> None:
    with open(path, "wb") as f:
        f.write(CODE_MAGIC)
        f.write(struct.pack("<I", code.nbits))
        f.write(code.packed.tobytes())


def load_code(path) -> BinaryCode:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CODE_MAGIC:
        raise ValueError(f"{path}: bad magic, not a code file")
    (nbits,) = struct.unpack_from("<I", data, 8)
    need = 12 + (nbits + 7) // 8
    if len(data) != need:
        raise ValueError(f"{path}: payload ends at byte {len(data)}, expected {need}")
    return BinaryCode(np.frombuffer(data, dtype=np.uint8, offset=12).copy(), int(nbits))
