"""Protection mechanisms applied to released model vectors.

Four mechanisms are provided: Gaussian randomization, sparsification with a
substitute Gaussian, additive secret sharing over a fixed-point ring, and a
toy GSW-style approximate-eigenvector encryption supporting addition. The HE
parameters are sized for exhaustive testing and offer no real security.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

FIXED_POINT_SCALE = 256


class FixedPointOverflow(ValueError):
    """A value does not fit the fixed-point range of the ring."""


class HEErrorBudgetExceeded(RuntimeError):
    """Accumulated encryption noise could corrupt decryption."""


# ---------------------------------------------------------------------------
# Mechanism specs
# ---------------------------------------------------------------------------

def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class NoOp:
    kind = "noop"

    def to_dict(self) -> dict:
        return {"type": self.kind}


@dataclass(frozen=True)
class Randomization:
    sigma: float
    kind = "randomization"

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be finite and nonnegative")

    def to_dict(self) -> dict:
        return {"type": self.kind, "sigma": float(self.sigma)}


@dataclass(frozen=True)
class Sparsity:
    """Keep the first ``d`` coordinates; replace the rest by N(mu_g, var_g).

    ``mu_g``/``var_g`` may be omitted and filled from a pilot run of the
    unprotected coordinates.
    """

    d: int
    mu_g: tuple | None = None
    var_g: tuple | None = None
    kind = "sparsity"

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("kept-dimension count d must be nonnegative")
        if (self.mu_g is None) != (self.var_g is None):
            raise ValueError("mu_g and var_g must be given together")
        if self.mu_g is not None:
            mu, var = _vec(self.mu_g), _vec(self.var_g)
            if mu.shape != var.shape or np.any(var <= 0):
                raise ValueError("substitute Gaussian needs matching sizes and positive variances")
            object.__setattr__(self, "mu_g", tuple(mu.tolist()))
            object.__setattr__(self, "var_g", tuple(var.tolist()))

    def to_dict(self) -> dict:
        out = {"type": self.kind, "d": int(self.d)}
        if self.mu_g is not None:
            out["mu_g"] = list(self.mu_g)
            out["var_g"] = list(self.var_g)
        return out


@dataclass(frozen=True)
class SecretSharing:
    """Additive sharing over the ring of fixed-point values in [c − a, c + b).

    ``delta`` is the half-width of the interval model for the unprotected
    value; it only enters the closed-form TV between a value and a share.
    """

    delta: float
    a: float
    b: float
    center: float = 0.0
    scale: int = FIXED_POINT_SCALE
    kind = "secret_sharing"

    def __post_init__(self):
        if not (0 < self.delta < self.a and self.delta < self.b):
            raise ValueError("secret sharing needs 0 < delta < a and delta < b")
        if self.scale <= 0:
            raise ValueError("fixed-point scale must be positive")

    @property
    def modulus(self) -> int:
        return int(round((self.a + self.b) * self.scale))

    def to_dict(self) -> dict:
        return {"type": self.kind, "delta": float(self.delta), "a": float(self.a),
                "b": float(self.b), "center": float(self.center), "scale": int(self.scale)}


@dataclass(frozen=True)
class ToyHE:
    """Parameters of the toy GSW scheme.

    ``error_bound`` bounds each fresh noise entry; sums stay decryptable
    while the accumulated bound stays below q/4. ``key_alphabet`` restricts
    secret-key entries to a small set so the key space is enumerable.
    """

    n: int = 8
    log_q: int = 16
    error_bound: int = 512
    scale: int = FIXED_POINT_SCALE
    key_alphabet: tuple | None = None
    key_known: bool = False
    kind = "toy_he"

    def __post_init__(self):
        if self.n < 1 or not (2 <= self.log_q <= 30):
            raise ValueError("need n >= 1 and 2 <= log_q <= 30")
        if not (0 <= self.error_bound < self.q // 4):
            raise ValueError("error_bound must lie in [0, q/4)")
        if self.key_alphabet is not None:
            object.__setattr__(self, "key_alphabet", tuple(int(v) for v in self.key_alphabet))
            if len(self.key_alphabet) < 1:
                raise ValueError("key alphabet must be non-empty")

    @property
    def q(self) -> int:
        return 1 << self.log_q

    @property
    def ell(self) -> int:
        return self.log_q

    @property
    def width(self) -> int:
        return (self.n + 1) * self.ell

    def to_dict(self) -> dict:
        out = {"type": self.kind, "n": self.n, "log_q": self.log_q,
               "error_bound": self.error_bound, "scale": self.scale,
               "key_known": bool(self.key_known)}
        if self.key_alphabet is not None:
            out["key_alphabet"] = list(self.key_alphabet)
        return out


MECHANISMS = {cls.kind: cls for cls in (NoOp, Randomization, Sparsity, SecretSharing, ToyHE)}


def mechanism_from_dict(data: dict):
    """Inverse of ``to_dict``; unknown keys are rejected."""
    data = dict(data)
    kind = data.pop("type", None)
    if kind not in MECHANISMS:
        raise ValueError(f"unknown mechanism type {kind!r}; expected one of {sorted(MECHANISMS)}")
    cls = MECHANISMS[kind]
    allowed = {f.name for f in fields(cls)}
    extra = set(data) - allowed
    if extra:
        raise ValueError(f"unknown field(s) for {kind}: {sorted(extra)}")
    for key in ("mu_g", "var_g", "key_alphabet"):
        if key in data and data[key] is not None:
            data[key] = tuple(data[key])
    return cls(**data)


def mechanism_label(mech) -> str:
    d = mech.to_dict()
    params = ",".join(f"{k}={v}" for k, v in d.items() if k != "type")
    return f"{d['type']}({params})"


# ---------------------------------------------------------------------------
# Randomization and sparsity
# ---------------------------------------------------------------------------

def randomize(w, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Return ``w`` plus i.i.d. N(0, sigma²) noise drawn from ``rng``."""
    w = _vec(w)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return w.copy()
    return w + sigma * rng.standard_normal(w.shape)


def sparsify(w, spec: Sparsity, rng: np.random.Generator) -> np.ndarray:
    """Keep ``w[:d]``; draw the withheld tail from the substitute Gaussian."""
    w = _vec(w)
    n = w.size
    if spec.d > n:
        raise ValueError(f"d={spec.d} exceeds model dimension {n}")
    out = w.copy()
    if spec.d == n:
        return out
    if spec.mu_g is None:
        raise ValueError("substitute Gaussian not set; fit it from a pilot run first")
    mu, var = _vec(spec.mu_g), _vec(spec.var_g)
    if mu.size != n - spec.d:
        raise ValueError(f"substitute Gaussian has size {mu.size}, expected {n - spec.d}")
    out[spec.d:] = mu + np.sqrt(var) * rng.standard_normal(mu.size)
    return out


def quantize(w, scale: int = FIXED_POINT_SCALE) -> np.ndarray:
    """Round onto the fixed-point grid of step 1/scale."""
    return np.round(np.asarray(w, dtype=float) * scale) / scale


# ---------------------------------------------------------------------------
# Secret sharing
# ---------------------------------------------------------------------------

@dataclass
class SharingResult:
    shares: np.ndarray       # (K, K, n) share j of client k, as ring values
    uploads: np.ndarray      # (K, n) per-party sums the server observes
    reconstructed_sum: np.ndarray


def secret_share(models: Sequence, spec: SecretSharing, rng: np.random.Generator) -> SharingResult:
    """Split each client's vector into K additive shares over a fixed-point ring.

    Shares ``[k][j]`` for ``j != k`` are uniform ring elements; ``[k][k]`` is the
    remainder. The upload of party ``j`` sums the shares it holds, so uploads
    differ from the inputs by antisymmetric pairwise masks that cancel in the
    total. Every single share and upload is uniform on [c − a, c + b).
    """
    x = np.atleast_2d(np.asarray(models, dtype=float))
    k, n = x.shape
    if k < 2:
        raise ValueError("secret sharing needs at least 2 clients")
    R = spec.modulus
    s = spec.scale
    origin = int(round((spec.center - spec.a) * s))
    ints = np.round(x * s).astype(np.int64)
    enc = np.mod(ints - origin, R)
    shares = rng.integers(0, R, size=(k, k, n), dtype=np.int64)
    for i in range(k):
        others = shares[i].sum(axis=0) - shares[i, i]
        shares[i, i] = np.mod(enc[i] - others, R)
    uploads = np.mod(shares.sum(axis=0), R)
    total = np.mod(uploads.sum(axis=0), R)
    # lift the ring total into the window of width R centred on K·c
    c_int = int(round(spec.center * s))
    true_int = total + k * origin
    lo = k * c_int - R // 2
    true_int = lo + np.mod(true_int - lo, R)
    actual = ints.sum(axis=0)
    if not np.array_equal(true_int, actual):
        raise FixedPointOverflow(
            f"sum of {k} inputs leaves the ring window [{lo / s}, {(lo + R) / s}); "
            "widen a + b")
    to_value = lambda z: (origin + z) / s
    return SharingResult(to_value(shares), to_value(uploads), true_int / s)


def uniform_share_tv(delta, a, b) -> float:
    """Closed-form TV between U[c−δ, c+δ] and U[c−a, c+b], per-coordinate product."""
    delta, a, b = np.broadcast_arrays(_vec(delta), _vec(a), _vec(b))
    return float(1.0 - np.prod(2 * delta / (a + b)))


# ---------------------------------------------------------------------------
# Toy GSW encryption
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SecretKey:
    """Key vector s = (−t, 1) mod q; ``t`` is the LWE secret."""

    vector: np.ndarray
    params: ToyHE

    @property
    def secret(self) -> np.ndarray:
        return np.mod(-self.vector[:-1], self.params.q)


@dataclass(frozen=True)
class Ciphertext:
    matrix: np.ndarray
    params: ToyHE
    noise_bound: int
    additions: int = 0


def gadget(params: ToyHE) -> np.ndarray:
    g = 1 << np.arange(params.ell, dtype=np.int64)
    return np.kron(np.eye(params.n + 1, dtype=np.int64), g)


def key_from_secret(t, params: ToyHE) -> SecretKey:
    t = np.mod(np.asarray(t, dtype=np.int64), params.q)
    if t.shape != (params.n,):
        raise ValueError(f"secret must have length {params.n}")
    s = np.concatenate([np.mod(-t, params.q), [1]]).astype(np.int64)
    s.setflags(write=False)
    return SecretKey(s, params)


def he_keygen(params: ToyHE, rng: np.random.Generator) -> SecretKey:
    if params.key_alphabet is None:
        t = rng.integers(0, params.q, size=params.n, dtype=np.int64)
    else:
        t = np.asarray(params.key_alphabet, dtype=np.int64)[
            rng.integers(0, len(params.key_alphabet), size=params.n)]
    return key_from_secret(t, params)


def encode_fixed(value, params: ToyHE) -> np.ndarray:
    """Real value(s) to signed integers on the fixed-point grid."""
    ints = np.round(np.asarray(value, dtype=float) * params.scale).astype(np.int64)
    half = params.q // 2
    if np.any(ints < -half) or np.any(ints >= half):
        raise FixedPointOverflow(f"plaintext outside [{-half / params.scale}, {half / params.scale})")
    return ints


def decode_fixed(ints, params: ToyHE):
    return np.asarray(ints, dtype=float) / params.scale


def encrypt_batch(plain_ints, key: SecretKey, rng: np.random.Generator) -> np.ndarray:
    """Encrypt integer plaintexts (mod q); returns an array of shape (B, n+1, width)."""
    p = key.params
    mu = np.mod(np.atleast_1d(np.asarray(plain_ints, dtype=np.int64)), p.q)
    bsz = mu.size
    A = rng.integers(0, p.q, size=(bsz, p.n, p.width), dtype=np.int64)
    e = rng.integers(-p.error_bound, p.error_bound + 1, size=(bsz, p.width), dtype=np.int64)
    t = key.secret
    b = np.mod(np.einsum("i,bij->bj", t, A) + e, p.q)
    C = np.concatenate([A, b[:, None, :]], axis=1)
    C = np.mod(C + mu[:, None, None] * gadget(p)[None, :, :], p.q)
    return C


def _phase(C, key: SecretKey) -> np.ndarray:
    p = key.params
    return np.mod(np.einsum("i,bij->bj", key.vector, np.atleast_3d(C) if C.ndim == 3 else C[None]), p.q)


def decrypt_batch(C, key: SecretKey) -> np.ndarray:
    """Recover plaintexts mod q bit by bit from the last gadget block.

    Column ``j`` of that block holds ``e + mu·2^j``; reading from the top
    column down peels off one bit of ``mu`` at a time, which is correct
    whenever ``|e| < q/4``.
    """
    p = key.params
    x = _phase(np.asarray(C), key)[:, p.n * p.ell:]
    mu = np.zeros(x.shape[0], dtype=np.int64)
    quarter = p.q // 4
    for i in range(p.ell):
        col = x[:, p.ell - 1 - i]
        r = np.mod(col - (mu << (p.ell - 1 - i)), p.q)
        bit = ((r + quarter) // (p.q // 2)) % 2
        mu |= bit << i
    half = p.q // 2
    return np.where(mu >= half, mu - p.q, mu)


def noise_consistent(C, key: SecretKey, plain_int: int) -> bool:
    """True if ``key`` explains ``C`` as ``plain_int`` with noise below q/4."""
    p = key.params
    x = _phase(np.asarray(C), key)[0]
    mu = int(plain_int) % p.q
    resid = np.mod(x - mu * np.mod(key.vector @ gadget(p), p.q), p.q)
    centred = np.where(resid >= p.q // 2, resid - p.q, resid)
    return bool(np.all(np.abs(centred) < p.q // 4))


def he_encrypt(m: float, key: SecretKey, rng: np.random.Generator) -> Ciphertext:
    p = key.params
    ints = encode_fixed(m, p)
    C = encrypt_batch(ints.reshape(1), key, rng)[0]
    return Ciphertext(C, p, p.error_bound, 0)


def he_decrypt(c: Ciphertext, key: SecretKey) -> float:
    """Decrypt to a fixed-point value; a wrong key yields garbage, not an error."""
    return float(decode_fixed(decrypt_batch(c.matrix[None], key)[0], c.params))


def he_add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    if c1.params != c2.params:
        raise ValueError("ciphertexts use different parameters")
    p = c1.params
    bound = c1.noise_bound + c2.noise_bound
    if bound >= p.q // 4:
        raise HEErrorBudgetExceeded(
            f"noise bound {bound} reaches q/4 = {p.q // 4} after "
            f"{c1.additions + c2.additions + 1} additions")
    return Ciphertext(np.mod(c1.matrix + c2.matrix, p.q), p, bound,
                      c1.additions + c2.additions + 1)


def he_sum(cts: Sequence[Ciphertext]) -> Ciphertext:
    cts = list(cts)
    if not cts:
        raise ValueError("nothing to add")
    out = cts[0]
    for c in cts[1:]:
        out = he_add(out, c)
    return out


def ciphertext_as_weights(c: Ciphertext) -> float:
    """Read a ciphertext entry as if it were a fixed-point weight."""
    p = c.params
    v = int(c.matrix[-1, 0])
    if v >= p.q // 2:
        v -= p.q
    return v / p.scale


class KeySpace:
    """Enumerable key space: secrets with entries from ``alphabet``, lexicographic order."""

    def __init__(self, params: ToyHE, alphabet: Sequence[int] | None = None):
        alphabet = alphabet if alphabet is not None else params.key_alphabet
        if alphabet is None:
            raise ValueError("a finite key alphabet is required")
        self.params = params
        self.alphabet = tuple(int(a) for a in alphabet)

    def __len__(self) -> int:
        return len(self.alphabet) ** self.params.n

    def __getitem__(self, index: int) -> SecretKey:
        if not 0 <= index < len(self):
            raise IndexError(index)
        base = len(self.alphabet)
        digits = []
        for _ in range(self.params.n):
            index, r = divmod(index, base)
            digits.append(self.alphabet[r])
        return key_from_secret(digits[::-1], self.params)

    def __iter__(self):
        for digits in itertools.product(self.alphabet, repeat=self.params.n):
            yield key_from_secret(digits, self.params)

    def index_of(self, key: SecretKey) -> int:
        base = len(self.alphabet)
        pos = {a % self.params.q: i for i, a in enumerate(self.alphabet)}
        idx = 0
        for v in key.secret:
            idx = idx * base + pos[int(v)]
        return idx
