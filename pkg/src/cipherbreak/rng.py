"""Keyed deterministic randomness for the ciphers.

Every random decision the ciphers make is derived from a 32-byte master
key through keyed BLAKE2b in counter mode, so encryption is reproducible
bit-for-bit across platforms and exactly invertible with the key. The
construction is normative; any port must match it to interoperate:

  seed(label)        = BLAKE2b-256(key=master, data=label_utf8)
  seed(label, tweak) = BLAKE2b-256(key=master, data=label_utf8 || "|" || tweak)
  block(i)           = BLAKE2b-512(key=seed, data=uint64_be(i))     # 64 bytes
  byte stream        = block(0) || block(1) || block(2) || ...

where a tweak is encoded as an 8-byte big-endian integer, UTF-8 for
strings, or raw bytes. Draw semantics on top of the byte stream:

  bits(n)        consume ceil(n/8) bytes; unpack MSB-first; keep first n
  uniform(k)     consume one big-endian uint64 word u; accept iff
                 u <= 2^64 - 1 - (2^64 mod k), value u mod k; on rejection
                 redraw.  Array draws resolve all pending positions in
                 ascending-index rounds (one word per pending position per
                 round), which coincides with sequential draws except with
                 probability < k/2^64 per draw.
  permutation(n) Fisher-Yates: for i = n-1 .. 1 draw j = uniform(i+1)
                 (one round for all i, rejections in later rounds), then
                 swap positions i and j in ascending draw order.

Labels K1..K4 separate the four encryption steps; "extra" is reserved for
key-schedule material such as per-epoch training keys (tweak = epoch).
This is deterministic key separation, not a cryptographic-strength claim.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

SUBKEY_LABELS = ("K1", "K2", "K3", "K4", "extra")
KEY_FILE_TAG = "cipherbreak-key-v1"

_U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class MasterKey:
    """A 32-byte secret from which all sub-key streams are derived."""

    data: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.data, bytes) or len(self.data) != 32:
            raise ValueError("master key must be exactly 32 bytes")

    @classmethod
    def from_hex(cls, text: str) -> "MasterKey":
        text = text.strip()
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise ValueError(f"invalid key hex: {exc}") from exc
        return cls(raw)

    @classmethod
    def generate(cls) -> "MasterKey":
        return cls(os.urandom(32))

    def hex(self) -> str:
        return self.data.hex()

    def fingerprint(self) -> str:
        """Short public identifier; safe for manifests and logs."""
        return hashlib.sha256(self.data).hexdigest()[:16]

    def __repr__(self) -> str:  # never leak key bytes via repr
        return f"MasterKey(fingerprint={self.fingerprint()})"


def write_key_file(path, key: MasterKey) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{KEY_FILE_TAG}\n{key.hex()}\n")


def read_key_file(path) -> MasterKey:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0] != KEY_FILE_TAG:
        raise ValueError(f"{path}: not a {KEY_FILE_TAG} file")
    if len(lines) != 2:
        raise ValueError(f"{path}: expected a single hex line after the tag")
    return MasterKey.from_hex(lines[1])


def _encode_tweak(tweak) -> bytes:
    if isinstance(tweak, bytes):
        return tweak
    if isinstance(tweak, str):
        return tweak.encode("utf-8")
    if isinstance(tweak, int):
        if tweak < 0:
            raise ValueError("integer tweaks must be non-negative")
        return tweak.to_bytes(8, "big")
    raise TypeError(f"unsupported tweak type: {type(tweak).__name__}")


class SubKeyStream:
    """Deterministic byte/draw stream for one (key, label, tweak) triple.

    Value-like and single-consumer: clone() forks identical state; a
    single instance must not be shared between threads.
    """

    def __init__(self, seed: bytes, label: str):
        self.label = label
        self._seed = seed
        self._counter = 0
        self._buf = bytearray()

    def clone(self) -> "SubKeyStream":
        other = SubKeyStream.__new__(SubKeyStream)
        other.label = self.label
        other._seed = self._seed
        other._counter = self._counter
        other._buf = bytearray(self._buf)
        return other

    def take_bytes(self, n: int) -> bytes:
        if n < 0:
            raise ValueError("byte count must be non-negative")
        while len(self._buf) < n:
            blocks = (n - len(self._buf) + 63) // 64
            for _ in range(blocks):
                self._buf += hashlib.blake2b(
                    self._counter.to_bytes(8, "big"), key=self._seed, digest_size=64
                ).digest()
                self._counter += 1
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def _u64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take_bytes(8 * n), dtype=">u8").astype(np.uint64)

    def bits(self, n: int) -> np.ndarray:
        """n fair bits as a uint8 array of 0/1 values."""
        if n < 0:
            raise ValueError("bit count must be non-negative")
        if n == 0:
            return np.zeros(0, dtype=np.uint8)
        raw = np.frombuffer(self.take_bytes((n + 7) // 8), dtype=np.uint8)
        return np.unpackbits(raw)[:n]

    def _uniform_rounds(self, ks: np.ndarray) -> np.ndarray:
        """One uniform draw per modulus in ks, rejections resolved in rounds."""
        ks = np.asarray(ks, dtype=np.uint64)
        if ks.size == 0:
            return np.zeros(0, dtype=np.int64)
        if np.any(ks < 1):
            raise ValueError("modulus must be >= 1")
        # accept u iff u <= 2^64 - 1 - (2^64 mod k); for powers of two this
        # accepts everything, otherwise it trims the biased top interval
        thresholds = np.array(
            [_U64_MAX - ((1 << 64) % int(k)) for k in ks], dtype=np.uint64
        )
        out = np.zeros(ks.shape, dtype=np.uint64)
        pending = np.arange(ks.size)
        while pending.size:
            words = self._u64(pending.size)
            ok = words <= thresholds[pending]
            accepted = pending[ok]
            out[accepted] = words[ok] % ks[accepted]
            pending = pending[~ok]
        return out.astype(np.int64)

    def uniform(self, k: int) -> int:
        """Unbiased draw from 0..k-1."""
        return int(self._uniform_rounds(np.array([k], dtype=np.uint64))[0])

    def uniform_array(self, k: int, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("draw count must be non-negative")
        return self._uniform_rounds(np.full(n, k, dtype=np.uint64))

    def permutation(self, n: int) -> np.ndarray:
        """Unbiased Fisher-Yates permutation of 0..n-1."""
        if n < 1:
            raise ValueError("permutation of an empty range is undefined")
        perm = np.arange(n, dtype=np.int64)
        if n == 1:
            return perm
        js = self._uniform_rounds(np.arange(n, 1, -1, dtype=np.uint64))
        for idx, i in enumerate(range(n - 1, 0, -1)):
            j = js[idx]
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def derive_stream(key: MasterKey, label: str, tweak=None) -> SubKeyStream:
    """Derive the deterministic stream for (key, label[, tweak]).

    Re-derivation always restarts the stream from the beginning.
    """
    if label not in SUBKEY_LABELS:
        raise ValueError(f"unknown sub-key label {label!r}; expected one of {SUBKEY_LABELS}")
    data = label.encode("utf-8")
    if tweak is not None:
        data += b"|" + _encode_tweak(tweak)
    seed = hashlib.blake2b(data, key=key.data, digest_size=32).digest()
    return SubKeyStream(seed, label)


def derive_epoch_key(base: MasterKey, epoch: int) -> MasterKey:
    """Per-epoch training key: fresh 32 bytes from the 'extra' stream."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return MasterKey(derive_stream(base, "extra", tweak=epoch).take_bytes(32))


# Operation-style aliases used throughout the ciphers.

def gen_permutation(stream: SubKeyStream, n: int) -> np.ndarray:
    return stream.permutation(n)


def gen_bits(stream: SubKeyStream, n: int) -> np.ndarray:
    return stream.bits(n)


def gen_choice(stream: SubKeyStream, k: int) -> int:
    return stream.uniform(k)


def gen_choices(stream: SubKeyStream, k: int, n: int) -> np.ndarray:
    return stream.uniform_array(k, n)
