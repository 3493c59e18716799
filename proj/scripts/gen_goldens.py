#!/usr/bin/env python3
"""Independent oracle for the golden test vectors under tests/golden/.

Implements the wire formats, the deterministic RNG, the handshake and the
key schedule from scratch (python stdlib + pyca/cryptography), without
touching the C++ tree. Regenerate with:

    python3 scripts/gen_goldens.py

The C++ suite treats the emitted files as frozen expected values; they are
only ever rewritten by running this script.
"""

import hashlib
import hmac
import struct
import sys
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PublicFormat,
)

OUT_DIR = Path(__file__).resolve().parent.parent / "tests" / "golden"

CELL_SIZE = 512
CELL_PAYLOAD_SIZE = 505
RELAY_DATA_MAX = 494


def chacha20_keystream(key: bytes, nonce8: bytes, block: int, n: int) -> bytes:
    # pyca ChaCha20 takes a 16-byte nonce: little-endian 64-bit initial block
    # counter followed by the 8-byte nonce (original djb construction).
    full_nonce = struct.pack("<Q", block) + nonce8
    enc = Cipher(algorithms.ChaCha20(key, full_nonce), mode=None).encryptor()
    return enc.update(bytes(n))


def selfcheck_chacha20() -> None:
    ks = chacha20_keystream(bytes(32), bytes(8), 0, 64)
    want = bytes.fromhex(
        "76b8e0ada0f13d90405d6ae55386bd28bdd219b8a08ded1aa836efcc8b770dc7"
        "da41597c5157488d7724e03fb8d84a376a43b8f41518a11cc387b669b2ee6586"
    )
    assert ks == want, "pyca ChaCha20 nonce layout does not match djb vectors"


class Rng:
    """Deterministic byte source: ChaCha20 keystream under a hashed seed."""

    def __init__(self, seed: int = None, key: bytes = None):
        if key is None:
            key = hashlib.sha256(b"tomen-rng-v1" + struct.pack("<Q", seed)).digest()
        self.key = key
        self.offset = 0

    def fill(self, n: int) -> bytes:
        first_block, skip = divmod(self.offset, 64)
        raw = chacha20_keystream(self.key, bytes(8), first_block, skip + n)
        self.offset += n
        return raw[skip:]

    def next_u64(self) -> int:
        return struct.unpack("<Q", self.fill(8))[0]

    def uniform(self, n: int) -> int:
        rem = ((0xFFFFFFFFFFFFFFFF % n) + 1) % n  # 2^64 mod n
        threshold = 0xFFFFFFFFFFFFFFFF - rem
        while True:
            x = self.next_u64()
            if x <= threshold:
                return x % n

    def fork(self, label: str) -> "Rng":
        return Rng(key=hashlib.sha256(self.key + b"/" + label.encode()).digest())


def x25519_public(sk: bytes) -> bytes:
    priv = X25519PrivateKey.from_private_bytes(sk)
    return priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def x25519_shared(sk: bytes, pk: bytes) -> bytes:
    from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PublicKey

    return X25519PrivateKey.from_private_bytes(sk).exchange(
        X25519PublicKey.from_public_bytes(pk)
    )


def hkdf_sha256(ikm: bytes, salt: bytes, info: bytes, n: int = 32) -> bytes:
    prk = hmac.new(salt, ikm, hashlib.sha256).digest()
    out = b""
    t = b""
    i = 1
    while len(out) < n:
        t = hmac.new(prk, t + info + bytes([i]), hashlib.sha256).digest()
        out += t
        i += 1
    return out[:n]


HKDF_SALT = b"tomen-v1 hop keys"
CONFIRM_LABEL = b"tomen-confirm:"


def derive_hop_keys(shared: bytes) -> dict:
    return {
        "forward_key": hkdf_sha256(shared, HKDF_SALT, b"fwd-key"),
        "backward_key": hkdf_sha256(shared, HKDF_SALT, b"bwd-key"),
        "forward_digest_seed": hkdf_sha256(shared, HKDF_SALT, b"fwd-dig"),
        "backward_digest_seed": hkdf_sha256(shared, HKDF_SALT, b"bwd-dig"),
    }


def encode_cell(circuit_id: int, command: int, payload: bytes) -> bytes:
    assert len(payload) <= CELL_PAYLOAD_SIZE
    head = struct.pack(">IBH", circuit_id, command, len(payload))
    return head + payload + bytes(CELL_PAYLOAD_SIZE - len(payload))


def encode_relay_payload(
    recognized: bytes, stream_id: int, digest: bytes, relay_command: int, data: bytes
) -> bytes:
    assert len(data) <= RELAY_DATA_MAX
    body = (
        recognized
        + struct.pack(">H", stream_id)
        + digest
        + struct.pack(">H", len(data))
        + bytes([relay_command])
        + data
    )
    return body + bytes(CELL_PAYLOAD_SIZE - len(body))


def write_golden(name: str, entries: list) -> None:
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    path = OUT_DIR / name
    lines = ["# generated by scripts/gen_goldens.py -- do not edit by hand"]
    for key, value in entries:
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path}")


def golden_rng() -> None:
    rng = Rng(seed=7)
    stream = rng.fill(64)
    u64s = [rng.next_u64() for _ in range(4)]
    uni = [rng.uniform(10) for _ in range(8)]
    child = rng.fork("child")
    write_golden(
        "rng_stream.golden",
        [
            ("seed", "7"),
            ("stream64", stream.hex()),
            ("u64s", ",".join(str(v) for v in u64s)),
            ("uniform10", ",".join(str(v) for v in uni)),
            ("fork_child_16", child.fill(16).hex()),
        ],
    )


def golden_hop_keys() -> None:
    keys = derive_hop_keys(bytes(32))
    write_golden(
        "hop_keys_zero_secret.golden",
        [(k, v.hex()) for k, v in keys.items()],
    )


def golden_handshake() -> None:
    client_sk = Rng(seed=1001).fill(32)
    client_pk = x25519_public(client_sk)

    identity_seed = Rng(seed=2002).fill(32)
    identity = Ed25519PrivateKey.from_private_bytes(identity_seed)
    identity_pk = identity.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    relay_sk = Rng(seed=3003).fill(32)
    relay_pk = x25519_public(relay_sk)

    shared = x25519_shared(relay_sk, client_pk)
    tag = hashlib.sha256(CONFIRM_LABEL + shared).digest()
    sig = identity.sign(client_pk + relay_pk)
    created = relay_pk + tag + sig
    keys = derive_hop_keys(shared)

    entries = [
        ("client_secret", client_sk.hex()),
        ("client_public", client_pk.hex()),
        ("identity_seed", identity_seed.hex()),
        ("identity_public", identity_pk.hex()),
        ("identity_fingerprint", hashlib.sha256(identity_pk).hexdigest()),
        ("relay_eph_secret", relay_sk.hex()),
        ("relay_eph_public", relay_pk.hex()),
        ("shared_secret", shared.hex()),
        ("confirm_tag", tag.hex()),
        ("signature", sig.hex()),
        ("created_payload", created.hex()),
    ]
    entries += [(k, v.hex()) for k, v in keys.items()]
    write_golden("handshake_transcript.golden", entries)


def golden_cells() -> None:
    cell_create_zero = encode_cell(0, 1, b"")
    cell_relay_hi = encode_cell(7, 4, b"hi")
    rp_tx = encode_relay_payload(bytes(2), 0, bytes(4), 5, b"tx")
    write_golden(
        "cells.golden",
        [
            ("cell_create_zero", cell_create_zero.hex()),
            ("cell_relay_hi", cell_relay_hi.hex()),
            ("relay_payload_tx", rp_tx.hex()),
        ],
    )


def golden_layer_cipher() -> None:
    key = hashlib.sha256(b"layer-test-key").digest()
    counter = 5
    payload = bytes((i * 7 + 3) % 256 for i in range(CELL_PAYLOAD_SIZE))
    nonce = struct.pack(">Q", counter)
    ks = chacha20_keystream(key, nonce, 0, CELL_PAYLOAD_SIZE)
    out = bytes(a ^ b for a, b in zip(payload, ks))
    write_golden(
        "layer_cipher.golden",
        [
            ("key", key.hex()),
            ("counter", str(counter)),
            ("payload", payload.hex()),
            ("ciphertext", out.hex()),
        ],
    )


def golden_running_digest() -> None:
    seed = hashlib.sha256(b"digest-seed").digest()
    state = hashlib.sha256()
    state.update(seed)
    sealed = []
    for word in (b"hello", b"world"):
        body = encode_relay_payload(bytes(2), 1, bytes(4), 5, word)
        state.update(body)
        sealed.append(state.copy().digest()[:4])
    write_golden(
        "running_digest.golden",
        [
            ("seed", seed.hex()),
            ("digest_hello", sealed[0].hex()),
            ("digest_world", sealed[1].hex()),
        ],
    )


def main() -> int:
    selfcheck_chacha20()
    golden_rng()
    golden_hop_keys()
    golden_handshake()
    golden_cells()
    golden_layer_cipher()
    golden_running_digest()
    return 0


if __name__ == "__main__":
    sys.exit(main())
