"""Group membership PKI model: certificates, revocation, stateless cookies.

Signatures are deterministic keyed digests (the simulator needs byte costs
and verifiable bindings, not real cryptography).  A group authority signs
certificates binding (node id, user, group, serial); verifiers hold the
authority's verification handle plus a local revocation view that protocol
traffic (broadcast or DHT notices) keeps updated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

CERTIFICATE_BYTES = 800
REVOCATION_NOTICE_BYTES = 300
COOKIE_EPOCH_MS = 60_000


def _keyed_token(key: bytes, *parts: object) -> bytes:
    h = hashlib.blake2b(key=key, digest_size=16)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


@dataclass(frozen=True)
class Certificate:
    """Binds a node id to a user within a group; serialized size is a
    fixed accounting constant."""

    node_id: int
    user: str
    group: str
    serial: int
    issued_at: int
    signature: bytes
    serialized_size: int = CERTIFICATE_BYTES


@dataclass(frozen=True)
class RevocationNotice:
    user: str
    group: str
    revoked_at: int
    signature: bytes
    serialized_size: int = REVOCATION_NOTICE_BYTES


class Policy(Enum):
    AUTO_SIGN = "auto_sign"
    MANUAL_APPROVE = "manual_approve"
    QUOTA_THEN_MANUAL = "quota_then_manual"


class EnrollStatus(Enum):
    ISSUED = "issued"
    PENDING = "pending"
    REJECTED = "rejected"


@dataclass
class EnrollResult:
    status: EnrollStatus
    certificate: Optional[Certificate] = None
    reason: Optional[str] = None


class CaVerifier:
    """Verification handle distributed to members (stands in for the CA's
    public key)."""

    def __init__(self, group: str, key: bytes):
        self.group = group
        self._key = key

    def check_certificate(self, cert: Certificate) -> bool:
        expected = _keyed_token(
            self._key, "cert", cert.node_id, cert.user, cert.group, cert.serial, cert.issued_at
        )
        return cert.group == self.group and cert.signature == expected

    def check_notice(self, notice: RevocationNotice) -> bool:
        expected = _keyed_token(self._key, "revoke", notice.user, notice.group, notice.revoked_at)
        return notice.group == self.group and notice.signature == expected


class GroupCA:
    """Group certificate authority with a configurable signing policy.

    Modeled as reachable out-of-band (enrollment and approval do not consume
    simulated overlay traffic); only in-overlay revocation distribution is
    metered by the simulator.
    """

    def __init__(self, group: str, policy: Policy = Policy.AUTO_SIGN, quota: int = 0, seed: int = 0):
        self.group = group
        self.policy = policy
        self.quota = quota
        self._key = hashlib.blake2b(
            f"ca-key:{group}:{seed}".encode(), digest_size=32
        ).digest()
        self._members: Dict[str, str] = {}
        self._serial = 0
        self._auto_signed = 0
        self.issued: Dict[int, Certificate] = {}
        self.pending: List[Tuple[str, int]] = []
        self.revoked_users: Dict[str, int] = {}
        self.revoked_serials: Set[int] = set()

    # -- enrollment ---------------------------------------------------------

    def add_member(self, user: str, shared_secret: str) -> None:
        self._members[user] = shared_secret

    def enroll(self, user: str, shared_secret: str, node_id: int, now: int = 0) -> EnrollResult:
        if user not in self._members or self._members[user] != shared_secret:
            return EnrollResult(EnrollStatus.REJECTED, reason="bad_credentials")
        if user in self.revoked_users:
            return EnrollResult(EnrollStatus.REJECTED, reason="revoked_user")
        if self.policy is Policy.MANUAL_APPROVE:
            self.pending.append((user, node_id))
            return EnrollResult(EnrollStatus.PENDING)
        if self.policy is Policy.QUOTA_THEN_MANUAL and self._auto_signed >= self.quota:
            self.pending.append((user, node_id))
            return EnrollResult(EnrollStatus.PENDING)
        self._auto_signed += 1
        return EnrollResult(EnrollStatus.ISSUED, certificate=self.sign_request(user, node_id, now))

    def approve(self, user: str, node_id: int, now: int = 0) -> Certificate:
        entry = (user, node_id)
        if entry not in self.pending:
            raise ValueError(f"no pending request for {user}/{node_id}")
        self.pending.remove(entry)
        return self.sign_request(user, node_id, now)

    def sign_request(self, user: str, node_id: int, now: int = 0) -> Certificate:
        self._serial += 1
        serial = self._serial
        sig = _keyed_token(self._key, "cert", node_id, user, self.group, serial, now)
        cert = Certificate(node_id, user, self.group, serial, now, sig)
        self.issued[serial] = cert
        return cert

    def verifier(self) -> CaVerifier:
        return CaVerifier(self.group, self._key)

    def certificates_of(self, user: str) -> List[Certificate]:
        return [c for c in self.issued.values() if c.user == user]

    # -- revocation ----------------------------------------------------------

    def revoke_user(self, user: str, now: int) -> RevocationNotice:
        """Revoke every certificate of a user.  Idempotent on membership
        state; a repeat call yields an equivalent notice with a fresh
        timestamp."""
        self.revoked_users.setdefault(user, now)
        sig = _keyed_token(self._key, "revoke", user, self.group, now)
        return RevocationNotice(user, self.group, now, sig)

    def revoke_serial(self, serial: int) -> None:
        self.revoked_serials.add(serial)

    def revocation_list_lines(self) -> List[str]:
        return [
            f"{user},{self.group},{at}"
            for user, at in sorted(self.revoked_users.items())
        ]

    def export_revocation_list(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.revocation_list_lines():
                fh.write(line + "\n")


# ---------------------------------------------------------------------------
# Peer verification


@dataclass
class RevocationView:
    """One node's local knowledge of revocations."""

    users: Dict[str, int] = field(default_factory=dict)
    serials: Set[int] = field(default_factory=set)
    # users already checked against the revocation store, to avoid re-query
    checked_users: Set[str] = field(default_factory=set)

    def apply_notice(self, notice: RevocationNotice) -> None:
        self.users.setdefault(notice.user, notice.revoked_at)
        self.checked_users.add(notice.user)

    def apply_crl(self, serials) -> None:
        self.serials.update(serials)


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    reason: Optional[str] = None


def verify_peer(
    cert: Optional[Certificate],
    ca: CaVerifier,
    presented_node_id: int,
    view: RevocationView,
) -> VerifyResult:
    """Accept iff the signature checks, the certificate covers the node id
    that presented it, and neither the user nor the serial is revoked in the
    local view.  The reason names the first failing check in that order."""
    if cert is None or not ca.check_certificate(cert):
        return VerifyResult(False, "bad_signature")
    if cert.node_id != presented_node_id:
        return VerifyResult(False, "id_mismatch")
    if cert.user in view.users:
        return VerifyResult(False, "revoked_user")
    if cert.serial in view.serials:
        return VerifyResult(False, "revoked_serial")
    return VerifyResult(True)


# ---------------------------------------------------------------------------
# Stateless handshake cookies


def cookie(responder_secret: bytes, peer_identity: object, now_ms: int, epoch_ms: int = COOKIE_EPOCH_MS) -> bytes:
    """Stateless anti-spoofing token: keyed digest of (identity, epoch).

    The responder can recompute it on echo, so no per-initiation state is
    needed.  Tokens from the previous epoch are also accepted to cover
    epoch boundaries."""
    return _keyed_token(responder_secret, "cookie", peer_identity, now_ms // epoch_ms)


class CookieResponder:
    """Handshake responder model used to demonstrate DoS statelessness.

    State (a session slot) is allocated only after a valid cookie echo;
    blind initiations cost the responder nothing but the reply token.
    """

    def __init__(self, secret: bytes, epoch_ms: int = COOKIE_EPOCH_MS):
        self.secret = secret
        self.epoch_ms = epoch_ms
        self.sessions: Set[object] = set()
        self.initiations_seen = 0

    def on_initiation(self, peer_identity: object, now_ms: int) -> bytes:
        self.initiations_seen += 1
        return cookie(self.secret, peer_identity, now_ms, self.epoch_ms)

    def on_cookie_echo(self, peer_identity: object, token: bytes, now_ms: int) -> bool:
        current = cookie(self.secret, peer_identity, now_ms, self.epoch_ms)
        previous = cookie(self.secret, peer_identity, now_ms - self.epoch_ms, self.epoch_ms)
        if token in (current, previous):
            self.sessions.add(peer_identity)
            return True
        return False

    @property
    def allocated_sessions(self) -> int:
        return len(self.sessions)
