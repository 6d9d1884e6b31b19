"""Group PKI: issuance policies, verification order, revocation, cookies."""

import pytest

from overlaysim.security import (
    CERTIFICATE_BYTES,
    REVOCATION_NOTICE_BYTES,
    CookieResponder,
    EnrollStatus,
    GroupCA,
    Policy,
    RevocationView,
    cookie,
    verify_peer,
)


def make_ca(policy=Policy.AUTO_SIGN, quota=0):
    ca = GroupCA("g", policy, quota=quota, seed=42)
    ca.add_member("alice", "pw-a")
    ca.add_member("bob", "pw-b")
    return ca


def test_auto_sign_issues_verifiable_cert():
    ca = make_ca()
    res = ca.enroll("alice", "pw-a", node_id=7, now=1000)
    assert res.status is EnrollStatus.ISSUED
    cert = res.certificate
    assert cert.node_id == 7 and cert.user == "alice" and cert.group == "g"
    assert cert.serialized_size == CERTIFICATE_BYTES
    assert ca.verifier().check_certificate(cert)


def test_bad_credentials_rejected():
    ca = make_ca()
    res = ca.enroll("alice", "wrong", node_id=7)
    assert res.status is EnrollStatus.REJECTED
    assert res.reason == "bad_credentials"
    assert ca.enroll("mallory", "pw", node_id=8).status is EnrollStatus.REJECTED


def test_manual_approve_flow():
    ca = make_ca(Policy.MANUAL_APPROVE)
    res = ca.enroll("alice", "pw-a", node_id=7)
    assert res.status is EnrollStatus.PENDING
    assert ("alice", 7) in ca.pending
    cert = ca.approve("alice", 7)
    assert ca.verifier().check_certificate(cert)
    with pytest.raises(ValueError):
        ca.approve("alice", 7)  # consumed


def test_quota_then_manual():
    ca = make_ca(Policy.QUOTA_THEN_MANUAL, quota=1)
    assert ca.enroll("alice", "pw-a", node_id=1).status is EnrollStatus.ISSUED
    assert ca.enroll("bob", "pw-b", node_id=2).status is EnrollStatus.PENDING


def test_forged_and_foreign_certs_fail():
    ca = make_ca()
    other = GroupCA("g", seed=999)  # same group name, different key
    other.add_member("alice", "pw-a")
    cert = other.enroll("alice", "pw-a", node_id=7).certificate
    assert not ca.verifier().check_certificate(cert)


def test_verify_order_and_reasons():
    ca = make_ca()
    cert = ca.enroll("alice", "pw-a", node_id=7).certificate
    ver = ca.verifier()
    view = RevocationView()
    assert verify_peer(cert, ver, 7, view).accepted
    assert verify_peer(None, ver, 7, view).reason == "bad_signature"
    assert verify_peer(cert, ver, 8, view).reason == "id_mismatch"
    view.users["alice"] = 5
    assert verify_peer(cert, ver, 7, view).reason == "revoked_user"
    view2 = RevocationView(serials={cert.serial})
    assert verify_peer(cert, ver, 7, view2).reason == "revoked_serial"


def test_revocation_notice_and_view():
    ca = make_ca()
    ca.enroll("alice", "pw-a", node_id=7)
    notice = ca.revoke_user("alice", now=5000)
    assert notice.serialized_size == REVOCATION_NOTICE_BYTES
    assert ca.verifier().check_notice(notice)
    view = RevocationView()
    view.apply_notice(notice)
    assert view.users["alice"] == 5000
    assert "alice" in view.checked_users
    # revoked user cannot re-enroll
    assert ca.enroll("alice", "pw-a", node_id=9).reason == "revoked_user"


def test_revoke_is_idempotent_on_timestamp():
    ca = make_ca()
    ca.revoke_user("alice", now=100)
    ca.revoke_user("alice", now=900)
    assert ca.revoked_users["alice"] == 100


def test_revocation_list_lines_format():
    ca = make_ca()
    ca.revoke_user("bob", now=70)
    ca.revoke_user("alice", now=30)
    assert ca.revocation_list_lines() == ["alice,g,30", "bob,g,70"]


def test_export_revocation_list(tmp_path):
    ca = make_ca()
    ca.revoke_user("alice", now=12)
    out = tmp_path / "rl.txt"
    ca.export_revocation_list(out)
    assert out.read_text() == "alice,g,12\n"


def test_tampered_notice_rejected():
    ca = make_ca()
    notice = ca.revoke_user("alice", now=5000)
    forged = type(notice)("alice", "g", 6000, notice.signature)
    assert not ca.verifier().check_notice(forged)


def test_cookie_stateless_until_echo():
    r = CookieResponder(b"secret")
    tokens = [r.on_initiation(f"peer{i}", now_ms=10_000) for i in range(100)]
    assert r.initiations_seen == 100
    assert r.allocated_sessions == 0  # blind floods allocate nothing
    assert r.on_cookie_echo("peer3", tokens[3], now_ms=12_000)
    assert r.allocated_sessions == 1


def test_cookie_epoch_boundary_and_forgery():
    r = CookieResponder(b"secret", epoch_ms=60_000)
    tok = r.on_initiation("p", now_ms=59_999)
    assert r.on_cookie_echo("p", tok, now_ms=60_001)      # previous epoch ok
    assert not r.on_cookie_echo("p", tok, now_ms=180_000)  # two epochs stale
    assert not r.on_cookie_echo("q", tok, now_ms=60_001)   # wrong identity
    assert not r.on_cookie_echo("p", b"junk", now_ms=60_001)


def test_cookie_pure_function():
    assert cookie(b"k", "x", 1000) == cookie(b"k", "x", 1500)  # same epoch
    assert cookie(b"k", "x", 1000) != cookie(b"k2", "x", 1000)
