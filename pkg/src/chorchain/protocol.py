"""Six-step handover protocol between choreography participants.

The flow, driven by the sending side and answered synchronously by the
receiver, is:

1. negotiate terms under mutual PKI identification,
2. transfer the symmetrically encrypted process data (hash retained by the
   sender; the receiver cannot open it yet),
3. exchange freshly generated transaction addresses under identity
   signatures,
4. build the handover-transaction template,
5. send the template together with the data key, identity-signed; the
   receiver runs its four checks and answers with its token-key signature,
6. finalize with the sender's signature and broadcast.

A rejected template aborts the session and the sender closes the instance
with an extraordinary end transaction. After a successful publication the
receiver picks its new token off the chain: watching for that transaction
is also how it proves the sender really broadcast what both parties signed.

Identities are RSA certificates issued by a single self-signed trust root;
transaction keys are separate, fresh per handover. All messages are tagged
binary frames (one length-prefixed byte string per field) so the in-process
channel and the optional TCP binding share one codec.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import engine as eng
from .crypto import Keypair, sha256
from .encoding import deserialize_transaction, serialize_transaction

STEP_TIMEOUT = 30.0  # simulated seconds per awaited reply
LOGIC_COST = 0.002  # simulated seconds charged per protocol step
NONCE_SIZE = 16


class ProtocolError(Exception):
    pass


class CertificateError(ProtocolError):
    pass


class TransportTimeout(ProtocolError):
    pass


class FrameError(ProtocolError):
    pass


# --- frame codec -----------------------------------------------------------------


class FrameType(Enum):
    NEGOTIATE = 0x01
    DATA = 0x02
    ADDR_ATTEST = 0x03
    TEMPLATE_KEY = 0x04
    RECEIVER_SIG = 0x05
    ACK = 0x06
    IDENTITY_QUERY = 0x07
    IDENTITY_REPLY = 0x08


def _varint(n: int) -> bytes:
    if n < 0xFD:
        return bytes([n])
    if n <= 0xFFFF:
        return b"\xfd" + n.to_bytes(2, "little")
    return b"\xfe" + n.to_bytes(4, "little")


def pack_fields(*fields: bytes) -> bytes:
    return b"".join(_varint(len(f)) + f for f in fields)


def unpack_fields(data: bytes, count: int) -> list[bytes]:
    out = []
    pos = 0
    for _ in range(count):
        if pos >= len(data):
            raise FrameError("frame truncated")
        first = data[pos]
        if first < 0xFD:
            ln, pos = first, pos + 1
        elif first == 0xFD:
            ln, pos = int.from_bytes(data[pos + 1 : pos + 3], "little"), pos + 3
        else:
            ln, pos = int.from_bytes(data[pos + 1 : pos + 5], "little"), pos + 5
        if pos + ln > len(data):
            raise FrameError("frame field runs past end")
        out.append(data[pos : pos + ln])
        pos += ln
    if pos != len(data):
        raise FrameError("trailing bytes in frame")
    return out


def make_frame(kind: FrameType, payload: bytes) -> bytes:
    return bytes([kind.value]) + payload


def split_frame(frame: bytes) -> tuple[FrameType, bytes]:
    if not frame:
        raise FrameError("empty frame")
    try:
        kind = FrameType(frame[0])
    except ValueError:
        raise FrameError(f"unknown frame tag 0x{frame[0]:02x}") from None
    return kind, frame[1:]


# --- PKI -------------------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    subject: str
    public_key_der: bytes
    not_before: int
    not_after: int
    issuer: str
    signature: bytes = b""

    def signed_payload(self) -> bytes:
        return pack_fields(
            self.subject.encode(),
            self.public_key_der,
            self.not_before.to_bytes(8, "big"),
            self.not_after.to_bytes(8, "big"),
            self.issuer.encode(),
        )

    def to_bytes(self) -> bytes:
        return self.signed_payload() + pack_fields(self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        subject, key, nb, na, issuer, sig = unpack_fields(data, 6)
        return cls(
            subject.decode(),
            key,
            int.from_bytes(nb, "big"),
            int.from_bytes(na, "big"),
            issuer.decode(),
            sig,
        )


def _rsa_sign(private_key: rsa.RSAPrivateKey, data: bytes) -> bytes:
    return private_key.sign(data, padding.PKCS1v15(), hashes.SHA256())


def _rsa_verify(public_key_der: bytes, signature: bytes, data: bytes) -> bool:
    try:
        key = serialization.load_der_public_key(public_key_der)
        key.verify(signature, data, padding.PKCS1v15(), hashes.SHA256())
        return True
    except (InvalidSignature, ValueError):
        return False


class Identity:
    """A participant's long-lived signing identity plus its certificate."""

    def __init__(self, name: str, private_key: rsa.RSAPrivateKey, certificate: Certificate):
        self.name = name
        self._key = private_key
        self.certificate = certificate

    def sign(self, data: bytes) -> bytes:
        return _rsa_sign(self._key, data)


class TrustRoot:
    """Self-signed root that issues every participant certificate."""

    def __init__(self, name: str = "trust-root", lifetime: int = 10 * 365 * 86400, now: int = 0):
        self._key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        der = self._key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )
        cert = Certificate(name, der, now, now + lifetime, name)
        cert = replace(cert, signature=_rsa_sign(self._key, cert.signed_payload()))
        self.identity = Identity(name, self._key, cert)

    @property
    def name(self) -> str:
        return self.identity.name

    def issue(self, name: str, now: int, lifetime: int = 365 * 86400) -> Identity:
        key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        der = key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )
        cert = Certificate(name, der, now, now + lifetime, self.name)
        cert = replace(cert, signature=_rsa_sign(self._key, cert.signed_payload()))
        return Identity(name, key, cert)

    def check(self, cert: Certificate, now: int) -> None:
        if cert.issuer != self.name:
            raise CertificateError(f"certificate issued by unknown authority {cert.issuer!r}")
        if not _rsa_verify(
            self.identity.certificate.public_key_der, cert.signature, cert.signed_payload()
        ):
            raise CertificateError("certificate signature invalid")
        if not cert.not_before <= now <= cert.not_after:
            raise CertificateError(f"certificate for {cert.subject!r} outside validity window")


# --- attestations and encrypted data -------------------------------------------------


@dataclass(frozen=True)
class AddressAttestation:
    """Identity-signed claim of ownership of a transaction key hash."""

    bitcoin_key_hash: bytes
    process_id: int
    nonce: bytes
    certificate: Certificate
    signature: bytes

    def signed_payload(self) -> bytes:
        return self.bitcoin_key_hash + self.process_id.to_bytes(2, "big") + self.nonce

    def to_bytes(self) -> bytes:
        return pack_fields(
            self.bitcoin_key_hash,
            self.process_id.to_bytes(2, "big"),
            self.nonce,
            self.certificate.to_bytes(),
            self.signature,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "AddressAttestation":
        key_hash, pid, nonce, cert, sig = unpack_fields(data, 5)
        return cls(key_hash, int.from_bytes(pid, "big"), nonce, Certificate.from_bytes(cert), sig)


def make_attestation(
    identity: Identity, key_hash: bytes, process_id: int, rng: random.Random
) -> AddressAttestation:
    nonce = rng.getrandbits(8 * NONCE_SIZE).to_bytes(NONCE_SIZE, "big")
    att = AddressAttestation(key_hash, process_id, nonce, identity.certificate, b"")
    return replace(att, signature=identity.sign(att.signed_payload()))


def verify_attestation(
    att: AddressAttestation, root: TrustRoot, now: int, seen_nonces: set[bytes]
) -> None:
    root.check(att.certificate, now)
    if att.nonce in seen_nonces:
        raise CertificateError("attestation nonce replayed")
    if not _rsa_verify(att.certificate.public_key_der, att.signature, att.signed_payload()):
        raise CertificateError("attestation signature invalid")
    seen_nonces.add(att.nonce)


@dataclass(frozen=True)
class EncryptedProcessData:
    key_id: bytes
    nonce: bytes
    ciphertext: bytes  # includes the authentication tag

    def to_bytes(self) -> bytes:
        return pack_fields(self.key_id, self.nonce, self.ciphertext)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedProcessData":
        return cls(*unpack_fields(data, 3))


def new_data_key(rng: random.Random) -> bytes:
    return rng.getrandbits(256).to_bytes(32, "big")


def encrypt_process_data(key: bytes, plaintext: bytes, rng: random.Random) -> EncryptedProcessData:
    nonce = rng.getrandbits(96).to_bytes(12, "big")
    ciphertext = AESGCM(key).encrypt(nonce, plaintext, b"")
    return EncryptedProcessData(sha256(key)[:8], nonce, ciphertext)


def decrypt_process_data(key: bytes, enc: EncryptedProcessData) -> bytes:
    if sha256(key)[:8] != enc.key_id:
        raise ProtocolError("key does not match the ciphertext's key id")
    try:
        return AESGCM(key).decrypt(enc.nonce, enc.ciphertext, b"")
    except InvalidTag:
        raise ProtocolError("process data fails authentication") from None


# --- transport -------------------------------------------------------------------------


class Transport(Protocol):
    def register(self, name: str, handler: Callable[[str, bytes], bytes]) -> None: ...

    def request(self, src: str, dst: str, frame: bytes) -> bytes: ...


class InProcTransport:
    """Reliable synchronous channel; faults are injected via rules.

    A rule is ``(predicate, mode)`` with predicate(src, dst, frame_type) and
    mode ``"drop"`` (request never answered -> timeout at the caller). Rules
    apply once each unless marked sticky.
    """

    def __init__(self):
        self._endpoints: dict[str, Callable[[str, bytes], bytes]] = {}
        self._rules: list[tuple[Callable[[str, str, FrameType], bool], bool]] = []

    def register(self, name: str, handler: Callable[[str, bytes], bytes]) -> None:
        self._endpoints[name] = handler

    def unregister(self, name: str) -> None:
        self._endpoints.pop(name, None)

    def drop_when(
        self, predicate: Callable[[str, str, FrameType], bool], sticky: bool = False
    ) -> None:
        self._rules.append((predicate, sticky))

    def request(self, src: str, dst: str, frame: bytes) -> bytes:
        kind, _ = split_frame(frame)
        for i, (predicate, sticky) in enumerate(self._rules):
            if predicate(src, dst, kind):
                if not sticky:
                    del self._rules[i]
                raise TransportTimeout(f"{kind.name} from {src} to {dst} dropped")
        handler = self._endpoints.get(dst)
        if handler is None:
            raise TransportTimeout(f"endpoint {dst!r} unreachable")
        return handler(src, frame)


class TcpTransport:
    """Optional TCP binding: the same frames, length-prefixed on the wire.

    Each registered endpoint listens on an ephemeral localhost port; a
    request opens a connection, sends ``len(4, BE) | fields(src, frame)``,
    and reads one length-prefixed reply. Handlers run on the listener
    thread, one request at a time per connection.
    """

    def __init__(self, timeout: float = 5.0):
        self._addrs: dict[str, tuple[str, int]] = {}
        self._servers: list = []
        self.timeout = timeout

    def register(self, name: str, handler: Callable[[str, bytes], bytes]) -> None:
        import socket
        import threading

        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(("127.0.0.1", 0))
        server.listen(8)
        self._addrs[name] = server.getsockname()
        self._servers.append(server)

        def serve() -> None:
            while True:
                try:
                    conn, _ = server.accept()
                except OSError:
                    return
                with conn:
                    try:
                        envelope = _read_frame(conn)
                        src_bytes, frame = unpack_fields(envelope, 2)
                        reply = handler(src_bytes.decode(), frame)
                        conn.sendall(len(reply).to_bytes(4, "big") + reply)
                    except (OSError, FrameError):
                        continue

        threading.Thread(target=serve, daemon=True).start()

    def request(self, src: str, dst: str, frame: bytes) -> bytes:
        import socket

        addr = self._addrs.get(dst)
        if addr is None:
            raise TransportTimeout(f"endpoint {dst!r} unreachable")
        envelope = pack_fields(src.encode(), frame)
        try:
            with socket.create_connection(addr, timeout=self.timeout) as conn:
                conn.sendall(len(envelope).to_bytes(4, "big") + envelope)
                return _read_frame(conn)
        except OSError as exc:
            raise TransportTimeout(f"tcp request to {dst!r} failed: {exc}") from None

    def close(self) -> None:
        for server in self._servers:
            server.close()


def _read_frame(conn) -> bytes:
    header = _read_exact(conn, 4)
    return _read_exact(conn, int.from_bytes(header, "big"))


def _read_exact(conn, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            raise OSError("connection closed mid-frame")
        buf += chunk
    return buf


class Clock(Protocol):
    """Simulated-time sink for protocol work (logic, waits)."""

    def charge(self, dt: float, phase: str) -> None: ...

    @property
    def now(self) -> float: ...


class NullClock:
    now = 0.0

    def charge(self, dt: float, phase: str) -> None:
        self.now += dt


# --- sessions ---------------------------------------------------------------------------


class SessionState(Enum):
    NEGOTIATING = "negotiating"
    DATA_TRANSFERRED = "data_transferred"
    ADDRESSES_EXCHANGED = "addresses_exchanged"
    TEMPLATE_SENT = "template_sent"
    RECEIVER_SIGNED = "receiver_signed"
    PUBLISHED = "published"
    ABORTED = "aborted"


class Role(Enum):
    SENDER = "sender"
    RECEIVER = "receiver"


_ORDER = [
    SessionState.NEGOTIATING,
    SessionState.DATA_TRANSFERRED,
    SessionState.ADDRESSES_EXCHANGED,
    SessionState.TEMPLATE_SENT,
    SessionState.RECEIVER_SIGNED,
    SessionState.PUBLISHED,
]


@dataclass(frozen=True)
class NegotiatedTerms:
    process_id: int
    task_id: int
    timestamp: int
    deadline: int = 0
    reward_ref: bytes = b""

    def to_bytes(self) -> bytes:
        return pack_fields(
            self.process_id.to_bytes(2, "big"),
            self.task_id.to_bytes(1, "big"),
            self.timestamp.to_bytes(4, "big"),
            self.deadline.to_bytes(4, "big"),
            self.reward_ref,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "NegotiatedTerms":
        pid, task, ts, deadline, reward = unpack_fields(data, 5)
        return cls(
            int.from_bytes(pid, "big"),
            int.from_bytes(task, "big"),
            int.from_bytes(ts, "big"),
            int.from_bytes(deadline, "big"),
            reward,
        )


@dataclass
class HandoverSession:
    role: Role
    peer: str
    terms: NegotiatedTerms | None = None
    state: SessionState = SessionState.NEGOTIATING
    abort_reason: str = ""
    abort_check: int | None = None
    peer_certificate: Certificate | None = None
    peer_attestation: AddressAttestation | None = None
    own_attestation: AddressAttestation | None = None
    receive_key: Keypair | None = None  # receiver's fresh transaction key
    data_key: bytes | None = None
    data_hash: bytes | None = None
    prev_data_hash: bytes | None = None
    plaintext: bytes | None = None
    ciphertext: EncryptedProcessData | None = None
    template: eng.HandoverTemplate | None = None
    template_bytes: bytes = b""
    template_identity_sig: bytes = b""
    receiver_signature: bytes = b""
    published_tx_id: bytes | None = None
    token: "eng.ProcessToken | None" = None  # sender side: the token being handed over
    fault_task_id: int | None = None  # injected: template built off the negotiated task

    def advance(self, state: SessionState) -> None:
        if self.state == SessionState.ABORTED:
            raise ProtocolError("session already aborted")
        if _ORDER.index(state) <= _ORDER.index(self.state):
            raise ProtocolError(f"illegal transition {self.state.value} -> {state.value}")
        self.state = state

    def abort(self, reason: str, check: int | None = None) -> None:
        self.state = SessionState.ABORTED
        self.abort_reason = reason
        self.abort_check = check


@dataclass(frozen=True)
class SenderOutcome:
    published: bool
    tx_id: bytes | None = None
    reason: str = ""
    check: int | None = None
    abort_tx_id: bytes | None = None  # extraordinary end, when one was published


# --- participant actor ---------------------------------------------------------------------


@dataclass
class ParticipantConfig:
    step_timeout: float = STEP_TIMEOUT
    logic_cost: float = LOGIC_COST
    acceptable_tasks: frozenset[int] | None = None  # None accepts anything


class Participant:
    """One choreography actor: an identity, a transport endpoint, and the
    engine state it needs to send and receive process tokens."""

    def __init__(
        self,
        identity: Identity,
        root: TrustRoot,
        transport: Transport,
        chain,
        chain_view: eng.ChainView,
        clock: Clock,
        fee_policy: eng.FeePolicy,
        process_model,
        rng: random.Random,
        config: ParticipantConfig | None = None,
    ):
        self.identity = identity
        self.root = root
        self.transport = transport
        self.chain = chain
        self.chain_view = chain_view
        self.clock = clock
        self.fee_policy = fee_policy
        self.model = process_model
        self.rng = rng
        self.config = config or ParticipantConfig()
        self.sessions: dict[tuple[int, str], HandoverSession] = {}
        self.holdings: list[eng.ProcessToken] = []
        self.process_data: dict[int, bytes] = {}
        self.attestation_log: dict[bytes, AddressAttestation] = {}
        self._seen_nonces: set[bytes] = set()
        transport.register(self.name, self.on_request)

    @property
    def name(self) -> str:
        return self.identity.name

    def _charge(self) -> None:
        self.clock.charge(self.config.logic_cost, "logic")

    def _now(self) -> int:
        return int(self.clock.now)

    # --- sender side -------------------------------------------------------------

    def open_session(
        self, peer: str, terms: NegotiatedTerms, token: eng.ProcessToken | None = None
    ) -> HandoverSession:
        session = HandoverSession(Role.SENDER, peer, terms)
        session.token = token if token is not None else self.token_for(terms.process_id)
        self.sessions[(terms.process_id, peer)] = session
        return session

    def token_for(self, process_id: int) -> eng.ProcessToken:
        for token in self.holdings:
            if token.process_id == process_id:
                return token
        raise ProtocolError(f"no token held for process {process_id}")

    def take_tokens(self, process_id: int) -> list[eng.ProcessToken]:
        taken = [t for t in self.holdings if t.process_id == process_id]
        self.holdings = [t for t in self.holdings if t.process_id != process_id]
        return taken

    def _request(self, session: HandoverSession, frame: bytes) -> bytes | None:
        try:
            return self.transport.request(self.name, session.peer, frame)
        except TransportTimeout as exc:
            self.clock.charge(self.config.step_timeout, "logic")
            session.abort(f"timeout: {exc}")
            return None

    def negotiate(self, session: HandoverSession) -> bool:
        """Step 1: mutual identification plus agreement on the terms."""
        self._charge()
        terms_bytes = session.terms.to_bytes()
        payload = pack_fields(
            terms_bytes, self.identity.certificate.to_bytes(), self.identity.sign(terms_bytes)
        )
        reply = self._request(session, make_frame(FrameType.NEGOTIATE, payload))
        if reply is None:
            return False
        kind, body = split_frame(reply)
        if kind != FrameType.ACK:
            session.abort("negotiation: unexpected reply")
            return False
        status, _, detail, cert_bytes, sig = unpack_fields(body, 5)
        if status != b"\x00":
            session.abort(f"negotiation rejected: {detail.decode()}")
            return False
        cert = Certificate.from_bytes(cert_bytes)
        try:
            self.root.check(cert, self._now())
        except CertificateError as exc:
            session.abort(f"identity: {exc}")
            return False
        if not _rsa_verify(cert.public_key_der, sig, terms_bytes):
            session.abort("identity: peer signature over terms invalid")
            return False
        session.peer_certificate = cert
        return True

    def transfer_data(self, session: HandoverSession, process_data: bytes) -> bool:
        """Step 2: ship the encrypted data ahead of the handover."""
        if session.state != SessionState.NEGOTIATING:
            raise ProtocolError(f"cannot transfer data in state {session.state.value}")
        self._charge()
        session.data_key = new_data_key(self.rng)
        session.data_hash = sha256(process_data)
        enc = encrypt_process_data(session.data_key, process_data, self.rng)
        reply = self._request(session, make_frame(FrameType.DATA, enc.to_bytes()))
        if reply is None:
            return False
        kind, body = split_frame(reply)
        if kind != FrameType.ACK or unpack_fields(body, 5)[0] != b"\x00":
            session.abort("data transfer not acknowledged")
            return False
        session.advance(SessionState.DATA_TRANSFERRED)
        return True

    def exchange_addresses(self, session: HandoverSession) -> bool:
        """Step 3: swap identity-signed transaction addresses."""
        if session.state != SessionState.DATA_TRANSFERRED:
            raise ProtocolError(f"cannot exchange addresses in state {session.state.value}")
        self._charge()
        own = make_attestation(
            self.identity, session.token.holder_key.key_hash, session.terms.process_id, self.rng
        )
        session.own_attestation = own
        reply = self._request(session, make_frame(FrameType.ADDR_ATTEST, own.to_bytes()))
        if reply is None:
            return False
        kind, body = split_frame(reply)
        if kind == FrameType.ACK:
            session.abort(f"address exchange rejected: {unpack_fields(body, 5)[2].decode()}")
            return False
        if kind != FrameType.ADDR_ATTEST:
            session.abort("address exchange: unexpected reply")
            return False
        att = AddressAttestation.from_bytes(body)
        try:
            verify_attestation(att, self.root, self._now(), self._seen_nonces)
        except CertificateError as exc:
            session.abort(f"address attestation: {exc}")
            return False
        if session.peer_certificate and att.certificate.subject != session.peer_certificate.subject:
            session.abort("address attestation from a different identity")
            return False
        session.peer_attestation = att
        session.advance(SessionState.ADDRESSES_EXCHANGED)
        return True

    def run_sender(self, session: HandoverSession) -> SenderOutcome:
        """Steps 4-6: template, receiver signature, finalize, broadcast."""
        if session.state != SessionState.ADDRESSES_EXCHANGED:
            raise ProtocolError(f"cannot run handover in state {session.state.value}")
        terms = session.terms
        token = session.token
        task_id = session.fault_task_id or terms.task_id
        self._charge()
        template = eng.build_handover_template(
            token,
            task_id,
            self._now(),
            session.peer_attestation.bitcoin_key_hash,
            session.data_hash,
            self.fee_policy,
        )
        session.template = template
        tx_bytes = serialize_transaction(template.tx)
        identity_sig = self.identity.sign(sha256(tx_bytes + session.data_key))
        payload = pack_fields(
            tx_bytes,
            template.receiver_key_hash,
            template.data_hash or b"",
            session.data_key,
            identity_sig,
        )
        reply = self._request(session, make_frame(FrameType.TEMPLATE_KEY, payload))
        if reply is None:
            return SenderOutcome(False, reason=session.abort_reason)
        session.advance(SessionState.TEMPLATE_SENT)
        kind, body = split_frame(reply)
        if kind == FrameType.ACK:
            status, check_byte, detail, _, _ = unpack_fields(body, 5)
            check = check_byte[0] if status == b"\x01" and check_byte[0] else None
            session.abort(f"receiver rejected template: {detail.decode()}", check)
            abort_tx = self._publish_extraordinary_end(token)
            return SenderOutcome(
                False, reason=session.abort_reason, check=check, abort_tx_id=abort_tx
            )
        if kind != FrameType.RECEIVER_SIG:
            session.abort("unexpected reply to template")
            return SenderOutcome(False, reason=session.abort_reason)
        (receiver_sig,) = unpack_fields(body, 1)
        self._charge()
        try:
            final = eng.finalize_and_sign_as_sender(template, receiver_sig, token.holder_key)
        except eng.EngineError as exc:
            session.abort(f"finalize: {exc}")
            return SenderOutcome(False, reason=session.abort_reason)
        session.receiver_signature = receiver_sig
        session.advance(SessionState.RECEIVER_SIGNED)
        self.clock.charge(self.config.logic_cost, "broadcast")
        result = self.chain.broadcast(final)
        if not result.accepted:
            # receiver keeps the identity-signed template as proof of intent
            session.abort(f"broadcast: {result.reason}")
            return SenderOutcome(False, reason=session.abort_reason)
        session.published_tx_id = final.tx_id
        session.advance(SessionState.PUBLISHED)
        self.attestation_log[final.tx_id] = session.peer_attestation
        self.holdings.remove(token)
        return SenderOutcome(True, tx_id=final.tx_id)

    def _publish_extraordinary_end(self, token: eng.ProcessToken) -> bytes | None:
        tx = eng.build_end(
            token,
            token.holder_key,
            self._now(),
            self.fee_policy,
            extraordinary=True,
        )
        self.clock.charge(self.config.logic_cost, "broadcast")
        result = self.chain.broadcast(tx)
        if result.accepted:
            if token in self.holdings:
                self.holdings.remove(token)
            return tx.tx_id
        return None

    def confirm_receipt(self, session: HandoverSession) -> eng.ProcessToken | None:
        """Receiver-side monitoring: pick the published handover off the
        chain and derive the token it now holds."""
        if session.role != Role.RECEIVER or session.state != SessionState.RECEIVER_SIGNED:
            return None
        template = session.template
        self.clock.charge(self.config.logic_cost, "provider")
        spender = self.chain_view.get_spender(template.tx.inputs[0].outpoint)
        if spender is None:
            return None
        final = self.chain_view.get_transaction(spender)
        if final is None or eng.signing_digest(final) != template.digest:
            session.abort("published transaction does not match the signed template")
            return None
        token = eng.token_from_handover(final, session.receive_key, session.data_hash)
        self.holdings.append(token)
        self.process_data[token.process_id] = session.plaintext
        session.published_tx_id = final.tx_id
        session.advance(SessionState.PUBLISHED)
        return token

    # --- receiver side (frame handlers) ----------------------------------------------

    def on_request(self, src: str, frame: bytes) -> bytes:
        kind, body = split_frame(frame)
        self._charge()
        if kind == FrameType.NEGOTIATE:
            return self._on_negotiate(src, body)
        if kind == FrameType.DATA:
            return self._on_data(src, body)
        if kind == FrameType.ADDR_ATTEST:
            return self._on_addr_attest(src, body)
        if kind == FrameType.TEMPLATE_KEY:
            return self._on_template_key(src, body)
        if kind == FrameType.IDENTITY_QUERY:
            return self._on_identity_query(src, body)
        return _ack(1, f"unexpected frame {kind.name}")

    def _session_for(self, src: str) -> HandoverSession | None:
        for (pid, peer), session in self.sessions.items():
            if peer == src and session.role == Role.RECEIVER and session.state != SessionState.ABORTED:
                return session
        return None

    def _on_negotiate(self, src: str, body: bytes) -> bytes:
        terms_bytes, cert_bytes, sig = unpack_fields(body, 3)
        terms = NegotiatedTerms.from_bytes(terms_bytes)
        cert = Certificate.from_bytes(cert_bytes)
        try:
            self.root.check(cert, self._now())
        except CertificateError as exc:
            return _ack(1, f"identity: {exc}")
        if not _rsa_verify(cert.public_key_der, sig, terms_bytes):
            return _ack(1, "identity: terms signature invalid")
        acceptable = self.config.acceptable_tasks
        if acceptable is not None and terms.task_id not in acceptable:
            return _ack(1, f"task {terms.task_id} not acceptable")
        session = HandoverSession(Role.RECEIVER, src, terms)
        session.peer_certificate = cert
        self.sessions[(terms.process_id, src)] = session
        terms_echo = terms.to_bytes()
        return _ack(
            0, "", self.identity.certificate.to_bytes(), self.identity.sign(terms_echo)
        )

    def _on_data(self, src: str, body: bytes) -> bytes:
        session = self._session_for(src)
        if session is None:
            return _ack(1, "no open session")
        session.ciphertext = EncryptedProcessData.from_bytes(body)
        session.advance(SessionState.DATA_TRANSFERRED)
        return _ack(0, "")

    def _on_addr_attest(self, src: str, body: bytes) -> bytes:
        session = self._session_for(src)
        if session is None:
            return _ack(1, "no open session")
        att = AddressAttestation.from_bytes(body)
        try:
            verify_attestation(att, self.root, self._now(), self._seen_nonces)
        except CertificateError as exc:
            session.abort(f"address attestation: {exc}")
            return _ack(1, str(exc))
        if att.certificate.subject != session.peer_certificate.subject:
            session.abort("attestation identity mismatch")
            return _ack(1, "attestation identity mismatch")
        session.peer_attestation = att
        session.receive_key = Keypair.generate(self.rng)
        own = make_attestation(
            self.identity, session.receive_key.key_hash, session.terms.process_id, self.rng
        )
        session.own_attestation = own
        session.advance(SessionState.ADDRESSES_EXCHANGED)
        return make_frame(FrameType.ADDR_ATTEST, own.to_bytes())

    def _on_template_key(self, src: str, body: bytes) -> bytes:
        session = self._session_for(src)
        if session is None or session.state != SessionState.ADDRESSES_EXCHANGED:
            return _ack(1, "no session awaiting a template")
        tx_bytes, receiver_key_hash, data_hash, data_key, identity_sig = unpack_fields(body, 5)
        if not _rsa_verify(
            session.peer_certificate.public_key_der, identity_sig, sha256(tx_bytes + data_key)
        ):
            session.abort("template identity signature invalid")
            return _ack(1, "template identity signature invalid")
        session.template_bytes = tx_bytes
        session.template_identity_sig = identity_sig
        session.advance(SessionState.TEMPLATE_SENT)

        # the key arrived with the template, so the data can now be opened
        try:
            plaintext = decrypt_process_data(data_key, session.ciphertext)
        except ProtocolError:
            session.abort("process data fails authentication", 2)
            return _reject(2, "process data fails authentication")
        received_hash = sha256(plaintext)
        template = eng.HandoverTemplate(
            deserialize_transaction(tx_bytes),
            receiver_key_hash,
            data_hash or None,
        )
        session.template = template
        expected = eng.ExpectedTerms(
            process_id=session.terms.process_id,
            task_id=session.terms.task_id,
            timestamp=session.terms.timestamp,
            receiver_key_hash=session.receive_key.key_hash,
            data_hash=received_hash,
            prev_data_hash=session.prev_data_hash,
        )
        self.clock.charge(self.config.logic_cost, "provider")
        try:
            verdict = eng.validate_template(template, expected, self.model, self.chain_view)
        except (eng.UnresolvableAncestor, eng.BrokenLineage) as exc:
            session.abort(f"history unresolvable: {exc}")
            return _ack(2, f"history unresolvable: {exc}")
        if not verdict.accepted:
            session.abort(f"check {verdict.failed_check}: {verdict.reason}", verdict.failed_check)
            return _reject(verdict.failed_check, verdict.reason)
        try:
            signature = eng.sign_as_receiver(template, session.receive_key)
        except eng.EngineError as exc:
            session.abort(f"signing: {exc}")
            return _ack(1, str(exc))
        session.data_key = data_key
        session.plaintext = plaintext
        session.data_hash = received_hash
        session.receiver_signature = signature
        session.advance(SessionState.RECEIVER_SIGNED)
        return make_frame(FrameType.RECEIVER_SIG, pack_fields(signature))

    def _on_identity_query(self, src: str, body: bytes) -> bytes:
        (tx_id,) = unpack_fields(body, 1)
        att = self.attestation_log.get(tx_id)
        if att is None:
            return make_frame(FrameType.IDENTITY_REPLY, pack_fields(b"\x00", b""))
        return make_frame(FrameType.IDENTITY_REPLY, pack_fields(b"\x01", att.to_bytes()))


def _ack(status: int, detail: str, cert: bytes = b"", sig: bytes = b"") -> bytes:
    return make_frame(
        FrameType.ACK, pack_fields(bytes([status]), b"\x00", detail.encode(), cert, sig)
    )


def _reject(check: int, detail: str) -> bytes:
    return make_frame(
        FrameType.ACK, pack_fields(b"\x01", bytes([check]), detail.encode(), b"", b"")
    )


def run_receiver(participant: Participant, src: str, frame: bytes) -> bytes:
    """Receiver-side step driver; answers one sender frame. The heavy step
    is the template check (step 5), which signs only after the four
    validation checks accept."""
    return participant.on_request(src, frame)


# --- owner monitoring -----------------------------------------------------------------


@dataclass(frozen=True)
class ProgressEntry:
    tx_id: bytes
    kind: str
    task_id: int | None
    participant: str | None
    gap: bool = False


@dataclass(frozen=True)
class ProgressReport:
    process_id: int
    entries: tuple[ProgressEntry, ...]

    @property
    def identities(self) -> dict[bytes, str]:
        return {e.tx_id: e.participant for e in self.entries if e.participant}


class OwnerMonitor:
    """Pull-based monitoring: observe the chain, then ask each sender for
    the identity of its receiver, one handover frontier at a time."""

    def __init__(
        self,
        owner: Participant,
        start_tx_id: bytes,
        process_id: int,
    ):
        self.owner = owner
        self.start_tx_id = start_tx_id
        self.process_id = process_id
        # holder of each token outpoint, as far as identities are known
        self._holder: dict[tuple[bytes, int], str | None] = {}
        self._entries: dict[bytes, ProgressEntry] = {}

    def collect(self) -> ProgressReport:
        owner = self.owner
        view = owner.chain_view
        start = view.get_transaction(self.start_tx_id)
        if start is None:
            return ProgressReport(self.process_id, ())
        index, _ = start.token_outputs[0]
        frontier = [(self.start_tx_id, index)]
        if (self.start_tx_id, index) not in self._holder:
            self._holder[(self.start_tx_id, index)] = owner.name
        while frontier:
            outpoint = frontier.pop(0)
            owner.clock.charge(owner.config.logic_cost, "provider")
            spender = view.get_spender(outpoint)
            if spender is None:
                continue
            tx = view.get_transaction(spender)
            if tx is None or tx.kind is None:
                continue
            kind = tx.kind.value
            block = tx.data_block
            sender = self._holder.get(outpoint)
            if spender not in self._entries:
                if kind == "handover":
                    participant, gap = self._resolve_identity(spender, sender)
                    self._entries[spender] = ProgressEntry(
                        spender, kind, block.task_id, participant, gap
                    )
                else:
                    self._entries[spender] = ProgressEntry(spender, kind, None, sender)
            entry = self._entries[spender]
            next_holder = entry.participant if kind == "handover" else sender
            for idx, _ in tx.token_outputs:
                self._holder[(spender, idx)] = next_holder
                frontier.append((spender, idx))
        return ProgressReport(self.process_id, tuple(self._entries.values()))

    def _resolve_identity(self, tx_id: bytes, sender: str | None) -> tuple[str | None, bool]:
        """Ask the handover's sender who received the token."""
        owner = self.owner
        if sender is None:
            return None, True
        if sender == owner.name:
            att = owner.attestation_log.get(tx_id)
            return (att.certificate.subject, False) if att else (None, True)
        owner.clock.charge(owner.config.logic_cost, "logic")
        try:
            reply = owner.transport.request(
                owner.name, sender, make_frame(FrameType.IDENTITY_QUERY, pack_fields(tx_id))
            )
        except TransportTimeout:
            owner.clock.charge(owner.config.step_timeout, "logic")
            return None, True
        kind, body = split_frame(reply)
        if kind != FrameType.IDENTITY_REPLY:
            return None, True
        found, att_bytes = unpack_fields(body, 2)
        if found != b"\x01":
            return None, True
        att = AddressAttestation.from_bytes(att_bytes)
        try:
            owner.root.check(att.certificate, int(owner.clock.now))
            if not _rsa_verify(att.certificate.public_key_der, att.signature, att.signed_payload()):
                raise CertificateError("attestation signature invalid")
        except CertificateError:
            return None, True
        return att.certificate.subject, False
