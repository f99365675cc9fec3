"""Hierarchical FL blockchain plus the incident-message chain.

Microblocks carry one local model commit each and hang off the latest
keyblock in parallel.  The RSU seals a keyblock over a fixed number of them
together with the aggregated global model.  ``LedgerCopy`` values are never
mutated; every operation returns a new copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .digest import ZERO_DIGEST, decode_fields, digest_fields, encode_fields, sha256

GENESIS_PAYLOAD = sha256(b"vanetchain genesis keyblock")
DUMP_HEADER = "vanetchain-ledger 1"


class LedgerError(Exception):
    pass


class InvalidBlockError(LedgerError):
    pass


class StaleAnchorError(LedgerError):
    """A microblock anchors a keyblock that is not the ledger's latest."""


class InsufficientMicroblocksError(LedgerError):
    def __init__(self, available: int, required: int):
        self.available = available
        self.required = required
        self.shortfall = required - available
        super().__init__(f"{available} microblocks anchored to the latest keyblock, "
                         f"{required} required (short by {self.shortfall})")


def _model_digest(model) -> bytes:
    if isinstance(model, (bytes, bytearray)):
        return bytes(model)
    return model.digest()


@dataclass(frozen=True)
class Microblock:
    prev_keyblock_hash: bytes
    payload_hash: bytes
    producer_pseudonym: str
    k: int
    timestamp: float
    block_hash: bytes

    def fields(self) -> tuple:
        return (self.prev_keyblock_hash, self.payload_hash, self.producer_pseudonym,
                int(self.k), float(self.timestamp))

    def compute_hash(self) -> bytes:
        return digest_fields(b"MB", *self.fields())

    @cached_property
    def valid(self) -> bool:
        return self.compute_hash() == self.block_hash

    @classmethod
    def create(cls, prev_keyblock_hash: bytes, payload_hash: bytes, producer_pseudonym: str,
               k: int, timestamp: float) -> "Microblock":
        draft = cls(prev_keyblock_hash, payload_hash, producer_pseudonym, int(k), float(timestamp), b"")
        return cls(prev_keyblock_hash, payload_hash, producer_pseudonym, int(k), float(timestamp),
                   draft.compute_hash())


@dataclass(frozen=True)
class Keyblock:
    prev_keyblock_hash: bytes
    microblock_hashes: tuple
    global_model_hash: bytes
    k: int
    block_hash: bytes

    def fields(self) -> tuple:
        return (self.prev_keyblock_hash, tuple(self.microblock_hashes), self.global_model_hash, int(self.k))

    def compute_hash(self) -> bytes:
        return digest_fields(b"KB", *self.fields())

    @cached_property
    def valid(self) -> bool:
        return self.compute_hash() == self.block_hash

    @classmethod
    def create(cls, prev_keyblock_hash: bytes, microblock_hashes, global_model_hash: bytes,
               k: int) -> "Keyblock":
        hashes = tuple(microblock_hashes)
        draft = cls(prev_keyblock_hash, hashes, global_model_hash, int(k), b"")
        return cls(prev_keyblock_hash, hashes, global_model_hash, int(k), draft.compute_hash())


@dataclass(frozen=True)
class MessageBlock:
    prev_hash: bytes
    incident_time: float
    incident_position: tuple
    relay_pseudonym: str
    h: int
    block_hash: bytes

    def fields(self) -> tuple:
        x, y = self.incident_position
        return (self.prev_hash, float(self.incident_time), (float(x), float(y)),
                self.relay_pseudonym, int(self.h))

    def compute_hash(self) -> bytes:
        return digest_fields(b"MSG", *self.fields())

    @cached_property
    def valid(self) -> bool:
        return self.compute_hash() == self.block_hash

    @classmethod
    def create(cls, prev_hash: bytes, incident_time: float, incident_position, relay_pseudonym: str,
               h: int) -> "MessageBlock":
        pos = (float(incident_position[0]), float(incident_position[1]))
        draft = cls(prev_hash, float(incident_time), pos, relay_pseudonym, int(h), b"")
        return cls(prev_hash, float(incident_time), pos, relay_pseudonym, int(h), draft.compute_hash())


GENESIS = Keyblock.create(ZERO_DIGEST, (), GENESIS_PAYLOAD, 0)


@dataclass(frozen=True)
class LedgerCopy:
    keyblocks: tuple = (GENESIS,)
    microblocks: Mapping = field(default_factory=lambda: MappingProxyType({}))
    message_chain: tuple = ()

    def __post_init__(self):
        if not isinstance(self.microblocks, MappingProxyType):
            object.__setattr__(self, "microblocks", MappingProxyType(dict(self.microblocks)))

    @property
    def latest(self) -> Keyblock:
        return self.keyblocks[-1]

    @property
    def microblock_count(self) -> int:
        return sum(len(s) for s in self.microblocks.values())

    def anchored_to(self, keyblock_hash: bytes) -> frozenset:
        return self.microblocks.get(keyblock_hash, frozenset())

    def find_microblock(self, block_hash: bytes) -> Microblock | None:
        for blocks in self.microblocks.values():
            for mb in blocks:
                if mb.block_hash == block_hash:
                    return mb
        return None

    def __eq__(self, other):
        if not isinstance(other, LedgerCopy):
            return NotImplemented
        return (self.keyblocks == other.keyblocks and dict(self.microblocks) == dict(other.microblocks)
                and self.message_chain == other.message_chain)

    __hash__ = None


def new_ledger() -> LedgerCopy:
    return LedgerCopy()


def _with_microblocks(ledger: LedgerCopy, microblocks: dict) -> LedgerCopy:
    return LedgerCopy(ledger.keyblocks, MappingProxyType(microblocks), ledger.message_chain)


def append_microblock(ledger: LedgerCopy, mb: Microblock, guard_verdict: bool) -> LedgerCopy:
    """Store ``mb`` in the parallel set of the latest keyblock if the guard passed it."""
    if not guard_verdict:
        return ledger
    if not mb.valid:
        raise InvalidBlockError("microblock hash does not match its fields")
    if mb.prev_keyblock_hash != ledger.latest.block_hash:
        raise StaleAnchorError(f"microblock anchors {mb.prev_keyblock_hash.hex()[:12]}, "
                               f"latest keyblock is {ledger.latest.block_hash.hex()[:12]}")
    current = ledger.anchored_to(mb.prev_keyblock_hash)
    if mb in current:
        return ledger
    blocks = dict(ledger.microblocks)
    blocks[mb.prev_keyblock_hash] = current | {mb}
    return _with_microblocks(ledger, blocks)


def select_for_seal(ledger: LedgerCopy, n_required: int) -> list[Microblock]:
    """Earliest timestamps first, ties broken by producer pseudonym then hash."""
    anchor = ledger.latest.block_hash
    k_next = ledger.latest.k + 1
    eligible = [mb for mb in ledger.anchored_to(anchor) if mb.k == k_next]
    eligible.sort(key=lambda mb: (mb.timestamp, mb.producer_pseudonym, mb.block_hash))
    if len(eligible) < n_required:
        raise InsufficientMicroblocksError(len(eligible), n_required)
    return eligible[:n_required]


def seal_keyblock(ledger: LedgerCopy, global_model, n_required: int) -> tuple[LedgerCopy, Keyblock]:
    """Append a keyblock over ``n_required`` microblocks anchored to the latest keyblock.

    Microblocks not chosen stay stored under their (now superseded) anchor;
    they can never be sealed later because the next keyblock only looks at
    its own anchor.
    """
    if n_required < 1:
        raise ValueError("n_required must be at least 1")
    chosen = select_for_seal(ledger, n_required)
    kb = Keyblock.create(ledger.latest.block_hash, [mb.block_hash for mb in chosen],
                         _model_digest(global_model), ledger.latest.k + 1)
    return LedgerCopy(ledger.keyblocks + (kb,), ledger.microblocks, ledger.message_chain), kb


def append_message_block(ledger: LedgerCopy, block: MessageBlock) -> LedgerCopy:
    expected = ledger.message_chain[-1].block_hash if ledger.message_chain else ZERO_DIGEST
    if block.prev_hash != expected:
        raise StaleAnchorError("message block does not extend the message chain tip")
    if not block.valid:
        raise InvalidBlockError("message block hash does not match its fields")
    return LedgerCopy(ledger.keyblocks, ledger.microblocks, ledger.message_chain + (block,))


# --------------------------------------------------------------------------
# merge / verify


def _valid_keyblock_prefix(chain: tuple) -> tuple:
    if not chain or chain[0] != GENESIS:
        return (GENESIS,)
    out = [GENESIS]
    for kb in chain[1:]:
        prev = out[-1]
        if not kb.valid or kb.prev_keyblock_hash != prev.block_hash or kb.k != prev.k + 1:
            break
        out.append(kb)
    return tuple(out)


def _valid_message_prefix(chain: tuple) -> tuple:
    out = []
    prev = ZERO_DIGEST
    for blk in chain:
        if not blk.valid or blk.prev_hash != prev:
            break
        out.append(blk)
        prev = blk.block_hash
    return tuple(out)


def _pick_chain(a: tuple, b: tuple) -> tuple:
    if a is b or a == b:
        return a
    if len(a) != len(b):
        return a if len(a) > len(b) else b
    if not a:
        return a
    # Equal length forks: lowest tip hash wins so the choice is order-free.
    return a if a[-1].block_hash <= b[-1].block_hash else b


def merge_ledgers(mine: LedgerCopy, theirs: LedgerCopy) -> LedgerCopy:
    """Union of microblock sets, longest valid keyblock and message chains.

    Both inputs are re-verified; a block failing its hash or link check is
    dropped together with its descendants.  Microblocks whose anchor is not in
    the chosen keyblock chain are dropped.
    """
    if mine is theirs:
        return mine
    kb_mine = _valid_keyblock_prefix(mine.keyblocks)
    kb_theirs = _valid_keyblock_prefix(theirs.keyblocks)
    keyblocks = _pick_chain(kb_mine, kb_theirs)
    messages = _pick_chain(_valid_message_prefix(mine.message_chain),
                           _valid_message_prefix(theirs.message_chain))
    anchors = {kb.block_hash for kb in keyblocks}
    merged = {}
    for anchor in anchors:
        a = mine.microblocks.get(anchor, frozenset())
        b = theirs.microblocks.get(anchor, frozenset())
        if a is b or not b:
            union = a
        elif not a:
            union = b
        else:
            union = a | b
        if not union:
            continue
        if any(not mb.valid or mb.prev_keyblock_hash != anchor for mb in union):
            union = frozenset(mb for mb in union if mb.valid and mb.prev_keyblock_hash == anchor)
        if union:
            merged[anchor] = union
    return LedgerCopy(keyblocks, MappingProxyType(merged), messages)


@dataclass(frozen=True)
class Finding:
    kind: str
    index: int
    block_hash: str
    reason: str


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    findings: tuple
    checked: int

    def __bool__(self):
        return self.ok


def verify_chain(ledger: LedgerCopy) -> ChainReport:
    """Recompute every hash and link; never uses cached validity."""
    findings = []
    checked = 0
    by_hash = {}
    for anchor, blocks in ledger.microblocks.items():
        for mb in blocks:
            by_hash[mb.block_hash] = mb
    keyblocks = ledger.keyblocks
    if not keyblocks:
        findings.append(Finding("keyblock", 0, "", "ledger has no genesis keyblock"))
    anchors = set()
    for i, kb in enumerate(keyblocks):
        checked += 1
        tag = kb.block_hash.hex()
        if kb.compute_hash() != kb.block_hash:
            findings.append(Finding("keyblock", i, tag, "hash does not recompute"))
        if i == 0:
            if kb.prev_keyblock_hash != ZERO_DIGEST or kb.global_model_hash != GENESIS_PAYLOAD \
                    or kb.microblock_hashes or kb.k != 0:
                findings.append(Finding("keyblock", 0, tag, "genesis content differs from the constant"))
        else:
            prev = keyblocks[i - 1]
            if kb.prev_keyblock_hash != prev.block_hash:
                findings.append(Finding("keyblock", i, tag, "prev_keyblock_hash does not link"))
            if kb.k != prev.k + 1:
                findings.append(Finding("keyblock", i, tag, "iteration index does not increase by one"))
            if not kb.microblock_hashes:
                findings.append(Finding("keyblock", i, tag, "seals no microblocks"))
            if len(set(kb.microblock_hashes)) != len(kb.microblock_hashes):
                findings.append(Finding("keyblock", i, tag, "duplicate microblock hash"))
            for h in kb.microblock_hashes:
                mb = by_hash.get(h)
                if mb is None:
                    findings.append(Finding("keyblock", i, tag, f"missing microblock {h.hex()[:12]}"))
                elif mb.prev_keyblock_hash != kb.prev_keyblock_hash:
                    findings.append(Finding("keyblock", i, tag,
                                            f"microblock {h.hex()[:12]} anchored elsewhere"))
        anchors.add(kb.block_hash)
    for anchor, blocks in ledger.microblocks.items():
        for j, mb in enumerate(sorted(blocks, key=lambda b: b.block_hash)):
            checked += 1
            tag = mb.block_hash.hex()
            if mb.compute_hash() != mb.block_hash:
                findings.append(Finding("microblock", j, tag, "hash does not recompute"))
            if mb.prev_keyblock_hash != anchor:
                findings.append(Finding("microblock", j, tag, "stored under the wrong anchor"))
            if anchor not in anchors:
                findings.append(Finding("microblock", j, tag, "anchor keyblock not in chain"))
    prev = ZERO_DIGEST
    for i, blk in enumerate(ledger.message_chain):
        checked += 1
        tag = blk.block_hash.hex()
        if blk.compute_hash() != blk.block_hash:
            findings.append(Finding("message", i, tag, "hash does not recompute"))
        if blk.prev_hash != prev:
            findings.append(Finding("message", i, tag, "prev_hash does not link"))
        prev = blk.block_hash
    return ChainReport(not findings, tuple(findings), checked)


# --------------------------------------------------------------------------
# dump / load
#
# One header line, then one line per block: a type letter (K, M, E), a
# space, and the hex of the block's canonical field encoding including its
# stored hash.  Keyblocks in chain order, microblocks by (anchor position,
# block hash), message blocks in chain order.  LF line endings.


def _block_record(block) -> bytes:
    return encode_fields(*block.fields(), block.block_hash)


def dump_ledger(ledger: LedgerCopy) -> bytes:
    lines = [DUMP_HEADER]
    for kb in ledger.keyblocks:
        lines.append("K " + _block_record(kb).hex())
    position = {kb.block_hash: i for i, kb in enumerate(ledger.keyblocks)}
    anchors = sorted(ledger.microblocks, key=lambda a: (position.get(a, len(position)), a))
    for anchor in anchors:
        for mb in sorted(ledger.microblocks[anchor], key=lambda b: b.block_hash):
            lines.append("M " + _block_record(mb).hex())
    for blk in ledger.message_chain:
        lines.append("E " + _block_record(blk).hex())
    return ("\n".join(lines) + "\n").encode("ascii")


def load_ledger(data: bytes) -> LedgerCopy:
    text = data.decode("ascii")
    lines = text.split("\n")
    if not lines or lines[0] != DUMP_HEADER:
        raise ValueError("not a ledger dump (bad header)")
    if lines[-1] != "":
        raise ValueError("ledger dump must end with a newline")
    keyblocks, messages = [], []
    micro: dict = {}
    for lineno, line in enumerate(lines[1:-1], 2):
        kind, _, payload = line.partition(" ")
        try:
            values = decode_fields(bytes.fromhex(payload))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        try:
            if kind == "K":
                prev, hashes, model_hash, k, block_hash = values
                keyblocks.append(Keyblock(prev, tuple(hashes), model_hash, k, block_hash))
            elif kind == "M":
                prev, payload_hash, producer, k, ts, block_hash = values
                mb = Microblock(prev, payload_hash, producer, k, ts, block_hash)
                micro.setdefault(prev, set()).add(mb)
            elif kind == "E":
                prev, t, pos, relay, h, block_hash = values
                messages.append(MessageBlock(prev, t, tuple(pos), relay, h, block_hash))
            else:
                raise ValueError(f"unknown record type {kind!r}")
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: malformed record ({exc})") from None
    return LedgerCopy(tuple(keyblocks), {a: frozenset(s) for a, s in micro.items()}, tuple(messages))


def save_ledger(ledger: LedgerCopy, path) -> None:
    Path(path).write_bytes(dump_ledger(ledger))


def read_ledger(path) -> LedgerCopy:
    return load_ledger(Path(path).read_bytes())
