"""Emulated SCADA channel and the in-path adversary.

Frames pass through :class:`Channel.transmit`, which either drops them
(DoS), mutates them (MODP) or forwards them untouched after a fixed latency.
Every mutation leaves a :class:`PerturbationRecord`.
"""

from __future__ import annotations

import enum
import math
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable

from . import dnp3
from .dnp3 import AppFunction, DecodedMessage, Diagnostic

M2O = "master_to_outstation"
O2M = "outstation_to_master"


class AttackConfigError(ValueError):
    pass


class Transform(str, enum.Enum):
    ADD_OFFSET = "ADD_OFFSET"
    INVERT_BITS = "INVERT_BITS"
    MULTIPLY = "MULTIPLY"
    REPLACE_RANDOM = "REPLACE_RANDOM"
    NULLIFY = "NULLIFY"


VALUE_TRANSFORMS = (Transform.ADD_OFFSET, Transform.MULTIPLY, Transform.NULLIFY)


@dataclass
class ModpAttack:
    """Modify-packets attack on one association (or all when ``target`` is None).

    ``start_byte`` is a wire offset from the first sync byte of the message;
    only payload at or after it is touched.
    """

    transform: Transform
    param: float = 0.0
    target: int | None = None
    direction: str = M2O
    match: AppFunction | None = None
    start_byte: int = 10
    window: tuple[float, float] = (0.0, math.inf)
    fixup_crc: bool = True
    seed: int = 0
    name: str = "modp"

    def __post_init__(self):
        self.transform = Transform(self.transform)
        if self.direction not in (M2O, O2M):
            raise AttackConfigError(f"direction must be {M2O!r} or {O2M!r}, got {self.direction!r}")
        if self.match is not None:
            self.match = AppFunction(self.match)
        if not self.window[0] < self.window[1]:
            raise AttackConfigError(f"{self.name}: window {self.window} is not well ordered")
        if self.start_byte < 0:
            raise AttackConfigError(f"{self.name}: start_byte must be non-negative")

    def covers(self, t: float) -> bool:
        return self.window[0] <= t < self.window[1]


@dataclass
class DosAttack:
    """Total frame loss on an association (all associations when ``target`` is None)."""

    target: int | None = None
    window: tuple[float, float] = (0.0, math.inf)
    mode: str = "DROP_ALL"
    name: str = "dos"

    def __post_init__(self):
        if self.mode != "DROP_ALL":
            raise AttackConfigError(f"unsupported DoS mode {self.mode!r}")
        if not self.window[0] < self.window[1]:
            raise AttackConfigError(f"{self.name}: window {self.window} is not well ordered")

    def covers(self, t: float) -> bool:
        return self.window[0] <= t < self.window[1]


@dataclass(frozen=True)
class PerturbationRecord:
    time: float
    attack: str
    src: int
    dest: int
    original: bytes
    perturbed: bytes
    diff: tuple[tuple[int, int, int], ...]                   # (offset, before, after)
    value_delta: tuple[tuple[int, float, float], ...] = ()   # (point index, y, y_hat)
    warning: str = ""

    @property
    def mutated(self) -> bool:
        return not self.warning

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "attack": self.attack,
            "src": self.src,
            "dest": self.dest,
            "original": self.original.hex(),
            "perturbed": self.perturbed.hex(),
            "diff": [list(d) for d in self.diff],
            "value_delta": [list(d) for d in self.value_delta],
            "warning": self.warning,
        }


@dataclass(frozen=True)
class Delivery:
    time: float
    data: bytes
    src: int
    dest: int
    record: PerturbationRecord | None = None


# --- helpers ------------------------------------------------------------------------

def frame_addresses(data: bytes) -> tuple[int, int] | None:
    """(src, dest) from the first link header, without CRC checks."""
    if len(data) < 8 or data[:2] != dnp3.SYNC:
        return None
    return int.from_bytes(data[6:8], "little"), int.from_bytes(data[4:6], "little")


def frame_direction(data: bytes) -> str | None:
    if len(data) < 4 or data[:2] != dnp3.SYNC:
        return None
    return M2O if data[3] & dnp3.DIR else O2M


def _frame_spans(data: bytes) -> list[tuple[int, int]]:
    """(start, n_user) of each frame in a message, trusting length bytes."""
    spans = []
    pos = 0
    while pos + 10 <= len(data) and data[pos:pos + 2] == dnp3.SYNC:
        n_user = max(data[pos + 2] - 5, 0)
        spans.append((pos, n_user))
        pos += dnp3.frame_size(n_user)
    return spans


def app_byte_positions(data: bytes) -> list[int]:
    """Wire offset of every application-layer byte (transport headers skipped)."""
    out = []
    for start, n_user in _frame_spans(data):
        for k in range(1, n_user):
            out.append(start + dnp3.user_data_offset(k))
    return out


def user_byte_positions(data: bytes) -> list[int]:
    out = []
    for start, n_user in _frame_spans(data):
        for k in range(n_user):
            pos = start + dnp3.user_data_offset(k)
            if pos < len(data):
                out.append(pos)
    return out


def value_fields(msg: DecodedMessage) -> list[tuple[int, int]]:
    """(application byte offset, point index) of every float value, in order."""
    frag = msg.fragment
    out = []
    pos = 4 if frag.function == AppFunction.RESPONSE else 2
    for ob in frag.objects:
        pos += 3
        q = ob.qualifier
        if q == 0x06:
            continue
        if q in (0x00, 0x01):
            pos += 2 if q == 0x00 else 4
            idx_width = 0
        else:
            idx_width = 1 if q == 0x17 else 2
            pos += idx_width
        if not ob.values:
            continue
        _, size, value_first = dnp3._POINT_CODECS[(ob.group, ob.variation)]
        for point in ob.point_indices:
            pos += idx_width
            out.append((pos if value_first else pos + 1, point))
            pos += size
    return out


def value_start_byte(data: bytes, k: int) -> int:
    """Wire offset of the k-th float value of a message (for ``start_byte``)."""
    msg = dnp3.decode_message(data)
    if isinstance(msg, Diagnostic):
        raise AttackConfigError(f"message does not decode: {msg}")
    fields = value_fields(msg)
    if not 0 <= k < len(fields):
        raise AttackConfigError(f"message carries {len(fields)} values, no index {k}")
    return app_byte_positions(data)[fields[k][0]]


def _refresh_crcs(data: bytearray) -> bytes:
    out = bytearray()
    for start, n_user in _frame_spans(bytes(data)):
        out += dnp3.fix_crcs(data[start:start + dnp3.frame_size(n_user)])
    tail = sum(dnp3.frame_size(n) for _, n in _frame_spans(bytes(data)))
    out += data[tail:]
    return bytes(out)


_F32 = struct.Struct("<f")


def apply_modp(data: bytes, attack: ModpAttack, t: float = 0.0,
               run_seed: int = 0) -> tuple[bytes, PerturbationRecord]:
    """Apply ``attack`` to one message. Returns the new bytes and its record.

    Value transforms rewrite decoded float32 fields; byte transforms act on
    those fields' raw bytes (or on all user data when the message does not
    decode). Random bytes depend only on the two seeds and the frame. A
    ``start_byte`` past the end leaves the bytes alone and returns a record
    carrying a warning.
    """
    src, dest = frame_addresses(data) or (-1, -1)
    original = bytes(data)
    if attack.start_byte >= len(original):
        return original, PerturbationRecord(t, attack.name, src, dest, original, original, (),
                                            warning=f"start_byte {attack.start_byte} beyond {len(original)}-byte frame")
    buf = bytearray(original)
    msg = dnp3.decode_message(original)
    deltas = []
    if isinstance(msg, DecodedMessage):
        app_pos = app_byte_positions(original)
        targets = []
        for a, point in value_fields(msg):
            wire = [app_pos[a + j] for j in range(4)]
            if wire[0] >= attack.start_byte:
                targets.append((point, wire))
        for point, wire in targets:
            raw = bytes(buf[w] for w in wire)
            y = _F32.unpack(raw)[0]
            new = _mutate(raw, attack, original, run_seed)
            for w, b in zip(wire, new):
                buf[w] = b
            deltas.append((point, y, _F32.unpack(new)[0]))
    elif attack.transform not in VALUE_TRANSFORMS:
        pos = [p for p in user_byte_positions(original) if p >= attack.start_byte]
        new = _mutate(bytes(buf[p] for p in pos), attack, original, run_seed)
        for p, b in zip(pos, new):
            buf[p] = b
    if attack.fixup_crc:
        perturbed = _refresh_crcs(buf)
    else:
        perturbed = bytes(buf)
    diff = tuple((k, a, b) for k, (a, b) in enumerate(zip(original, perturbed)) if a != b)
    warning = "" if diff or deltas else "no targeted payload at or after start_byte"
    return perturbed, PerturbationRecord(t, attack.name, src, dest, original, perturbed, diff,
                                         tuple(deltas), warning)


def _mutate(raw: bytes, attack: ModpAttack, frame: bytes = b"", run_seed: int = 0) -> bytes:
    kind = attack.transform
    if kind == Transform.INVERT_BITS:
        return bytes(b ^ 0xFF for b in raw)
    if kind == Transform.REPLACE_RANDOM:
        # seeded by (seeds, frame) so replaying a config replays the same bytes
        rng = random.Random(f"{run_seed}:{attack.seed}:{frame.hex()}:{raw.hex()}")
        return bytes(rng.randrange(256) for _ in raw)
    # value transforms work on float32 fields, 4 bytes at a time
    out = bytearray()
    for k in range(0, len(raw) - len(raw) % 4, 4):
        y = _F32.unpack(raw[k:k + 4])[0]
        if kind == Transform.ADD_OFFSET:
            y_hat = y + attack.param
        elif kind == Transform.MULTIPLY:
            y_hat = y * attack.param
        else:
            y_hat = 0.0
        try:
            out += _F32.pack(y_hat)
        except OverflowError:
            out += _F32.pack(math.copysign(math.inf, y_hat))
    return bytes(out)


# --- channel -------------------------------------------------------------------------

@dataclass
class LinkStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    mutated: int = 0


class Channel:
    """Fixed-latency channel carrying the attack schedule.

    With a constant latency delivery order equals send order per direction,
    so FIFO needs no queue here; the event loop owns the in-flight frames.
    """

    def __init__(self, latency_ms: float = 5.0, attacks: Iterable = (), seed: int = 0):
        if latency_ms < 0:
            raise AttackConfigError("latency must be non-negative")
        self.latency = latency_ms / 1000.0
        self.attacks = list(attacks)
        self.seed = seed
        self.records: list[PerturbationRecord] = []
        self.stats: dict[int, LinkStats] = {}

    def _stats(self, assoc: int) -> LinkStats:
        st = self.stats.get(assoc)
        if st is None:
            st = self.stats[assoc] = LinkStats()
        return st

    def transmit(self, data: bytes, t_now: float) -> Delivery | None:
        addr = frame_addresses(data)
        direction = frame_direction(data)
        if addr is None:
            return Delivery(t_now + self.latency, bytes(data), -1, -1)
        src, dest = addr
        assoc = dest if direction == M2O else src
        st = self._stats(assoc)
        st.sent += 1
        for atk in self.attacks:
            if isinstance(atk, DosAttack) and atk.covers(t_now) and atk.target in (None, assoc):
                st.dropped += 1
                return None
        record = None
        out = bytes(data)
        for atk in self.attacks:
            if not isinstance(atk, ModpAttack) or not atk.covers(t_now):
                continue
            if atk.target not in (None, assoc) or atk.direction != direction:
                continue
            if atk.match is not None:
                msg = dnp3.decode_message(out)
                if isinstance(msg, Diagnostic) or msg.fragment.function != atk.match:
                    continue
            out, rec = apply_modp(out, atk, t_now, self.seed)
            self.records.append(rec)
            if rec.mutated:
                st.mutated += 1
                record = rec
        st.delivered += 1
        return Delivery(t_now + self.latency, out, src, dest, record)

    @property
    def mutations(self) -> int:
        return sum(1 for r in self.records if r.mutated)


def transmit(channel: Channel, frame_bytes: bytes, t_now: float) -> Delivery | None:
    return channel.transmit(frame_bytes, t_now)


# --- scoring -------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackCost:
    damage: float
    similarity: float
    score: float


def attack_cost(report, lam: float, baseline=None) -> AttackCost:
    """Post-hoc adversary score ``f + lam * g`` of an attacked run.

    ``f`` is the rise in total operational cost over ``baseline``; ``g`` is
    the mean absolute value perturbation over every mutated value.
    """
    if baseline is None:
        raise AttackConfigError("attack_cost needs a baseline report")
    if lam < 0:
        raise AttackConfigError("lambda must be non-negative")
    damage = report.total_operational_cost - baseline.total_operational_cost
    diffs = []
    for rec in report.perturbations:
        for _, y, y_hat in rec.value_delta:
            d = abs(y_hat - y)
            if math.isfinite(d):
                diffs.append(d)
    similarity = sum(diffs) / len(diffs) if diffs else 0.0
    return AttackCost(damage, similarity, damage + lam * similarity)


def attack_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", "modp").lower()
    if "window" in d:
        lo, hi = d["window"]
        d["window"] = (float(lo), math.inf if hi is None else float(hi))
    if kind == "dos":
        return DosAttack(**d)
    if kind == "modp":
        if isinstance(d.get("match"), str):
            d["match"] = AppFunction[d["match"]]
        return ModpAttack(**d)
    raise AttackConfigError(f"unknown attack type {kind!r}")


def attack_to_dict(a) -> dict:
    hi = a.window[1]
    window = [a.window[0], None if math.isinf(hi) else hi]
    if isinstance(a, DosAttack):
        return {"type": "dos", "name": a.name, "target": a.target, "window": window, "mode": a.mode}
    return {
        "type": "modp", "name": a.name, "target": a.target, "direction": a.direction,
        "match": a.match.name if a.match is not None else None, "start_byte": a.start_byte,
        "transform": a.transform.value, "param": a.param, "window": window,
        "fixup_crc": a.fixup_crc, "seed": a.seed,
    }
