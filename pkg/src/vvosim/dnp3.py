"""DNP3 subset: link framing with CRC-16, transport segmentation, and the
application objects this testbed exchanges.

Supported application objects:

* g30v5 analog input, single-precision float with flag (read / response)
* g40v3 analog output status, single-precision float with flag (response)
* g41v3 analog output block, single-precision float (direct operate)
* g60v1 class 0 data (read request header only)

Decoding never raises on hostile bytes; failures come back as
:class:`Diagnostic` values.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

from ._kernels import crc16_dnp

SYNC = b"\x05\x64"
MAX_USER_DATA = 250
MAX_FRAME = 292
MAX_TRANSPORT_PAYLOAD = MAX_USER_DATA - 1
MAX_FRAGMENT = 2048

MASTER_ADDRESS = 1

# link control bits
DIR = 0x80
PRM = 0x40
LINK_UNCONFIRMED_USER_DATA = 0x04

# transport header bits
TH_FIN = 0x80
TH_FIR = 0x40

# application control bits
AC_FIR = 0x80
AC_FIN = 0x40
AC_CON = 0x20
AC_UNS = 0x10

IIN_DEVICE_RESTART = 0x0080
IIN_NO_FUNC_SUPPORT = 0x0100
IIN_OBJECT_UNKNOWN = 0x0200
IIN_PARAM_ERROR = 0x0400

FLAG_ONLINE = 0x01


class AppFunction(enum.IntEnum):
    CONFIRM = 0x00
    READ = 0x01
    DIRECT_OPERATE = 0x05
    RESPONSE = 0x81


class DiagKind(str, enum.Enum):
    BAD_SYNC = "BAD_SYNC"
    BAD_CRC = "BAD_CRC"
    BAD_LENGTH = "BAD_LENGTH"
    UNKNOWN_FUNCTION = "UNKNOWN_FUNCTION"
    BAD_TRANSPORT = "BAD_TRANSPORT"
    BAD_OBJECT = "BAD_OBJECT"


class ControlStatus(enum.IntEnum):
    SUCCESS = 0
    TIMEOUT = 1
    NO_SELECT = 2
    FORMAT_ERROR = 3
    NOT_SUPPORTED = 4
    ALREADY_ACTIVE = 5
    HARDWARE_ERROR = 6
    LOCAL = 7


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    kind: DiagKind
    offset: int = 0
    detail: str = ""

    def __str__(self):
        return f"{self.kind.value}@{self.offset}: {self.detail}" if self.detail else f"{self.kind.value}@{self.offset}"


@dataclass(frozen=True)
class ObjectBlock:
    """One object header plus its points.

    Ranged qualifiers (0x00, 0x01) use ``start``/``stop``; index-prefixed
    qualifiers (0x17, 0x28) use ``indices``; qualifier 0x06 carries neither.
    ``values``/``flags`` are empty in read requests. For g41v3 ``flags``
    holds the control status of each point.
    """

    group: int
    variation: int
    qualifier: int
    start: int = 0
    stop: int = -1
    indices: tuple[int, ...] = ()
    values: tuple[float, ...] = ()
    flags: tuple[int, ...] = ()

    @property
    def point_indices(self) -> tuple[int, ...]:
        if self.qualifier in (0x00, 0x01):
            return tuple(range(self.start, self.stop + 1))
        return self.indices

    def points(self) -> list[tuple[int, float, int]]:
        return list(zip(self.point_indices, self.values, self.flags))


@dataclass(frozen=True)
class ApplicationFragment:
    app_control: int
    function: AppFunction
    objects: tuple[ObjectBlock, ...] = ()
    iin: int = 0

    @property
    def seq(self) -> int:
        return self.app_control & 0x0F

    def summary(self) -> str:
        parts = [f"{self.function.name} seq={self.seq}"]
        if self.function == AppFunction.RESPONSE:
            parts.append(f"IIN={self.iin:04x}")
        for ob in self.objects:
            head = f"g{ob.group}v{ob.variation} q=0x{ob.qualifier:02x}"
            if ob.values:
                pts = ", ".join(f"[{i}]={v:.6g}" for i, v in zip(ob.point_indices, ob.values))
                head += " " + pts
            elif ob.qualifier in (0x00, 0x01):
                head += f" [{ob.start}..{ob.stop}]"
            parts.append(head)
        return "; ".join(parts)


@dataclass(frozen=True)
class LinkFrame:
    control: int
    dest: int
    src: int
    user_data: bytes = b""

    def encode(self) -> bytes:
        return encode_link(self.user_data, self.dest, self.src, self.control)

    @property
    def from_master(self) -> bool:
        return bool(self.control & DIR)


@dataclass(frozen=True)
class DecodedMessage:
    fragment: ApplicationFragment
    src: int
    dest: int
    from_master: bool
    n_frames: int


# --- object codecs -------------------------------------------------------------

# (group, variation) -> (struct format, point size, value-first?)
_POINT_CODECS = {
    (30, 5): ("<Bf", 5, False),    # flag, value
    (40, 3): ("<Bf", 5, False),    # flag, value
    (41, 3): ("<fB", 5, True),     # value, control status
}
_HEADER_ONLY = {(30, 0), (40, 0), (60, 1)}

_f32 = struct.Struct("<f")


def f32(x: float) -> float:
    """Round ``x`` to the nearest single-precision value."""
    return _f32.unpack(_f32.pack(x))[0]


def _encode_object(ob: ObjectBlock, with_data: bool) -> bytes:
    key = (ob.group, ob.variation)
    if key not in _POINT_CODECS and key not in _HEADER_ONLY:
        raise EncodeError(f"unsupported object g{ob.group}v{ob.variation}")
    out = bytearray((ob.group, ob.variation, ob.qualifier))
    q = ob.qualifier
    if q == 0x06:
        if ob.values:
            raise EncodeError("qualifier 0x06 carries no data")
        return bytes(out)
    if q in (0x00, 0x01):
        width = 1 if q == 0x00 else 2
        if not (0 <= ob.start <= ob.stop < (1 << (8 * width))):
            raise EncodeError(f"bad range {ob.start}..{ob.stop} for qualifier 0x{q:02x}")
        out += ob.start.to_bytes(width, "little") + ob.stop.to_bytes(width, "little")
        idx_width = 0
        n = ob.stop - ob.start + 1
    elif q in (0x17, 0x28):
        idx_width = 1 if q == 0x17 else 2
        n = len(ob.indices)
        if n == 0 or n >= (1 << (8 * idx_width)):
            raise EncodeError(f"bad point count {n} for qualifier 0x{q:02x}")
        out += n.to_bytes(idx_width, "little")
    else:
        raise EncodeError(f"unsupported qualifier 0x{q:02x}")
    if not with_data:
        if ob.values or idx_width:
            raise EncodeError("read requests carry no point data")
        return bytes(out)
    if key not in _POINT_CODECS:
        raise EncodeError(f"g{ob.group}v{ob.variation} carries no point data")
    if len(ob.values) != n or len(ob.flags) != n:
        raise EncodeError(f"g{ob.group}v{ob.variation}: {n} points but {len(ob.values)} values/{len(ob.flags)} flags")
    fmt, _, value_first = _POINT_CODECS[key]
    st = struct.Struct(fmt)
    for k in range(n):
        if idx_width:
            out += ob.indices[k].to_bytes(idx_width, "little")
        v, fl = ob.values[k], ob.flags[k]
        out += st.pack(v, fl) if value_first else st.pack(fl, v)
    return bytes(out)


def encode_application(frag: ApplicationFragment) -> bytes:
    out = bytearray((frag.app_control & 0xFF, int(frag.function)))
    if frag.function == AppFunction.RESPONSE:
        out += frag.iin.to_bytes(2, "little")
    with_data = frag.function in (AppFunction.RESPONSE, AppFunction.DIRECT_OPERATE)
    for ob in frag.objects:
        out += _encode_object(ob, with_data)
    return bytes(out)


class _ObjectError(Exception):
    pass


def decode_application(data: bytes) -> ApplicationFragment | Diagnostic:
    try:
        return _decode_application(data)
    except _ObjectError as exc:
        return Diagnostic(DiagKind.BAD_OBJECT, 0, str(exc))


def _decode_application(data: bytes) -> ApplicationFragment | Diagnostic:
    if len(data) < 2:
        raise _ObjectError("fragment shorter than the application header")
    ac, fc = data[0], data[1]
    try:
        func = AppFunction(fc)
    except ValueError:
        return Diagnostic(DiagKind.UNKNOWN_FUNCTION, 1, f"function code 0x{fc:02x}")
    pos = 2
    iin = 0
    if func == AppFunction.RESPONSE:
        if len(data) < 4:
            raise _ObjectError("response without IIN")
        iin = int.from_bytes(data[2:4], "little")
        pos = 4
    with_data = func in (AppFunction.RESPONSE, AppFunction.DIRECT_OPERATE)
    objects = []
    n_data = len(data)
    while pos < n_data:
        if pos + 3 > n_data:
            raise _ObjectError("truncated object header")
        g, v, q = data[pos], data[pos + 1], data[pos + 2]
        pos += 3
        key = (g, v)
        if key not in _POINT_CODECS and key not in _HEADER_ONLY:
            raise _ObjectError(f"unknown object g{g}v{v}")
        start, stop, indices = 0, -1, ()
        idx_width = 0
        if q == 0x06:
            if with_data and key in _POINT_CODECS:
                raise _ObjectError("qualifier 0x06 with point data")
            objects.append(ObjectBlock(g, v, q))
            continue
        if q in (0x00, 0x01):
            width = 1 if q == 0x00 else 2
            if pos + 2 * width > n_data:
                raise _ObjectError("truncated range")
            start = int.from_bytes(data[pos:pos + width], "little")
            stop = int.from_bytes(data[pos + width:pos + 2 * width], "little")
            pos += 2 * width
            if stop < start:
                raise _ObjectError(f"inverted range {start}..{stop}")
            n = stop - start + 1
        elif q in (0x17, 0x28):
            idx_width = 1 if q == 0x17 else 2
            if pos + idx_width > n_data:
                raise _ObjectError("truncated count")
            n = int.from_bytes(data[pos:pos + idx_width], "little")
            pos += idx_width
            if n == 0:
                raise _ObjectError("zero point count")
        else:
            raise _ObjectError(f"unsupported qualifier 0x{q:02x}")
        if not with_data:
            if idx_width:
                raise _ObjectError("index-prefixed header in a read request")
            objects.append(ObjectBlock(g, v, q, start, stop))
            continue
        if key not in _POINT_CODECS:
            raise _ObjectError(f"g{g}v{v} carries no point data")
        fmt, size, value_first = _POINT_CODECS[key]
        need = n * (size + idx_width)
        if pos + need > n_data:
            raise _ObjectError(f"g{g}v{v}: {n} points need {need} bytes, {n_data - pos} left")
        st = struct.Struct(fmt)
        idx, vals, flags = [], [], []
        for _ in range(n):
            if idx_width:
                idx.append(int.from_bytes(data[pos:pos + idx_width], "little"))
                pos += idx_width
            a, b = st.unpack_from(data, pos)
            pos += size
            if value_first:
                vals.append(a)
                flags.append(b)
            else:
                vals.append(b)
                flags.append(a)
        if idx_width:
            indices = tuple(idx)
        objects.append(ObjectBlock(g, v, q, start, stop, indices, tuple(vals), tuple(flags)))
    return ApplicationFragment(ac, func, tuple(objects), iin)


# --- link layer ----------------------------------------------------------------

def _crc_bytes(chunk) -> bytes:
    return crc16_dnp(chunk).to_bytes(2, "little")


def encode_link(user_data: bytes, dest: int, src: int, control: int) -> bytes:
    if len(user_data) > MAX_USER_DATA:
        raise EncodeError(f"user data of {len(user_data)} bytes exceeds {MAX_USER_DATA}")
    header = SYNC + bytes((5 + len(user_data), control & 0xFF)) + dest.to_bytes(2, "little") + src.to_bytes(2, "little")
    out = bytearray(header)
    out += _crc_bytes(header)
    for k in range(0, len(user_data), 16):
        block = user_data[k:k + 16]
        out += block
        out += _crc_bytes(block)
    return bytes(out)


def frame_size(n_user: int) -> int:
    return 10 + n_user + 2 * ((n_user + 15) // 16)


def user_data_offset(k: int) -> int:
    """Wire offset (from the sync bytes) of user-data byte ``k`` of one frame."""
    return 10 + k + 2 * (k // 16)


def fix_crcs(frame: bytes | bytearray) -> bytes:
    """Recompute header and block CRCs of one link frame (lengths taken as-is)."""
    buf = bytearray(frame)
    if len(buf) < 10:
        return bytes(buf)
    buf[8:10] = _crc_bytes(buf[0:8])
    n_user = max(buf[2] - 5, 0)
    pos = 10
    remaining = n_user
    while remaining > 0 and pos < len(buf):
        blen = min(16, remaining)
        end = min(pos + blen, len(buf))
        if end + 2 <= len(buf):
            buf[end:end + 2] = _crc_bytes(buf[pos:end])
        pos = end + 2
        remaining -= blen
    return bytes(buf)


def _header_ok(buf: bytes, p: int) -> bool:
    return len(buf) - p >= 10 and crc16_dnp(buf[p:p + 8]) == int.from_bytes(buf[p + 8:p + 10], "little")


def parse_link(buf: bytes, pos: int = 0) -> tuple[LinkFrame | Diagnostic, int]:
    """Parse one frame at ``pos``. Returns (frame or diagnostic, next position).

    On failure the next position is where resynchronization should resume
    (the next candidate sync pattern after ``pos``), so repeated calls always
    advance.
    """
    n = len(buf)
    if buf[pos:pos + 2] != SYNC:
        nxt = buf.find(SYNC, pos + 1)
        nxt = n if nxt < 0 else nxt
        return Diagnostic(DiagKind.BAD_SYNC, pos, f"{nxt - pos} byte(s) before sync"), nxt
    resync = buf.find(SYNC, pos + 1)
    resync = n if resync < 0 else resync
    if n - pos < 10:
        return Diagnostic(DiagKind.BAD_LENGTH, pos, "truncated header"), resync
    if crc16_dnp(buf[pos:pos + 8]) != int.from_bytes(buf[pos + 8:pos + 10], "little"):
        return Diagnostic(DiagKind.BAD_CRC, pos, "header CRC"), resync
    length = buf[pos + 2]
    if length < 5:
        return Diagnostic(DiagKind.BAD_LENGTH, pos, f"length byte {length} < 5"), resync
    n_user = length - 5
    size = frame_size(n_user)
    # a new sync inside the declared span means this frame was cut short
    cut = resync < pos + size
    if pos + size > n:
        return Diagnostic(DiagKind.BAD_LENGTH, pos, f"declared {size} bytes, {n - pos} available"), resync
    user = bytearray()
    p = pos + 10
    remaining = n_user
    while remaining > 0:
        blen = min(16, remaining)
        block = buf[p:p + blen]
        if crc16_dnp(block) != int.from_bytes(buf[p + blen:p + blen + 2], "little"):
            kind = DiagKind.BAD_LENGTH if cut else DiagKind.BAD_CRC
            return Diagnostic(kind, p, "frame cut short" if cut else "block CRC"), resync
        user += block
        p += blen + 2
        remaining -= blen
        # an 8-byte block plus CRC is indistinguishable from a header; when a cut
        # frame ends exactly on a block boundary, prefer the header reading
        if cut and remaining > 0 and buf[p:p + 2] == SYNC and _header_ok(buf, p):
            return Diagnostic(DiagKind.BAD_LENGTH, p, "frame cut short"), p
    control = buf[pos + 3]
    dest = int.from_bytes(buf[pos + 4:pos + 6], "little")
    src = int.from_bytes(buf[pos + 6:pos + 8], "little")
    return LinkFrame(control, dest, src, bytes(user)), pos + size


def iter_frames(data: bytes) -> Iterator[LinkFrame | Diagnostic]:
    """Every frame or diagnostic in a byte stream, resynchronizing after errors."""
    data = bytes(data)
    pos = 0
    while pos < len(data):
        item, pos = parse_link(data, pos)
        yield item


# --- fragment codec -------------------------------------------------------------

def _link_control(frag: ApplicationFragment, from_master: bool | None) -> int:
    if from_master is None:
        from_master = frag.function != AppFunction.RESPONSE
    return (DIR if from_master else 0) | PRM | LINK_UNCONFIRMED_USER_DATA


def encode_frame(
    frag: ApplicationFragment,
    src: int,
    dest: int,
    from_master: bool | None = None,
    transport_seq: int = 0,
) -> bytes:
    """Encode a fragment into one or more link frames (concatenated)."""
    app = encode_application(frag)
    if len(app) > MAX_FRAGMENT:
        raise EncodeError(f"fragment of {len(app)} bytes exceeds {MAX_FRAGMENT}")
    control = _link_control(frag, from_master)
    chunks = [app[k:k + MAX_TRANSPORT_PAYLOAD] for k in range(0, len(app), MAX_TRANSPORT_PAYLOAD)] or [b""]
    out = bytearray()
    for k, chunk in enumerate(chunks):
        th = (transport_seq + k) & 0x3F
        if k == 0:
            th |= TH_FIR
        if k == len(chunks) - 1:
            th |= TH_FIN
        out += encode_link(bytes((th,)) + chunk, dest, src, control)
    return bytes(out)


def decode_message(data: bytes) -> DecodedMessage | Diagnostic:
    """Decode the first complete fragment in ``data``."""
    app = bytearray()
    started = False
    last_seq = None
    n_frames = 0
    head = None
    for item in iter_frames(data):
        if isinstance(item, Diagnostic):
            return item
        n_frames += 1
        if not item.user_data:
            return Diagnostic(DiagKind.BAD_TRANSPORT, 0, "frame without transport header")
        th = item.user_data[0]
        seq = th & 0x3F
        if th & TH_FIR:
            app = bytearray()
            started = True
            head = item
        elif not started or seq != (last_seq + 1) & 0x3F:
            return Diagnostic(DiagKind.BAD_TRANSPORT, 0, "segment out of sequence")
        elif (item.src, item.dest) != (head.src, head.dest):
            return Diagnostic(DiagKind.BAD_TRANSPORT, 0, "segment from a different association")
        last_seq = seq
        app += item.user_data[1:]
        if len(app) > MAX_FRAGMENT:
            return Diagnostic(DiagKind.BAD_TRANSPORT, 0, "reassembled fragment too large")
        if th & TH_FIN:
            frag = decode_application(bytes(app))
            if isinstance(frag, Diagnostic):
                return frag
            return DecodedMessage(frag, head.src, head.dest, head.from_master, n_frames)
    return Diagnostic(DiagKind.BAD_TRANSPORT if started else DiagKind.BAD_LENGTH, len(data), "no complete fragment")


def decode_frame(data: bytes) -> ApplicationFragment | Diagnostic:
    res = decode_message(data)
    return res.fragment if isinstance(res, DecodedMessage) else res


# --- points, outstation, master ----------------------------------------------

@dataclass
class PointDatabase:
    analog_inputs: dict[int, tuple[float, float]] = field(default_factory=dict)
    analog_outputs: dict[int, float] = field(default_factory=dict)

    def set_ai(self, index: int, value: float, timestamp: float) -> None:
        self.analog_inputs[index] = (value, timestamp)


def next_seq(seq: int) -> int:
    return (seq + 1) & 0x0F


class Outstation:
    """Field-device side of one association.

    ``on_operate(index, value)`` applies a direct-operate point to the
    physical device and returns the control status to echo.
    """

    def __init__(self, address: int, db: PointDatabase | None = None,
                 on_operate: Callable[[int, float], ControlStatus] | None = None,
                 master: int = MASTER_ADDRESS):
        self.address = address
        self.master = master
        self.db = db or PointDatabase()
        self.on_operate = on_operate
        self.rejected = 0
        self.operates = 0

    def respond(self, request: bytes) -> bytes | None:
        res = decode_message(request)
        if isinstance(res, Diagnostic):
            self.rejected += 1
            return None
        if res.dest != self.address or not res.from_master:
            return None
        frag = res.fragment
        ac = AC_FIR | AC_FIN | frag.seq
        if frag.function == AppFunction.READ:
            objs = []
            for ob in frag.objects:
                if (ob.group, ob.variation) in ((30, 0), (30, 5), (60, 1)):
                    objs.append(self._ai_block(ob))
                elif (ob.group, ob.variation) in ((40, 0), (40, 3)):
                    objs.append(self._ao_block(ob))
            objs = [o for o in objs if o is not None]
            reply = ApplicationFragment(ac, AppFunction.RESPONSE, tuple(objs), 0)
        elif frag.function == AppFunction.DIRECT_OPERATE:
            objs = []
            for ob in frag.objects:
                statuses = []
                for idx, value in zip(ob.point_indices, ob.values):
                    status = ControlStatus.NOT_SUPPORTED
                    if (ob.group, ob.variation) == (41, 3) and idx in self.db.analog_outputs:
                        status = self.on_operate(idx, value) if self.on_operate else ControlStatus.SUCCESS
                        if status == ControlStatus.SUCCESS:
                            self.db.analog_outputs[idx] = value
                    statuses.append(int(status))
                self.operates += 1
                objs.append(ObjectBlock(ob.group, ob.variation, ob.qualifier, ob.start, ob.stop,
                                        ob.indices, ob.values, tuple(statuses)))
            reply = ApplicationFragment(ac, AppFunction.RESPONSE, tuple(objs), 0)
        elif frag.function == AppFunction.CONFIRM:
            return None
        else:
            reply = ApplicationFragment(ac, AppFunction.RESPONSE, (), IIN_NO_FUNC_SUPPORT)
        return encode_frame(reply, self.address, self.master, from_master=False)

    def _ai_block(self, ob: ObjectBlock) -> ObjectBlock | None:
        ai = self.db.analog_inputs
        if not ai:
            return None
        if ob.qualifier in (0x00, 0x01):
            lo, hi = ob.start, min(ob.stop, max(ai))
        else:
            lo, hi = 0, max(ai)
        idx = range(lo, hi + 1)
        values = tuple(ai[i][0] if i in ai else 0.0 for i in idx)
        flags = tuple(FLAG_ONLINE if i in ai else 0 for i in idx)
        q = 0x00 if hi < 256 else 0x01
        return ObjectBlock(30, 5, q, lo, hi, (), values, flags)

    def _ao_block(self, ob: ObjectBlock) -> ObjectBlock | None:
        ao = self.db.analog_outputs
        if not ao:
            return None
        hi = max(ao)
        values = tuple(ao.get(i, 0.0) for i in range(hi + 1))
        flags = tuple(FLAG_ONLINE if i in ao else 0 for i in range(hi + 1))
        return ObjectBlock(40, 3, 0x00 if hi < 256 else 0x01, 0, hi, (), values, flags)


def outstation_respond(outstation: Outstation, request: bytes) -> bytes | None:
    return outstation.respond(request)


@dataclass
class PendingRequest:
    seq: int
    kind: str
    sent: float
    deadline: float
    points: tuple[tuple[int, float], ...] = ()


class Master:
    """Master (client) side of one association with a read-mirror of the outstation."""

    UP = "UP"
    DOWN = "DOWN"

    def __init__(self, outstation: int, timeout: float = 2.0, address: int = MASTER_ADDRESS):
        self.address = address
        self.outstation = outstation
        self.timeout = timeout
        self.seq = 0
        self.mirror = PointDatabase()
        self.status = self.UP
        self.pending: dict[int, PendingRequest] = {}
        self.polls_sent = 0
        self.operates_sent = 0
        self.responses = 0
        self.timeouts = 0
        self.rejected = 0
        self.last_update = None
        self.operate_results: list[tuple[float, PendingRequest, tuple[int, ...]]] = []

    def _next(self) -> int:
        s = self.seq
        self.seq = next_seq(self.seq)
        return s

    def poll(self, t: float) -> bytes:
        seq = self._next()
        frag = ApplicationFragment(AC_FIR | AC_FIN | seq, AppFunction.READ, (ObjectBlock(30, 0, 0x06),))
        self.pending[seq] = PendingRequest(seq, "poll", t, t + self.timeout)
        self.polls_sent += 1
        return encode_frame(frag, self.address, self.outstation, from_master=True)

    def operate(self, t: float, points: Sequence[tuple[int, float]]) -> bytes:
        seq = self._next()
        pts = tuple((int(i), float(v)) for i, v in points)
        ob = ObjectBlock(41, 3, 0x17, indices=tuple(i for i, _ in pts),
                         values=tuple(v for _, v in pts), flags=tuple(0 for _ in pts))
        frag = ApplicationFragment(AC_FIR | AC_FIN | seq, AppFunction.DIRECT_OPERATE, (ob,))
        self.pending[seq] = PendingRequest(seq, "operate", t, t + self.timeout, pts)
        self.operates_sent += 1
        return encode_frame(frag, self.address, self.outstation, from_master=True)

    def handle(self, data: bytes, t: float) -> ApplicationFragment | Diagnostic | None:
        res = decode_message(data)
        if isinstance(res, Diagnostic):
            self.rejected += 1
            return res
        if res.from_master or res.src != self.outstation or res.dest != self.address:
            return None
        frag = res.fragment
        req = self.pending.pop(frag.seq, None)
        if req is None or frag.function != AppFunction.RESPONSE:
            return None
        self.responses += 1
        self.status = self.UP
        if req.kind == "poll":
            for ob in frag.objects:
                if ob.group == 30:
                    for idx, value, flag in ob.points():
                        if flag & FLAG_ONLINE:
                            self.mirror.set_ai(idx, value, req.sent)
            self.last_update = req.sent
        else:
            statuses = tuple(fl for ob in frag.objects for fl in ob.flags)
            self.operate_results.append((t, req, statuses))
            for ob in frag.objects:
                for idx, value, status in ob.points():
                    if status == ControlStatus.SUCCESS:
                        self.mirror.analog_outputs[idx] = value
        return frag

    def expire(self, t: float) -> list[PendingRequest]:
        """Time out every pending request whose deadline has passed."""
        gone = [p for p in self.pending.values() if p.deadline <= t]
        for p in gone:
            del self.pending[p.seq]
            self.timeouts += 1
            self.status = self.DOWN
        return gone


def master_poll(master: Master, t: float) -> bytes:
    return master.poll(t)
