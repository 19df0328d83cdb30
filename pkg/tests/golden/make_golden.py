"""Regenerate opendnp3_capture.json with the opendnp3 reference stack.

Runs an opendnp3 master and outstation over localhost TCP with a recording
proxy in between, drives one g30v5 read and one direct operate, and dumps
every link frame seen on the wire. Needs ``pip install dnp3-python`` (not a
test dependency; the JSON it writes is committed).

    python3 tests/golden/make_golden.py
"""

import json
import socket
import threading
import time
from pathlib import Path

from pydnp3 import asiodnp3, asiopal, opendnp3, openpal

MASTER, OUTSTATION = 1, 108
AI_VALUES = [1.0, 0.987, 125.5, -42.25]
N_WIDE = 70  # analog inputs on the second outstation, to force a multi-frame response
OPERATE_VALUE, OPERATE_INDEX = 7.0, 0
OUT = Path(__file__).with_name("opendnp3_capture.json")


class Proxy:
    """Forwards one TCP connection and keeps every chunk, tagged with direction."""

    def __init__(self, listen_port, target_port):
        self.chunks = {"m2o": bytearray(), "o2m": bytearray()}
        self.srv = socket.socket()
        self.srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.srv.bind(("127.0.0.1", listen_port))
        self.srv.listen(1)
        self.target_port = target_port
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        cli, _ = self.srv.accept()
        up = socket.create_connection(("127.0.0.1", self.target_port))
        threading.Thread(target=self._pump, args=(cli, up, "m2o"), daemon=True).start()
        threading.Thread(target=self._pump, args=(up, cli, "o2m"), daemon=True).start()

    def _pump(self, a, b, tag):
        while True:
            try:
                data = a.recv(4096)
            except OSError:
                return
            if not data:
                return
            self.chunks[tag] += data
            b.sendall(data)


class Handler(opendnp3.ICommandHandler):
    def Start(self):
        pass

    def End(self):
        pass

    def Select(self, command, index):
        return opendnp3.CommandStatus.SUCCESS

    def Operate(self, command, index, op_type):
        return opendnp3.CommandStatus.SUCCESS


def _on_command(result=None):
    pass


def split_frames(stream: bytes) -> list[bytes]:
    out, pos = [], 0
    while pos + 10 <= len(stream):
        assert stream[pos:pos + 2] == b"\x05\x64", stream[pos:pos + 2]
        n_user = stream[pos + 2] - 5
        size = 10 + n_user + 2 * ((n_user + 15) // 16)
        out.append(bytes(stream[pos:pos + size]))
        pos += size
    return out


def outstation(manager, port, n_analog, values):
    cfg = asiodnp3.OutstationStackConfig(opendnp3.DatabaseSizes(
        numBinary=0, numDoubleBinary=0, numAnalog=n_analog, numCounter=0, numFrozenCounter=0,
        numBinaryOutputStatus=0, numAnalogOutputStatus=0, numTimeAndInterval=0))
    cfg.outstation.params.allowUnsolicited = False
    cfg.link.LocalAddr = OUTSTATION
    cfg.link.RemoteAddr = MASTER
    cfg.link.KeepAliveTimeout = openpal.TimeDuration().Max()
    ch = manager.AddTCPServer("server%d" % port, opendnp3.levels.NOTHING, asiopal.ChannelRetry().Default(),
                              "127.0.0.1", port, asiodnp3.PrintingChannelListener().Create())
    handler = Handler()
    app = opendnp3.DefaultOutstationApplication().Create()
    out = ch.AddOutstation("outstation%d" % port, handler, app, cfg)
    builder = asiodnp3.UpdateBuilder()
    for i, v in enumerate(values):
        builder.Update(opendnp3.Analog(v, opendnp3.Flags(0x01)), i)
    out.Apply(builder.Build())
    out.Enable()
    return out, ch, handler, app


def master(manager, port):
    cfg = asiodnp3.MasterStackConfig()
    cfg.master.responseTimeout = openpal.TimeDuration().Seconds(2)
    cfg.master.disableUnsolOnStartup = False
    cfg.master.startupIntegrityClassMask = getattr(opendnp3.ClassField, "None")()
    cfg.master.unsolClassMask = getattr(opendnp3.ClassField, "None")()
    cfg.link.LocalAddr = MASTER
    cfg.link.RemoteAddr = OUTSTATION
    ch = manager.AddTCPClient("client%d" % port, opendnp3.levels.NOTHING, asiopal.ChannelRetry().Default(),
                              "127.0.0.1", "0.0.0.0", port, asiodnp3.PrintingChannelListener().Create())
    soe = asiodnp3.PrintingSOEHandler().Create()
    app = asiodnp3.DefaultMasterApplication().Create()
    m = ch.AddMaster("master%d" % port, soe, app, cfg)
    m.Enable()
    return m, ch, soe, app


def session(manager, base_port, n_analog, values, operate):
    proxy = Proxy(base_port, base_port + 1)
    keep = outstation(manager, base_port + 1, n_analog, values)
    time.sleep(0.5)
    m, *rest = master(manager, base_port)
    time.sleep(1.5)
    # the bindings hand out copies of the point configs, so the static variation
    # cannot be set on the outstation; ask for g30v5 explicitly instead
    m.ScanAllObjects(opendnp3.GroupVariationID(30, 5), opendnp3.TaskConfig().Default())
    time.sleep(1.0)
    if operate:
        m.DirectOperate(opendnp3.AnalogOutputFloat32(OPERATE_VALUE), OPERATE_INDEX,
                        _on_command, opendnp3.TaskConfig().Default())
        time.sleep(1.0)
    return proxy, (m, rest, keep)


def main():
    manager = asiodnp3.DNP3Manager(1, asiodnp3.ConsoleLogger().Create())
    small, k1 = session(manager, 20400, len(AI_VALUES), AI_VALUES, operate=True)
    wide_values = [0.5 * i - 3.0 for i in range(N_WIDE)]
    wide, k2 = session(manager, 20410, N_WIDE, wide_values, operate=False)
    doc = {
        "generator": "opendnp3 (dnp3-python %s) via tests/golden/make_golden.py" % _version(),
        "master": MASTER,
        "outstation": OUTSTATION,
        "sessions": [
            {"ai_values": AI_VALUES, "operate": {"index": OPERATE_INDEX, "value": OPERATE_VALUE},
             "m2o": [f.hex() for f in split_frames(small.chunks["m2o"])],
             "o2m": [f.hex() for f in split_frames(small.chunks["o2m"])]},
            {"ai_values": wide_values, "operate": None,
             "m2o": [f.hex() for f in split_frames(wide.chunks["m2o"])],
             "o2m": [f.hex() for f in split_frames(wide.chunks["o2m"])]},
        ],
    }
    OUT.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {OUT}", flush=True)
    for s in doc["sessions"]:
        print(len(s["m2o"]), "m2o frames,", len(s["o2m"]), "o2m frames", flush=True)
    import os
    os._exit(0)  # the asio threads do not shut down cleanly


def _version():
    from importlib.metadata import version
    return version("dnp3-python")


if __name__ == "__main__":
    main()
