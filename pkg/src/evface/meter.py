"""Simulated single-phase energy meter, supply contactor and dummy load.

Holding register map (all 16-bit):

    0x0000  voltage, V x 10
    0x0001  current, A x 100
    0x0002  active power, W
    0x0003  energy high word  (Wh x 10, 32-bit, high word first)
    0x0004  energy low word

Coil 0x0000 is the contactor (on = closed = power flowing). Time only moves
through :meth:`Meter.tick`.
"""

from __future__ import annotations

import logging
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import Optional

from .modbus import (
    COIL_OFF,
    COIL_ON,
    ILLEGAL_DATA_ADDRESS,
    ILLEGAL_DATA_VALUE,
    ILLEGAL_FUNCTION,
    MAX_READ_COUNT,
    READ_HOLDING_REGISTERS,
    WRITE_SINGLE_COIL,
    Frame,
    ModbusClient,
    ModbusError,
    ModbusException,
    TcpModbusClient,
    decode_frame,
    exception_pdu,
    read_response_pdu,
    recv_frame,
)

log = logging.getLogger(__name__)

REG_VOLTAGE = 0x0000
REG_CURRENT = 0x0001
REG_POWER = 0x0002
REG_ENERGY_HI = 0x0003
REG_ENERGY_LO = 0x0004
REGISTER_COUNT = 5
COIL_CONTACTOR = 0x0000

DEFAULT_VOLTAGE_V = 240.0
DEFAULT_RATED_POWER_W = 7400.0
DEFAULT_MODBUS_PORT = 1502
ENERGY_QUANTUM_WH = 0.1


@dataclass(frozen=True)
class LoadProfile:
    draw_watts: float
    duration: Optional[float] = None  # seconds; None = until changed


@dataclass(frozen=True)
class MeterRegisters:
    voltage: int
    current: int
    power: int
    energy: int

    def words(self) -> list[int]:
        return [self.voltage, self.current, self.power, self.energy >> 16, self.energy & 0xFFFF]

    @property
    def energy_wh(self) -> float:
        return self.energy / 10

    @classmethod
    def from_words(cls, words: list[int]) -> "MeterRegisters":
        voltage, current, power, hi, lo = words
        return cls(voltage, current, power, (hi << 16) | lo)


def _u16(value: float) -> int:
    return max(0, min(0xFFFF, int(round(value))))


class Meter:
    """Meter state behind one lock; every request and tick is applied whole.

    ``comm_timeout_s`` arms a watchdog: if no Modbus request arrives for that
    long while power flows, the meter opens the contactor on its own.
    """

    def __init__(
        self,
        voltage_v: float = DEFAULT_VOLTAGE_V,
        rated_power_w: float = DEFAULT_RATED_POWER_W,
        comm_timeout_s: Optional[float] = None,
    ) -> None:
        self.voltage_v = voltage_v
        self.rated_power_w = rated_power_w
        self.comm_timeout_s = comm_timeout_s
        self._lock = threading.Lock()
        self._closed = False
        self._load = LoadProfile(0.0)
        self._load_elapsed = 0.0
        self._energy_wh = 0.0
        self._since_contact = 0.0
        self.transitions = 0

    # -- state -------------------------------------------------------------

    @property
    def contactor_closed(self) -> bool:
        return self._closed

    @property
    def energy_wh(self) -> float:
        return self._energy_wh

    def set_load(self, load: LoadProfile | float) -> None:
        if not isinstance(load, LoadProfile):
            load = LoadProfile(float(load))
        if load.draw_watts < 0 or load.draw_watts > self.rated_power_w:
            raise ValueError(f"load must lie in [0, {self.rated_power_w}] W, got {load.draw_watts}")
        with self._lock:
            self._load = load
            self._load_elapsed = 0.0

    def _load_active(self) -> bool:
        d = self._load.duration
        return d is None or self._load_elapsed < d

    def _power_w(self) -> float:
        if not self._closed or not self._load_active():
            return 0.0
        return self._load.draw_watts

    def _registers(self) -> MeterRegisters:
        power = self._power_w()
        current = power / self.voltage_v if self.voltage_v else 0.0
        energy = int(round(self._energy_wh * 10)) & 0xFFFFFFFF
        return MeterRegisters(_u16(self.voltage_v * 10), _u16(current * 100), _u16(power), energy)

    def registers(self) -> MeterRegisters:
        with self._lock:
            return self._registers()

    # -- operations --------------------------------------------------------

    def tick(self, dt: float) -> MeterRegisters:
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        with self._lock:
            powered = dt
            trip = False
            if self._closed and self.comm_timeout_s is not None:
                left = self.comm_timeout_s - self._since_contact
                if left <= dt:
                    powered, trip = max(0.0, left), True
            if self._closed:
                d = self._load.duration
                active = powered if d is None else max(0.0, min(powered, d - self._load_elapsed))
                self._energy_wh += self._load.draw_watts * active / 3600.0
            self._load_elapsed += dt
            self._since_contact += dt
            if trip:
                self._closed = False
                self.transitions += 1
                log.warning("meter watchdog opened contactor after %.3fs without contact", self.comm_timeout_s)
            return self._registers()

    def write_contactor(self, closed: bool) -> bool:
        with self._lock:
            if closed != self._closed:
                self._closed = closed
                self.transitions += 1
            return self._closed

    def read_holding_registers(self, start: int, count: int) -> list[int]:
        if count < 1 or count > MAX_READ_COUNT:
            raise ModbusException(READ_HOLDING_REGISTERS, ILLEGAL_DATA_VALUE)
        if start < 0 or start + count > REGISTER_COUNT:
            raise ModbusException(READ_HOLDING_REGISTERS, ILLEGAL_DATA_ADDRESS)
        with self._lock:
            return self._registers().words()[start:start + count]

    def handle_frame(self, data: bytes) -> bytes:
        """Answer one Modbus-TCP request frame."""
        request = decode_frame(data)
        with self._lock:
            self._since_contact = 0.0
        fn = request.function
        try:
            if fn == READ_HOLDING_REGISTERS:
                if len(request.pdu) != 5:
                    raise ModbusException(fn, ILLEGAL_DATA_VALUE)
                start, count = struct.unpack(">HH", request.pdu[1:])
                pdu = read_response_pdu(self.read_holding_registers(start, count))
            elif fn == WRITE_SINGLE_COIL:
                if len(request.pdu) != 5:
                    raise ModbusException(fn, ILLEGAL_DATA_VALUE)
                address, value = struct.unpack(">HH", request.pdu[1:])
                if address != COIL_CONTACTOR:
                    raise ModbusException(fn, ILLEGAL_DATA_ADDRESS)
                if value not in (COIL_ON, COIL_OFF):
                    raise ModbusException(fn, ILLEGAL_DATA_VALUE)
                self.write_contactor(value == COIL_ON)
                pdu = request.pdu  # normal response echoes the request
            else:
                raise ModbusException(fn, ILLEGAL_FUNCTION)
        except ModbusException as exc:
            pdu = exception_pdu(exc.function, exc.code)
        return Frame(request.transaction_id, request.unit_id, pdu).encode()


@dataclass(frozen=True)
class MeterReading:
    voltage_v: float
    current_a: float
    power_w: float
    energy_wh: float
    energy_raw: int


class MeterLink(ModbusClient):
    """Master-side helpers on top of the raw register protocol."""

    def read(self) -> MeterReading:
        regs = MeterRegisters.from_words(self.read_holding_registers(REG_VOLTAGE, REGISTER_COUNT))
        return MeterReading(regs.voltage / 10, regs.current / 100, float(regs.power), regs.energy_wh, regs.energy)

    def set_contactor(self, closed: bool) -> bool:
        return self.write_coil(COIL_CONTACTOR, closed)


class LocalMeterLink(MeterLink):
    """In-process link that still moves encoded frames; ``online=False`` cuts it."""

    def __init__(self, meter: Meter, unit: int = 1) -> None:
        super().__init__(unit)
        self.meter = meter
        self.online = True

    def _transact(self, request: bytes) -> bytes:
        if not self.online:
            raise ConnectionError("meter link is down")
        return self.meter.handle_frame(request)


class TcpMeterLink(TcpModbusClient, MeterLink):
    """Modbus-TCP link to a running meter server."""


class _ModbusHandler(socketserver.BaseRequestHandler):
    server: "ModbusTCPServer"

    def handle(self) -> None:
        while True:
            try:
                data = recv_frame(self.request)
                if data is None:
                    return
                self.request.sendall(self.server.meter.handle_frame(data))
            except (ModbusError, OSError) as exc:
                log.debug("modbus connection dropped: %s", exc)
                return


class ModbusTCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], meter: Meter) -> None:
        super().__init__(address, _ModbusHandler)
        self.meter = meter

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="modbus-tcp", daemon=True)
        thread.start()
        return thread
