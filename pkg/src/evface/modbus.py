"""Modbus-TCP framing for the two function codes the meter speaks.

Frame = MBAP header (transaction id, protocol id 0, length, unit id; all
big-endian) followed by the PDU. Only 0x03 read holding registers and
0x05 write single coil are supported.
"""

from __future__ import annotations

import itertools
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional

READ_HOLDING_REGISTERS = 0x03
WRITE_SINGLE_COIL = 0x05

ILLEGAL_FUNCTION = 0x01
ILLEGAL_DATA_ADDRESS = 0x02
ILLEGAL_DATA_VALUE = 0x03

COIL_ON = 0xFF00
COIL_OFF = 0x0000
MAX_READ_COUNT = 125

_MBAP = struct.Struct(">HHHB")
MBAP_SIZE = _MBAP.size


class ModbusError(Exception):
    """Malformed frame or transport failure."""


class ModbusException(Exception):
    """A Modbus exception response (function code with the high bit set)."""

    def __init__(self, function: int, code: int) -> None:
        super().__init__(f"function 0x{function:02X} exception 0x{code:02X}")
        self.function = function
        self.code = code


@dataclass(frozen=True)
class Frame:
    transaction_id: int
    unit_id: int
    pdu: bytes

    @property
    def function(self) -> int:
        return self.pdu[0]

    def encode(self) -> bytes:
        return _MBAP.pack(self.transaction_id, 0, len(self.pdu) + 1, self.unit_id) + self.pdu


def decode_frame(data: bytes) -> Frame:
    if len(data) < MBAP_SIZE + 1:
        raise ModbusError(f"frame too short ({len(data)} bytes)")
    tid, proto, length, unit = _MBAP.unpack_from(data)
    if proto != 0:
        raise ModbusError(f"protocol id {proto} is not Modbus")
    if length != len(data) - MBAP_SIZE + 1:
        raise ModbusError(f"length field {length} disagrees with frame size {len(data)}")
    return Frame(tid, unit, bytes(data[MBAP_SIZE:]))


def read_request(tid: int, start: int, count: int, unit: int = 1) -> bytes:
    return Frame(tid, unit, struct.pack(">BHH", READ_HOLDING_REGISTERS, start, count)).encode()


def write_coil_request(tid: int, address: int, on: bool, unit: int = 1) -> bytes:
    value = COIL_ON if on else COIL_OFF
    return Frame(tid, unit, struct.pack(">BHH", WRITE_SINGLE_COIL, address, value)).encode()


def read_response_pdu(values: list[int]) -> bytes:
    return struct.pack(f">BB{len(values)}H", READ_HOLDING_REGISTERS, 2 * len(values), *values)


def exception_pdu(function: int, code: int) -> bytes:
    return bytes([(function | 0x80) & 0xFF, code])


def parse_read_response(frame: Frame, count: int) -> list[int]:
    pdu = frame.pdu
    if pdu[0] & 0x80:
        raise ModbusException(pdu[0] & 0x7F, pdu[1])
    if pdu[0] != READ_HOLDING_REGISTERS or len(pdu) != 2 + 2 * count or pdu[1] != 2 * count:
        raise ModbusError(f"unexpected read response {pdu.hex()}")
    return list(struct.unpack(f">{count}H", pdu[2:]))


def parse_write_coil_response(frame: Frame, address: int) -> bool:
    pdu = frame.pdu
    if pdu[0] & 0x80:
        raise ModbusException(pdu[0] & 0x7F, pdu[1])
    if len(pdu) != 5 or pdu[0] != WRITE_SINGLE_COIL:
        raise ModbusError(f"unexpected write response {pdu.hex()}")
    addr, value = struct.unpack(">HH", pdu[1:])
    if addr != address:
        raise ModbusError(f"write echoed address {addr}, expected {address}")
    return value == COIL_ON


def recv_frame(sock: socket.socket) -> Optional[bytes]:
    """Read one whole frame; None on clean EOF before a header."""
    header = _recv_exact(sock, MBAP_SIZE, allow_eof=True)
    if header is None:
        return None
    length = _MBAP.unpack(header)[2]
    if length < 2:
        raise ModbusError(f"invalid length field {length}")
    return header + _recv_exact(sock, length - 1)


def _recv_exact(sock: socket.socket, n: int, allow_eof: bool = False):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise ModbusError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


class ModbusClient:
    """Request/response master; subclasses supply the transport."""

    def __init__(self, unit: int = 1) -> None:
        self.unit = unit
        self._tids = itertools.count(1)
        self._lock = threading.Lock()

    def _transact(self, request: bytes) -> bytes:
        raise NotImplementedError

    def _exchange(self, build: Callable[[int], bytes]) -> Frame:
        with self._lock:
            tid = next(self._tids) & 0xFFFF
            reply = decode_frame(self._transact(build(tid)))
        if reply.transaction_id != tid:
            raise ModbusError(f"transaction id {reply.transaction_id} != {tid}")
        return reply

    def read_holding_registers(self, start: int, count: int) -> list[int]:
        reply = self._exchange(lambda tid: read_request(tid, start, count, self.unit))
        return parse_read_response(reply, count)

    def write_coil(self, address: int, on: bool) -> bool:
        reply = self._exchange(lambda tid: write_coil_request(tid, address, on, self.unit))
        return parse_write_coil_response(reply, address)


class TcpModbusClient(ModbusClient):
    def __init__(self, host: str, port: int, timeout: float = 2.0, unit: int = 1) -> None:
        super().__init__(unit)
        self.address = (host, port)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None

    def _transact(self, request: bytes) -> bytes:
        try:
            if self._sock is None:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            self._sock.sendall(request)
            reply = recv_frame(self._sock)
            if reply is None:
                raise ModbusError("connection closed")
            return reply
        except (OSError, ModbusError) as exc:
            self.close()
            raise ConnectionError(f"meter {self.address}: {exc}") from exc

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
