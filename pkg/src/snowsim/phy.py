"""Distributed-OFDM baseband PHY.

Uplink: many narrowband nodes each modulate OOK or BPSK chips on their own
subcarrier, completely unsynchronized. The base station runs one forward FFT
over its whole band every chip period (one "tick") and decodes every
subcarrier's bit column in parallel out of that single transform. Downlink is
the mirror image: one IFFT encodes different chips on different subcarriers
into a single composite transmission.

Frequency grid convention: baseband DC sits at subcarrier 0's center, and
subcarrier i occupies bin kappa*i of the m-point transform, where
kappa = (m-1)//(n-1). The implied complex sample rate is m*spacing/kappa.
Tones on the grid are bin-exact, so noiseless orthogonality is exact.

Timing convention: one chip = one FFT window = m samples. Transmitters are
assumed chip-aligned to the tick grid (integer-offset asynchrony only);
fractional-sample timing recovery is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import struct
from typing import Iterable, Mapping, NamedTuple, Optional, Union

import numpy as np
from scipy.signal.windows import blackmanharris

from .spectrum import SubcarrierPlan

__all__ = [
    "PhyError", "FrameError", "FrameFormat", "Packet", "CrcFailure",
    "ModulationScheme", "BasebandBuffer",
    "crc16_ccitt", "frame_packet", "parse_frame",
    "spread_bits", "despread_bits", "modulate_chips", "node_modulate",
    "center_bin", "grid_sample_rate_hz", "baseband_offset_hz",
    "bs_ofdm_encode", "gfft_tick", "gfft_stream", "TickOutput",
    "DecodeMatrix", "decode_step", "compute_papr",
    "transform_counter", "dump_waveform", "load_waveform",
]


class PhyError(ValueError):
    pass


class FrameError(PhyError):
    """Malformed or CRC-failing frame."""


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

def _crc16_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint16)
    for i in range(256):
        c = i << 8
        for _ in range(8):
            c = ((c << 1) ^ 0x1021) if (c & 0x8000) else (c << 1)
        table[i] = c & 0xFFFF
    return table


_CRC16_TABLE = _crc16_table()


def crc16_ccitt(data: bytes) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection)."""
    crc = 0xFFFF
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ int(_CRC16_TABLE[(crc >> 8) ^ b])
    return crc


@dataclass(frozen=True)
class FrameFormat:
    """On-air frame layout: preamble | sync | 16-bit length | payload | CRC-16."""

    preamble: int = 0xAAAAAAAA     # alternating 1010..., 32 bits
    sync_word: int = 0x930B51DE    # network id, 32 bits
    preamble_bits: int = 32
    sync_bits: int = 32

    @property
    def header_bits(self) -> int:
        return self.preamble_bits + self.sync_bits + 16

    @property
    def overhead_bytes(self) -> int:
        # preamble + sync + length + CRC
        return (self.preamble_bits + self.sync_bits) // 8 + 2 + 2


DEFAULT_FRAME = FrameFormat()


@dataclass
class Packet:
    payload: bytes
    src: Optional[int] = None
    subcarrier: Optional[int] = None
    preamble: int = DEFAULT_FRAME.preamble
    sync_word: int = DEFAULT_FRAME.sync_word
    payload_len: int = field(init=False)
    crc: int = field(init=False)

    def __post_init__(self):
        self.payload = bytes(self.payload)
        self.payload_len = len(self.payload)
        self.crc = crc16_ccitt(self._len_field() + self.payload)

    def _len_field(self) -> bytes:
        return struct.pack(">H", self.payload_len)

    def frame_bytes(self) -> bytes:
        head = struct.pack(">II", self.preamble, self.sync_word)
        return head + self._len_field() + self.payload + struct.pack(">H", self.crc)

    def frame_bits(self) -> np.ndarray:
        """MSB-first bit vector of the whole frame."""
        return np.unpackbits(np.frombuffer(self.frame_bytes(), dtype=np.uint8))

    @property
    def frame_len_bytes(self) -> int:
        return len(self.frame_bytes())


@dataclass(frozen=True)
class CrcFailure:
    """Decode completed but the checksum (or length field) did not."""

    subcarrier: int
    payload_len: int
    reason: str = "crc"


def frame_packet(payload: bytes, src: Optional[int] = None,
                 subcarrier: Optional[int] = None,
                 fmt: FrameFormat = DEFAULT_FRAME) -> Packet:
    if len(payload) > 255:
        raise FrameError("payload exceeds 255 bytes")
    return Packet(payload, src=src, subcarrier=subcarrier,
                  preamble=fmt.preamble, sync_word=fmt.sync_word)


def parse_frame(frame: Union[bytes, np.ndarray],
                fmt: FrameFormat = DEFAULT_FRAME) -> Packet:
    """Parse a full frame (bytes or bit vector); reject bad sync/length/CRC."""
    if isinstance(frame, np.ndarray):
        if frame.size % 8:
            raise FrameError("bit count not byte aligned")
        frame = np.packbits(frame.astype(np.uint8)).tobytes()
    if len(frame) < 12:
        raise FrameError("frame shorter than fixed overhead")
    preamble, sync = struct.unpack(">II", frame[:8])
    if preamble != fmt.preamble or sync != fmt.sync_word:
        raise FrameError("preamble/sync mismatch")
    (length,) = struct.unpack(">H", frame[8:10])
    if length > 255 or len(frame) != 12 + length:
        raise FrameError("bad length field")
    payload = frame[10:10 + length]
    (crc_rx,) = struct.unpack(">H", frame[10 + length:12 + length])
    if crc_rx != crc16_ccitt(frame[8:10 + length]):
        raise FrameError("crc mismatch")
    return Packet(payload, preamble=preamble, sync_word=sync)


# ---------------------------------------------------------------------------
# Modulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModulationScheme:
    """Per-subcarrier narrowband modulation and its decision thresholds.

    `amplitude_threshold` is compared against raw FFT magnitudes (a unit
    amplitude tone shows up as magnitude m at its bin). For BPSK it doubles
    as the carrier-presence test; the chip decision is then the phase
    distance from the preamble-established reference (0 deg -> chip 0,
    180 deg -> chip 1, deviations beyond `phase_threshold_deg` are erased).
    """

    kind: str = "bpsk"               # "ook" | "bpsk"
    spreading_factor: int = 8
    amplitude_threshold: float = 3.0
    phase_threshold_deg: float = 90.0

    def __post_init__(self):
        if self.kind not in ("ook", "bpsk"):
            raise PhyError(f"unknown modulation kind {self.kind!r}")
        if self.spreading_factor < 1:
            raise PhyError("spreading factor must be >= 1")
        if self.amplitude_threshold <= 0 or self.phase_threshold_deg <= 0:
            raise PhyError("thresholds must be positive")
        if self.kind == "bpsk" and self.phase_threshold_deg > 90:
            raise PhyError("BPSK phase threshold must be <= 90 degrees")

    def chip_symbol(self, chip: int) -> complex:
        if self.kind == "ook":
            return complex(chip)
        return complex(1 - 2 * chip)   # chip b -> phase b*180deg


def spread_bits(bits: Iterable[int], r: int) -> np.ndarray:
    """Repeat every bit r times (chips)."""
    if r < 1:
        raise PhyError("spreading factor must be >= 1")
    return np.repeat(np.asarray(list(bits), dtype=np.uint8), r)


def despread_bits(chips: Iterable[int], r: int) -> np.ndarray:
    """Majority vote per r-chip group; exact ties resolve to 0."""
    chips = np.asarray(list(chips), dtype=np.uint8)
    if chips.size % r:
        raise PhyError("chip count not divisible by spreading factor")
    ones = chips.reshape(-1, r).sum(axis=1)
    return (2 * ones > r).astype(np.uint8)


@dataclass
class BasebandBuffer:
    """Complex I/Q samples at a declared sample rate."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)

    def __len__(self) -> int:
        return len(self.samples)

    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2))


def modulate_chips(chips: Iterable[int], scheme: ModulationScheme,
                   center_offset_hz: float, sample_rate_hz: float,
                   samples_per_chip: int) -> BasebandBuffer:
    """Key chips onto a tone at `center_offset_hz`.

    OOK: chip 1 -> unit tone, chip 0 -> silence. BPSK: chip b -> phase b*180deg.
    Each chip lasts `samples_per_chip` samples, phase-continuous across chips.
    """
    if samples_per_chip < 1:
        raise PhyError("samples_per_chip must be >= 1")
    chips = np.asarray(list(chips), dtype=np.uint8)
    gains = np.array([scheme.chip_symbol(c) for c in (0, 1)])[chips]
    amp = np.repeat(gains, samples_per_chip)
    t = np.arange(amp.size)
    tone = np.exp(2j * np.pi * center_offset_hz * t / sample_rate_hz)
    return BasebandBuffer(amp * tone, sample_rate_hz)


def node_modulate(packet: Packet, scheme: ModulationScheme,
                  center_offset_hz: float, sample_rate_hz: float,
                  samples_per_chip: int) -> BasebandBuffer:
    """Spread the frame bits and modulate them on the node's subcarrier."""
    chips = spread_bits(packet.frame_bits(), scheme.spreading_factor)
    return modulate_chips(chips, scheme, center_offset_hz, sample_rate_hz,
                          samples_per_chip)


# ---------------------------------------------------------------------------
# FFT grid
# ---------------------------------------------------------------------------

def _stride(plan: SubcarrierPlan, fft_size: int) -> int:
    if fft_size < plan.n:
        raise PhyError(f"fft size {fft_size} < subcarrier count {plan.n}")
    return 1 if plan.n == 1 else (fft_size - 1) // (plan.n - 1)


def center_bin(plan: SubcarrierPlan, index: int, fft_size: int) -> int:
    """FFT bin holding subcarrier `index`'s center frequency."""
    return _stride(plan, fft_size) * plan.check_index(index)


def grid_sample_rate_hz(plan: SubcarrierPlan, fft_size: int) -> float:
    """Complex sample rate that puts every subcarrier center on an FFT bin."""
    return fft_size * plan.spacing_hz / _stride(plan, fft_size)


def baseband_offset_hz(plan: SubcarrierPlan, index: int) -> float:
    """Subcarrier center relative to baseband DC (= subcarrier 0's center)."""
    return float(plan.center(index) - plan.centers[0])


# ---------------------------------------------------------------------------
# BS encode / decode
# ---------------------------------------------------------------------------

class _TransformCounter:
    """Instrumentation: forward transforms performed, 1 per tick expected."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


transform_counter = _TransformCounter()


def bs_ofdm_encode(symbol_map: Mapping[int, Union[int, complex]],
                   plan: SubcarrierPlan, fft_size: int = 64,
                   amplitude: float = 1.0,
                   scheme: Optional[ModulationScheme] = None) -> BasebandBuffer:
    """One-chip-period downlink encode: one IFFT over the whole spectrum.

    `symbol_map` values are chips (0/1) when `scheme` is given, otherwise raw
    complex symbols. Keying an unusable subcarrier is an error; unusable bins
    stay zero.
    """
    v = np.zeros(fft_size, dtype=np.complex128)
    for index, value in symbol_map.items():
        plan.check_index(index)
        if not plan.usable[index]:
            raise PhyError(f"subcarrier {index} is unusable")
        sym = scheme.chip_symbol(int(value)) if scheme is not None else complex(value)
        v[center_bin(plan, index, fft_size)] = sym
    samples = np.fft.ifft(v) * fft_size * amplitude
    return BasebandBuffer(samples, grid_sample_rate_hz(plan, fft_size))


class TickOutput(NamedTuple):
    """One G-FFT tick: per-subcarrier center-bin readout."""

    magnitude: np.ndarray      # raw |FFT| at each center bin
    phase_deg: np.ndarray
    bins: np.ndarray           # complex center-bin values
    usable: np.ndarray


def _window_vector(fft_size: int, window: str) -> Optional[np.ndarray]:
    if window in (None, "none"):
        return None
    if window == "blackman_harris":
        w = blackmanharris(fft_size, sym=False)
        return w * (fft_size / w.sum())   # unity gain for bin-aligned tones
    raise PhyError(f"unknown window {window!r}")


def gfft_tick(window_samples: np.ndarray, plan: SubcarrierPlan,
              window: str = "none") -> TickOutput:
    """Window + one m-point forward transform; report every subcarrier's bin."""
    x = np.asarray(window_samples, dtype=np.complex128)
    m = x.size
    w = _window_vector(m, window)
    if w is not None:
        x = x * w
    spec = np.fft.fft(x)
    transform_counter.count += 1
    bins = spec[center_bin(plan, 0, m) + _stride(plan, m) * np.arange(plan.n)]
    return TickOutput(np.abs(bins), np.degrees(np.angle(bins)), bins,
                      np.asarray(plan.usable))


class TickStream:
    """Batch of consecutive G-FFT ticks (arrays shaped (ticks, n))."""

    def __init__(self, magnitude, phase_deg, bins, usable):
        self.magnitude = magnitude
        self.phase_deg = phase_deg
        self.bins = bins
        self.usable = usable

    def __len__(self) -> int:
        return self.magnitude.shape[0]

    def __getitem__(self, t: int) -> TickOutput:
        return TickOutput(self.magnitude[t], self.phase_deg[t], self.bins[t],
                          self.usable)

    def __iter__(self):
        for t in range(len(self)):
            yield self[t]


def gfft_stream(samples: np.ndarray, plan: SubcarrierPlan, fft_size: int,
                window: str = "none") -> TickStream:
    """Run consecutive ticks over a long capture (one transform per tick)."""
    x = np.asarray(samples, dtype=np.complex128)
    ticks = x.size // fft_size
    x = x[:ticks * fft_size].reshape(ticks, fft_size)
    w = _window_vector(fft_size, window)
    if w is not None:
        x = x * w
    spec = np.fft.fft(x, axis=1)
    transform_counter.count += ticks
    cols = _stride(plan, fft_size) * np.arange(plan.n)
    bins = spec[:, cols]
    return TickStream(np.abs(bins), np.degrees(np.angle(bins)), bins,
                      np.asarray(plan.usable))


# decode column states
_IDLE, _HUNT, _HEADER, _BODY = 0, 1, 2, 3
_MASK64 = (1 << 64) - 1


class DecodeMatrix:
    """Per-subcarrier decode columns; each evolves independently per tick.

    A column is idle until carrier energy appears, then accumulates chips
    from that tick on (chip-aligned arrival), despreads every r chips, hunts
    for preamble+sync in a rolling 64-bit register, reads the length field,
    counts down payload+CRC bits, and emits the packet (or a CRC failure).
    BPSK chips are decided against the reference phase captured at detection;
    a 180-degree-flipped lock is resolved by matching the inverted pattern.
    """

    def __init__(self, plan: SubcarrierPlan, scheme: ModulationScheme,
                 fmt: FrameFormat = DEFAULT_FRAME):
        self.plan = plan
        self.scheme = scheme
        self.fmt = fmt
        n = plan.n
        self._usable = np.asarray(plan.usable)
        self.state = np.zeros(n, dtype=np.int8)
        self.ref_phase = np.zeros(n)
        self.chip_cnt = np.zeros(n, dtype=np.int32)
        self.chip_ones = np.zeros(n, dtype=np.int32)
        self.chip_valid = np.zeros(n, dtype=np.int32)
        self.miss = np.zeros(n, dtype=np.int32)
        self.reg = [0] * n
        self.bits_seen = [0] * n
        self.invert = [False] * n
        self.hdr_acc = [0] * n
        self.hdr_n = [0] * n
        self.body: list[list[int]] = [[] for _ in range(n)]
        self.body_expected = [0] * n
        self._sync_target = ((fmt.preamble << fmt.sync_bits) | fmt.sync_word)
        self._sync_len = fmt.preamble_bits + fmt.sync_bits
        # column-state population counts let the per-tick path skip work
        self._n_idle = n
        self._n_hunt = 0

    def _reset_column(self, j: int):
        if self.state[j] == _HUNT:
            self._n_hunt -= 1
        if self.state[j] != _IDLE:
            self._n_idle += 1
        self.state[j] = _IDLE
        self.chip_cnt[j] = self.chip_ones[j] = self.chip_valid[j] = 0
        self.miss[j] = 0
        self.reg[j] = 0
        self.bits_seen[j] = 0
        self.invert[j] = False
        self.hdr_acc[j] = self.hdr_n[j] = 0
        self.body[j] = []
        self.body_expected[j] = 0

    def _finish_bit(self, j: int, bit: int, completed: list):
        state = self.state[j]
        if state == _HUNT:
            self.reg[j] = ((self.reg[j] << 1) | bit) & _MASK64
            self.bits_seen[j] += 1
            if self.bits_seen[j] >= self._sync_len:
                reg = self.reg[j] & ((1 << self._sync_len) - 1)
                if reg == self._sync_target:
                    self.state[j] = _HEADER
                    self._n_hunt -= 1
                elif self.scheme.kind == "bpsk" and \
                        reg == (self._sync_target ^ ((1 << self._sync_len) - 1)):
                    self.invert[j] = True
                    self.state[j] = _HEADER
                    self._n_hunt -= 1
        elif state == _HEADER:
            bit ^= self.invert[j]
            self.hdr_acc[j] = (self.hdr_acc[j] << 1) | bit
            self.hdr_n[j] += 1
            if self.hdr_n[j] == 16:
                length = self.hdr_acc[j]
                if length > 255:
                    completed.append(CrcFailure(j, length, reason="bad-length"))
                    self._reset_column(j)
                else:
                    self.body_expected[j] = (length + 2) * 8
                    self.state[j] = _BODY
        elif state == _BODY:
            body = self.body[j]
            body.append(bit ^ self.invert[j])
            if len(body) == self.body_expected[j]:
                raw = np.packbits(np.array(body, dtype=np.uint8)).tobytes()
                payload, crc_rx = raw[:-2], struct.unpack(">H", raw[-2:])[0]
                length = self.hdr_acc[j]
                if crc_rx == crc16_ccitt(struct.pack(">H", length) + payload):
                    pkt = Packet(payload, subcarrier=j,
                                 preamble=self.fmt.preamble,
                                 sync_word=self.fmt.sync_word)
                    completed.append(pkt)
                else:
                    completed.append(CrcFailure(j, length))
                self._reset_column(j)


def decode_step(matrix: DecodeMatrix, tick: TickOutput,
                scheme: Optional[ModulationScheme] = None):
    """Advance every column by one tick; return (matrix, completed records)."""
    scheme = scheme or matrix.scheme
    state = matrix.state
    present = tick.magnitude >= scheme.amplitude_threshold

    if matrix._n_idle:
        # wake idle columns on carrier detection (this is their first chip)
        detect = present & matrix._usable & (state == _IDLE)
        hits = detect.nonzero()[0]
        if hits.size:
            state[hits] = _HUNT
            matrix.ref_phase[hits] = tick.phase_deg[hits]
            matrix._n_idle -= hits.size
            matrix._n_hunt += hits.size

    if matrix._n_idle == state.size:
        return matrix, []
    active = state > _IDLE

    if scheme.kind == "ook":
        chip = present
        valid = active
    else:
        dphi = np.abs((tick.phase_deg - matrix.ref_phase + 180.0) % 360.0 - 180.0)
        chip = dphi > 90.0
        if scheme.phase_threshold_deg < 90.0:
            deviation = np.minimum(dphi, 180.0 - dphi)
            valid = active & present & (deviation <= scheme.phase_threshold_deg)
        else:
            valid = active & present
        if matrix._n_hunt:
            # carrier loss while still hunting abandons the column
            matrix.miss = np.where(active & ~present, matrix.miss + 1, 0)
            lost = (state == _HUNT) & \
                (matrix.miss >= 2 * scheme.spreading_factor)
            for j in lost.nonzero()[0]:
                matrix._reset_column(j)
            active = state > _IDLE

    matrix.chip_ones += valid & chip
    matrix.chip_valid += valid
    matrix.chip_cnt += active

    completed: list = []
    done = (active & (matrix.chip_cnt == scheme.spreading_factor)).nonzero()[0]
    for j in done:
        bit = int(2 * matrix.chip_ones[j] > matrix.chip_valid[j])
        matrix.chip_cnt[j] = matrix.chip_ones[j] = matrix.chip_valid[j] = 0
        matrix._finish_bit(int(j), bit, completed)
    return matrix, completed


# ---------------------------------------------------------------------------
# PAPR
# ---------------------------------------------------------------------------

def compute_papr(buffer: Union[BasebandBuffer, np.ndarray]) -> float:
    """10*log10(max |x|^2 / mean |x|^2) in dB; >= 0, 0 iff constant envelope."""
    x = buffer.samples if isinstance(buffer, BasebandBuffer) else np.asarray(buffer)
    if x.size == 0:
        raise PhyError("empty buffer")
    p = np.abs(x) ** 2
    peak = p.max()
    if peak == 0:
        raise PhyError("all-zero buffer")
    return float(10.0 * np.log10(peak / p.mean()))


# ---------------------------------------------------------------------------
# Waveform dump (little-endian float32 I/Q pairs)
# ---------------------------------------------------------------------------

_DUMP_MAGIC = b"SNW1"
_DUMP_HEADER = struct.Struct("<4sIdQ16s")   # magic, fft_size, fs, nsamples, plan hash


def dump_waveform(buffer: BasebandBuffer, path, plan: SubcarrierPlan,
                  fft_size: int) -> None:
    x = buffer.samples.astype(np.complex64)
    iq = np.empty(2 * x.size, dtype="<f4")
    iq[0::2] = x.real
    iq[1::2] = x.imag
    header = _DUMP_HEADER.pack(_DUMP_MAGIC, fft_size, buffer.sample_rate_hz,
                               x.size, plan.plan_hash().encode())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(iq.tobytes())


def load_waveform(path) -> tuple[BasebandBuffer, dict]:
    with open(path, "rb") as fh:
        magic, fft_size, fs, nsamples, plan_hash = _DUMP_HEADER.unpack(
            fh.read(_DUMP_HEADER.size))
        if magic != _DUMP_MAGIC:
            raise PhyError("not a waveform dump")
        iq = np.frombuffer(fh.read(8 * nsamples), dtype="<f4")
    samples = iq[0::2] + 1j * iq[1::2]
    meta = {"fft_size": fft_size, "sample_rate_hz": fs,
            "plan_hash": plan_hash.decode()}
    return BasebandBuffer(samples, fs), meta
