"""Receiver-side estimation: frequency offset and flat-fading gain.

A node's crystal is a few ppm off, which at 550 MHz is kilohertz of carrier
offset - enough to smear its subcarrier into the neighbors and scramble BPSK
phases within a packet. The cure is measured on the join exchange: the
32-bit preamble's first quarter gives a coarse lag-product estimate, the
de-rotated remainder refines it, and the ppm scales the correction to
whatever subcarrier the node is later assigned. The same preamble also
yields the least-squares channel gain.

The script walks the whole arc: estimate under noise, scale to the assigned
subcarrier, pre-compensate at the transmitter, and watch a packet that was
undecodable come back bit-exact.

Run: python demos/03_cfo_csi_estimation.py
"""

import numpy as np

from snowsim import LinkModel, Superposition, propagate
from snowsim.estimation import compensate_cfo, estimate_cfo, estimate_csi, scale_cfo
from snowsim.phy import (
    DecodeMatrix,
    ModulationScheme,
    baseband_offset_hz,
    decode_step,
    frame_packet,
    gfft_stream,
    grid_sample_rate_hz,
    modulate_chips,
    node_modulate,
    spread_bits,
)
from snowsim.spectrum import SpectrumBand, plan_subcarriers

rng = np.random.default_rng(3)
plan = plan_subcarriers(SpectrumBand(547_000_000, 553_000_000), 400_000, 0.5)
m = 64
fs = grid_sample_rate_hz(plan, m)
scheme = ModulationScheme("bpsk", spreading_factor=8)

f_join = plan.center(28)
ppm = 4.1
cfo_true = ppm * f_join / 1e6
print(f"node crystal offset: {ppm} ppm -> {cfo_true:.1f} Hz on the join "
      f"subcarrier at {f_join/1e6:.1f} MHz")

# ---- join exchange: known preamble through a noisy fading channel
preamble = modulate_chips(spread_bits([1, 0] * 16, 8),
                          ModulationScheme("bpsk", spreading_factor=1),
                          0.0, fs, m)
h_true = 0.62 * np.exp(1j * 0.8)
sup = Superposition()
sup.add(preamble, 0, LinkModel(fading_h=h_true, cfo_hz=cfo_true, snr_db=20.0))
rx = propagate(sup, 11, len(preamble), fs)

est = estimate_cfo(rx, preamble, chip_period_s=m / fs, join_freq_hz=f_join)
print(f"estimated: coarse {est.coarse_hz:8.2f} Hz, fine {est.fine_hz:8.2f} Hz "
      f"({est.ppm:.3f} ppm; true {cfo_true:.2f} Hz)")

flat = compensate_cfo(rx, est.fine_hz)
quarters = np.split(flat.samples, 4)
known_quarters = np.split(preamble.samples, 4)
csi = estimate_csi(quarters, known_quarters)
print(f"channel gain: estimated {csi.h_hat:.3f}, true {h_true:.3f} "
      f"(|error| {abs(csi.h_hat - h_true):.3f})")

# ---- the payoff: an assigned subcarrier elsewhere in the band
assigned = 9
f_i = plan.center(assigned)
cfo_i = ppm * f_i / 1e6
feedback = scale_cfo(est, f_join, f_i)
print(f"\nassigned subcarrier {assigned} at {f_i/1e6:.1f} MHz: offset there "
      f"{cfo_i:.1f} Hz, feedback {feedback:.1f} Hz")

pkt = frame_packet(b"after feedback", subcarrier=assigned)
tx = node_modulate(pkt, scheme, baseband_offset_hz(plan, assigned), fs, m)


def decode(buffer):
    matrix = DecodeMatrix(plan, scheme)
    out = []
    for tick in gfft_stream(buffer.samples, plan, m):
        out.extend(decode_step(matrix, tick)[1])
    return [getattr(r, "payload", "CRC-FAIL") for r in out]


for label, wave in (("uncompensated", tx),
                    ("pre-compensated", compensate_cfo(tx, feedback))):
    sup = Superposition()
    sup.add(wave, 0, LinkModel(cfo_hz=cfo_i))
    got = decode(propagate(sup, 5, len(tx) + m, fs))
    print(f"  {label:16s}: decoded {got if got else 'nothing'}")
