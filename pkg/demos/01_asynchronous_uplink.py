"""Many unsynchronized narrowband transmitters, one FFT at the receiver.

Twenty-nine nodes each frame a packet, spread its bits, and key BPSK chips
onto their own 400 kHz subcarrier of a 6 MHz band, starting whenever they
like. The base station runs a single 64-point transform per chip period and
walks every subcarrier's bit column out of it. This script builds that
scene sample-by-sample and shows every packet coming back bit-exact, with
the transform counter proving the decode cost never depended on how many
nodes were talking.

Run: python demos/01_asynchronous_uplink.py
"""

import numpy as np

from snowsim import ModulationScheme, SpectrumBand, plan_subcarriers
from snowsim.phy import (
    DecodeMatrix,
    baseband_offset_hz,
    decode_step,
    frame_packet,
    gfft_stream,
    grid_sample_rate_hz,
    node_modulate,
    transform_counter,
)

rng = np.random.default_rng(7)

plan = plan_subcarriers(SpectrumBand(547_000_000, 553_000_000), 400_000, 0.5)
print(f"plan: {plan.n} subcarriers, centers {plan.centers[0]/1e6:.1f} .. "
      f"{plan.centers[-1]/1e6:.1f} MHz, spacing {plan.spacing_hz/1e3:.0f} kHz")

scheme = ModulationScheme("bpsk", spreading_factor=8)
m = 64
fs = grid_sample_rate_hz(plan, m)

# every node picks a payload and a start time of its own
payloads = {sc: rng.bytes(10) for sc in range(plan.n)}
offsets = {sc: int(rng.integers(0, 200)) for sc in range(plan.n)}

frame_chips = (12 + 10) * 8 * scheme.spreading_factor
total_ticks = frame_chips + max(offsets.values()) + 8
stream = np.zeros(total_ticks * m, dtype=complex)
for sc, payload in payloads.items():
    pkt = frame_packet(payload, subcarrier=sc)
    buf = node_modulate(pkt, scheme, baseband_offset_hz(plan, sc), fs, m)
    start = offsets[sc] * m
    stream[start:start + len(buf)] += buf.samples

print(f"superposed {plan.n} packets over {total_ticks} chip periods "
      f"({total_ticks * m} samples at {fs/1e6:.1f} MHz)")

transform_counter.reset()
matrix = DecodeMatrix(plan, scheme)
decoded = {}
for tick in gfft_stream(stream, plan, m):
    for rec in decode_step(matrix, tick)[1]:
        decoded[rec.subcarrier] = rec.payload

exact = sum(decoded.get(sc) == payloads[sc] for sc in payloads)
print(f"decoded bit-exact: {exact}/{plan.n}")
print(f"forward transforms: {transform_counter.count} for {total_ticks} ticks "
      f"-> {transform_counter.count / total_ticks:.0f} per tick, independent "
      "of the 29 concurrent transmitters")
