"""White-space LPWAN stack: distributed-OFDM PHY, MAC, estimation, power
control, multi-cell spectrum allocation, and a deterministic simulator."""

from .spectrum import SpectrumBand, SubcarrierPlan, plan_subcarriers, subcarrier_center
from .phy import (
    BasebandBuffer, DecodeMatrix, ModulationScheme, Packet,
    bs_ofdm_encode, compute_papr, decode_step, despread_bits, frame_packet,
    gfft_stream, gfft_tick, node_modulate, parse_frame, spread_bits,
)
from .channel import LinkModel, Superposition, doppler_shift_hz, path_loss_db, propagate
from .estimation import (
    CfoEstimate, CsiEstimate, compensate_cfo, estimate_cfo, estimate_csi, scale_cfo,
)
from .atpc import PowerModel, fit_initial, select_power, update_model
from .sop import (
    Allocation, SopInstance, approx_allocate, assign_tree_links,
    brute_force_optimal, check_feasibility, greedy_allocate,
)
from .mac import BaseStation, MacConfig, NodeRecord, allocate_subcarriers, hidden_sets
from .scenario import ScenarioConfig, load_config, preset
from .sim import MetricsReport, Simulator, account_energy, run_scenario

__version__ = "0.1.0"
