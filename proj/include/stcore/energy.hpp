#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stcore {

inline constexpr double kMacEnergyPj = 4.6;
inline constexpr double kAcEnergyPj = 0.9;

struct ConvGeometry {
  std::int64_t timesteps = 1;
  std::int64_t c_in = 1;  // input channels seen by one output channel (1 for depthwise)
  std::int64_t c_out = 1;
  std::int64_t k = 1;
  std::int64_t h_out = 1;
  std::int64_t w_out = 1;

  /// Synaptic connections per timestep: c_out * c_in * k^2 * h_out * w_out.
  std::int64_t connections() const { return c_out * c_in * k * k * h_out * w_out; }
};

/// Dense multiply-accumulates for one sample: T * connections().
std::int64_t count_conv_macs(const ConvGeometry& g);

/// Spike-driven accumulates for one sample: rate * connections * T.
/// Throws ValueError if rate is outside [0, 1].
double count_spike_acs(std::int64_t timesteps, std::int64_t connections_per_timestep, double firing_rate);
double count_spike_acs(const ConvGeometry& g, double firing_rate);

struct OpCount {
  std::string layer_id;
  double macs = 0.0;
  double acs = 0.0;
  double firing_rate = 0.0;  // input spike rate, 0 for analog inputs
  bool spike_driven = false;
};

struct EnergyReport {
  std::vector<OpCount> layers;
  double e_mac_pj = kMacEnergyPj;
  double e_ac_pj = kAcEnergyPj;
  std::string variant;  // "unfused" or "fused"

  double total_macs() const;
  double total_acs() const;
  /// e_mac * sum(macs) + e_ac * sum(acs).
  double total_pj() const;
  /// Throws ValueError on negative counts, bad rates or spike-driven MACs.
  void validate() const;
};

double pj_to_mj(double pj);

/// Fixed-width text table with per-layer rows and the energy constants.
std::string format_energy_table(const EnergyReport& report);
/// CSV with header layer,kind,firing_rate,macs,acs,energy_pj and a total row.
std::string energy_csv(const EnergyReport& report);
/// SVG 1.1 horizontal bar chart of per-layer energy.
std::string energy_svg(const EnergyReport& report);

}  // namespace stcore
