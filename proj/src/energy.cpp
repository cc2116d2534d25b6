#include "stcore/energy.hpp"

#include <fmt/format.h>

#include <algorithm>

#include "stcore/error.hpp"

namespace stcore {

std::int64_t count_conv_macs(const ConvGeometry& g) { return g.timesteps * g.connections(); }

double count_spike_acs(std::int64_t timesteps, std::int64_t connections_per_timestep, double firing_rate) {
  if (!(firing_rate >= 0.0 && firing_rate <= 1.0)) {
    throw ValueError(fmt::format("firing rate {} outside [0, 1]", firing_rate));
  }
  return firing_rate * static_cast<double>(connections_per_timestep) * static_cast<double>(timesteps);
}

double count_spike_acs(const ConvGeometry& g, double firing_rate) {
  return count_spike_acs(g.timesteps, g.connections(), firing_rate);
}

double EnergyReport::total_macs() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.macs;
  return s;
}

double EnergyReport::total_acs() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.acs;
  return s;
}

double EnergyReport::total_pj() const { return e_mac_pj * total_macs() + e_ac_pj * total_acs(); }

void EnergyReport::validate() const {
  for (const auto& l : layers) {
    if (l.macs < 0.0 || l.acs < 0.0) throw ValueError("negative op count in layer " + l.layer_id);
    if (!(l.firing_rate >= 0.0 && l.firing_rate <= 1.0)) throw ValueError("bad firing rate in layer " + l.layer_id);
    if (l.spike_driven && l.macs != 0.0) throw ValueError("spike-driven layer " + l.layer_id + " has MACs");
  }
}

double pj_to_mj(double pj) { return pj / 1e9; }

std::string format_energy_table(const EnergyReport& report) {
  std::size_t width = 5;
  for (const auto& l : report.layers) width = std::max(width, l.layer_id.size());
  std::string out;
  out += fmt::format("energy model ({})\n", report.variant.empty() ? "network" : report.variant);
  out += fmt::format("E_MAC = {} pJ, E_AC = {} pJ\n", report.e_mac_pj, report.e_ac_pj);
  out += fmt::format("{:<{}}  {:>6}  {:>14}  {:>14}  {:>14}\n", "layer", width, "rate", "MACs", "ACs", "energy [pJ]");
  for (const auto& l : report.layers) {
    const double e = report.e_mac_pj * l.macs + report.e_ac_pj * l.acs;
    const std::string rate = l.spike_driven ? fmt::format("{:.4f}", l.firing_rate) : "-";
    out += fmt::format("{:<{}}  {:>6}  {:>14.1f}  {:>14.1f}  {:>14.1f}\n", l.layer_id, width, rate, l.macs, l.acs, e);
  }
  out += fmt::format("{:<{}}  {:>6}  {:>14.1f}  {:>14.1f}  {:>14.1f}\n", "total", width, "", report.total_macs(),
                     report.total_acs(), report.total_pj());
  out += fmt::format("total energy per sample: {:.6g} mJ\n", pj_to_mj(report.total_pj()));
  return out;
}

std::string energy_csv(const EnergyReport& report) {
  std::string out = "layer,kind,firing_rate,macs,acs,energy_pj\n";
  for (const auto& l : report.layers) {
    const double e = report.e_mac_pj * l.macs + report.e_ac_pj * l.acs;
    out += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", l.layer_id, l.spike_driven ? "spike" : "analog",
                       l.firing_rate, l.macs, l.acs, e);
  }
  out += fmt::format("total,,,{:.17g},{:.17g},{:.17g}\n", report.total_macs(), report.total_acs(), report.total_pj());
  return out;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

std::string energy_svg(const EnergyReport& report) {
  const int row = 18, label_w = 170, bar_w = 420, top = 40;
  const int height = top + row * static_cast<int>(report.layers.size()) + 30;
  const int width = label_w + bar_w + 120;
  double peak = 0.0;
  for (const auto& l : report.layers) peak = std::max(peak, report.e_mac_pj * l.macs + report.e_ac_pj * l.acs);
  std::string out;
  out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" "
      "font-family=\"monospace\" font-size=\"11\">\n",
      width, height);
  out += fmt::format("<text x=\"8\" y=\"16\">energy per layer, {} (E_MAC = {} pJ, E_AC = {} pJ)</text>\n",
                     xml_escape(report.variant), report.e_mac_pj, report.e_ac_pj);
  int y = top;
  for (const auto& l : report.layers) {
    const double e = report.e_mac_pj * l.macs + report.e_ac_pj * l.acs;
    const double len = peak > 0.0 ? bar_w * e / peak : 0.0;
    out += fmt::format("<text x=\"8\" y=\"{}\">{}</text>\n", y + 12, xml_escape(l.layer_id));
    out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{:.2f}\" height=\"{}\" fill=\"{}\"/>\n", label_w, y + 2, len,
                       row - 4, l.spike_driven ? "#4c78a8" : "#e45756");
    out += fmt::format("<text x=\"{:.2f}\" y=\"{}\">{:.4g} pJ</text>\n", label_w + len + 4, y + 12, e);
    y += row;
  }
  out += fmt::format("<text x=\"8\" y=\"{}\">total {:.6g} pJ = {:.6g} mJ</text>\n", y + 18, report.total_pj(),
                     pj_to_mj(report.total_pj()));
  out += "</svg>\n";
  return out;
}

}  // namespace stcore
