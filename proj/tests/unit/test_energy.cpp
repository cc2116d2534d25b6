#include "doctest.h"
#include "stcore/energy.hpp"
#include "stcore/error.hpp"

using namespace stcore;

TEST_SUITE("energy") {
  TEST_CASE("constants") {
    CHECK(kMacEnergyPj == 4.6);
    CHECK(kAcEnergyPj == 0.9);
  }

  TEST_CASE("conv MAC counts") {
    CHECK(count_conv_macs({1, 1, 1, 1, 1, 1}) == 1);
    CHECK(count_conv_macs({4, 3, 8, 3, 16, 16}) == 4 * 8 * 3 * 9 * 256);
    CHECK(count_conv_macs({4, 3, 8, 3, 16, 16}) == 221'184);
    CHECK(count_conv_macs({4, 3, 8, 3, 16, 16}) == 4 * count_conv_macs({4, 3, 8, 3, 8, 8}));
  }

  TEST_CASE("spike AC counts") {
    const ConvGeometry dw{2, 1, 4, 3, 8, 8};
    CHECK(count_spike_acs(dw, 0.0) == 0.0);
    CHECK(count_spike_acs(dw, 1.0) == static_cast<double>(dw.connections() * 2));
    CHECK(count_spike_acs(dw, 0.25) == 1152.0);
    CHECK_THROWS_AS(count_spike_acs(dw, 1.5), ValueError);
    CHECK_THROWS_AS(count_spike_acs(dw, -0.1), ValueError);
  }

  TEST_CASE("total energy arithmetic") {
    EnergyReport r;
    r.layers.push_back({"enc", 1000.0, 0.0, 0.0, false});
    r.layers.push_back({"spk", 0.0, 2000.0, 0.3, true});
    CHECK(r.total_pj() == 6400.0);
    CHECK(r.total_pj() == r.e_mac_pj * r.total_macs() + r.e_ac_pj * r.total_acs());
    CHECK(pj_to_mj(1e9) == 1.0);
    CHECK(pj_to_mj(r.total_pj()) == 6.4e-6);
    r.validate();
    r.layers.push_back({"bad", 1.0, 0.0, 0.5, true});
    CHECK_THROWS_AS(r.validate(), ValueError);
  }

  TEST_CASE("report formats carry the constants verbatim") {
    EnergyReport r;
    r.variant = "unfused";
    r.layers.push_back({"enc.conv", 1000.0, 0.0, 0.0, false});
    r.layers.push_back({"blk0.q", 0.0, 2000.0, 0.125, true});
    const std::string table = format_energy_table(r);
    CHECK(table.find("E_MAC = 4.6 pJ") != std::string::npos);
    CHECK(table.find("E_AC = 0.9 pJ") != std::string::npos);
    CHECK(table.find("6400.0") != std::string::npos);
    const std::string csv = energy_csv(r);
    CHECK(csv.rfind("layer,kind,firing_rate,macs,acs,energy_pj\n", 0) == 0);
    CHECK(csv.find("total,,,1000,2000,6400\n") != std::string::npos);
    const std::string svg = energy_svg(r);
    CHECK(svg.find("version=\"1.1\"") != std::string::npos);
    CHECK(svg.find("E_MAC = 4.6 pJ") != std::string::npos);
    CHECK(svg == energy_svg(r));
  }
}
