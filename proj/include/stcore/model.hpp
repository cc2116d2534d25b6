#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stcore/energy.hpp"
#include "stcore/lif.hpp"
#include "stcore/spatial_core.hpp"
#include "stcore/temporal_fold.hpp"
#include "stcore/tensor.hpp"
#include "stcore/tsbn.hpp"

namespace stcore {

struct RtformerConfig {
  std::int64_t T = 4;
  std::int64_t depth = 2;
  std::int64_t dim = 64;
  std::int64_t heads = 4;
  std::int64_t w = 0;  // TSBN window; 0 means T
  std::int64_t classes = 4;
  std::int64_t in_channels = 2;
  std::int64_t height = 16;
  std::int64_t width = 16;
  std::int64_t mlp_ratio = 2;
  int embed_stride = 2;
  double attn_scale = 0.125;
  double v_th = 1.0;  // threshold of the stateless spike units
  LifParams lif;
  std::uint64_t seed = 0;
  std::string block_order = "attn-mlp";  // or "mlp-attn"; both follow the spatial core
  std::string dataset = "toy-events";

  std::int64_t window() const { return w == 0 ? T : w; }
  std::int64_t grid_h() const;
  std::int64_t grid_w() const;
  /// Throws ValueError on an inconsistent configuration.
  void validate() const;
  /// key=value lines, one per field, stable order.
  std::vector<std::pair<std::string, std::string>> to_records() const;
  static RtformerConfig from_records(const std::vector<std::pair<std::string, std::string>>& records);
};

enum class NetMode { Train, Infer, Fused };

std::string mode_name(NetMode mode);

/// conv -> TSBN -> stateless threshold. After fusion the TSBN is replaced by
/// a folded threshold on the raw conv output.
struct SpikeUnit {
  std::string name;
  Tensor weight;  // [Cout, Cin, k, k]
  int stride = 1;
  std::optional<TsbnLayer> tsbn;
  std::optional<FoldedThreshold> folded;
};

struct RtformerBlock {
  std::string name;
  std::optional<BranchBank> core;
  std::optional<FusedConv> core_fused;
  SpikeUnit q, k, v, proj, fc1, fc2;
};

/// Spike activations and their distance to threshold for one layer, recorded
/// when a trace is requested.
struct LayerTrace {
  std::string name;
  Tensor input;               // what the layer consumed, [T,B,...]
  Tensor spikes;              // [T,B,...]
  std::vector<double> margin; // pre-activation minus threshold, normalized units
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  std::vector<std::pair<Tensor, Tensor>> attention_qk;  // per block, [T,B,heads,d,N]
  Tensor head_input;                                    // [T,B,D,H,W] spikes entering the readout
};

/// Toy spiking transformer: embedding conv unit, `depth` blocks, then a
/// mean-over-time-and-space readout. A block is spatial core -> LIF followed
/// by two residual stages (OR shortcut) in `block_order`:
///   attention: q,k,v units -> spiking attention -> LIF -> projection unit
///   mlp:       fc1 unit -> fc2 unit
class RtformerNet {
 public:
  static RtformerNet build(const RtformerConfig& config);

  const RtformerConfig& config() const { return config_; }
  NetMode mode() const { return mode_; }
  bool fused() const { return mode_ == NetMode::Fused; }
  /// Switches between Train and Infer; Infer requires populated statistics.
  void set_mode(NetMode mode);

  /// x [T, B, Cin, H, W] -> logits [B, classes]. Train mode records onto the
  /// active tape and updates TSBN statistics.
  Tensor forward(const Tensor& x, ForwardTrace* trace = nullptr);

  std::vector<Tensor> parameters() const;
  /// Every named tensor needed to run the net in its current form.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  /// Total stored floats across named_tensors().
  std::int64_t parameter_count() const;
  /// Closed-form stored-float count of an unfused net.
  static std::int64_t expected_parameter_count(const RtformerConfig& config);
  static std::int64_t expected_fused_parameter_count(const RtformerConfig& config);

  /// Names of TSBN layers lacking running statistics.
  std::vector<std::string> layers_missing_stats() const;

  /// Replace a named tensor's values (shape must match). Used by loaders.
  void assign(const std::string& name, const Tensor& value);
  /// Marks every TSBN as having statistics (set after loading a checkpoint).
  void set_stats_ready(bool ready);

  SpikeUnit& embed() { return embed_; }
  const SpikeUnit& embed() const { return embed_; }
  std::vector<RtformerBlock>& blocks() { return blocks_; }
  const std::vector<RtformerBlock>& blocks() const { return blocks_; }
  Tensor& head_weight() { return head_w_; }
  Tensor& head_bias() { return head_b_; }

  /// Builds an empty fused net shell for loading a fused checkpoint.
  static RtformerNet build_fused_shell(const RtformerConfig& config);

 private:
  friend RtformerNet fuse_network(const RtformerNet& net);

  RtformerConfig config_;
  NetMode mode_ = NetMode::Train;
  SpikeUnit embed_;
  std::vector<RtformerBlock> blocks_;
  Tensor head_w_;  // [dim, classes]
  Tensor head_b_;  // [classes]
};

/// Softmax-free attention on binary q, k, v [T,B,heads,N,d]:
/// out = q (k^T v) * scale. Checked mode rejects non-binary inputs.
Tensor spiking_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale);

/// Elementwise OR of two spike tensors, a + b - a b.
Tensor spike_or(const Tensor& a, const Tensor& b);

/// Deep copy with every TSBN bank fused and every unit's TSBN folded. The
/// source net is left untouched. Throws StateError if the net is already
/// fused or some layer lacks statistics (the message names the layer).
RtformerNet fuse_network(const RtformerNet& net);

/// Deep copy of all tensors (parameters stay trainable, detached).
RtformerNet clone_network(const RtformerNet& net);

struct Dataset {
  std::int64_t T = 0, C = 0, H = 0, W = 0;
  std::vector<float> data;  // sample-major [N, T, C, H, W]
  std::vector<std::int64_t> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  /// Gathers samples into [T, B, C, H, W].
  Tensor batch(const std::vector<std::int64_t>& indices) const;
  void append(const Tensor& sample, std::int64_t label);  // sample [T,1,C,H,W] or [T,C,H,W]
};

class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}
  void step(const std::vector<Tensor>& params);
  void zero_grad(const std::vector<Tensor>& params);
  double lr() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::map<std::uint64_t, std::vector<double>> velocity_;
};

struct EpochMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> batch_losses;
};

/// One pass over `data` in a seeded shuffled order. Rejects fused nets.
EpochMetrics train_epoch(RtformerNet& net, const Dataset& data, SgdOptimizer& opt, std::int64_t batch_size,
                         std::uint64_t seed);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::int64_t> predictions;
  std::vector<float> logits;  // [N, classes]
};

EvalResult evaluate(RtformerNet& net, const Dataset& data, std::int64_t batch_size = 32);

struct SampleVerdict {
  std::int64_t index = 0;
  double logit_rel_error = 0.0;
  std::int64_t mismatches = 0;          // spike flips outside the band, before any in-band flip
  std::int64_t band_mismatches = 0;     // flips whose reference pre-activation was inside the band
  std::int64_t cascade_mismatches = 0;  // flips downstream of an in-band flip
  bool argmax_agrees = true;
};

struct VerifyReport {
  std::vector<SampleVerdict> samples;
  double tolerance = 1e-4;
  double band = 1e-6;
  double max_logit_rel_error = 0.0;
  std::int64_t mismatches = 0;
  std::int64_t band_mismatches = 0;
  std::int64_t cascade_mismatches = 0;
  std::int64_t logits_within_tol = 0;
  std::int64_t argmax_agree = 0;

  bool passed() const;
  std::string summary() const;
};

/// Runs both nets on every sample of `data` (first `limit` samples; 0 = all)
/// and compares logits and per-layer spike trains.
VerifyReport verify_fusion(RtformerNet& reference, RtformerNet& fused, const Dataset& data, double tolerance,
                           std::int64_t limit = 0, double band = 1e-6);

/// Per-sample MAC/AC estimate on a probe batch [T,B,Cin,H,W]. Rejects
/// training-mode nets.
EnergyReport estimate_energy(RtformerNet& net, const Tensor& probe);

}  // namespace stcore
