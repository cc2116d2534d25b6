#include "stcore/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <optional>

#include "stcore/error.hpp"
#include "stcore/io/checkpoint.hpp"
#include "stcore/io/events.hpp"
#include "stcore/io/file.hpp"
#include "stcore/io/images.hpp"
#include "stcore/random.hpp"

namespace stcore::cli {

namespace fs = std::filesystem;

namespace {

// Raised for bad invocations that CLI11 cannot see (missing files, wrong net state).
struct UsageError : Error {
  using Error::Error;
};

struct Shared {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

struct DataArgs {
  std::string dir;
  std::string idx_images;
  std::string idx_labels;
  std::string encoding = "direct";
};

void add_shared(CLI::App* cmd, Shared& s, bool out_required) {
  cmd->add_option("--seed", s.seed, "random seed");
  cmd->add_option("--config", s.config, "config file of key=value lines")->check(CLI::ExistingFile);
  auto* o = cmd->add_option("--out", s.out, "output path");
  if (out_required) o->required();
}

void add_data(CLI::App* cmd, DataArgs& d) {
  cmd->add_option("--data", d.dir, "event dataset directory (from gen-data)");
  cmd->add_option("--idx-images", d.idx_images, "IDX image file");
  cmd->add_option("--idx-labels", d.idx_labels, "IDX label file");
  cmd->add_option("--encoding", d.encoding, "IDX spike encoding")->check(CLI::IsMember({"direct", "rate"}));
}

bool has_data(const DataArgs& d) { return !d.dir.empty() || !d.idx_images.empty(); }

fs::path split_dir(const fs::path& root, const std::string& split) {
  if (fs::exists(root / split / "manifest.csv")) return root / split;
  if (fs::exists(root / "manifest.csv")) return root;
  throw UsageError("no manifest.csv under " + root.string() + " or " + (root / split).string());
}

std::optional<Dataset> load_data(const DataArgs& d, const std::string& split, std::int64_t T, std::uint64_t seed) {
  if (!d.idx_images.empty()) {
    if (d.idx_labels.empty()) throw UsageError("--idx-images needs --idx-labels");
    return io::load_idx_dataset(d.idx_images, d.idx_labels, T, io::parse_encoding(d.encoding), seed);
  }
  if (d.dir.empty()) return std::nullopt;
  const fs::path root = d.dir;
  if (split == "test" && !fs::exists(root / "test" / "manifest.csv") && fs::exists(root / "train")) {
    return std::nullopt;
  }
  return io::load_event_dataset(split_dir(root, split), T);
}

RtformerNet load_net(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  return io::load_checkpoint(path);
}

void check_data_fits(const RtformerConfig& c, const Dataset& d) {
  if (d.T != c.T || d.C != c.in_channels || d.H != c.height || d.W != c.width) {
    throw UsageError(fmt::format("dataset is [T={}, C={}, {}x{}] but the network expects [T={}, C={}, {}x{}]", d.T,
                                 d.C, d.H, d.W, c.T, c.in_channels, c.height, c.width));
  }
}

Dataset random_inputs(const RtformerConfig& c, std::int64_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<float> v(static_cast<std::size_t>(c.T * c.in_channels * c.height * c.width));
    for (auto& x : v) x = rng.bernoulli(0.1) ? 1.0f : 0.0f;
    d.append(Tensor({c.T, c.in_channels, c.height, c.width}, std::move(v)), 0);
  }
  return d;
}

std::string param_report(const RtformerNet& before, const RtformerNet& after) {
  const auto b = before.parameter_count(), a = after.parameter_count();
  return fmt::format("parameters before fusion: {}\nparameters after fusion:  {}\nremoved: {} ({:.1f}%)\n", b, a, b - a,
                     100.0 * static_cast<double>(b - a) / static_cast<double>(b));
}

int cmd_gen_data(const Shared& s, const io::ToyEventOptions& base, std::int64_t test_samples, std::ostream& out) {
  io::ToyEventOptions o = base;
  o.seed = s.seed.value_or(0);
  const fs::path root = s.out;
  const auto train = io::gen_toy_events(root / "train", o);
  o.samples_per_class = test_samples;
  o.seed = o.seed + 0x7e57;
  const auto test = io::gen_toy_events(root / "test", o);
  out << fmt::format("wrote {} training and {} test streams ({} classes, {}x{} sensor) under {}\n", train.size(),
                     test.size(), o.classes, o.size, o.size, root.string());
  return kExitOk;
}

struct TrainArgs {
  std::int64_t epochs = 5;
  double lr = 0.05;
  double momentum = 0.9;
  std::int64_t batch = 16;
  std::string metrics;
};

int cmd_train(const Shared& s, const DataArgs& d, const TrainArgs& t, std::ostream& out) {
  RtformerConfig c = s.config.empty() ? RtformerConfig{} : io::read_config_file(s.config);
  if (s.seed) c.seed = *s.seed;
  auto train = load_data(d, "train", c.T, c.seed);
  if (!train) throw UsageError("train needs --data or --idx-images");
  c.in_channels = train->C;
  c.height = train->H;
  c.width = train->W;
  std::int64_t max_label = 0;
  for (auto l : train->labels) max_label = std::max(max_label, l);
  c.classes = std::max(c.classes, max_label + 1);
  if (!d.dir.empty()) c.dataset = fs::path(d.dir).filename().string();
  std::optional<Dataset> test;
  if (!d.dir.empty() && fs::exists(fs::path(d.dir) / "test" / "manifest.csv")) {
    test = io::load_event_dataset(fs::path(d.dir) / "test", c.T);
  }

  auto net = RtformerNet::build(c);
  SgdOptimizer opt(t.lr, t.momentum);
  std::string csv = "epoch,loss,train_accuracy,test_accuracy\n";
  for (std::int64_t e = 0; e < t.epochs; ++e) {
    const auto m = train_epoch(net, *train, opt, t.batch, c.seed * 1000003 + static_cast<std::uint64_t>(e));
    std::string test_acc;
    if (test) test_acc = fmt::format("{:.4f}", evaluate(net, *test).accuracy);
    out << fmt::format("epoch {:>3}  loss {:.4f}  train acc {:.4f}{}\n", e + 1, m.loss, m.accuracy,
                       test ? "  test acc " + test_acc : "");
    csv += fmt::format("{},{:.17g},{:.17g},{}\n", e + 1, m.loss, m.accuracy, test_acc);
  }
  if (t.epochs > 0) net.set_mode(NetMode::Infer);
  io::save_checkpoint(s.out, net);
  const std::string metrics = t.metrics.empty() ? s.out + ".metrics.csv" : t.metrics;
  io::write_text_atomic(metrics, csv);
  out << "checkpoint: " << s.out << "\nmetrics: " << metrics << "\n";
  return kExitOk;
}

int cmd_eval(const Shared& s, const DataArgs& d, const std::string& ckpt, std::ostream& out) {
  auto net = load_net(ckpt);
  auto data = load_data(d, "test", net.config().T, s.seed.value_or(0));
  if (!data) throw UsageError("eval needs --data or --idx-images");
  check_data_fits(net.config(), *data);
  if (net.mode() == NetMode::Train) net.set_mode(NetMode::Infer);
  const auto r = evaluate(net, *data);
  out << fmt::format("{} ({}): accuracy {:.4f} on {} samples\n", ckpt, mode_name(net.mode()), r.accuracy, data->size());
  return kExitOk;
}

int cmd_fuse(const Shared& s, const std::string& ckpt, std::ostream& out) {
  const auto net = load_net(ckpt);
  if (net.fused()) throw UsageError(ckpt + " is already fused");
  const auto missing = net.layers_missing_stats();
  if (!missing.empty()) throw UsageError("cannot fuse: TSBN '" + missing.front() + "' has no running statistics");
  const auto fused = fuse_network(net);
  io::save_checkpoint(s.out, fused);
  const std::string report = param_report(net, fused);
  io::write_text_atomic(s.out + ".params.txt", report);
  out << report << "fused checkpoint: " << s.out << "\n";
  return kExitOk;
}

struct VerifyArgs {
  std::string fused;
  double tolerance = 1e-4;
  std::int64_t samples = 100;
  double band = 1e-6;
};

int cmd_verify(const Shared& s, const DataArgs& d, const std::string& ckpt, const VerifyArgs& v, std::ostream& out) {
  auto reference = load_net(ckpt);
  if (reference.fused()) throw UsageError("verify needs the unfused checkpoint as --checkpoint (pass the fused one as --fused)");
  auto fused = v.fused.empty() ? fuse_network(reference) : load_net(v.fused);
  if (!fused.fused()) throw UsageError(v.fused + " is not a fused checkpoint");
  const auto& c = reference.config();
  if (c.to_records() != fused.config().to_records()) throw UsageError("checkpoints were built from different configs");
  auto data = load_data(d, "test", c.T, s.seed.value_or(0));
  const Dataset probe = data ? *data : random_inputs(c, v.samples, s.seed.value_or(0));
  check_data_fits(c, probe);
  const auto rep = verify_fusion(reference, fused, probe, v.tolerance, v.samples, v.band);
  out << rep.summary() << "\n";
  out << (rep.passed() ? "PASS" : "FAIL") << "\n";
  if (!s.out.empty()) {
    std::string csv = "sample,logit_rel_error,mismatches,band_mismatches,cascade_mismatches,argmax_agrees\n";
    for (const auto& x : rep.samples) {
      csv += fmt::format("{},{:.17g},{},{},{},{}\n", x.index, x.logit_rel_error, x.mismatches, x.band_mismatches,
                         x.cascade_mismatches, x.argmax_agrees ? 1 : 0);
    }
    io::write_text_atomic(s.out, csv);
  }
  return rep.passed() ? kExitOk : kExitVerifyFailed;
}

int cmd_energy(const Shared& s, const DataArgs& d, const std::string& ckpt, const std::string& probe_kind,
               std::int64_t batch, std::ostream& out) {
  auto net = load_net(ckpt);
  if (net.mode() == NetMode::Train) net.set_mode(NetMode::Infer);
  const auto& c = net.config();
  Tensor probe;
  if (probe_kind == "zeros") {
    probe = Tensor::zeros({c.T, batch, c.in_channels, c.height, c.width});
  } else if (probe_kind == "random") {
    const Dataset r = random_inputs(c, batch, s.seed.value_or(0));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(batch));
    for (std::int64_t i = 0; i < batch; ++i) idx[static_cast<std::size_t>(i)] = i;
    probe = r.batch(idx);
  } else {
    auto data = load_data(d, "test", c.T, s.seed.value_or(0));
    if (!data) throw UsageError("--probe data needs --data or --idx-images");
    check_data_fits(c, *data);
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < std::min(batch, data->size()); ++i) idx.push_back(i);
    probe = data->batch(idx);
  }
  const auto rep = estimate_energy(net, probe);
  const std::string table = format_energy_table(rep);
  out << table;
  const std::string prefix = s.out.empty() ? "energy" : s.out;
  io::write_text_atomic(prefix + ".txt", table);
  io::write_text_atomic(prefix + ".csv", energy_csv(rep));
  io::write_text_atomic(prefix + ".svg", energy_svg(rep));
  out << fmt::format("wrote {0}.txt, {0}.csv, {0}.svg\n", prefix);
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spiking transformer kernel: train, fuse, verify and cost toy spiking transformers", "stcore"};
  app.require_subcommand(1);

  Shared shared;
  DataArgs data;
  std::string ckpt;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic moving-bar event dataset");
  add_shared(gen, shared, true);
  io::ToyEventOptions toy;
  std::int64_t test_samples = 25;
  gen->add_option("--classes", toy.classes, "motion directions")->check(CLI::Range(1, 64));
  gen->add_option("--samples", toy.samples_per_class, "training streams per class")->check(CLI::NonNegativeNumber);
  gen->add_option("--test-samples", test_samples, "test streams per class")->check(CLI::NonNegativeNumber);
  gen->add_option("--size", toy.size, "sensor width and height")->check(CLI::Range(4, 1024));

  auto* train = app.add_subcommand("train", "train a network and write a checkpoint");
  add_shared(train, shared, true);
  add_data(train, data);
  TrainArgs targs;
  train->add_option("--epochs", targs.epochs)->check(CLI::NonNegativeNumber);
  train->add_option("--lr", targs.lr)->check(CLI::NonNegativeNumber);
  train->add_option("--momentum", targs.momentum)->check(CLI::Range(0.0, 1.0));
  train->add_option("--batch", targs.batch)->check(CLI::PositiveNumber);
  train->add_option("--metrics", targs.metrics, "metrics CSV (default <out>.metrics.csv)");

  auto* eval = app.add_subcommand("eval", "report accuracy of a checkpoint");
  add_shared(eval, shared, false);
  add_data(eval, data);
  eval->add_option("--checkpoint", ckpt)->required();

  auto* fuse = app.add_subcommand("fuse", "fold TSBN and branches into a fused checkpoint");
  add_shared(fuse, shared, true);
  fuse->add_option("--checkpoint", ckpt)->required();

  auto* verify = app.add_subcommand("verify", "compare fused and unfused networks");
  add_shared(verify, shared, false);
  add_data(verify, data);
  VerifyArgs vargs;
  verify->add_option("--checkpoint", ckpt, "unfused checkpoint")->required();
  verify->add_option("--fused", vargs.fused, "fused checkpoint (default: fuse in memory)");
  verify->add_option("--tolerance", vargs.tolerance, "relative logit tolerance")->check(CLI::PositiveNumber);
  verify->add_option("--samples", vargs.samples, "inputs to compare")->check(CLI::PositiveNumber);
  verify->add_option("--band", vargs.band, "normalized boundary band")->check(CLI::NonNegativeNumber);

  auto* energy = app.add_subcommand("energy", "MAC/AC energy estimate as table, CSV and SVG");
  add_shared(energy, shared, false);
  add_data(energy, data);
  std::string probe = "data";
  std::int64_t batch = 16;
  energy->add_option("--checkpoint", ckpt)->required();
  energy->add_option("--probe", probe, "input used to measure firing rates")
      ->check(CLI::IsMember({"data", "zeros", "random"}));
  energy->add_option("--batch", batch, "probe samples")->check(CLI::PositiveNumber);

  if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
    err << "error: unknown command '" << argv[1] << "'\n\n" << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(shared, toy, test_samples, out);
    if (train->parsed()) return cmd_train(shared, data, targs, out);
    if (eval->parsed()) return cmd_eval(shared, data, ckpt, out);
    if (fuse->parsed()) return cmd_fuse(shared, ckpt, out);
    if (verify->parsed()) return cmd_verify(shared, data, ckpt, vargs, out);
    if (energy->parsed()) {
      if (probe == "data" && !has_data(data)) probe = "random";
      return cmd_energy(shared, data, ckpt, probe, batch, out);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  err << app.help();
  return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace stcore::cli
