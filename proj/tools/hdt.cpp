// hdt: fuse, train, eval, gradcheck and inspect.
//
// Exit codes: 0 success, 1 I/O or data error, 2 config/checkpoint mismatch
// or usage error, 3 numerical failure, 130 interrupted training.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "hdt/config.hpp"
#include "hdt/error.hpp"
#include "hdt/gradcheck_suite.hpp"
#include "hdt/hdr.hpp"
#include "hdt/metrics.hpp"
#include "hdt/model.hpp"
#include "hdt/parallel.hpp"
#include "hdt/params.hpp"
#include "hdt/training.hpp"

namespace fs = std::filesystem;
using namespace hdt;

namespace {

constexpr int kExitOk = 0, kExitIo = 1, kExitConfig = 2, kExitNumeric = 3, kExitInterrupted = 130;

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

void apply_ablation(HdtConfig& m, const std::string& ablate) {
  if (ablate.empty()) return;
  if (ablate == "sar" || ablate == "both") m.sar = false;
  if (ablate == "dt" || ablate == "both") m.deformable = false;
}

Config read_config(const std::string& path) { return path.empty() ? Config{} : load_config(path); }

// Decoding problems in a checkpoint are a mismatch, not an I/O failure.
Checkpoint read_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw IoError("checkpoint " + path + " does not exist");
  try {
    return load_checkpoint(path);
  } catch (const FormatError& e) {
    throw ConfigError(std::string("invalid checkpoint: ") + e.what());
  }
}

// Model config of the checkpoint, checked against --config when given.
HdtConfig checkpoint_config(const Checkpoint& ck, const std::string& config_path) {
  const HdtConfig stored = checkpoint_model_config(ck);
  if (!config_path.empty()) {
    const HdtConfig wanted = load_config(config_path).model;
    if (wanted != stored) {
      std::istringstream a(model_config_text(wanted)), b(model_config_text(stored));
      std::string la, lb;
      while (std::getline(a, la) && std::getline(b, lb)) {
        if (la != lb) throw ConfigError("config/checkpoint mismatch: config has " + la + ", checkpoint has " + lb);
      }
    }
  }
  return stored;
}

bool is_f64(const Checkpoint& ck) {
  auto it = ck.metadata.find("precision");
  return it != ck.metadata.end() && it->second == "f64";
}

HdrImage fuse_with(const Checkpoint& ck, const HdtConfig& cfg, const SampleTriplet& s, double gamma) {
  if (is_f64(ck)) return fuse(load_params<double>(ck, cfg), cfg, s, gamma);
  return fuse(load_params<float>(ck, cfg), cfg, s, gamma);
}

Tensor<float> tonemap_preview(const Tensor<float>& hdr, double mu) { return mu_law(hdr, mu); }

// --- subcommands ----------------------------------------------------------------

struct FuseArgs {
  std::string input, checkpoint, output, tonemapped, config;
};

int cmd_fuse(const FuseArgs& a) {
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const HdtConfig cfg = checkpoint_config(ck, a.config);
  const Config full = read_config(a.config);
  const SampleTriplet s = load_sample(a.input);
  const HdrImage out = fuse_with(ck, cfg, s, full.train.gamma);
  write_pfm(a.output, out);
  if (!a.tonemapped.empty()) write_ppm(a.tonemapped, tonemap_preview(out.pixels, full.train.mu), 255);
  std::cout << "wrote " << a.output << " (" << out.height() << "x" << out.width() << ")\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data, config, out = "run", ablate, resume;
  std::size_t synthetic = 0;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps;
};

int cmd_train(const TrainArgs& a) {
  Config cfg = read_config(a.config);
  apply_ablation(cfg.model, a.ablate);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  cfg.model.validate();
  cfg.train.validate(cfg.model);

  std::vector<SampleTriplet> data;
  if (a.synthetic > 0) {
    data = synth_dataset(a.synthetic, cfg.train.seed, cfg.train.synthetic_size, cfg.train.synthetic_motion,
                         cfg.train.gamma);
  } else {
    if (a.data.empty()) throw ConfigError("train needs --data <root> or --synthetic N");
    data = load_dataset(a.data);
  }

  fs::create_directories(a.out);
  {
    std::ofstream cf(fs::path(a.out) / "config.txt");
    if (!cf) throw IoError("cannot write " + (fs::path(a.out) / "config.txt").string());
    cf << config_text(cfg);
  }
  TrainOptions opt;
  opt.out_dir = a.out;
  if (!a.resume.empty()) opt.resume = a.resume;
  opt.stop = &g_stop;
  opt.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %zu step %zu loss %.6f psnr_mu %.3f\n", r.epoch, r.step, r.loss, r.psnr_mu);
    std::fflush(stdout);
  };
  std::signal(SIGINT, on_sigint);
  const TrainResult res = train_loop(data, cfg, opt);
  std::signal(SIGINT, SIG_DFL);
  std::cout << "checkpoint " << res.checkpoint.string() << " after " << res.steps << " steps\n";
  if (res.interrupted) {
    std::cerr << "interrupted; checkpoint flushed\n";
    return kExitInterrupted;
  }
  return kExitOk;
}

struct EvalArgs {
  std::string data, checkpoint, config;
  bool json = false;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const HdtConfig cfg = checkpoint_config(ck, a.config);
  const Config full = read_config(a.config);
  const auto data = load_dataset(a.data);
  const EvalReport r = is_f64(ck) ? eval_report(load_params<double>(ck, cfg), cfg, data, full.train.mu, full.train.gamma)
                                  : eval_report(load_params<float>(ck, cfg), cfg, data, full.train.mu, full.train.gamma);
  if (r.rows.empty()) throw IoError("no sample in " + a.data + " has ground truth");
  std::cout << (a.json ? report_json(r) : report_tsv(r));
  return kExitOk;
}

struct GradcheckArgs {
  std::string scale = "tiny", ops = "all", ablate;
  std::uint64_t seed = 0;
  std::size_t trials = 20;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  HdtConfig cfg = a.scale == "paper" ? HdtConfig::paper() : HdtConfig::tiny();
  apply_ablation(cfg, a.ablate);
  std::vector<std::string> names;
  if (a.ops == "all") {
    names = gradcheck_names();
  } else {
    std::istringstream in(a.ops);
    for (std::string n; std::getline(in, n, ',');) {
      const auto& known = gradcheck_names();
      if (std::find(known.begin(), known.end(), n) == known.end()) {
        throw ConfigError("unknown op '" + n + "' (see `hdt gradcheck --list`)");
      }
      names.push_back(n);
    }
  }
  bool ok = true;
  std::printf("%-28s %-12s %-10s %-8s %-7s %s\n", "op", "max_rel_err", "tolerance", "probes", "kinked", "result");
  for (const auto& n : names) {
    const auto r = run_gradcheck(n, a.seed, a.trials, cfg);
    ok = ok && r.pass();
    std::printf("%-28s %-12.3e %-10.0e %-8zu %-7zu %s\n", r.name.c_str(), r.max_error, r.tolerance, r.probes, r.kinked,
                r.pass() ? "PASS" : "FAIL");
    std::fflush(stdout);
  }
  return ok ? kExitOk : kExitNumeric;
}

struct InspectArgs {
  std::string config, checkpoint, preset, ablate;
};

int cmd_inspect(const InspectArgs& a) {
  if (!a.checkpoint.empty()) {
    const Checkpoint ck = read_checkpoint(a.checkpoint);
    for (const auto& [k, v] : ck.metadata) std::cout << "# " << k << "=" << v << "\n";
    std::cout << manifest_text(checkpoint_model_config(ck));
    return kExitOk;
  }
  HdtConfig m = a.config.empty() ? (a.preset == "tiny" ? HdtConfig::tiny() : HdtConfig::paper())
                                 : load_config(a.config).model;
  apply_ablation(m, a.ablate);
  std::cout << manifest_text(m);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    apply_thread_env();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  CLI::App app{"HDR deghosting with a hierarchical dual-branch transformer"};
  app.require_subcommand(1);
  const std::vector<std::string> ablations = {"sar", "dt", "both"};

  FuseArgs fa;
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse one exposure triplet into a linear HDR image");
  fuse_cmd->add_option("--input", fa.input, "Sample directory")->required();
  fuse_cmd->add_option("--checkpoint", fa.checkpoint, "Model checkpoint")->required();
  fuse_cmd->add_option("--output", fa.output, "Output PFM")->required();
  fuse_cmd->add_option("--tonemapped", fa.tonemapped, "Optional mu-law 8-bit PPM preview");
  fuse_cmd->add_option("--config", fa.config, "Config file checked against the checkpoint");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  auto* data_opt = train_cmd->add_option("--data", ta.data, "Dataset root");
  auto* synth_opt = train_cmd->add_option("--synthetic", ta.synthetic, "Generate N synthetic triplets instead");
  data_opt->excludes(synth_opt);
  train_cmd->add_option("--config", ta.config, "Config file (defaults: paper preset)");
  train_cmd->add_option("--out", ta.out, "Output directory")->capture_default_str();
  train_cmd->add_option("--ablate", ta.ablate, "Disable sar, dt (deformable convs) or both")
      ->check(CLI::IsMember(ablations));
  train_cmd->add_option("--resume", ta.resume, "Checkpoint to resume from");
  train_cmd->add_option("--seed", ta.seed, "Override the config seed");
  train_cmd->add_option("--max-steps", ta.max_steps, "Override the config step cap");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval_cmd->add_option("--data", ea.data, "Dataset root")->required();
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--config", ea.config, "Config file checked against the checkpoint");
  eval_cmd->add_flag("--json", ea.json, "Emit JSON instead of a tab-separated table");

  GradcheckArgs ga;
  bool list_ops = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks (f64)");
  gc_cmd->add_option("--scale", ga.scale, "Model scale for module checks")
      ->check(CLI::IsMember({"tiny", "paper"}))
      ->capture_default_str();
  gc_cmd->add_option("--ops", ga.ops, "all, or comma-separated check names")->capture_default_str();
  gc_cmd->add_option("--seed", ga.seed, "Seed")->capture_default_str();
  gc_cmd->add_option("--trials", ga.trials, "Random cases per check")->check(CLI::PositiveNumber)->capture_default_str();
  gc_cmd->add_option("--ablate", ga.ablate, "Model variant for module checks")->check(CLI::IsMember(ablations));
  gc_cmd->add_flag("--list", list_ops, "Print the check names and exit");

  InspectArgs ia;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print the parameter manifest");
  inspect_cmd->add_option("--config", ia.config, "Config file");
  inspect_cmd->add_option("--preset", ia.preset, "paper or tiny")->check(CLI::IsMember({"paper", "tiny"}));
  inspect_cmd->add_option("--checkpoint", ia.checkpoint, "Describe a checkpoint instead");
  inspect_cmd->add_option("--ablate", ia.ablate, "Model variant")->check(CLI::IsMember(ablations));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*fuse_cmd) return cmd_fuse(fa);
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_eval(ea);
    if (*gc_cmd) {
      if (list_ops) {
        for (const auto& n : gradcheck_names()) std::cout << n << "\n";
        return kExitOk;
      }
      return cmd_gradcheck(ga);
    }
    if (*inspect_cmd) return cmd_inspect(ia);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitConfig;
}
