#include "hdt/gradcheck_suite.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <memory>

#include "hdt/error.hpp"
#include "hdt/gradcheck.hpp"
#include "hdt/hdr.hpp"
#include "hdt/model.hpp"
#include "hdt/params.hpp"
#include "hdt/training.hpp"

namespace hdt {

GradientCheck check_gradients(const std::vector<Tensor<double>>& values, const GradLoss& loss,
                              std::size_t max_elements, std::mt19937_64& rng, double h) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& v : values) leaves.push_back(tape.variable(v));
  tape.backward(loss(tape, leaves));

  std::vector<std::pair<std::size_t, std::size_t>> probes;
  std::size_t total = 0;
  for (const auto& v : values) total += v.size();
  auto locate = [&](std::size_t flat) {
    std::size_t i = 0;
    while (flat >= values[i].size()) flat -= values[i++].size();
    return std::pair{i, flat};
  };
  if (total <= max_elements) {
    for (std::size_t f = 0; f < total; ++f) probes.push_back(locate(f));
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    for (std::size_t k = 0; k < max_elements; ++k) probes.push_back(locate(pick(rng)));
  }

  std::vector<Tensor<double>> probe_values = values;
  auto eval = [&]() {
    Tape<double> t;
    std::vector<Var<double>> c;
    for (const auto& v : probe_values) c.push_back(t.constant(v));
    return loss(t, c).value().item();
  };
  auto central = [&](std::size_t i, std::size_t j, double step) {
    const double orig = probe_values[i][j];
    probe_values[i][j] = orig + step;
    const double plus = eval();
    probe_values[i][j] = orig - step;
    const double minus = eval();
    probe_values[i][j] = orig;
    return (plus - minus) / (2 * step);
  };
  GradientCheck out;
  for (const auto& [i, j] : probes) {
    const double numeric = central(i, j, h);
    if (relative_error(numeric, central(i, j, h / 2)) > kKinkTolerance) {
      ++out.kinked;
      continue;
    }
    const auto* g = tape.grad(leaves[i]);
    const double analytic = g ? (*g)[j] : 0.0;
    out.max_error = std::max(out.max_error, relative_error(analytic, numeric));
    ++out.probes;
  }
  return out;
}

namespace {

using Rng = std::mt19937_64;

Tensor<double> uniform(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Uniform in ±[lo, hi], away from zero so kinks stay out of the difference stencil.
Tensor<double> away_from_zero(Rng& rng, Shape s, double lo, double hi) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

// Offsets whose fractional parts avoid the bilinear kinks at integers.
Tensor<double> fractional_offsets(Rng& rng, Shape s) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  std::uniform_int_distribution<int> whole(-2, 1);
  for (auto& v : t.data()) v = whole(rng) + frac(rng);
  return t;
}

using Op = std::function<Var<double>(const std::vector<Var<double>>&)>;

// Scalarizes an op with fixed random weights so every output element reaches the gradient.
GradLoss project(Op op, std::uint64_t seed) {
  auto weights = std::make_shared<Tensor<double>>();
  return [op = std::move(op), weights, seed](Tape<double>&, const std::vector<Var<double>>& in) {
    Var<double> out = op(in);
    if (weights->shape() != out.shape()) {
      Rng r(seed);
      *weights = uniform(r, out.shape());
    }
    return ad::weighted_sum(out, *weights);
  };
}

struct Case {
  std::vector<Tensor<double>> values;
  GradLoss loss;
  std::size_t max_elements = 400;
};

using CaseFactory = std::function<Case(Rng&, std::size_t trial, const HdtConfig&)>;

Case simple(std::vector<Tensor<double>> values, Op op, Rng& rng) {
  return {std::move(values), project(std::move(op), rng())};
}

// Initial parameters with every entry jittered, so biases, gains and offset
// predictors are generic rather than at their special initial values.
ParamStore<double> generic_params(const HdtConfig& cfg, Rng& rng) {
  auto p = init_params<double>(cfg, rng());
  std::uniform_real_distribution<double> jitter(-0.05, 0.05), offset_w(-0.1, 0.1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string& name = p.name(i);
    const bool offset = name.find(".offset.") != std::string::npos;
    auto& t = p.value(i);
    if (offset && name.back() == 'b') {
      t = fractional_offsets(rng, t.shape());
    } else {
      for (auto& v : t.data()) v += offset ? offset_w(rng) : jitter(rng);
    }
  }
  return p;
}

// values = [inputs..., params...]; the op sees the bound parameters.
Case module_case(const HdtConfig& cfg, Rng& rng, std::vector<Tensor<double>> inputs,
                 std::function<Var<double>(const BoundParams<double>&, const std::vector<Var<double>>&)> body,
                 std::size_t max_elements) {
  auto store = std::make_shared<ParamStore<double>>(generic_params(cfg, rng));
  const std::size_t n_in = inputs.size();
  Case c;
  c.values = std::move(inputs);
  for (std::size_t i = 0; i < store->size(); ++i) c.values.push_back(store->value(i));
  c.loss = project(
      [store, n_in, body](const std::vector<Var<double>>& leaves) {
        std::vector<Var<double>> in(leaves.begin(), leaves.begin() + static_cast<long>(n_in));
        BoundParams<double> p(*store, std::vector<Var<double>>(leaves.begin() + static_cast<long>(n_in), leaves.end()));
        return body(p, in);
      },
      rng());
  c.max_elements = max_elements;
  return c;
}

const std::map<std::string, CaseFactory>& factories() {
  namespace k = kernels;
  static const std::map<std::string, CaseFactory> table = {
      {"conv2d",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 5, 6, 3}), uniform(r, {3, 3, 3, 4}), uniform(r, {4})},
                       [](const auto& v) { return ad::conv2d(v[0], v[1], v[2]); }, r);
       }},
      {"conv2d_dilated",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {1, 7, 6, 2}), uniform(r, {3, 3, 2, 3}), uniform(r, {3})},
                       [](const auto& v) { return ad::conv2d(v[0], v[1], v[2], {1, 2, k::Padding::same}); }, r);
       }},
      {"conv2d_strided_valid",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {1, 7, 8, 2}), uniform(r, {3, 3, 2, 3}), uniform(r, {3})},
                       [](const auto& v) { return ad::conv2d(v[0], v[1], v[2], {2, 1, k::Padding::valid}); }, r);
       }},
      {"deformable_conv2d",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {1, 5, 5, 2}), uniform(r, {3, 3, 2, 3}), uniform(r, {3}),
                        fractional_offsets(r, {1, 5, 5, 18})},
                       [](const auto& v) { return ad::deformable_conv2d(v[0], v[1], v[2], v[3]); }, r);
       }},
      {"layer_norm",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 5}), uniform(r, {5}, 0.5, 1.5), uniform(r, {5})},
                       [](const auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }, r);
       }},
      {"softmax",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {3, 6}, -2, 2)}, [](const auto& v) { return ad::softmax(v[0]); }, r);
       }},
      {"linear",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 4}), uniform(r, {4, 5}), uniform(r, {5})},
                       [](const auto& v) { return ad::linear(v[0], v[1], v[2]); }, r);
       }},
      {"batched_matmul",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 4}), uniform(r, {2, 4, 5})},
                       [](const auto& v) { return ad::batched_matmul(v[0], v[1], false); }, r);
       }},
      {"batched_matmul_transposed",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 4}), uniform(r, {2, 5, 4})},
                       [](const auto& v) { return ad::batched_matmul(v[0], v[1], true); }, r);
       }},
      {"leaky_relu",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({away_from_zero(r, {2, 7}, 0.05, 2)}, [](const auto& v) { return ad::leaky_relu(v[0]); }, r);
       }},
      {"sigmoid",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 7}, -4, 4)}, [](const auto& v) { return ad::sigmoid(v[0]); }, r);
       }},
      {"gelu",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 7}, -3, 3)}, [](const auto& v) { return ad::gelu(v[0]); }, r);
       }},
      {"global_avg_pool",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 4, 5})}, [](const auto& v) { return ad::global_avg_pool(v[0]); }, r);
       }},
      {"add",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 4}), uniform(r, {2, 3, 4})},
                       [](const auto& v) { return ad::add(v[0], v[1]); }, r);
       }},
      {"sub",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 4}), uniform(r, {2, 3, 4})},
                       [](const auto& v) { return ad::sub(v[0], v[1]); }, r);
       }},
      {"mul",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 4}), uniform(r, {2, 3, 4})},
                       [](const auto& v) { return ad::mul(v[0], v[1]); }, r);
       }},
      {"mul_channel",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 3, 4}), uniform(r, {2, 4})},
                       [](const auto& v) { return ad::mul_channel(v[0], v[1]); }, r);
       }},
      {"scale",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {3, 4})}, [](const auto& v) { return ad::scale(v[0], -1.7); }, r);
       }},
      {"concat",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {1, 2, 3, 2}), uniform(r, {1, 2, 3, 3}), uniform(r, {1, 2, 3, 1})},
                       [](const auto& v) { return ad::concat<double>({v[0], v[1], v[2]}); }, r);
       }},
      {"slice_channels",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {1, 2, 3, 6})}, [](const auto& v) { return ad::slice_channels(v[0], 2, 3); }, r);
       }},
      {"reshape",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 4})}, [](const auto& v) { return ad::reshape(v[0], Shape{4, 6}); }, r);
       }},
      {"roll",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {1, 4, 5, 2})}, [](const auto& v) { return ad::roll(v[0], 1, -2); }, r);
       }},
      {"pad_reflect",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {1, 5, 6, 2})}, [](const auto& v) { return ad::pad_reflect(v[0], 2, 3); }, r);
       }},
      {"crop",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {1, 5, 6, 2})}, [](const auto& v) { return ad::crop(v[0], 3, 4); }, r);
       }},
      {"window_partition",
       [](Rng& r, std::size_t trial, const HdtConfig&) {
         const std::size_t shift = trial % 2 ? 2 : 0;
         return simple({uniform(r, {1, 4, 8, 3})},
                       [shift](const auto& v) { return ad::window_partition(v[0], 4, shift); }, r);
       }},
      {"window_reverse",
       [](Rng& r, std::size_t trial, const HdtConfig&) {
         const std::size_t shift = trial % 2 ? 2 : 0;
         return simple({uniform(r, {2, 16, 3})},
                       [shift](const auto& v) { return ad::window_reverse(v[0], 4, 1, 4, 8, shift); }, r);
       }},
      {"split_heads",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 3, 6})}, [](const auto& v) { return ad::split_heads(v[0], 3); }, r);
       }},
      {"merge_heads",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {6, 3, 2})}, [](const auto& v) { return ad::merge_heads(v[0], 3); }, r);
       }},
      {"mu_law",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 5}, 0.05, 0.95)}, [](const auto& v) { return ad::mu_law(v[0], 5000.0); }, r);
       }},
      {"sum",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 5})}, [](const auto& v) { return ad::sum(v[0]); }, r);
       }},
      {"mean",
       [](Rng& r, std::size_t, const HdtConfig&) {
         return simple({uniform(r, {2, 5})}, [](const auto& v) { return ad::mean(v[0]); }, r);
       }},
      {"weighted_sum",
       [](Rng& r, std::size_t, const HdtConfig&) {
         const auto w = uniform(r, {2, 5});
         return simple({uniform(r, {2, 5})}, [w](const auto& v) { return ad::weighted_sum(v[0], w); }, r);
       }},
      {"mean_abs_diff",
       [](Rng& r, std::size_t, const HdtConfig&) {
         auto a = uniform(r, {2, 5});
         auto target = a;
         const auto delta = away_from_zero(r, {2, 5}, 0.05, 0.5);
         for (std::size_t i = 0; i < target.size(); ++i) target[i] += delta[i];
         return simple({a}, [target](const auto& v) { return ad::mean_abs_diff(v[0], target); }, r);
       }},
      {"window_msa",
       [](Rng& r, std::size_t trial, const HdtConfig& cfg) {
         const std::size_t shift = trial % 2 ? cfg.window / 2 : 0;
         return module_case(cfg, r, {uniform(r, {1, 6, 10, cfg.embed})},
                            [shift, cfg](const BoundParams<double>& p, const auto& in) {
                              return window_msa(p, "body.g0.dt0.msa", in[0], cfg, shift);
                            },
                            150);
       }},
      {"global_branch",
       [](Rng& r, std::size_t trial, const HdtConfig& cfg) {
         const std::size_t shift = trial % 2 ? cfg.window / 2 : 0;
         return module_case(cfg, r, {uniform(r, {1, 8, 8, cfg.embed})},
                            [shift, cfg](const BoundParams<double>& p, const auto& in) {
                              return global_branch(p, "body.g0.dt0", in[0], cfg, shift);
                            },
                            150);
       }},
      {"local_branch",
       [](Rng& r, std::size_t, const HdtConfig& cfg) {
         return module_case(cfg, r, {uniform(r, {1, 6, 6, cfg.embed})},
                            [cfg](const BoundParams<double>& p, const auto& in) {
                              return local_branch(p, "body.g0.dt0", in[0], cfg);
                            },
                            150);
       }},
      {"dt_block",
       [](Rng& r, std::size_t trial, const HdtConfig& cfg) {
         const std::size_t shift = trial % 2 ? cfg.window / 2 : 0;
         return module_case(cfg, r, {uniform(r, {1, 8, 8, cfg.embed})},
                            [shift, cfg](const BoundParams<double>& p, const auto& in) {
                              return dt_forward(p, "body.g0.dt0", in[0], cfg, shift);
                            },
                            150);
       }},
      {"head",
       [](Rng& r, std::size_t, const HdtConfig& cfg) {
         return module_case(cfg, r,
                            {uniform(r, {1, 5, 5, 6}, 0, 1), uniform(r, {1, 5, 5, 6}, 0, 1),
                             uniform(r, {1, 5, 5, 6}, 0, 1)},
                            [cfg](const BoundParams<double>& p, const auto& in) {
                              return head_forward(p, cfg, {in[0], in[1], in[2]}).f_init;
                            },
                            150);
       }},
      {"model",
       [](Rng& r, std::size_t, const HdtConfig& cfg) {
         // Per-pixel random exposures: no flat saturated regions whose shared
         // pre-activations could sit on a LeakyReLU kink together.
         SampleTriplet sample;
         for (std::size_t i = 0; i < 3; ++i) {
           sample.ldr[i].pixels = uniform(r, {10, 10, 3}, 0.02, 0.98).cast<float>();
           sample.ldr[i].exposure_time = kSyntheticExposures[i];
         }
         auto inputs = build_input<double>(sample, kDefaultGamma);
         const auto gt = uniform(r, {1, 10, 10, 3}, 0.02, 0.98);
         auto store = std::make_shared<ParamStore<double>>(generic_params(cfg, r));
         Case c;
         for (std::size_t i = 0; i < store->size(); ++i) c.values.push_back(store->value(i));
         c.loss = [store, inputs, gt, cfg](Tape<double>& t, const std::vector<Var<double>>& leaves) {
           BoundParams<double> p(*store, leaves);
           const std::array<Var<double>, 3> in{t.constant(inputs[0]), t.constant(inputs[1]), t.constant(inputs[2])};
           return l1_tonemapped_loss(model_forward(p, cfg, in), gt, kDefaultMu);
         };
         c.max_elements = 200;
         return c;
       }},
  };
  return table;
}

}  // namespace

const std::vector<std::string>& gradcheck_names() {
  static const std::vector<std::string> names = [] {
    const std::vector<std::string> modules = {"window_msa", "global_branch", "local_branch", "dt_block", "head",
                                              "model"};
    std::vector<std::string> out;
    for (const auto& [name, f] : factories()) {
      if (std::find(modules.begin(), modules.end(), name) == modules.end()) out.push_back(name);
    }
    out.insert(out.end(), modules.begin(), modules.end());
    return out;
  }();
  return names;
}

GradcheckResult run_gradcheck(const std::string& name, std::uint64_t seed, std::size_t trials, const HdtConfig& cfg) {
  auto it = factories().find(name);
  if (it == factories().end()) throw Error("unknown gradcheck op '" + name + "'");
  const auto start = std::chrono::steady_clock::now();
  GradcheckResult res;
  res.name = name;
  res.tolerance = name == "model" ? kModelGradTolerance : kOpGradTolerance;
  res.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(t)};
    Rng rng(seq);
    const Case c = it->second(rng, t, cfg);
    const auto g = check_gradients(c.values, c.loss, c.max_elements, rng);
    res.max_error = std::max(res.max_error, g.max_error);
    res.probes += g.probes;
    res.kinked += g.kinked;
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace hdt
