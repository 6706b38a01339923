#include <doctest.h>

#include <numeric>
#include <random>
#include <set>

#include "hdt/model.hpp"
#include "hdt/training.hpp"
#include "oracles.hpp"

using namespace hdt;

namespace {

std::array<Var<double>, 3> random_inputs(Tape<double>& tape, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  return {tape.constant(oracle::random_tensor<double>(Shape{1, h, w, 6}, rng, 0, 1)),
          tape.constant(oracle::random_tensor<double>(Shape{1, h, w, 6}, rng, 0, 1)),
          tape.constant(oracle::random_tensor<double>(Shape{1, h, w, 6}, rng, 0, 1))};
}

}  // namespace

TEST_CASE("SAR with equal masks is bit-exact f2 times m1") {
  std::mt19937_64 rng(40);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<float> tape;
    auto f2 = tape.constant(oracle::random_tensor<float>(Shape{1, 6, 5, 4}, rng, -3, 3));
    auto m = tape.constant(oracle::random_tensor<float>(Shape{1, 6, 5, 4}, rng, 0, 1));
    CHECK(sar(f2, m, m).value() == ad::mul(f2, m).value());
  }
}

TEST_CASE("sar=false passes the reference features through") {
  std::mt19937_64 rng(41);
  HdtConfig cfg = HdtConfig::tiny();
  cfg.sar = false;
  const auto store = init_params<double>(cfg, 1);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  const auto h = head_forward(p, cfg, random_inputs(tape, 8, 8, rng));
  CHECK(h.gated[1].value() == h.features[1].value());
}

TEST_CASE("head output has 4C channels in the documented order") {
  std::mt19937_64 rng(42);
  const HdtConfig cfg = HdtConfig::tiny();
  const auto store = init_params<double>(cfg, 2);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  const auto h = head_forward(p, cfg, random_inputs(tape, 9, 7, rng));
  const std::size_t c = cfg.channels;
  CHECK(h.f_init.shape() == Shape{1, 9, 7, 4 * c});
  const auto& fi = h.f_init.value();
  const auto& f2 = h.features[1].value();
  const auto& fm1 = h.gated[0].value();
  for (std::size_t px = 0; px < 63; ++px)
    for (std::size_t ch = 0; ch < c; ++ch) {
      CHECK(fi[px * 4 * c + ch] == fm1[px * c + ch]);
      CHECK(fi[px * 4 * c + 3 * c + ch] == f2[px * c + ch]);
    }
  for (double v : h.m1.value().data()) CHECK((v > 0 && v < 1));
}

TEST_CASE("mismatched exposure shapes are rejected") {
  const HdtConfig cfg = HdtConfig::tiny();
  const auto store = init_params<double>(cfg, 3);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  std::array<Var<double>, 3> in{tape.constant(Tensor<double>(Shape{1, 8, 8, 6})),
                                tape.constant(Tensor<double>(Shape{1, 8, 8, 6})),
                                tape.constant(Tensor<double>(Shape{1, 8, 9, 6}))};
  CHECK_THROWS_AS(head_forward(p, cfg, in), ShapeError);
}

TEST_CASE("window attention matches the per-window oracle") {
  std::mt19937_64 rng(43);
  HdtConfig cfg = HdtConfig::tiny();
  auto store = init_params<double>(cfg, 4);
  const std::string pre = "body.g0.dt0.msa";
  for (const char* m : {".q", ".k", ".v", ".o"}) {
    store[pre + m + ".w"] = oracle::random_tensor<double>(store[pre + m + ".w"].shape(), rng, -0.5, 0.5);
    store[pre + m + ".b"] = oracle::random_tensor<double>(store[pre + m + ".b"].shape(), rng, -0.5, 0.5);
  }
  const auto x = oracle::random_tensor<double>(Shape{2, 8, 12, cfg.embed}, rng);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  const auto y = window_msa(p, pre, tape.constant(x), cfg, 0);
  const auto ref = oracle::window_attention(x, cfg.window, cfg.heads, store[pre + ".q.w"], store[pre + ".q.b"],
                                            store[pre + ".k.w"], store[pre + ".k.b"], store[pre + ".v.w"],
                                            store[pre + ".v.b"], store[pre + ".o.w"], store[pre + ".o.b"]);
  CHECK(oracle::max_abs_diff(y.value(), ref) < 1e-12);
}

TEST_CASE("shifted attention equals roll, plain attention, unroll") {
  std::mt19937_64 rng(44);
  const HdtConfig cfg = HdtConfig::tiny();
  const auto store = init_params<double>(cfg, 5);
  const std::size_t s = cfg.window / 2;
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = oracle::random_tensor<double>(Shape{1, 8, 12, cfg.embed}, rng);
    Tape<double> tape;
    BoundParams<double> p(tape, store, false);
    auto xv = tape.constant(x);
    const auto shifted = window_msa(p, "body.g0.dt1.msa", xv, cfg, s);
    const auto plain = window_msa(p, "body.g0.dt1.msa", ad::roll(xv, -long(s), -long(s)), cfg, 0);
    CHECK(shifted.value() == ad::roll(plain, long(s), long(s)).value());
  }
}

TEST_CASE("attention rows are distributions") {
  std::mt19937_64 rng(45);
  const HdtConfig cfg = HdtConfig::tiny();
  const auto store = init_params<double>(cfg, 6);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  Var<double> attn;
  window_msa(p, "body.g0.dt0.msa", tape.constant(oracle::random_tensor<double>(Shape{1, 8, 8, cfg.embed}, rng)), cfg,
             0, &attn);
  const std::size_t t = cfg.window * cfg.window;
  CHECK(attn.shape() == Shape{4 * cfg.heads, t, t});
  for (std::size_t r = 0; r < attn.value().size() / t; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < t; ++c) sum += attn.value()[r * t + c];
    CHECK(std::abs(sum - 1) < 1e-12);
  }
}

TEST_CASE("non-divisible sizes are padded and cropped") {
  std::mt19937_64 rng(46);
  HdtConfig cfg = HdtConfig::tiny();
  cfg.window = 7;
  const auto store = init_params<double>(cfg, 7);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  const auto y = model_forward(p, cfg, random_inputs(tape, 10, 9, rng));
  CHECK(y.shape() == Shape{1, 10, 9, 3});
  CHECK(y.value().all_finite());
}

TEST_CASE("images smaller than the reflect pad are rejected") {
  std::mt19937_64 rng(47);
  HdtConfig cfg = HdtConfig::tiny();
  cfg.window = 8;
  const auto store = init_params<double>(cfg, 8);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  CHECK_THROWS_AS(model_forward(p, cfg, random_inputs(tape, 3, 3, rng)), ShapeError);
}

TEST_CASE("channel gate lies in (0, 1) and scales the normalized input") {
  std::mt19937_64 rng(48);
  for (bool deformable : {true, false}) {
    HdtConfig cfg = HdtConfig::tiny();
    cfg.deformable = deformable;
    const auto store = init_params<double>(cfg, 9);
    Tape<double> tape;
    BoundParams<double> p(tape, store, false);
    Var<double> gate;
    const auto out = local_branch(p, "body.g0.dt0",
                                  tape.constant(oracle::random_tensor<double>(Shape{1, 6, 6, cfg.embed}, rng)), cfg,
                                  &gate);
    CHECK(gate.shape() == Shape{1, cfg.embed});
    for (double g : gate.value().data()) CHECK((g > 0 && g < 1));
    CHECK(out.shape() == Shape{1, 6, 6, cfg.embed});
  }
}

TEST_CASE("model output lies in [0, 1] with the input size") {
  std::mt19937_64 rng(49);
  const HdtConfig cfg = HdtConfig::tiny();
  const auto store = init_params<float>(cfg, 10);
  const auto s = synth_dataset(1, 1, 16)[0];
  const auto out = fuse(store, cfg, s, 2.2);
  CHECK(out.pixels.shape() == Shape{16, 16, 3});
  for (float v : out.pixels.data()) CHECK((v >= 0 && v <= 1));
}

TEST_CASE("paper preset parameter budget") {
  const auto n = parameter_count(model_manifest(HdtConfig::paper()));
  CHECK(n >= 1012500);
  CHECK(n <= 1687500);
  CHECK(n == init_params<float>(HdtConfig::paper(), 0).element_count());
}

TEST_CASE("ablation variants have distinct manifests") {
  std::set<std::string> texts;
  std::map<std::pair<bool, bool>, std::vector<ParamSpec>> manifests;
  for (bool s : {false, true})
    for (bool d : {false, true}) {
      HdtConfig cfg = HdtConfig::tiny();
      cfg.sar = s;
      cfg.deformable = d;
      texts.insert(manifest_text(cfg));
      manifests[{s, d}] = model_manifest(cfg);
    }
  CHECK(texts.size() == 4);
  auto names = [](const std::vector<ParamSpec>& m) {
    std::set<std::string> out;
    for (const auto& p : m) out.insert(p.name);
    return out;
  };
  CHECK(names(manifests[{false, false}]) == names(manifests[{true, false}]));
  const auto bl = names(manifests[{false, false}]), dt = names(manifests[{false, true}]);
  bool has_plain = false, has_deform = false;
  for (const auto& n : bl) has_plain |= n.find(".plain") != std::string::npos;
  for (const auto& n : dt) has_deform |= n.find(".deform") != std::string::npos;
  CHECK(has_plain);
  CHECK(has_deform);
  for (const auto& n : dt) CHECK(n.find(".plain") == std::string::npos);
}

TEST_CASE("init_params is seed deterministic") {
  const auto a = init_params<float>(HdtConfig::tiny(), 5), b = init_params<float>(HdtConfig::tiny(), 5);
  const auto c = init_params<float>(HdtConfig::tiny(), 6);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same &= a.value(i) == b.value(i);
    differs |= !(a.value(i) == c.value(i));
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("shallow extraction: shape, zero law, determinism") {
  const HdtConfig cfg = HdtConfig::tiny();
  auto store = init_params<double>(cfg, 11);
  for (const char* n : {"head.shallow0.b", "head.shallow1.b", "head.shallow2.b"}) store[n].fill(0.0);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  const auto z = extract_shallow(p, tape.constant(Tensor<double>(Shape{2, 5, 7, 6}, 0.0)));
  CHECK(z.shape() == Shape{2, 5, 7, cfg.channels});
  for (double v : z.value().data()) CHECK(v == 0.0);
  std::mt19937_64 rng(50);
  const auto x = oracle::random_tensor<double>(Shape{1, 6, 6, 6}, rng, 0, 1);
  CHECK(extract_shallow(p, tape.constant(x)).value() == extract_shallow(p, tape.constant(x)).value());
}

TEST_CASE("spatial attention matches the composition oracle and is per-stream") {
  const HdtConfig cfg = HdtConfig::tiny();
  const auto store = init_params<double>(cfg, 12);
  std::mt19937_64 rng(51);
  const auto f1 = oracle::random_tensor<double>(Shape{1, 6, 5, cfg.channels}, rng);
  const auto f2 = oracle::random_tensor<double>(f1.shape(), rng);
  const auto f3 = oracle::random_tensor<double>(f1.shape(), rng);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  const auto m1 = spatial_attention(p, "head.att1", tape.constant(f1), tape.constant(f2)).value();
  for (double v : m1.data()) CHECK((v > 0 && v < 1));

  Tensor<double> cat(Shape{1, 6, 5, 2 * cfg.channels});
  for (std::size_t px = 0; px < 30; ++px)
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      cat[px * 2 * cfg.channels + c] = f1[px * cfg.channels + c];
      cat[px * 2 * cfg.channels + cfg.channels + c] = f2[px * cfg.channels + c];
    }
  auto h = oracle::conv2d(cat, store["head.att1.conv0.w"], store["head.att1.conv0.b"]);
  for (auto& v : h.data()) v = v > 0 ? v : 0.01 * v;
  auto ref = oracle::conv2d(h, store["head.att1.conv1.w"], store["head.att1.conv1.b"]);
  for (auto& v : ref.data()) v = 1 / (1 + std::exp(-v));
  CHECK(oracle::max_abs_diff(m1, ref) < 1e-12);

  // Changing the third stream leaves the first map untouched.
  std::array<Var<double>, 3> a{tape.constant(f1), tape.constant(f2), tape.constant(f3)};
  const auto m1_again = spatial_attention(p, "head.att1", a[0], a[1]).value();
  const auto m3 = spatial_attention(p, "head.att3", a[2], a[1]).value();
  const auto m3_other = spatial_attention(p, "head.att3", tape.constant(f1), a[1]).value();
  CHECK(m1_again == m1);
  CHECK(!(m3 == m3_other));
}

TEST_CASE("attention gating laws") {
  std::mt19937_64 rng(52);
  Tape<double> tape;
  const auto fv = oracle::random_tensor<double>(Shape{1, 4, 4, 3}, rng);
  auto f = tape.constant(fv);
  auto ones = tape.constant(Tensor<double>(fv.shape(), 1.0)), zeros = tape.constant(Tensor<double>(fv.shape(), 0.0));
  CHECK(apply_attention(f, ones).value() == fv);
  for (double v : apply_attention(f, zeros).value().data()) CHECK(v == 0.0);
  const auto mv = oracle::random_tensor<double>(fv.shape(), rng, 0, 1);
  const auto g = apply_attention(f, tape.constant(mv)).value();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == fv[i] * mv[i]);
  CHECK(sar(f, ones, ones).value() == fv);
  const auto half = sar(f, ones, zeros).value();
  for (std::size_t i = 0; i < half.size(); ++i) CHECK(half[i] == fv[i] / 2);
}

TEST_CASE("head concatenation slices") {
  std::mt19937_64 rng(53);
  for (bool use_sar : {true, false}) {
    HdtConfig cfg = HdtConfig::tiny();
    cfg.sar = use_sar;
    const auto store = init_params<double>(cfg, 13);
    Tape<double> tape;
    BoundParams<double> p(tape, store, false);
    const auto h = head_forward(p, cfg, random_inputs(tape, 6, 6, rng));
    const std::size_t c = cfg.channels;
    const auto& fi = h.f_init.value();
    const auto& f2 = h.features[1].value();
    for (std::size_t px = 0; px < 36; ++px)
      for (std::size_t ch = 0; ch < c; ++ch) {
        CHECK(fi[px * 4 * c + 3 * c + ch] == f2[px * c + ch]);
        if (!use_sar) CHECK(fi[px * 4 * c + c + ch] == f2[px * c + ch]);
      }
  }
}

TEST_CASE("one-token windows attend only to themselves") {
  HdtConfig cfg = HdtConfig::tiny();
  cfg.window = 1;
  const auto store = init_params<double>(cfg, 14);
  std::mt19937_64 rng(54);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  Var<double> attn;
  window_msa(p, "body.g0.dt0.msa", tape.constant(oracle::random_tensor<double>(Shape{1, 3, 4, cfg.embed}, rng)), cfg,
             0, &attn);
  for (double v : attn.value().data()) CHECK(v == 1.0);
}

TEST_CASE("zero query and key projections average the values") {
  const HdtConfig cfg = HdtConfig::tiny();
  auto store = init_params<double>(cfg, 15);
  const std::string pre = "body.g0.dt0.msa";
  for (const char* n : {".q.w", ".q.b", ".k.w", ".k.b"}) store[pre + n].fill(0.0);
  std::mt19937_64 rng(55);
  const auto x = oracle::random_tensor<double>(Shape{1, 4, 4, cfg.embed}, rng);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  const auto y = window_msa(p, pre, tape.constant(x), cfg, 0).value();
  // One 4×4 window: every output is o(mean_t v(x_t)).
  const std::size_t d = cfg.embed;
  std::vector<double> vmean(d, 0.0);
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t o = 0; o < d; ++o) {
      double acc = store[pre + ".v.b"][o];
      for (std::size_t c = 0; c < d; ++c) acc += x[t * d + c] * store[pre + ".v.w"][c * d + o];
      vmean[o] += acc / 16;
    }
  double err = 0;
  for (std::size_t o = 0; o < d; ++o) {
    double acc = store[pre + ".o.b"][o];
    for (std::size_t c = 0; c < d; ++c) acc += vmean[c] * store[pre + ".o.w"][c * d + o];
    for (std::size_t t = 0; t < 16; ++t) err = std::max(err, std::abs(y[t * d + o] - acc));
  }
  CHECK(err < 1e-12);
}

TEST_CASE("permuting tokens inside a window permutes the outputs") {
  const HdtConfig cfg = HdtConfig::tiny();
  const auto store = init_params<double>(cfg, 16);
  std::mt19937_64 rng(56);
  const std::size_t d = cfg.embed, n = cfg.window * cfg.window;
  const auto x = oracle::random_tensor<double>(Shape{1, cfg.window, cfg.window, d}, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> xp(x.shape());
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < d; ++c) xp[t * d + c] = x[perm[t] * d + c];
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  const auto y = window_msa(p, "body.g0.dt0.msa", tape.constant(x), cfg, 0).value();
  const auto yp = window_msa(p, "body.g0.dt0.msa", tape.constant(xp), cfg, 0).value();
  double err = 0;
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < d; ++c) err = std::max(err, std::abs(yp[t * d + c] - y[perm[t] * d + c]));
  CHECK(err < 1e-12);
}

TEST_CASE("plain and deformable local branches agree at zero offsets") {
  HdtConfig on = HdtConfig::tiny(), off = on;
  off.deformable = false;
  const auto deform = init_params<double>(on, 17);
  auto plain = init_params<double>(off, 17);
  for (std::size_t i = 0; i < plain.size(); ++i) {
    std::string name = plain.name(i);
    if (const auto at = name.find(".plain"); at != std::string::npos) name.replace(at, 6, ".deform");
    plain.value(i) = deform[name];
  }
  std::mt19937_64 rng(57);
  const auto x = oracle::random_tensor<double>(Shape{1, 6, 7, on.embed}, rng);
  Tape<double> tape;
  BoundParams<double> pd(tape, deform, false), pp(tape, plain, false);
  CHECK(local_branch(pd, "body.g0.dt0", tape.constant(x), on).value() ==
        local_branch(pp, "body.g0.dt0", tape.constant(x), off).value());
}

TEST_CASE("dual-branch fusion is additive") {
  const HdtConfig cfg = HdtConfig::tiny();
  auto store = init_params<double>(cfg, 18);
  std::mt19937_64 rng(58);
  const auto x = oracle::random_tensor<double>(Shape{1, 8, 8, cfg.embed}, rng);
  {
    Tape<double> tape;
    BoundParams<double> p(tape, store, false);
    auto xv = tape.constant(x);
    const auto dt = dt_forward(p, "body.g0.dt1", xv, cfg, 2);
    CHECK(dt.shape() == x.shape());
    const auto sum = ad::add(global_branch(p, "body.g0.dt1", xv, cfg, 2), local_branch(p, "body.g0.dt1", xv, cfg));
    CHECK(dt.value() == sum.value());
  }
  // A zero local branch leaves the global branch.
  store["body.g0.dt1.local.ln.gamma"].fill(0.0);
  store["body.g0.dt1.local.ln.beta"].fill(0.0);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  auto xv = tape.constant(x);
  CHECK(dt_forward(p, "body.g0.dt1", xv, cfg, 2).value() == global_branch(p, "body.g0.dt1", xv, cfg, 2).value());
}

TEST_CASE("a forced unit gate returns the normalized input") {
  const HdtConfig cfg = HdtConfig::tiny();
  auto store = init_params<double>(cfg, 19);
  store["body.g0.dt0.local.fc.w"].fill(0.0);
  store["body.g0.dt0.local.fc.b"].fill(1e3);
  std::mt19937_64 rng(59);
  const auto x = oracle::random_tensor<double>(Shape{1, 5, 5, cfg.embed}, rng);
  Tape<double> tape;
  BoundParams<double> p(tape, store, false);
  auto xv = tape.constant(x);
  const auto out = local_branch(p, "body.g0.dt0", xv, cfg);
  const auto f_in = ad::layer_norm(xv, p["body.g0.dt0.local.ln.gamma"], p["body.g0.dt0.local.ln.beta"]);
  CHECK(out.value() == f_in.value());
}

TEST_CASE("tiny preset maps 32x32 to 32x32x3 deterministically") {
  const HdtConfig cfg = HdtConfig::tiny();
  const auto store = init_params<float>(cfg, 20);
  const auto s = synth_dataset(1, 2, 32)[0];
  const auto a = fuse(store, cfg, s, 2.2), b = fuse(store, cfg, s, 2.2);
  CHECK(a.pixels.shape() == Shape{32, 32, 3});
  CHECK(a.pixels == b.pixels);
  for (float v : a.pixels.data()) CHECK((v > 0 && v < 1));
}
