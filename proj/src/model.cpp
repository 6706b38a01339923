#include "hdt/model.hpp"

#include <cmath>

#include "hdt/error.hpp"

namespace hdt {

namespace {

template <typename T>
Var<T> conv(const BoundParams<T>& p, const std::string& name, Var<T> x, const kernels::Conv2dOptions& opt = {}) {
  return ad::conv2d(x, p[name + ".w"], p[name + ".b"], opt);
}

template <typename T>
Var<T> conv_act(const BoundParams<T>& p, const std::string& name, Var<T> x) {
  return ad::leaky_relu(conv(p, name, x));
}

template <typename T>
Var<T> dense(const BoundParams<T>& p, const std::string& name, Var<T> x) {
  return ad::linear(x, p[name + ".w"], p[name + ".b"]);
}

template <typename T>
Var<T> norm(const BoundParams<T>& p, const std::string& name, Var<T> x) {
  return ad::layer_norm(x, p[name + ".gamma"], p[name + ".beta"]);
}

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

}  // namespace

// --- head -------------------------------------------------------------------

template <typename T>
Var<T> extract_shallow(const BoundParams<T>& p, Var<T> input) {
  if (input.shape().rank() != 4 || input.shape()[3] != 6) {
    throw ShapeError("head input must be B×H×W×6, got " + input.shape().str());
  }
  Var<T> f = conv_act(p, "head.shallow0", input);
  f = conv_act(p, "head.shallow1", f);
  return conv_act(p, "head.shallow2", f);
}

template <typename T>
Var<T> spatial_attention(const BoundParams<T>& p, const std::string& module, Var<T> f_i, Var<T> f_ref) {
  Var<T> a = conv_act(p, module + ".conv0", ad::concat<T>({f_i, f_ref}));
  return ad::sigmoid(conv(p, module + ".conv1", a));
}

template <typename T>
Var<T> apply_attention(Var<T> f, Var<T> m) {
  return ad::mul(f, m);
}

template <typename T>
Var<T> sar(Var<T> f_ref, Var<T> m1, Var<T> m3) {
  return ad::scale(ad::add(ad::mul(f_ref, m1), ad::mul(f_ref, m3)), T(0.5));
}

template <typename T>
Var<T> concat_head(Var<T> fm1, Var<T> fm2, Var<T> fm3, Var<T> f_ref) {
  return ad::concat<T>({fm1, fm2, fm3, f_ref});
}

template <typename T>
HeadOutput<T> head_forward(const BoundParams<T>& p, const HdtConfig& cfg, const std::array<Var<T>, 3>& inputs) {
  for (const auto& in : inputs) {
    if (in.shape() != inputs[1].shape()) {
      throw ShapeError("exposure inputs differ in shape: " + in.shape().str() + " vs " + inputs[1].shape().str());
    }
  }
  HeadOutput<T> h;
  for (std::size_t i = 0; i < 3; ++i) h.features[i] = extract_shallow(p, inputs[i]);
  const Var<T> f2 = h.features[1];
  h.m1 = spatial_attention(p, "head.att1", h.features[0], f2);
  h.m3 = spatial_attention(p, "head.att3", h.features[2], f2);
  h.gated[0] = apply_attention(h.features[0], h.m1);
  h.gated[2] = apply_attention(h.features[2], h.m3);
  h.gated[1] = cfg.sar ? sar(f2, h.m1, h.m3) : f2;
  h.f_init = concat_head(h.gated[0], h.gated[1], h.gated[2], f2);
  return h;
}

// --- dual transformer -------------------------------------------------------

template <typename T>
Var<T> window_msa(const BoundParams<T>& p, const std::string& prefix, Var<T> x, const HdtConfig& cfg,
                  std::size_t shift, Var<T>* attention) {
  const auto& s = x.shape();
  require_rank(s, 4, "window_msa");
  const std::size_t nb = s[0], h = s[1], w = s[2], d = s[3];
  if (d != cfg.embed) throw ShapeError("window_msa: expected width " + std::to_string(cfg.embed) + ", got " + s.str());
  const std::size_t win = cfg.window;
  const std::size_t hp = round_up(h, win), wp = round_up(w, win);
  if (hp - h >= h || wp - w >= w) {
    throw ShapeError("window_msa: " + std::to_string(h) + "×" + std::to_string(w) + " too small for window " +
                     std::to_string(win));
  }
  Var<T> padded = (hp != h || wp != w) ? ad::pad_reflect(x, hp - h, wp - w) : x;
  Var<T> windows = ad::window_partition(padded, win, shift);  // (B·nW)×T×D

  Var<T> q = ad::split_heads(dense(p, prefix + ".q", windows), cfg.heads);
  Var<T> k = ad::split_heads(dense(p, prefix + ".k", windows), cfg.heads);
  Var<T> v = ad::split_heads(dense(p, prefix + ".v", windows), cfg.heads);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(d / cfg.heads));
  Var<T> scores = ad::scale(ad::batched_matmul(q, k, true), inv_sqrt_dh);
  Var<T> attn = ad::softmax(scores);
  if (attention) *attention = attn;
  Var<T> mixed = ad::merge_heads(ad::batched_matmul(attn, v, false), cfg.heads);
  Var<T> out = dense(p, prefix + ".o", mixed);

  Var<T> restored = ad::window_reverse(out, win, nb, hp, wp, shift);
  return (hp != h || wp != w) ? ad::crop(restored, h, w) : restored;
}

template <typename T>
Var<T> global_branch(const BoundParams<T>& p, const std::string& prefix, Var<T> em0, const HdtConfig& cfg,
                     std::size_t shift) {
  Var<T> em1 = ad::add(window_msa(p, prefix + ".msa", norm(p, prefix + ".ln1", em0), cfg, shift), em0);
  Var<T> hidden = ad::gelu(dense(p, prefix + ".mlp.fc0", norm(p, prefix + ".ln2", em1)));
  return ad::add(dense(p, prefix + ".mlp.fc1", hidden), em1);
}

template <typename T>
Var<T> local_branch(const BoundParams<T>& p, const std::string& prefix, Var<T> em0, const HdtConfig& cfg,
                    Var<T>* gate) {
  const std::string lp = prefix + ".local";
  Var<T> f_in = norm(p, lp + ".ln", em0);
  Var<T> h = conv_act(p, lp + ".conv0", f_in);
  h = conv_act(p, lp + ".conv1", h);
  for (const char* layer : {"0", "1"}) {
    if (cfg.deformable) {
      const std::string name = lp + ".deform" + layer;
      Var<T> offsets = conv(p, name + ".offset", h);
      h = ad::leaky_relu(ad::deformable_conv2d(h, p[name + ".w"], p[name + ".b"], offsets));
    } else {
      h = conv_act(p, lp + ".plain" + layer, h);
    }
  }
  Var<T> wc = ad::sigmoid(dense(p, lp + ".fc", ad::global_avg_pool(h)));
  if (gate) *gate = wc;
  return ad::mul_channel(f_in, wc);
}

template <typename T>
Var<T> dt_forward(const BoundParams<T>& p, const std::string& prefix, Var<T> em0, const HdtConfig& cfg,
                  std::size_t shift) {
  return ad::add(global_branch(p, prefix, em0, cfg, shift), local_branch(p, prefix, em0, cfg));
}

std::size_t dt_shift(const HdtConfig& cfg, std::size_t n) { return n % 2 == 1 ? cfg.window / 2 : 0; }

template <typename T>
Var<T> hdt_forward(const BoundParams<T>& p, const HdtConfig& cfg, Var<T> f_init) {
  Var<T> em0 = conv(p, "body.embed", f_init);
  Var<T> x = em0;
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    const std::string gp = "body.g" + std::to_string(g);
    const Var<T> group_in = x;
    for (std::size_t n = 0; n < cfg.dts_per_group; ++n) {
      x = dt_forward(p, gp + ".dt" + std::to_string(n), x, cfg, dt_shift(cfg, n));
    }
    x = ad::add(conv(p, gp + ".conv", x), group_in);
  }
  kernels::Conv2dOptions dilated;
  dilated.dilation = cfg.dilation;
  x = ad::add(conv(p, "body.dilated", x, dilated), em0);
  x = ad::add(conv(p, "body.conv_res", x), em0);
  return ad::sigmoid(conv(p, "body.out", x));
}

template <typename T>
Var<T> model_forward(const BoundParams<T>& p, const HdtConfig& cfg, const std::array<Var<T>, 3>& inputs) {
  return hdt_forward(p, cfg, head_forward(p, cfg, inputs).f_init);
}

template <typename T>
HdrImage fuse(const ParamStore<T>& params, const HdtConfig& cfg, const SampleTriplet& s, double gamma) {
  Tape<T> tape;
  BoundParams<T> p(tape, params, false);
  auto in = build_input<T>(s, gamma);
  std::array<Var<T>, 3> vars{tape.constant(std::move(in[0])), tape.constant(std::move(in[1])),
                             tape.constant(std::move(in[2]))};
  const Tensor<T>& out = model_forward(p, cfg, vars).value();
  if (!out.all_finite()) throw NumericError("non-finite model output for sample " + s.id);
  const auto& os = out.shape();
  return HdrImage{out.template cast<float>().reshaped(Shape{os[1], os[2], os[3]})};
}

#define HDT_INSTANTIATE(T)                                                                                        \
  template Var<T> extract_shallow(const BoundParams<T>&, Var<T>);                                                 \
  template Var<T> spatial_attention(const BoundParams<T>&, const std::string&, Var<T>, Var<T>);                   \
  template Var<T> apply_attention(Var<T>, Var<T>);                                                                \
  template Var<T> sar(Var<T>, Var<T>, Var<T>);                                                                    \
  template Var<T> concat_head(Var<T>, Var<T>, Var<T>, Var<T>);                                                    \
  template HeadOutput<T> head_forward(const BoundParams<T>&, const HdtConfig&, const std::array<Var<T>, 3>&);     \
  template Var<T> window_msa(const BoundParams<T>&, const std::string&, Var<T>, const HdtConfig&, std::size_t,     \
                             Var<T>*);                                                                            \
  template Var<T> global_branch(const BoundParams<T>&, const std::string&, Var<T>, const HdtConfig&, std::size_t); \
  template Var<T> local_branch(const BoundParams<T>&, const std::string&, Var<T>, const HdtConfig&, Var<T>*);     \
  template Var<T> dt_forward(const BoundParams<T>&, const std::string&, Var<T>, const HdtConfig&, std::size_t);   \
  template Var<T> hdt_forward(const BoundParams<T>&, const HdtConfig&, Var<T>);                                   \
  template Var<T> model_forward(const BoundParams<T>&, const HdtConfig&, const std::array<Var<T>, 3>&);           \
  template HdrImage fuse(const ParamStore<T>&, const HdtConfig&, const SampleTriplet&, double);

HDT_INSTANTIATE(float)
HDT_INSTANTIATE(double)

}  // namespace hdt
