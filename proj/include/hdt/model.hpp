#pragma once

// Feature-extraction head and hierarchical dual-transformer body. All
// feature maps are B×H×W×C; the token view of a map is the same buffer
// read as B×(H·W)×C.

#include <array>
#include <string>
#include <vector>

#include "hdt/autodiff.hpp"
#include "hdt/config.hpp"
#include "hdt/error.hpp"
#include "hdt/hdr.hpp"
#include "hdt/params.hpp"

namespace hdt {

/// Parameters of a ParamStore recorded as leaves on one tape.
template <typename T>
class BoundParams {
 public:
  /// trainable leaves collect gradients; otherwise they are constants.
  BoundParams(Tape<T>& tape, const ParamStore<T>& store, bool trainable) : store_(&store) {
    vars_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      vars_.push_back(trainable ? tape.variable(store.value(i)) : tape.constant(store.value(i)));
    }
  }

  /// Leaves already on a tape, in store order.
  BoundParams(const ParamStore<T>& store, std::vector<Var<T>> vars) : store_(&store), vars_(std::move(vars)) {
    if (vars_.size() != store.size()) throw Error("BoundParams: expected one leaf per parameter");
  }

  Var<T> operator[](const std::string& name) const { return vars_[store_->index(name)]; }
  Var<T> at(std::size_t i) const { return vars_.at(i); }
  std::size_t size() const { return vars_.size(); }
  bool contains(const std::string& name) const { return store_->contains(name); }

 private:
  const ParamStore<T>* store_;
  std::vector<Var<T>> vars_;
};

// --- head -------------------------------------------------------------------

/// Three same-padded 3×3 conv + LeakyReLU layers (6 → C → C → C), shared by
/// all exposures.
template <typename T>
Var<T> extract_shallow(const BoundParams<T>& p, Var<T> input);

/// sigmoid(conv(LeakyReLU(conv(concat(f_i, f_ref))))) with the weights of
/// the named module ("head.att1" or "head.att3").
template <typename T>
Var<T> spatial_attention(const BoundParams<T>& p, const std::string& module, Var<T> f_i, Var<T> f_ref);

/// f ⊙ m.
template <typename T>
Var<T> apply_attention(Var<T> f, Var<T> m);

/// (f_ref ⊙ m1 + f_ref ⊙ m3) / 2.
template <typename T>
Var<T> sar(Var<T> f_ref, Var<T> m1, Var<T> m3);

/// Channel order [fm1, fm2, fm3, f_ref].
template <typename T>
Var<T> concat_head(Var<T> fm1, Var<T> fm2, Var<T> fm3, Var<T> f_ref);

template <typename T>
struct HeadOutput {
  std::array<Var<T>, 3> features;  // f_1, f_2, f_3
  Var<T> m1, m3;
  std::array<Var<T>, 3> gated;     // fm_1, fm_2, fm_3
  Var<T> f_init;
};

/// Runs the head on three B×H×W×6 exposure tensors. With cfg.sar off the
/// reference feature passes through ungated.
template <typename T>
HeadOutput<T> head_forward(const BoundParams<T>& p, const HdtConfig& cfg, const std::array<Var<T>, 3>& inputs);

// --- dual transformer -------------------------------------------------------

/// Window multi-head self-attention over B×H×W×D. H and W are reflect-padded
/// to multiples of the window, rolled by -shift, attended per window and
/// restored. No positional encoding. When attention is non-null it receives
/// the (windows·heads)×T×T softmax weights.
template <typename T>
Var<T> window_msa(const BoundParams<T>& p, const std::string& prefix, Var<T> x, const HdtConfig& cfg,
                  std::size_t shift, Var<T>* attention = nullptr);

/// Em1 = MSA(LN(Em0)) + Em0; GF = MLP(LN(Em1)) + Em1.
template <typename T>
Var<T> global_branch(const BoundParams<T>& p, const std::string& prefix, Var<T> em0, const HdtConfig& cfg,
                     std::size_t shift);

/// f_in = LN(Em0); conv/LeakyReLU chain with deformable (or plain) layers,
/// pooled into a sigmoid channel gate w_c; returns w_c ⊙ f_in. When gate is
/// non-null it receives w_c (B×D).
template <typename T>
Var<T> local_branch(const BoundParams<T>& p, const std::string& prefix, Var<T> em0, const HdtConfig& cfg,
                    Var<T>* gate = nullptr);

/// global_branch + local_branch.
template <typename T>
Var<T> dt_forward(const BoundParams<T>& p, const std::string& prefix, Var<T> em0, const HdtConfig& cfg,
                  std::size_t shift);

/// Shift used by DT n of a group: 0 for even n, window/2 for odd n.
std::size_t dt_shift(const HdtConfig& cfg, std::size_t n);

/// Embedding, M groups of N DTs with group conv + residual, dilated conv,
/// two global residuals and the sigmoid output conv. Returns B×H×W×3.
template <typename T>
Var<T> hdt_forward(const BoundParams<T>& p, const HdtConfig& cfg, Var<T> f_init);

/// head_forward followed by hdt_forward.
template <typename T>
Var<T> model_forward(const BoundParams<T>& p, const HdtConfig& cfg, const std::array<Var<T>, 3>& inputs);

/// Inference on one sample without gradient bookkeeping.
template <typename T>
HdrImage fuse(const ParamStore<T>& params, const HdtConfig& cfg, const SampleTriplet& s,
              double gamma = kDefaultGamma);

}  // namespace hdt
