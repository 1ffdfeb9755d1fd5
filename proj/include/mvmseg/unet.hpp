#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvmseg/mask.hpp"
#include "mvmseg/ops.hpp"
#include "mvmseg/rng.hpp"
#include "mvmseg/tensor.hpp"

namespace mvmseg {

/// The four segmentation strategies: single-channel magnitude [a],
/// single-channel (3-component) phase [b], early-stacked multi-channel [c],
/// and the dual-encoder attention-fusion network [d].
enum class Variant { a, b, c, d };

inline Variant variant_from_string(const std::string& s) {
  if (s == "a") return Variant::a;
  if (s == "b") return Variant::b;
  if (s == "c") return Variant::c;
  if (s == "d") return Variant::d;
  throw std::invalid_argument("unsupported variant \"" + s + "\" (expected a, b, c or d)");
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::a: return "a";
    case Variant::b: return "b";
    case Variant::c: return "c";
    default: return "d";
  }
}

struct ModelConfig {
  Variant variant = Variant::a;
  int levels = 3;         // resolution scales; >= 2
  int base_channels = 8;  // width at the top level; >= 4, doubles per level
  int mag_channels = 1;
  int phase_channels = 3;
  int num_classes = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (levels < 2) throw std::invalid_argument("ModelConfig: levels " + std::to_string(levels) + " < 2");
    if (base_channels < 4) throw std::invalid_argument("ModelConfig: base_channels " + std::to_string(base_channels) + " < 4");
    if (num_classes != 2) throw std::invalid_argument("ModelConfig: num_classes must be 2");
  }

  /// Channel width at resolution level (0 = full resolution).
  int width(int level) const { return base_channels << level; }

  /// Channels consumed from the stacked input by the single-encoder variants.
  int input_channels() const {
    switch (variant) {
      case Variant::a: return mag_channels;
      case Variant::b: return phase_channels;
      default: return mag_channels + phase_channels;
    }
  }
};

namespace unet_detail {

template <typename T>
struct ConvBlockParams {  // two conv3x3+relu stages
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct AttentionParams {  // two conv1x1 stages ending in a 1-channel map
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct MmabParams {
  ConvBlockParams<T> fuse;  // 2C -> C, same setting as the encoder blocks
  AttentionParams<T> gate;
};

template <typename T>
struct DecoderParams {
  Tensor<T> up_w, up_b;      // conv3x3 after nearest-neighbour upsampling
  ConvBlockParams<T> block;  // after skip concatenation
};

}  // namespace unet_detail

/// Parameters plus architecture descriptor for one built network.
template <typename T>
class UNetModel {
 public:
  using ConvBlockParams = unet_detail::ConvBlockParams<T>;
  using AttentionParams = unet_detail::AttentionParams<T>;
  using MmabParams = unet_detail::MmabParams<T>;
  using DecoderParams = unet_detail::DecoderParams<T>;

  ModelConfig config;
  std::vector<ConvBlockParams> enc;        // per level; mag stream for [d]
  std::vector<ConvBlockParams> enc_phase;  // [d] only
  std::vector<MmabParams> mmab;            // [d] only, one per level
  std::vector<DecoderParams> dec;          // levels-1 stages, deepest first
  Tensor<T> head_w, head_b;                // final 1x1 projection to classes

  /// Parameters in a fixed order; this order defines optimizer-state and
  /// checkpoint layout.
  std::vector<std::pair<std::string, Tensor<T>>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto block = [&out](const std::string& prefix, ConvBlockParams& p) {
      out.push_back({prefix + ".w1", p.w1});
      out.push_back({prefix + ".b1", p.b1});
      out.push_back({prefix + ".w2", p.w2});
      out.push_back({prefix + ".b2", p.b2});
    };
    for (std::size_t l = 0; l < enc.size(); ++l) block("enc." + std::to_string(l), enc[l]);
    for (std::size_t l = 0; l < enc_phase.size(); ++l) block("enc_phase." + std::to_string(l), enc_phase[l]);
    for (std::size_t l = 0; l < mmab.size(); ++l) {
      block("mmab." + std::to_string(l) + ".fuse", mmab[l].fuse);
      out.push_back({"mmab." + std::to_string(l) + ".gate.w1", mmab[l].gate.w1});
      out.push_back({"mmab." + std::to_string(l) + ".gate.b1", mmab[l].gate.b1});
      out.push_back({"mmab." + std::to_string(l) + ".gate.w2", mmab[l].gate.w2});
      out.push_back({"mmab." + std::to_string(l) + ".gate.b2", mmab[l].gate.b2});
    }
    for (std::size_t l = 0; l < dec.size(); ++l) {
      out.push_back({"dec." + std::to_string(l) + ".up_w", dec[l].up_w});
      out.push_back({"dec." + std::to_string(l) + ".up_b", dec[l].up_b});
      block("dec." + std::to_string(l) + ".block", dec[l].block);
    }
    out.push_back({"head.w", head_w});
    out.push_back({"head.b", head_b});
    return out;
  }

  std::vector<Tensor<T>> params() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto& [name, t] : named_params()) n += t.size();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : named_params()) t.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& [name, t] : named_params())
      if (t.requires_grad()) t.zero_grad();
  }
};

namespace unet_detail {

template <typename T>
Tensor<T> he_conv(int cout, int cin, int k, Rng& rng) {
  Tensor<T> w({cout, cin, k, k});
  const double stddev = std::sqrt(2.0 / (double(cin) * k * k));
  for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = T(rng.normal() * stddev);
  return w;
}

template <typename T>
ConvBlockParams<T> make_block(int cin, int cout, Rng& rng) {
  ConvBlockParams<T> p;
  p.w1 = he_conv<T>(cout, cin, 3, rng);
  p.b1 = Tensor<T>::zeros({cout});
  p.w2 = he_conv<T>(cout, cout, 3, rng);
  p.b2 = Tensor<T>::zeros({cout});
  return p;
}

}  // namespace unet_detail

/// He-initialized network for the given configuration; reproducible given
/// the config seed, biases zero.
template <typename T>
UNetModel<T> build_model(const ModelConfig& cfg) {
  cfg.validate();
  UNetModel<T> m;
  m.config = cfg;
  Rng rng(Rng::splitmix(cfg.seed ^ 0x6d766d73ull));

  const int L = cfg.levels;
  // primary encoder: stacked input for a/b/c, magnitude stream for d
  int cin = cfg.variant == Variant::d ? cfg.mag_channels : cfg.input_channels();
  for (int l = 0; l < L; ++l) {
    m.enc.push_back(unet_detail::make_block<T>(cin, cfg.width(l), rng));
    cin = cfg.width(l);
  }
  if (cfg.variant == Variant::d) {
    cin = cfg.phase_channels;
    for (int l = 0; l < L; ++l) {
      m.enc_phase.push_back(unet_detail::make_block<T>(cin, cfg.width(l), rng));
      cin = cfg.width(l);
    }
    for (int l = 0; l < L; ++l) {
      const int c = cfg.width(l);
      unet_detail::MmabParams<T> p;
      p.fuse = unet_detail::make_block<T>(2 * c, c, rng);
      const int hidden = c / 2 > 0 ? c / 2 : 1;
      p.gate.w1 = unet_detail::he_conv<T>(hidden, c, 1, rng);
      p.gate.b1 = Tensor<T>::zeros({hidden});
      p.gate.w2 = unet_detail::he_conv<T>(1, hidden, 1, rng);
      p.gate.b2 = Tensor<T>::zeros({1});
      m.mmab.push_back(std::move(p));
    }
  }
  for (int l = L - 1; l >= 1; --l) {  // deepest decoder stage first
    unet_detail::DecoderParams<T> d;
    d.up_w = unet_detail::he_conv<T>(cfg.width(l - 1), cfg.width(l), 3, rng);
    d.up_b = Tensor<T>::zeros({cfg.width(l - 1)});
    d.block = unet_detail::make_block<T>(2 * cfg.width(l - 1), cfg.width(l - 1), rng);
    m.dec.push_back(std::move(d));
  }
  m.head_w = unet_detail::he_conv<T>(cfg.num_classes, cfg.base_channels, 1, rng);
  m.head_b = Tensor<T>::zeros({cfg.num_classes});
  return m;
}

/// Two (conv3x3 -> relu) stages; spatial size preserved.
template <typename T>
Tensor<T> encoder_block(const Tensor<T>& x, const unet_detail::ConvBlockParams<T>& p, Tape<T>* tape = nullptr) {
  auto h = relu(conv2d(x, p.w1, p.b1, tape), tape);
  return relu(conv2d(h, p.w2, p.b2, tape), tape);
}

/// Fuses same-depth magnitude and phase features: concatenate, run an
/// encoder-style conv block 2C->C, then gate the result with a 1-channel
/// sigmoid spatial attention map.
template <typename T>
Tensor<T> mmab(const Tensor<T>& f_mag, const Tensor<T>& f_phase, const unet_detail::MmabParams<T>& p,
               Tape<T>* tape = nullptr) {
  detail::require(f_mag.shape() == f_phase.shape(), "mmab: stream shapes " + shape_string(f_mag.shape()) + " and " +
                                                        shape_string(f_phase.shape()) + " differ");
  auto fused = encoder_block(concat_channels(f_mag, f_phase, tape), p.fuse, tape);
  auto gate = sigmoid(conv1x1(relu(conv1x1(fused, p.gate.w1, p.gate.b1, tape), tape), p.gate.w2, p.gate.b2, tape), tape);
  return mul_channel_map(fused, gate, tape);
}

/// Runs the configured network. Variant [a] consumes mag only, [b] phase
/// only, [c] their channel stack, [d] both through separate encoders with
/// MMAB fusion at every depth (bottleneck included). Spatial extents must
/// be divisible by 2^(levels-1).
template <typename T>
Tensor<T> forward(UNetModel<T>& model, const Tensor<T>& mag, const Tensor<T>& phase, Tape<T>* tape = nullptr) {
  const ModelConfig& cfg = model.config;
  const Tensor<T>& probe = cfg.variant == Variant::b ? phase : mag;
  detail::require_rank4(probe, "forward", "input");
  const int H = probe.dim(2), W = probe.dim(3);
  const int div = 1 << (cfg.levels - 1);
  detail::require(H % div == 0 && W % div == 0, "forward: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                                                    " must be divisible by " + std::to_string(div) + " (2^(levels-1))");

  const int L = cfg.levels;
  std::vector<Tensor<T>> skips(static_cast<std::size_t>(L));  // per level; [L-1] is the bottleneck

  if (cfg.variant == Variant::d) {
    detail::require(mag.dim(1) == cfg.mag_channels, "forward: magnitude channel extent " + std::to_string(mag.dim(1)) +
                                                        " != " + std::to_string(cfg.mag_channels));
    detail::require(phase.dim(1) == cfg.phase_channels, "forward: phase channel extent " + std::to_string(phase.dim(1)) +
                                                            " != " + std::to_string(cfg.phase_channels));
    Tensor<T> xm = mag, xp = phase;
    for (int l = 0; l < L; ++l) {
      if (l > 0) {
        xm = maxpool2(xm, tape);
        xp = maxpool2(xp, tape);
      }
      xm = encoder_block(xm, model.enc[std::size_t(l)], tape);
      xp = encoder_block(xp, model.enc_phase[std::size_t(l)], tape);
      skips[std::size_t(l)] = mmab(xm, xp, model.mmab[std::size_t(l)], tape);
    }
  } else {
    Tensor<T> x;
    switch (cfg.variant) {
      case Variant::a: x = mag; break;
      case Variant::b: x = phase; break;
      default: x = concat_channels(mag, phase, tape); break;
    }
    detail::require(x.dim(1) == cfg.input_channels(), "forward: input channel extent " + std::to_string(x.dim(1)) +
                                                          " != " + std::to_string(cfg.input_channels()));
    for (int l = 0; l < L; ++l) {
      if (l > 0) x = maxpool2(x, tape);
      x = encoder_block(x, model.enc[std::size_t(l)], tape);
      skips[std::size_t(l)] = x;
    }
  }

  Tensor<T> y = skips[std::size_t(L - 1)];
  for (std::size_t s = 0; s < model.dec.size(); ++s) {
    auto& d = model.dec[s];
    y = relu(conv2d(upsample_nn2(y, tape), d.up_w, d.up_b, tape), tape);
    y = concat_channels(y, skips[std::size_t(L - 2 - int(s))], tape);
    y = encoder_block(y, d.block, tape);
  }
  return conv1x1(y, model.head_w, model.head_b, tape);
}

/// Per-pixel argmax over the two logit channels; exact ties resolve to
/// background.
template <typename T>
std::vector<Mask> predict_mask(const Tensor<T>& logits) {
  detail::require_rank4(logits, "predict_mask", "logits");
  detail::require(logits.dim(1) == 2, "predict_mask: class extent " + std::to_string(logits.dim(1)) + " must be 2");
  const int B = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
  std::vector<Mask> out(std::size_t(B), Mask(H, W));
  for (int bb = 0; bb < B; ++bb)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) out[std::size_t(bb)].at(i, j) = logits(bb, 1, i, j) > logits(bb, 0, i, j) ? 1 : 0;
  return out;
}

}  // namespace mvmseg
