#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nn_ops.hpp"

namespace mafnet {

template <class T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;

// Generator layout. Encoder layer indices follow the contrastive-translation
// ResNet numbering: 0 input tap, 1-3 stem conv/norm/relu, 4-7 first
// downsampling stage (conv, norm, relu, blur-pool), 8-11 second stage,
// 12.. residual blocks.
struct GeneratorConfig {
  int n_modalities = 3;
  int base_width = 64;
  int n_blocks = 9;
  std::vector<int> nce_layers{0, 4, 8, 12, 16};
  int num_patches = 256;
  int proj_dim = 256;

  int last_layer() const { return 11 + n_blocks; }
  int bottleneck_channels() const { return 4 * base_width; }

  int channels_at(int layer) const {
    if (layer == 0) return 1;
    if (layer <= 3) return base_width;
    if (layer <= 7) return 2 * base_width;
    return 4 * base_width;
  }
  // Spatial downsampling factor of the tap at `layer`.
  int stride_at(int layer) const {
    if (layer <= 6) return 1;
    if (layer <= 10) return 2;
    return 4;
  }

  void validate() const {
    require(n_modalities == 3, ErrorCode::BadConfig, "generator expects exactly 3 input modalities");
    require(base_width > 0 && n_blocks > 0 && num_patches > 0 && proj_dim > 0, ErrorCode::BadConfig,
            "generator sizes must be positive");
    require(!nce_layers.empty(), ErrorCode::BadConfig, "nce_layers is empty");
    for (std::size_t i = 0; i < nce_layers.size(); ++i) {
      require(nce_layers[i] >= 0 && nce_layers[i] <= last_layer(), ErrorCode::BadConfig,
              "nce layer " + std::to_string(nce_layers[i]) + " outside encoder layers [0," +
                  std::to_string(last_layer()) + "]");
      require(i == 0 || nce_layers[i] > nce_layers[i - 1], ErrorCode::BadConfig,
              "nce_layers must be strictly increasing");
    }
  }
};

struct DiscriminatorConfig {
  int base_width = 64;
  int n_layers = 3;
};

struct UNetConfig {
  int in_channels = 4;
  int out_classes = 4;
  int base_width = 64;
  int depth = 4;

  void validate() const {
    require(in_channels == 4, ErrorCode::BadConfig, "segmentor takes T1, T2, FLAIR and synthesized T1ce");
    require(out_classes == 4, ErrorCode::BadConfig, "segmentor predicts 4 classes");
    require(base_width > 0 && depth > 0, ErrorCode::BadConfig, "segmentor sizes must be positive");
  }
};

struct ModelConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  UNetConfig unet;

  static ModelConfig full_scale() { return {}; }
  static ModelConfig desk_scale() {
    ModelConfig c;
    c.generator.base_width = 16;
    c.generator.num_patches = 64;
    c.discriminator.base_width = 16;
    c.unet.base_width = 16;
    c.unet.depth = 3;
    return c;
  }
  void validate() const {
    generator.validate();
    unet.validate();
    require(discriminator.base_width > 0 && discriminator.n_layers > 0, ErrorCode::BadConfig,
            "discriminator sizes must be positive");
  }
};

// normal(0, 0.02) weights, zero biases.
struct Initializer {
  std::mt19937_64 rng;
  double stddev = 0.02;

  explicit Initializer(std::uint64_t seed) : rng(seed) {}

  template <class T>
  Var<T> normal(Shape s) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<T> t(std::move(s));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return Var<T>(std::move(t), true);
  }
  template <class T>
  Var<T> constant(Shape s, T value) {
    return Var<T>(Tensor<T>(std::move(s), value), true);
  }
};

template <class T>
struct Conv {
  Var<T> weight, bias;
  int stride = 1, pad = 0;
  PadMode mode = PadMode::Zero;

  Conv() = default;
  Conv(int cin, int cout, int k, int stride_, int pad_, PadMode mode_, Initializer& init, bool with_bias = true)
      : weight(init.normal<T>({cout, cin, k, k})), stride(stride_), pad(pad_), mode(mode_) {
    if (with_bias) bias = init.constant<T>({cout}, T(0));
  }
  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, stride, pad, mode); }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + "/weight", weight);
    if (bias.defined()) out.emplace_back(prefix + "/bias", bias);
  }
};

template <class T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(int in, int out, Initializer& init) : weight(init.normal<T>({out, in})), bias(init.constant<T>({out}, T(0))) {}
  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + "/weight", weight);
    out.emplace_back(prefix + "/bias", bias);
  }
};

template <class T>
struct ResidualBlock {
  Conv<T> conv1, conv2;

  ResidualBlock() = default;
  ResidualBlock(int ch, Initializer& init)
      : conv1(ch, ch, 3, 1, 1, PadMode::Reflect, init), conv2(ch, ch, 3, 1, 1, PadMode::Reflect, init) {}
  Var<T> operator()(const Var<T>& x) const {
    auto h = relu(instance_norm(conv1(x)));
    return add(x, instance_norm(conv2(h)));
  }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    conv1.collect(prefix + "/conv1", out);
    conv2.collect(prefix + "/conv2", out);
  }
};

// Intermediate encoder outputs at the requested layer indices plus, when the
// encoder ran to completion, the bottleneck F_n.
template <class T>
struct FeaturePyramid {
  std::vector<int> layers;
  std::vector<Var<T>> features;
  Var<T> bottleneck;

  const Var<T>& at_layer(int layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i] == layer) return features[i];
    fail(ErrorCode::ShapeMismatch, "layer " + std::to_string(layer) + " not tapped");
  }
};

template <class T>
struct Encoder {
  Conv<T> stem, down1, down2;
  std::vector<ResidualBlock<T>> blocks;

  Encoder() = default;
  Encoder(const GeneratorConfig& cfg, Initializer& init)
      : stem(1, cfg.base_width, 7, 1, 3, PadMode::Reflect, init),
        down1(cfg.base_width, 2 * cfg.base_width, 3, 1, 1, PadMode::Zero, init),
        down2(2 * cfg.base_width, 4 * cfg.base_width, 3, 1, 1, PadMode::Zero, init) {
    for (int i = 0; i < cfg.n_blocks; ++i) blocks.emplace_back(4 * cfg.base_width, init);
  }

  int last_layer() const { return 11 + static_cast<int>(blocks.size()); }

  // Runs the encoder on x (N,1,H,W), tapping `taps` (sorted). When stop_after
  // is set the pass ends at that layer and no bottleneck is produced.
  FeaturePyramid<T> operator()(const Var<T>& x, const std::vector<int>& taps, int stop_after = -1) const {
    require_rank(x.shape(), 4, "encode");
    require(x.dim(1) == 1, ErrorCode::ShapeMismatch, "encoder takes a single-modality image");
    require(x.dim(2) % 4 == 0 && x.dim(3) % 4 == 0, ErrorCode::ShapeMismatch,
            "encoder input extent must be divisible by 4, got " + shape_str(x.shape()));
    FeaturePyramid<T> out;
    const int last = stop_after < 0 ? last_layer() : stop_after;
    int layer = 0;
    Var<T> h = x;
    auto step = [&](auto&& fn) {
      if (layer > last) return;
      if (layer > 0) h = fn(h);
      for (int t : taps)
        if (t == layer) {
          out.layers.push_back(layer);
          out.features.push_back(h);
        }
      ++layer;
    };
    auto identity = [](const Var<T>& v) { return v; };
    auto norm = [](const Var<T>& v) { return instance_norm(v); };
    auto act = [](const Var<T>& v) { return relu(v); };
    auto blur = [](const Var<T>& v) { return blur_downsample(v); };
    step(identity);
    step([&](const Var<T>& v) { return stem(v); });
    step(norm);
    step(act);
    step([&](const Var<T>& v) { return down1(v); });
    step(norm);
    step(act);
    step(blur);
    step([&](const Var<T>& v) { return down2(v); });
    step(norm);
    step(act);
    step(blur);
    for (const auto& block : blocks) step([&](const Var<T>& v) { return block(v); });
    if (stop_after < 0 || stop_after >= last_layer()) out.bottleneck = h;
    return out;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    stem.collect(prefix + "/stem", out);
    down1.collect(prefix + "/down1", out);
    down2.collect(prefix + "/down2", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + "/block" + std::to_string(i), out);
  }
};

template <class T>
struct FusionResult {
  Var<T> fused;      // (N, C_f, H_f, W_f)
  Var<T> attention;  // (N, 3, H_f, W_f), softmax over modalities
};

// Modality-level attention fusion.
template <class T>
struct MafBlock {
  Conv<T> attention;  // 3*C_f -> 3 modality logits, 3x3
  Conv<T> fuse;       // 3*C_f -> C_f, 1x1
  T leak = T(0.2);

  MafBlock() = default;
  MafBlock(int channels, int n_modalities, Initializer& init)
      : attention(n_modalities * channels, n_modalities, 3, 1, 1, PadMode::Zero, init),
        fuse(n_modalities * channels, channels, 1, 1, 0, PadMode::Zero, init) {}

  FusionResult<T> operator()(const std::vector<Var<T>>& feats) const {
    require(feats.size() == static_cast<std::size_t>(attention.weight.dim(0)), ErrorCode::ShapeMismatch,
            "maf_fuse: wrong number of modality features");
    for (const auto& f : feats) require_shape(f.shape(), feats[0].shape(), "maf_fuse features");
    auto logits = attention(concat_channels(feats));
    auto a = channel_softmax(logits);
    std::vector<Var<T>> weighted;
    for (std::size_t n = 0; n < feats.size(); ++n) {
      const int c = static_cast<int>(n);
      weighted.push_back(scale_by_map(slice_channels(a, c, c + 1), feats[n]));
    }
    return {leaky_relu(fuse(concat_channels(weighted)), leak), a};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    attention.collect(prefix + "/attention", out);
    fuse.collect(prefix + "/fuse", out);
  }
};

template <class T>
struct Decoder {
  Conv<T> up1, up2, head;

  Decoder() = default;
  Decoder(const GeneratorConfig& cfg, Initializer& init)
      : up1(4 * cfg.base_width, 2 * cfg.base_width, 3, 1, 1, PadMode::Zero, init),
        up2(2 * cfg.base_width, cfg.base_width, 3, 1, 1, PadMode::Zero, init),
        head(cfg.base_width, 1, 7, 1, 3, PadMode::Reflect, init) {}

  Var<T> operator()(const Var<T>& fused) const {
    require_rank(fused.shape(), 4, "decode");
    require(fused.dim(1) == up1.weight.dim(1), ErrorCode::ShapeMismatch,
            "decode: expected " + std::to_string(up1.weight.dim(1)) + " channels, got " + shape_str(fused.shape()));
    auto h = relu(instance_norm(up1(upsample_nearest2x(fused))));
    h = relu(instance_norm(up2(upsample_nearest2x(h))));
    return tanh(head(h));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    up1.collect(prefix + "/up1", out);
    up2.collect(prefix + "/up2", out);
    head.collect(prefix + "/head", out);
  }
};

template <class T>
struct SynthesisResult {
  Var<T> image;  // (N,1,H,W) in [-1,1]
  std::vector<FeaturePyramid<T>> pyramids;
  Var<T> attention;
};

template <class T>
struct Generator {
  GeneratorConfig config;
  std::vector<Encoder<T>> encoders;
  MafBlock<T> maf;
  Decoder<T> decoder;

  Generator() = default;
  Generator(const GeneratorConfig& cfg, Initializer& init) : config(cfg) {
    cfg.validate();
    for (int n = 0; n < cfg.n_modalities; ++n) encoders.emplace_back(cfg, init);
    maf = MafBlock<T>(cfg.bottleneck_channels(), cfg.n_modalities, init);
    decoder = Decoder<T>(cfg, init);
  }

  // x: (N,3,H,W), channels ordered T1, T2, FLAIR.
  SynthesisResult<T> operator()(const Var<T>& x) const {
    require_rank(x.shape(), 4, "synthesize");
    require(x.dim(1) == config.n_modalities, ErrorCode::ShapeMismatch,
            "synthesize expects " + std::to_string(config.n_modalities) + " channels, got " + shape_str(x.shape()));
    SynthesisResult<T> out;
    std::vector<Var<T>> bottlenecks;
    for (int n = 0; n < config.n_modalities; ++n) {
      out.pyramids.push_back(encoders[n](slice_channels(x, n, n + 1), config.nce_layers));
      bottlenecks.push_back(out.pyramids.back().bottleneck);
    }
    auto fusion = maf(bottlenecks);
    out.attention = fusion.attention;
    out.image = decoder(fusion.fused);
    return out;
  }

  // Encoder n applied to an arbitrary single-channel image, stopping at the
  // deepest NCE layer.
  FeaturePyramid<T> encode_for_nce(int n, const Var<T>& img) const {
    return encoders.at(static_cast<std::size_t>(n))(img, config.nce_layers, config.nce_layers.back());
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t n = 0; n < encoders.size(); ++n) encoders[n].collect(prefix + "/encoder" + std::to_string(n + 1), out);
    maf.collect(prefix + "/maf", out);
    decoder.collect(prefix + "/decoder", out);
  }
};

// Projection head H: one two-layer MLP per (encoder, NCE layer), followed by
// L2 normalization.
template <class T>
struct ProjectionHead {
  std::vector<std::vector<std::pair<Linear<T>, Linear<T>>>> mlps;  // [encoder][layer]
  std::vector<int> layers;

  ProjectionHead() = default;
  ProjectionHead(const GeneratorConfig& cfg, Initializer& init) : layers(cfg.nce_layers) {
    for (int n = 0; n < cfg.n_modalities; ++n) {
      mlps.emplace_back();
      for (int l : cfg.nce_layers)
        mlps.back().emplace_back(Linear<T>(cfg.channels_at(l), cfg.proj_dim, init),
                                 Linear<T>(cfg.proj_dim, cfg.proj_dim, init));
    }
  }

  // features: (N,C,H,W) tap of encoder n at layers[layer_slot]. Returns
  // (N*P, proj_dim) unit-norm rows, sample-major.
  Var<T> operator()(int n, std::size_t layer_slot, const Var<T>& features, const std::vector<int>& positions) const {
    const auto& mlp = mlps.at(static_cast<std::size_t>(n)).at(layer_slot);
    require(features.dim(1) == mlp.first.weight.dim(1), ErrorCode::ShapeMismatch,
            "project: feature channels " + std::to_string(features.dim(1)) + " vs head input " +
                std::to_string(mlp.first.weight.dim(1)));
    auto h = relu(mlp.first(gather_positions(features, positions)));
    return l2_normalize_rows(mlp.second(h));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t n = 0; n < mlps.size(); ++n)
      for (std::size_t i = 0; i < mlps[n].size(); ++i) {
        const std::string p = prefix + "/encoder" + std::to_string(n + 1) + "/layer" + std::to_string(layers[i]);
        mlps[n][i].first.collect(p + "/fc1", out);
        mlps[n][i].second.collect(p + "/fc2", out);
      }
  }
};

// Patch discriminator (70x70 receptive field with n_layers = 3).
template <class T>
struct Discriminator {
  std::vector<Conv<T>> convs;
  T leak = T(0.2);

  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& cfg, Initializer& init) {
    int ch = cfg.base_width;
    convs.emplace_back(1, ch, 4, 2, 1, PadMode::Zero, init);
    for (int i = 1; i < cfg.n_layers; ++i) {
      const int next = cfg.base_width * std::min(1 << i, 8);
      convs.emplace_back(ch, next, 4, 2, 1, PadMode::Zero, init);
      ch = next;
    }
    const int next = cfg.base_width * std::min(1 << cfg.n_layers, 8);
    convs.emplace_back(ch, next, 4, 1, 1, PadMode::Zero, init);
    convs.emplace_back(next, 1, 4, 1, 1, PadMode::Zero, init);
  }

  // img: (N,1,H,W) -> (N,1,H',W') logits.
  Var<T> operator()(const Var<T>& img) const {
    require_rank(img.shape(), 4, "discriminate");
    require(img.dim(1) == 1, ErrorCode::ShapeMismatch, "discriminator takes single-channel images");
    Var<T> h = leaky_relu(convs[0](img), leak);
    for (std::size_t i = 1; i + 1 < convs.size(); ++i) h = leaky_relu(instance_norm(convs[i](h)), leak);
    return convs.back()(h);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(prefix + "/conv" + std::to_string(i), out);
  }
};

template <class T>
struct ConvNormAct {
  Conv<T> conv;
  Var<T> gamma, beta;

  ConvNormAct() = default;
  ConvNormAct(int cin, int cout, Initializer& init)
      : conv(cin, cout, 3, 1, 1, PadMode::Zero, init),
        gamma(init.constant<T>({cout}, T(1))),
        beta(init.constant<T>({cout}, T(0))) {}
  Var<T> operator()(const Var<T>& x) const { return leaky_relu(instance_norm(conv(x), gamma, beta), T(0.01)); }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    conv.collect(prefix + "/conv", out);
    out.emplace_back(prefix + "/norm/gamma", gamma);
    out.emplace_back(prefix + "/norm/beta", beta);
  }
};

template <class T>
struct UNet {
  UNetConfig config;
  std::vector<std::pair<ConvNormAct<T>, ConvNormAct<T>>> down;  // depth + 1 levels, last is the bottom
  std::vector<std::pair<ConvNormAct<T>, ConvNormAct<T>>> up;    // depth levels, deepest first
  Conv<T> classifier;

  UNet() = default;
  UNet(const UNetConfig& cfg, Initializer& init) : config(cfg) {
    cfg.validate();
    int cin = cfg.in_channels;
    for (int d = 0; d <= cfg.depth; ++d) {
      const int ch = cfg.base_width << d;
      down.emplace_back(ConvNormAct<T>(cin, ch, init), ConvNormAct<T>(ch, ch, init));
      cin = ch;
    }
    for (int d = cfg.depth - 1; d >= 0; --d) {
      const int ch = cfg.base_width << d;
      up.emplace_back(ConvNormAct<T>(cin + ch, ch, init), ConvNormAct<T>(ch, ch, init));
      cin = ch;
    }
    classifier = Conv<T>(cin, cfg.out_classes, 1, 1, 0, PadMode::Zero, init);
  }

  // x4: (N,4,H,W) -> (N,4,H,W) class logits.
  Var<T> operator()(const Var<T>& x) const {
    require_rank(x.shape(), 4, "unet_forward");
    require(x.dim(1) == config.in_channels, ErrorCode::ShapeMismatch,
            "unet_forward expects 4 channels, got " + shape_str(x.shape()));
    const int div = 1 << config.depth;
    require(x.dim(2) % div == 0 && x.dim(3) % div == 0, ErrorCode::ShapeMismatch,
            "unet_forward: extent must be divisible by " + std::to_string(div));
    std::vector<Var<T>> skips;
    Var<T> h = x;
    for (int d = 0; d <= config.depth; ++d) {
      h = down[d].second(down[d].first(h));
      if (d < config.depth) {
        skips.push_back(h);
        h = max_pool2x2(h);
      }
    }
    for (std::size_t i = 0; i < up.size(); ++i) {
      h = concat_channels<T>({upsample_nearest2x(h), skips[skips.size() - 1 - i]});
      h = up[i].second(up[i].first(h));
    }
    return classifier(h);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t d = 0; d < down.size(); ++d) {
      down[d].first.collect(prefix + "/down" + std::to_string(d) + "/a", out);
      down[d].second.collect(prefix + "/down" + std::to_string(d) + "/b", out);
    }
    for (std::size_t i = 0; i < up.size(); ++i) {
      up[i].first.collect(prefix + "/up" + std::to_string(i) + "/a", out);
      up[i].second.collect(prefix + "/up" + std::to_string(i) + "/b", out);
    }
    classifier.collect(prefix + "/classifier", out);
  }
};

// All learnable networks. Parameter keys are `component/layer/param`.
template <class T>
struct MafNet {
  ModelConfig config;
  Generator<T> generator;
  ProjectionHead<T> head;
  Discriminator<T> discriminator;
  UNet<T> segmentor;

  MafNet() = default;
  MafNet(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    cfg.validate();
    Initializer init(seed);
    generator = Generator<T>(cfg.generator, init);
    head = ProjectionHead<T>(cfg.generator, init);
    discriminator = Discriminator<T>(cfg.discriminator, init);
    segmentor = UNet<T>(cfg.unet, init);
  }

  ParamList<T> generator_params() const {
    ParamList<T> p;
    generator.collect("generator", p);
    return p;
  }
  ParamList<T> head_params() const {
    ParamList<T> p;
    head.collect("projection", p);
    return p;
  }
  ParamList<T> discriminator_params() const {
    ParamList<T> p;
    discriminator.collect("discriminator", p);
    return p;
  }
  ParamList<T> segmentor_params() const {
    ParamList<T> p;
    segmentor.collect("segmentor", p);
    return p;
  }
  ParamList<T> all_params() const {
    ParamList<T> p = generator_params();
    auto h = head_params(), d = discriminator_params(), s = segmentor_params();
    p.insert(p.end(), h.begin(), h.end());
    p.insert(p.end(), d.begin(), d.end());
    p.insert(p.end(), s.begin(), s.end());
    return p;
  }
};

template <class T>
void set_requires_grad(const ParamList<T>& params, bool on) {
  for (auto [name, v] : params) v.set_requires_grad(on);
}

}  // namespace mafnet
