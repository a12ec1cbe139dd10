#include "vesseladapt/nets.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "vesseladapt/errors.hpp"
#include "vesseladapt/volume_io.hpp"

namespace vesseladapt {

using json = nlohmann::json;
namespace F = torch::nn::functional;

namespace {

constexpr double kLeakySlope = 0.2;
const double kActGain = std::sqrt(2.0);

torch::Tensor act(const torch::Tensor& x) {
  return torch::leaky_relu(x, kLeakySlope) * kActGain;
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::Tensor upsample_to(const torch::Tensor& x, int64_t size) {
  if (x.size(2) == size && x.size(3) == size) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{size, size})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::Tensor pixel_norm(const torch::Tensor& x) {
  return x * torch::rsqrt(x.pow(2).mean(1, true) + 1e-8);
}

}  // namespace

std::vector<int64_t> NetConfig::resolutions() const {
  std::vector<int64_t> out;
  for (int64_t r = 4; r <= image_size; r *= 2) out.push_back(r);
  return out;
}

int64_t NetConfig::channels_for(int64_t resolution) const {
  return std::clamp<int64_t>(base_channels * 16 / resolution, 8, max_channels);
}

int64_t NetConfig::num_styles() const {
  return static_cast<int64_t>(resolutions().size()) * 2;
}

void NetConfig::validate() const {
  if (image_size < 8 || (image_size & (image_size - 1)) != 0)
    throw Error("image_size must be a power of two >= 8");
  if (image_channels < 1 || image_channels % 2 == 0)
    throw Error("image_channels must be odd (2.5D center + neighbors)");
  if (z_dim < 1 || w_dim < 1 || base_channels < 8)
    throw Error("latent/channel dimensions too small");
}

// ---------------------------------------------------------------------------

EqualLinearImpl::EqualLinearImpl(int64_t in, int64_t out, double lr_mul,
                                 double bias_init)
    : scale_(lr_mul / std::sqrt(static_cast<double>(in))), lr_mul_(lr_mul) {
  weight = register_parameter("weight", torch::randn({out, in}) / lr_mul);
  bias = register_parameter("bias", torch::full({out}, bias_init / lr_mul));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
  return F::linear(x, weight * scale_, bias * lr_mul_);
}

ModulatedConv2dImpl::ModulatedConv2dImpl(int64_t in, int64_t out, int64_t kernel,
                                         int64_t w_dim, bool demodulate)
    : demodulate_(demodulate),
      scale_(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))) {
  weight = register_parameter("weight", torch::randn({out, in, kernel, kernel}));
  bias = register_parameter("bias", torch::zeros({out}));
  affine = register_module("affine", EqualLinear(w_dim, in, 1.0, 1.0));
}

torch::Tensor ModulatedConv2dImpl::forward(const torch::Tensor& x,
                                           const torch::Tensor& w) {
  const int64_t B = x.size(0), in = weight.size(1), out = weight.size(0);
  const int64_t k = weight.size(2);
  auto style = affine->forward(w);  // [B, in]
  auto ww = weight.unsqueeze(0) * scale_ * style.reshape({B, 1, in, 1, 1});
  if (demodulate_) {
    auto demod = torch::rsqrt(ww.pow(2).sum({2, 3, 4}) + 1e-8);
    ww = ww * demod.reshape({B, out, 1, 1, 1});
  }
  auto xg = x.reshape({1, B * in, x.size(2), x.size(3)});
  auto wg = ww.reshape({B * out, in, k, k});
  auto y = torch::conv2d(xg, wg, {}, 1, k / 2, 1, B);
  return y.reshape({B, out, x.size(2), x.size(3)}) + bias.reshape({1, out, 1, 1});
}

// ---------------------------------------------------------------------------

MappingNetworkImpl::MappingNetworkImpl(const NetConfig& cfg)
    : num_styles_(cfg.num_styles()) {
  cfg.validate();
  std::vector<int64_t> dims = {cfg.z_dim, cfg.w_dim, cfg.w_dim, cfg.w_dim,
                               cfg.w_dim};
  for (size_t i = 0; i + 1 < dims.size(); ++i)
    layers_.push_back(register_module(
        "fc" + std::to_string(i), EqualLinear(dims[i], dims[i + 1], 0.01)));
}

LatentCode MappingNetworkImpl::forward(const torch::Tensor& z) {
  auto h = pixel_norm(z);
  for (auto& layer : layers_) h = act(layer->forward(h));
  return {h.unsqueeze(1).repeat({1, num_styles_, 1})};
}

SynthesisNetworkImpl::SynthesisNetworkImpl(const NetConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  auto resolutions = cfg.resolutions();
  const_input_ = register_parameter(
      "const_input", torch::randn({cfg.channels_for(4), 4, 4}));
  int64_t prev = cfg.channels_for(4);
  for (size_t i = 0; i < resolutions.size(); ++i) {
    int64_t r = resolutions[i];
    int64_t ch = cfg.channels_for(r);
    convs_.push_back(register_module(
        "conv" + std::to_string(2 * i),
        ModulatedConv2d(prev, ch, 3, cfg.w_dim, /*demodulate=*/true)));
    convs_.push_back(register_module(
        "conv" + std::to_string(2 * i + 1),
        ModulatedConv2d(ch, ch, 3, cfg.w_dim, /*demodulate=*/true)));
    to_rgb_.push_back(register_module(
        "to_rgb" + std::to_string(i),
        ModulatedConv2d(ch, cfg.image_channels, 1, cfg.w_dim,
                        /*demodulate=*/false)));
    prev = ch;
  }
}

GeneratorOutput SynthesisNetworkImpl::forward(const torch::Tensor& styles,
                                              const FeatureStack* residuals) {
  if (styles.dim() != 3 || styles.size(1) != cfg_.num_styles() ||
      styles.size(2) != cfg_.w_dim)
    throw ShapeMismatch("latent code must have shape [B, L, Dw]");
  const int64_t B = styles.size(0);
  auto resolutions = cfg_.resolutions();

  GeneratorOutput out;
  auto x = const_input_.unsqueeze(0).expand(
      {B, const_input_.size(0), const_input_.size(1), const_input_.size(2)});
  torch::Tensor rgb;
  for (size_t i = 0; i < resolutions.size(); ++i) {
    int64_t r = resolutions[i];
    if (i > 0) x = upsample2x(x);
    x = act(convs_[2 * i]->forward(x, styles.select(1, 2 * i)));
    x = act(convs_[2 * i + 1]->forward(x, styles.select(1, 2 * i + 1)));
    if (residuals) {
      auto it = residuals->find(r);
      if (it != residuals->end()) {
        if (it->second.sizes() != x.sizes())
          throw ResolutionMismatch("residual shape mismatch at resolution " +
                                   std::to_string(r));
        x = x + it->second;
      }
    }
    out.features[r] = x;
    auto y = to_rgb_[i]->forward(x, styles.select(1, 2 * i + 1));
    rgb = rgb.defined() ? upsample2x(rgb) + y : y;
  }
  out.image = rgb;
  return out;
}

LabelBranchImpl::LabelBranchImpl(const NetConfig& cfg) : cfg_(cfg) {
  int64_t in_ch = 0;
  for (int64_t r : cfg.resolutions()) in_ch += cfg.channels_for(r);
  fc1 = register_module("fc1", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                                   in_ch, 64, 1)));
  fc2 = register_module("fc2", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                                   64, 32, 1)));
  fc3 = register_module(
      "fc3", torch::nn::Conv2d(torch::nn::Conv2dOptions(32, kNumClasses, 1)));
}

torch::Tensor LabelBranchImpl::forward(const FeatureStack& features) {
  std::vector<torch::Tensor> stacked;
  for (int64_t r : cfg_.resolutions()) {
    auto it = features.find(r);
    if (it == features.end())
      throw ResolutionMismatch("label branch expects features at resolution " +
                               std::to_string(r));
    if (it->second.size(1) != cfg_.channels_for(r))
      throw ResolutionMismatch("unexpected channel count at resolution " +
                               std::to_string(r));
    stacked.push_back(upsample_to(it->second, cfg_.image_size));
  }
  auto h = torch::cat(stacked, 1);
  h = torch::leaky_relu(fc1(h), kLeakySlope);
  h = torch::leaky_relu(fc2(h), kLeakySlope);
  return fc3(h);
}

// ---------------------------------------------------------------------------

DsbnImpl::DsbnImpl(int64_t channels, bool dsbn) : dsbn_(dsbn) {
  norm_source = register_module(dsbn ? "norm_source" : "norm_shared",
                                torch::nn::BatchNorm2d(channels));
  if (dsbn)
    norm_target = register_module("norm_target", torch::nn::BatchNorm2d(channels));
}

torch::Tensor DsbnImpl::forward(const torch::Tensor& x, Domain d) {
  if (!dsbn_ || d == Domain::kSource) return norm_source(x);
  return norm_target(x);
}

EncoderImpl::EncoderImpl(const NetConfig& cfg, bool residuals, bool dsbn)
    : cfg_(cfg), residuals_(residuals), dsbn_(dsbn) {
  cfg.validate();
  constexpr int64_t kEmbedDim = 8;
  domain_embed_ = register_module("domain_embed", torch::nn::Embedding(2, kEmbedDim));
  auto resolutions = cfg.resolutions();
  stem_ = register_module(
      "stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                  cfg.image_channels + kEmbedDim,
                  cfg.channels_for(cfg.image_size), 3).padding(1)));
  for (int64_t r = cfg.image_size; r > 4; r /= 2) {
    Stage s;
    int64_t in = cfg.channels_for(r), out = cfg.channels_for(r / 2);
    std::string tag = std::to_string(r);
    s.conv1 = register_module("stage" + tag + "_conv1",
                              torch::nn::Conv2d(torch::nn::Conv2dOptions(in, in, 3)
                                                    .padding(1)));
    s.norm1 = register_module("stage" + tag + "_norm1", Dsbn(in, dsbn));
    s.conv2 = register_module(
        "stage" + tag + "_conv2",
        torch::nn::Conv2d(
            torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1)));
    s.norm2 = register_module("stage" + tag + "_norm2", Dsbn(out, dsbn));
    s.skip = register_module(
        "stage" + tag + "_skip",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).bias(false)));
    stages_.push_back(std::move(s));
  }
  if (residuals) {
    for (int64_t r : resolutions) {
      if (r == 4) continue;
      ResidualHead head;
      int64_t ch = cfg.channels_for(r);
      std::string tag = std::to_string(r);
      head.project = register_module(
          "res" + tag + "_proj",
          torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 1)));
      head.gate = register_module("res" + tag + "_gate",
                                  EqualLinear(ch, ch, 1.0, 0.0));
      head.scale =
          register_parameter("res" + tag + "_scale", torch::full({}, 0.5));
      heads_.emplace(r, std::move(head));
    }
  }
  int64_t ch4 = cfg.channels_for(4);
  latent_conv_ = register_module(
      "latent_conv",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(ch4, ch4, 3).padding(1)));
  latent_fc1_ = register_module("latent_fc1", EqualLinear(ch4 * 16, 256));
  latent_fc2_ = register_module(
      "latent_fc2", EqualLinear(256, cfg.num_styles() * cfg.w_dim));
}

EncodeResult EncoderImpl::forward(const torch::Tensor& x, Domain d) {
  const int64_t B = x.size(0);
  if (x.size(2) != cfg_.image_size || x.size(3) != cfg_.image_size)
    throw ResolutionMismatch("encoder input must be " +
                             std::to_string(cfg_.image_size) + "^2");
  auto flag = torch::full({B}, static_cast<int64_t>(d), torch::kLong);
  auto emb = domain_embed_(flag).unsqueeze(-1).unsqueeze(-1).expand(
      {B, domain_embed_->weight.size(1), x.size(2), x.size(3)});
  auto h = torch::leaky_relu(stem_(torch::cat({x, emb}, 1)), kLeakySlope);

  FeatureStack feats;
  int64_t r = cfg_.image_size;
  feats[r] = h;
  for (auto& stage : stages_) {
    auto main = torch::leaky_relu(stage.norm1->forward(stage.conv1(h), d),
                                  kLeakySlope);
    main = torch::leaky_relu(stage.norm2->forward(stage.conv2(main), d),
                             kLeakySlope);
    auto skip = stage.skip(torch::avg_pool2d(h, 2));
    h = (main + skip) / std::sqrt(2.0);
    r /= 2;
    feats[r] = h;
  }

  auto t = torch::leaky_relu(latent_conv_(h), kLeakySlope);
  t = torch::leaky_relu(latent_fc1_->forward(t.reshape({B, -1})), kLeakySlope);
  auto styles = latent_fc2_->forward(t).reshape(
      {B, cfg_.num_styles(), cfg_.w_dim});

  EncodeResult out;
  out.code = LatentCode{styles};
  if (residuals_) {
    for (auto& [res, head] : heads_) {
      const auto& f = feats.at(res);
      auto pooled = torch::adaptive_avg_pool2d(f, {1, 1}).reshape({B, -1});
      auto gate = torch::sigmoid(head.gate->forward(pooled));
      out.residuals[res] =
          head.project(f) * gate.reshape({B, -1, 1, 1}) * head.scale;
    }
  }
  return out;
}

DiscriminatorImpl::DiscriminatorImpl(const NetConfig& cfg) {
  cfg.validate();
  stem_ = register_module(
      "stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                  cfg.image_channels, cfg.channels_for(cfg.image_size), 3)
                  .padding(1)));
  for (int64_t r = cfg.image_size; r > 4; r /= 2) {
    Block b;
    int64_t in = cfg.channels_for(r), out = cfg.channels_for(r / 2);
    std::string tag = std::to_string(r);
    b.conv1 = register_module("block" + tag + "_conv1",
                              torch::nn::Conv2d(torch::nn::Conv2dOptions(in, in, 3)
                                                    .padding(1)));
    b.conv2 = register_module(
        "block" + tag + "_conv2",
        torch::nn::Conv2d(
            torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1)));
    b.skip = register_module(
        "block" + tag + "_skip",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).bias(false)));
    blocks_.push_back(std::move(b));
  }
  int64_t ch4 = cfg.channels_for(4);
  final_conv_ = register_module(
      "final_conv",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(ch4, ch4, 3).padding(1)));
  fc1_ = register_module("fc1", EqualLinear(ch4 * 16, ch4));
  fc2_ = register_module("fc2", EqualLinear(ch4, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  auto h = act(stem_(x));
  for (auto& b : blocks_) {
    auto main = act(b.conv1(h));
    main = act(b.conv2(main));
    auto skip = b.skip(torch::avg_pool2d(h, 2));
    h = (main + skip) / std::sqrt(2.0);
  }
  h = act(final_conv_(h));
  h = act(fc1_->forward(h.reshape({h.size(0), -1})));
  return fc2_->forward(h).squeeze(1);
}

// ---------------------------------------------------------------------------

LatentCode ModelBundle::map_latent(const torch::Tensor& z) {
  return mapping->forward(z);
}

GeneratorOutput ModelBundle::generate(const LatentCode& w,
                                      const FeatureStack* residuals) {
  return synthesis->forward(w.styles, residuals);
}

torch::Tensor ModelBundle::label_branch(const FeatureStack& features) {
  return lsb->forward(features);
}

EncodeResult ModelBundle::encode(const torch::Tensor& x, Domain d) {
  return encoder->forward(x, d);
}

torch::Tensor ModelBundle::discriminate(const torch::Tensor& x) {
  return discriminator->forward(x);
}

ModelBundle::Translation ModelBundle::translate(const torch::Tensor& x,
                                                Domain d_target) {
  auto enc = encode(x, d_target);
  auto gen = generate(enc.code, flags.residuals ? &enc.residuals : nullptr);
  auto logits = label_branch(gen.features);
  return {gen.image, logits, enc.code};
}

std::vector<torch::Tensor> ModelBundle::generator_core_params() const {
  auto params = mapping->parameters();
  auto synth = synthesis->parameters();
  params.insert(params.end(), synth.begin(), synth.end());
  return params;
}

std::vector<torch::Tensor> ModelBundle::lsb_params() const {
  return lsb->parameters();
}

std::vector<torch::Tensor> ModelBundle::encoder_params() const {
  return encoder->parameters();
}

std::vector<torch::Tensor> ModelBundle::discriminator_params() const {
  return discriminator->parameters();
}

uint64_t ModelBundle::generator_core_checksum() const {
  return parameters_checksum(generator_core_params());
}

void ModelBundle::set_generator_core_frozen(bool frozen) {
  for (auto& p : generator_core_params()) p.set_requires_grad(!frozen);
}

void ModelBundle::train(bool on) {
  mapping->train(on);
  synthesis->train(on);
  lsb->train(on);
  encoder->train(on);
  discriminator->train(on);
}

ModelBundle build_models(const NetConfig& cfg, const AblationFlags& flags) {
  cfg.validate();
  ModelBundle b;
  b.config = cfg;
  b.flags = flags;
  b.mapping = MappingNetwork(cfg);
  b.synthesis = SynthesisNetwork(cfg);
  b.lsb = LabelBranch(cfg);
  b.encoder = Encoder(cfg, flags.residuals, flags.dsbn);
  b.discriminator = Discriminator(cfg);
  return b;
}

std::string net_config_to_json(const NetConfig& cfg, const AblationFlags& flags) {
  json j;
  j["image_size"] = cfg.image_size;
  j["image_channels"] = cfg.image_channels;
  j["z_dim"] = cfg.z_dim;
  j["w_dim"] = cfg.w_dim;
  j["base_channels"] = cfg.base_channels;
  j["max_channels"] = cfg.max_channels;
  j["flags"] = {{"residuals", flags.residuals},
                {"dsbn", flags.dsbn},
                {"bds", flags.bds},
                {"inversion", flags.inversion}};
  return j.dump();
}

std::pair<NetConfig, AblationFlags> net_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("bad net config JSON: ") + e.what());
  }
  NetConfig cfg;
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.image_channels = j.value("image_channels", cfg.image_channels);
  cfg.z_dim = j.value("z_dim", cfg.z_dim);
  cfg.w_dim = j.value("w_dim", cfg.w_dim);
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.max_channels = j.value("max_channels", cfg.max_channels);
  AblationFlags flags;
  if (j.contains("flags")) {
    const auto& f = j["flags"];
    flags.residuals = f.value("residuals", true);
    flags.dsbn = f.value("dsbn", true);
    flags.bds = f.value("bds", true);
    flags.inversion = f.value("inversion", true);
  }
  return {cfg, flags};
}

void save_bundle(const ModelBundle& bundle, torch::serialize::OutputArchive& ar) {
  ar.write("config", net_config_to_json(bundle.config, bundle.flags));
  auto write_module = [&](const char* key, const torch::nn::Module& m) {
    torch::serialize::OutputArchive sub;
    m.save(sub);
    ar.write(key, sub);
  };
  write_module("G_mapping", *bundle.mapping);
  write_module("G", *bundle.synthesis);
  write_module("G_lsb", *bundle.lsb);
  write_module("E", *bundle.encoder);
  write_module("D", *bundle.discriminator);
  ar.write("rng_state", at::detail::getDefaultCPUGenerator().get_state());
}

ModelBundle load_bundle(torch::serialize::InputArchive& ar) {
  c10::IValue config_text;
  if (!ar.try_read("config", config_text))
    throw CorruptCheckpoint("checkpoint has no net config");
  auto [cfg, flags] = net_config_from_json(config_text.toStringRef());
  auto bundle = build_models(cfg, flags);
  auto read_module = [&](const char* key, torch::nn::Module& m) {
    torch::serialize::InputArchive sub;
    try {
      ar.read(key, sub);
      m.load(sub);
    } catch (const c10::Error& e) {
      throw CorruptCheckpoint(std::string("cannot read component ") + key +
                              ": " + e.what_without_backtrace());
    }
  };
  read_module("G_mapping", *bundle.mapping);
  read_module("G", *bundle.synthesis);
  read_module("G_lsb", *bundle.lsb);
  read_module("E", *bundle.encoder);
  read_module("D", *bundle.discriminator);
  return bundle;
}

}  // namespace vesseladapt
