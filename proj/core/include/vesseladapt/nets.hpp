#pragma once

#include <torch/torch.h>

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vesseladapt/common.hpp"

namespace vesseladapt {

// Point in the extended latent space W+: one style vector per synthesis
// layer, shape [B, L, Dw].
struct LatentCode {
  torch::Tensor styles;

  int64_t batch() const { return styles.size(0); }
  int64_t num_styles() const { return styles.size(1); }
  int64_t dim() const { return styles.size(2); }
};

// Per-resolution feature maps (synthesis features or encoder residuals),
// keyed by spatial resolution.
using FeatureStack = std::map<int64_t, torch::Tensor>;

struct NetConfig {
  int64_t image_size = 64;
  int64_t image_channels = 3;  // 2.5D slice channels
  int64_t z_dim = 64;
  int64_t w_dim = 64;
  int64_t base_channels = 64;
  int64_t max_channels = 64;

  std::vector<int64_t> resolutions() const;        // {4, 8, ..., image_size}
  int64_t channels_for(int64_t resolution) const;  // synthesis/encoder widths
  int64_t num_styles() const;                      // 2 per resolution
  void validate() const;
};

struct AblationFlags {
  bool residuals = true;
  bool dsbn = true;
  bool bds = true;
  bool inversion = true;
};

// ---------------------------------------------------------------------------
// building blocks

// Linear layer with runtime weight scaling (equalized learning rate).
class EqualLinearImpl : public torch::nn::Module {
 public:
  EqualLinearImpl(int64_t in, int64_t out, double lr_mul = 1.0,
                  double bias_init = 0.0);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;

 private:
  double scale_, lr_mul_;
};
TORCH_MODULE(EqualLinear);

// Style-modulated convolution with optional weight demodulation.
class ModulatedConv2dImpl : public torch::nn::Module {
 public:
  ModulatedConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t w_dim,
                      bool demodulate);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w);

  torch::Tensor weight, bias;
  EqualLinear affine{nullptr};

 private:
  bool demodulate_;
  double scale_;
};
TORCH_MODULE(ModulatedConv2d);

// ---------------------------------------------------------------------------
// networks

class MappingNetworkImpl : public torch::nn::Module {
 public:
  explicit MappingNetworkImpl(const NetConfig& cfg);
  // z: [B, Dz] -> LatentCode with all L styles equal (W broadcast to W+)
  LatentCode forward(const torch::Tensor& z);

 private:
  std::vector<EqualLinear> layers_;
  int64_t num_styles_;
};
TORCH_MODULE(MappingNetwork);

struct GeneratorOutput {
  torch::Tensor image;    // [B, C, H, W]
  FeatureStack features;  // per-resolution synthesis features
};

class SynthesisNetworkImpl : public torch::nn::Module {
 public:
  explicit SynthesisNetworkImpl(const NetConfig& cfg);
  // styles: [B, L, Dw]; residuals (optional) are added to the block output
  // at matching resolutions before the RGB skip.
  GeneratorOutput forward(const torch::Tensor& styles,
                          const FeatureStack* residuals = nullptr);

  const NetConfig& config() const { return cfg_; }

 private:
  NetConfig cfg_;
  torch::Tensor const_input_;
  std::vector<ModulatedConv2d> convs_;    // 2 per resolution
  std::vector<torch::Tensor> conv_bias_;
  std::vector<ModulatedConv2d> to_rgb_;   // 1 per resolution
};
TORCH_MODULE(SynthesisNetwork);

// DatasetGAN-style label branch: per-pixel fully connected layers (1x1
// convolutions) on upsampled, concatenated multi-resolution features.
class LabelBranchImpl : public torch::nn::Module {
 public:
  explicit LabelBranchImpl(const NetConfig& cfg);
  // -> [B, 3, H, W] segmentation logits
  torch::Tensor forward(const FeatureStack& features);

 private:
  NetConfig cfg_;
  torch::nn::Conv2d fc1{nullptr}, fc2{nullptr}, fc3{nullptr};
};
TORCH_MODULE(LabelBranch);

// Domain-specific batch normalization: separate statistics per domain,
// selected by the flag d. Falls back to one shared BN when disabled.
class DsbnImpl : public torch::nn::Module {
 public:
  DsbnImpl(int64_t channels, bool dsbn);
  torch::Tensor forward(const torch::Tensor& x, Domain d);

 private:
  bool dsbn_;
  torch::nn::BatchNorm2d norm_source{nullptr}, norm_target{nullptr};
};
TORCH_MODULE(Dsbn);

struct EncodeResult {
  LatentCode code;
  FeatureStack residuals;  // empty when residual skips are disabled
};

class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl(const NetConfig& cfg, bool residuals, bool dsbn);
  EncodeResult forward(const torch::Tensor& x, Domain d);

  bool has_residuals() const { return residuals_; }

 private:
  struct Stage {
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    Dsbn norm1{nullptr}, norm2{nullptr};
  };
  struct ResidualHead {
    torch::nn::Conv2d project{nullptr};
    EqualLinear gate{nullptr};  // dynamic per-channel gate from pooled feats
    torch::Tensor scale;
  };

  NetConfig cfg_;
  bool residuals_, dsbn_;
  torch::nn::Embedding domain_embed_{nullptr};
  torch::nn::Conv2d stem_{nullptr};
  std::vector<Stage> stages_;
  std::map<int64_t, ResidualHead> heads_;
  torch::nn::Conv2d latent_conv_{nullptr};
  EqualLinear latent_fc1_{nullptr}, latent_fc2_{nullptr};
};
TORCH_MODULE(Encoder);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const NetConfig& cfg);
  // -> [B] unnormalized realism logits
  torch::Tensor forward(const torch::Tensor& x);

 private:
  struct Block {
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  };
  torch::nn::Conv2d stem_{nullptr}, final_conv_{nullptr};
  std::vector<Block> blocks_;
  EqualLinear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Discriminator);

// ---------------------------------------------------------------------------
// bundle

// The four learnable components plus configuration. G = mapping + synthesis
// (+ its label branch G_lsb, optimized separately in Phase 2).
struct ModelBundle {
  NetConfig config;
  AblationFlags flags;
  MappingNetwork mapping{nullptr};
  SynthesisNetwork synthesis{nullptr};
  LabelBranch lsb{nullptr};
  Encoder encoder{nullptr};
  Discriminator discriminator{nullptr};

  LatentCode map_latent(const torch::Tensor& z);
  GeneratorOutput generate(const LatentCode& w,
                           const FeatureStack* residuals = nullptr);
  torch::Tensor label_branch(const FeatureStack& features);
  EncodeResult encode(const torch::Tensor& x, Domain d);
  torch::Tensor discriminate(const torch::Tensor& x);

  struct Translation {
    torch::Tensor image;
    torch::Tensor logits;
    LatentCode code;
  };
  // generate(encode(x, d_target)): reconstruction when d_target equals the
  // input's own domain, translation otherwise.
  Translation translate(const torch::Tensor& x, Domain d_target);

  // G parameters outside the label branch (the Phase-2 frozen set).
  std::vector<torch::Tensor> generator_core_params() const;
  std::vector<torch::Tensor> lsb_params() const;
  std::vector<torch::Tensor> encoder_params() const;
  std::vector<torch::Tensor> discriminator_params() const;
  uint64_t generator_core_checksum() const;

  void set_generator_core_frozen(bool frozen);
  void train(bool on = true);
  void eval() { train(false); }
};

ModelBundle build_models(const NetConfig& cfg, const AblationFlags& flags);

// Checkpoint payload: parameter tensors keyed by component name (G, G_lsb,
// E, D), ablation flags, net config, RNG state.
void save_bundle(const ModelBundle& bundle, torch::serialize::OutputArchive& ar);
ModelBundle load_bundle(torch::serialize::InputArchive& ar);

std::string net_config_to_json(const NetConfig& cfg, const AblationFlags& flags);
std::pair<NetConfig, AblationFlags> net_config_from_json(const std::string& text);

}  // namespace vesseladapt
