#pragma once

#include <torch/torch.h>

#include <functional>
#include <map>
#include <string>

namespace vesseladapt {

inline constexpr double kDiceEps = 1e-5;

enum class AdvSide { kGenerator, kDiscriminator };

// Non-saturating GAN loss. Generator side: mean softplus(-fake).
// Discriminator side: mean softplus(-real) + mean softplus(fake).
torch::Tensor adv_nonsat(const torch::Tensor& scores_fake,
                         const torch::Tensor& scores_real, AdvSide side);

// (gamma/2) * E_batch ||d score/d x||^2 at the real samples, built with
// create_graph so it can be minimized.
torch::Tensor r1_penalty(
    const std::function<torch::Tensor(const torch::Tensor&)>& score_fn,
    const torch::Tensor& x_real, double gamma);

struct PathLengthState {
  double running_avg = 0.0;  // a
  double decay = 0.99;
};

struct PathLengthResult {
  torch::Tensor loss;
  torch::Tensor norms;  // per-sample g_i, detached
};

// E[(g_i - a)^2] where g_i = ||grad_w <G(w), u>|| with u a unit-variance
// random image-space direction (one projection per sample). Updates the
// running average in place. Tests may pin `directions`.
PathLengthResult path_length(
    const std::function<torch::Tensor(const torch::Tensor&)>& gen_fn,
    const torch::Tensor& w_batch, PathLengthState& state,
    const torch::Tensor& directions = {});

// Soft Dice over the foreground classes (brain, vessel), in [-1, 0].
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& onehot);

// mean per-pixel negative log softmax probability of the true class
torch::Tensor ce_loss(const torch::Tensor& logits, const torch::Tensor& onehot);

// L_S = L_dice + L_ce (dice on softmax(logits))
torch::Tensor seg_loss(const torch::Tensor& logits, const torch::Tensor& onehot);

// Fixed random conv pyramid standing in for a pretrained perceptual net:
// multi-scale features, channel-unit-normalized, compared by MSE.
class PerceptualExtractorImpl : public torch::nn::Module {
 public:
  PerceptualExtractorImpl(int64_t in_channels, uint64_t seed = 0x9E1CE5);

  // mean over layers of mean squared difference of unit-normalized features
  torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b);
  std::vector<torch::Tensor> features(const torch::Tensor& x);

 private:
  std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(PerceptualExtractor);

struct MseAndPerceptual {
  torch::Tensor mse, perceptual;
  torch::Tensor total() const { return mse + perceptual; }
};

// L_R = L_MSE + perceptual distance; ShapeMismatch when shapes differ.
MseAndPerceptual recon_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                            PerceptualExtractor& extractor);

// Named scalars for one training step; everything must stay finite.
struct LossReport {
  std::map<std::string, double> values;

  void set(const std::string& name, const torch::Tensor& v);
  void set(const std::string& name, double v);
  double get(const std::string& name) const;
  bool all_finite() const;
  std::string to_json_line() const;
};

}  // namespace vesseladapt
