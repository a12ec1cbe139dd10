#include "vesseladapt/losses.hpp"

#include <cmath>
#include <sstream>

#include "vesseladapt/common.hpp"
#include "vesseladapt/errors.hpp"

namespace vesseladapt {

torch::Tensor adv_nonsat(const torch::Tensor& scores_fake,
                         const torch::Tensor& scores_real, AdvSide side) {
  if (side == AdvSide::kGenerator)
    return torch::softplus(-scores_fake).mean();
  return torch::softplus(-scores_real).mean() +
         torch::softplus(scores_fake).mean();
}

torch::Tensor r1_penalty(
    const std::function<torch::Tensor(const torch::Tensor&)>& score_fn,
    const torch::Tensor& x_real, double gamma) {
  auto x = x_real.detach().requires_grad_(true);
  auto scores = score_fn(x);
  if (!scores.requires_grad())  // score is constant in x
    return torch::zeros({}, x_real.options());
  auto grads = torch::autograd::grad({scores.sum()}, {x},
                                     /*grad_outputs=*/{},
                                     /*retain_graph=*/true,
                                     /*create_graph=*/true,
                                     /*allow_unused=*/true);
  if (!grads[0].defined()) return torch::zeros({}, x_real.options());
  auto grad = grads[0];
  if (!all_finite(grad.detach()))
    throw NonFiniteGradient("R1: non-finite discriminator input gradient");
  auto sq = grad.pow(2).reshape({grad.size(0), -1}).sum(1);
  return 0.5 * gamma * sq.mean();
}

PathLengthResult path_length(
    const std::function<torch::Tensor(const torch::Tensor&)>& gen_fn,
    const torch::Tensor& w_batch, PathLengthState& state,
    const torch::Tensor& directions) {
  auto w = w_batch.detach().requires_grad_(true);
  auto images = gen_fn(w);
  auto u = directions.defined() ? directions : torch::randn_like(images);
  auto grad = torch::autograd::grad({(images * u).sum()}, {w},
                                    /*grad_outputs=*/{},
                                    /*retain_graph=*/true,
                                    /*create_graph=*/true)[0];
  if (!all_finite(grad.detach()))
    throw NonFiniteGradient("path length: non-finite generator w-gradient");
  auto norms = grad.pow(2).reshape({grad.size(0), -1}).sum(1).sqrt();
  auto a = torch::full({}, state.running_avg, norms.options());
  auto loss = (norms - a).pow(2).mean();
  state.running_avg = state.decay * state.running_avg +
                      (1.0 - state.decay) * norms.mean().item<double>();
  return {loss, norms.detach()};
}

namespace {
void check_seg_shapes(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes())
    throw ShapeMismatch("prediction/reference shapes differ");
}
}  // namespace

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& onehot) {
  check_seg_shapes(probs, onehot);
  auto p = probs.dim() == 3 ? probs.unsqueeze(0) : probs;
  auto y = onehot.dim() == 3 ? onehot.unsqueeze(0) : onehot;
  // foreground classes only: brain (1) and vessel (2)
  p = p.narrow(1, 1, 2);
  y = y.narrow(1, 1, 2);
  auto tp = (p * y).sum({2, 3});
  auto fp = (p * (1.0 - y)).sum({2, 3});
  auto fn = ((1.0 - p) * y).sum({2, 3});
  auto dice = -(2.0 * tp + kDiceEps) / (2.0 * tp + fp + fn + kDiceEps);
  return dice.mean();
}

torch::Tensor ce_loss(const torch::Tensor& logits, const torch::Tensor& onehot) {
  check_seg_shapes(logits, onehot);
  auto l = logits.dim() == 3 ? logits.unsqueeze(0) : logits;
  auto y = onehot.dim() == 3 ? onehot.unsqueeze(0) : onehot;
  auto logp = torch::log_softmax(l, 1);
  return -(logp * y).sum(1).mean();
}

torch::Tensor seg_loss(const torch::Tensor& logits, const torch::Tensor& onehot) {
  auto l = logits.dim() == 3 ? logits.unsqueeze(0) : logits;
  return dice_loss(torch::softmax(l, 1),
                   onehot.dim() == 3 ? onehot.unsqueeze(0) : onehot) +
         ce_loss(logits, onehot);
}

PerceptualExtractorImpl::PerceptualExtractorImpl(int64_t in_channels,
                                                 uint64_t seed) {
  // fixed weights: an independent generator keeps the extractor identical
  // across runs regardless of the global RNG position
  auto gen = at::detail::createCPUGenerator(seed);
  std::vector<int64_t> widths = {in_channels, 16, 32, 64, 64};
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    auto conv = torch::nn::Conv2d(
        torch::nn::Conv2dOptions(widths[i], widths[i + 1], 3).stride(2).padding(
            1));
    {
      torch::NoGradGuard no_grad;
      double fan_in = static_cast<double>(widths[i]) * 9.0;
      conv->weight.copy_(torch::randn(conv->weight.sizes(), gen) /
                         std::sqrt(fan_in));
      conv->bias.zero_();
    }
    conv->weight.set_requires_grad(false);
    conv->bias.set_requires_grad(false);
    convs_.push_back(register_module("conv" + std::to_string(i), conv));
  }
}

std::vector<torch::Tensor> PerceptualExtractorImpl::features(
    const torch::Tensor& x) {
  // pre-activation maps: the compared features are linear in each layer's
  // weights, so unit-normalization absorbs global sign flips
  std::vector<torch::Tensor> out;
  auto h = x.to(torch::kFloat32);
  for (auto& conv : convs_) {
    auto pre = conv(h);
    out.push_back(pre);
    h = torch::leaky_relu(pre, 0.2);
  }
  return out;
}

torch::Tensor PerceptualExtractorImpl::distance(const torch::Tensor& a,
                                                const torch::Tensor& b) {
  auto fa = features(a.dim() == 3 ? a.unsqueeze(0) : a);
  auto fb = features(b.dim() == 3 ? b.unsqueeze(0) : b);
  torch::Tensor total;
  for (size_t i = 0; i < fa.size(); ++i) {
    auto na = fa[i] / (fa[i].pow(2).sum(1, true).sqrt() + 1e-8);
    auto nb = fb[i] / (fb[i].pow(2).sum(1, true).sqrt() + 1e-8);
    auto d = (na - nb).pow(2).mean();
    total = total.defined() ? total + d : d;
  }
  return total / static_cast<double>(fa.size());
}

MseAndPerceptual recon_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                            PerceptualExtractor& extractor) {
  if (x.sizes() != x_hat.sizes())
    throw ShapeMismatch("recon_loss inputs must share a shape");
  MseAndPerceptual out;
  out.mse = (x - x_hat).pow(2).mean();
  out.perceptual = extractor->distance(x, x_hat);
  return out;
}

void LossReport::set(const std::string& name, const torch::Tensor& v) {
  values[name] = v.detach().item<double>();
}

void LossReport::set(const std::string& name, double v) { values[name] = v; }

double LossReport::get(const std::string& name) const {
  auto it = values.find(name);
  return it == values.end() ? std::numeric_limits<double>::quiet_NaN()
                            : it->second;
}

bool LossReport::all_finite() const {
  for (const auto& [_, v] : values)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string LossReport::to_json_line() const {
  std::ostringstream os;
  os << "{";
  bool first = true;
  for (const auto& [k, v] : values) {
    if (!first) os << ",";
    first = false;
    os << "\"" << k << "\":";
    if (std::isfinite(v))
      os << v;
    else
      os << "null";
  }
  os << "}";
  return os.str();
}

}  // namespace vesseladapt
