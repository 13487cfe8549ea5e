#include <cmath>
#include <cstdlib>

#include <torch/script.h>

#include "pkgnet/error.hpp"
#include "pkgnet/model.hpp"

namespace fs = std::filesystem;

namespace pkgnet::model {

namespace {

namespace nn = torch::nn;

struct Layout {
  bool bottleneck = true;
  std::array<int, 4> depths{3, 4, 6, 3};
  int64_t groups = 1;
  int64_t width_per_group = 64;
};

Layout layout_of(Backbone backbone) {
  switch (backbone) {
    case Backbone::resnet18:
      return {false, {2, 2, 2, 2}, 1, 64};
    case Backbone::resnet50:
      return {};
    case Backbone::resnext50:
      return {true, {3, 4, 6, 3}, 32, 4};
    case Backbone::wide_resnet50:
      return {true, {3, 4, 6, 3}, 1, 128};
  }
  throw Error("unknown backbone", "model");
}

nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1, int64_t groups = 1) {
  return nn::Conv2d(
      nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).groups(groups).bias(false));
}

class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t planes, int64_t stride) {
    conv1_ = register_module("conv1", conv(in, planes, 3, stride));
    bn1_ = register_module("bn1", nn::BatchNorm2d(planes));
    conv2_ = register_module("conv2", conv(planes, planes, 3));
    bn2_ = register_module("bn2", nn::BatchNorm2d(planes));
    if (stride != 1 || in != planes) {
      downsample_ = register_module("downsample", nn::Sequential(conv(in, planes, 1, stride), nn::BatchNorm2d(planes)));
    }
  }

  torch::Tensor forward(torch::Tensor x) {
    auto out = torch::relu(bn1_(conv1_(x)));
    out = bn2_(conv2_(out));
    return torch::relu(out + (downsample_ ? downsample_->forward(x) : x));
  }

 private:
  nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  nn::Sequential downsample_{nullptr};
};
TORCH_MODULE(BasicBlock);

class BottleneckImpl : public nn::Module {
 public:
  static constexpr int64_t kExpansion = 4;

  BottleneckImpl(int64_t in, int64_t planes, int64_t stride, int64_t groups, int64_t width_per_group) {
    const int64_t width = static_cast<int64_t>(planes * (width_per_group / 64.0)) * groups;
    conv1_ = register_module("conv1", conv(in, width, 1));
    bn1_ = register_module("bn1", nn::BatchNorm2d(width));
    conv2_ = register_module("conv2", conv(width, width, 3, stride, groups));
    bn2_ = register_module("bn2", nn::BatchNorm2d(width));
    conv3_ = register_module("conv3", conv(width, planes * kExpansion, 1));
    bn3_ = register_module("bn3", nn::BatchNorm2d(planes * kExpansion));
    if (stride != 1 || in != planes * kExpansion) {
      downsample_ = register_module(
          "downsample", nn::Sequential(conv(in, planes * kExpansion, 1, stride), nn::BatchNorm2d(planes * kExpansion)));
    }
  }

  torch::Tensor forward(torch::Tensor x) {
    auto out = torch::relu(bn1_(conv1_(x)));
    out = torch::relu(bn2_(conv2_(out)));
    out = bn3_(conv3_(out));
    return torch::relu(out + (downsample_ ? downsample_->forward(x) : x));
  }

 private:
  nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr};
  nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr}, bn3_{nullptr};
  nn::Sequential downsample_{nullptr};
};
TORCH_MODULE(Bottleneck);

void he_init(nn::Module& network, uint64_t seed) {
  auto generator = at::detail::createCPUGenerator(seed);
  torch::NoGradGuard no_grad;
  for (auto& module : network.modules(/*include_self=*/false)) {
    if (auto* c = module->as<nn::Conv2d>()) {
      const auto& w = c->weight;
      const double fan_out = static_cast<double>(w.size(0) * w.size(2) * w.size(3));
      w.normal_(0.0, std::sqrt(2.0 / fan_out), generator);
    } else if (auto* bn = module->as<nn::BatchNorm2d>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
    }
  }
}

void load_torchscript_state(nn::Module& network, const fs::path& file) {
  torch::jit::Module source;
  try {
    source = torch::jit::load(file.string());
  } catch (const c10::Error& e) {
    throw Error("cannot read teacher weights " + file.string() + ": " + e.what_without_backtrace(), "weights");
  }
  std::map<std::string, torch::Tensor> state;
  for (const auto& p : source.named_parameters(/*recurse=*/true)) state.emplace(p.name, p.value);
  for (const auto& b : source.named_buffers(/*recurse=*/true)) state.emplace(b.name, b.value);

  torch::NoGradGuard no_grad;
  auto copy_all = [&](const auto& items) {
    for (const auto& item : items) {
      auto found = state.find(item.key());
      if (found == state.end()) {
        throw Error("teacher weights " + file.string() + " lack tensor " + item.key(), "weights");
      }
      if (found->second.sizes() != item.value().sizes()) {
        throw Error("teacher weights " + file.string() + ": shape mismatch for " + item.key(), "weights");
      }
      item.value().copy_(found->second);
    }
  };
  copy_all(network.named_parameters(/*recurse=*/true));
  copy_all(network.named_buffers(/*recurse=*/true));
}

fs::path resolve_weights(const TeacherSpec& spec) {
  if (spec.pretrained_weights == "imagenet") {
    const char* dir = std::getenv(kWeightsDirEnv);
    if (dir == nullptr || *dir == '\0') {
      throw Error("missing weights: set " + std::string(kWeightsDirEnv) + " to a directory holding " +
                      to_string(spec.backbone) + ".pt",
                  "weights");
    }
    return fs::path(dir) / (to_string(spec.backbone) + ".pt");
  }
  return spec.pretrained_weights;
}

}  // namespace

std::string to_string(Backbone backbone) {
  switch (backbone) {
    case Backbone::resnet18: return "resnet18";
    case Backbone::resnet50: return "resnet50";
    case Backbone::resnext50: return "resnext50";
    case Backbone::wide_resnet50: return "wide_resnet50";
  }
  return "unknown";
}

Backbone parse_backbone(const std::string& name) {
  for (auto b : {Backbone::resnet18, Backbone::resnet50, Backbone::resnext50, Backbone::wide_resnet50}) {
    if (to_string(b) == name) return b;
  }
  throw Error("unknown backbone " + name, "model");
}

int64_t block_channels(Backbone backbone, int block) {
  if (block < 1 || block > 4) throw Error("block index must be in 1..4", "model");
  const int64_t planes = int64_t{64} << (block - 1);
  return layout_of(backbone).bottleneck ? planes * BottleneckImpl::kExpansion : planes;
}

int64_t block_resolution(int block, int64_t input_size) {
  if (block < 1 || block > 4) throw Error("block index must be in 1..4", "model");
  auto halve = [](int64_t n) { return (n - 1) / 2 + 1; };
  int64_t n = halve(halve(input_size));  // stem convolution, max pooling
  for (int b = 2; b <= block; ++b) n = halve(n);
  return n;
}

ResNetImpl::ResNetImpl(Backbone backbone, int depth) {
  const auto layout = layout_of(backbone);
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(64));
  int64_t in = 64;
  for (int block = 1; block <= depth; ++block) {
    const int64_t planes = int64_t{64} << (block - 1);
    const int64_t stride = block == 1 ? 1 : 2;
    nn::Sequential layer;
    for (int i = 0; i < layout.depths[static_cast<std::size_t>(block - 1)]; ++i) {
      if (layout.bottleneck) {
        layer->push_back(Bottleneck(in, planes, i == 0 ? stride : 1, layout.groups, layout.width_per_group));
        in = planes * BottleneckImpl::kExpansion;
      } else {
        layer->push_back(BasicBlock(in, planes, i == 0 ? stride : 1));
        in = planes;
      }
    }
    layers_.push_back(register_module("layer" + std::to_string(block), layer));
  }
}

std::map<int, torch::Tensor> ResNetImpl::forward(torch::Tensor x, const std::vector<int>& blocks) {
  x = torch::max_pool2d(torch::relu(bn1_(conv1_(x))), 3, 2, 1);
  std::map<int, torch::Tensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i]->forward(x);
    const int block = static_cast<int>(i) + 1;
    if (std::find(blocks.begin(), blocks.end(), block) != blocks.end()) out.emplace(block, x);
  }
  return out;
}

Teacher::Teacher(TeacherSpec spec, ResNet network) : spec_(std::move(spec)), network_(std::move(network)) {}

std::map<int, torch::Tensor> Teacher::tap(const torch::Tensor& images) const {
  TORCH_CHECK(images.dim() == 4, "teacher input must be (B, C, H, W)");
  torch::NoGradGuard no_grad;
  auto x = images.size(1) == 1 ? images.expand({-1, 3, -1, -1}) : images;
  if (x.size(1) != 3) throw Error("teacher expects 1 or 3 input channels", "model");
  const auto mean = torch::tensor({0.485, 0.456, 0.406}, x.options()).view({1, 3, 1, 1});
  const auto std = torch::tensor({0.229, 0.224, 0.225}, x.options()).view({1, 3, 1, 1});
  return network_->forward((x - mean) / std, spec_.tap_blocks);
}

std::vector<torch::Tensor> Teacher::parameters() const {
  auto params = network_->parameters();
  for (auto& b : network_->buffers()) params.push_back(b);
  return params;
}

std::map<int, TensorShape> Teacher::tap_shapes(int64_t input_size) const {
  auto taps = tap(torch::zeros({1, 3, input_size, input_size}));
  std::map<int, TensorShape> shapes;
  for (const auto& [block, f] : taps) shapes[block] = {f.size(1), f.size(2), f.size(3)};
  return shapes;
}

Teacher build_teacher(const TeacherSpec& spec) {
  if (spec.tap_blocks.empty()) throw Error("tap_blocks must be non-empty", "model");
  for (std::size_t i = 0; i < spec.tap_blocks.size(); ++i) {
    const int b = spec.tap_blocks[i];
    if (b < 1 || b > 4) throw Error("tap_blocks entries must lie in 1..4", "model");
    if (i > 0 && b <= spec.tap_blocks[i - 1]) throw Error("tap_blocks must be strictly increasing", "model");
  }

  ResNet network(spec.backbone, spec.tap_blocks.back());
  const std::string random_prefix = "random";
  if (spec.pretrained_weights.rfind(random_prefix, 0) == 0) {
    uint64_t seed = 0;
    if (spec.pretrained_weights.size() > random_prefix.size()) {
      const auto rest = spec.pretrained_weights.substr(random_prefix.size());
      if (rest.size() < 2 || rest[0] != ':') throw Error("bad weights identifier " + spec.pretrained_weights, "weights");
      seed = std::stoull(rest.substr(1));
    }
    he_init(*network, seed);
  } else {
    const auto file = resolve_weights(spec);
    if (!fs::exists(file)) throw Error("missing weights: " + file.string(), "weights");
    load_torchscript_state(*network, file);
  }

  network->eval();
  for (auto& p : network->parameters()) p.set_requires_grad(false);
  return Teacher(spec, network);
}

}  // namespace pkgnet::model
