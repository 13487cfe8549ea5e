#include <algorithm>

#include "pkgnet/error.hpp"
#include "pkgnet/model.hpp"

namespace pkgnet::model {

namespace {

namespace nn = torch::nn;

nn::Sequential conv_bn_relu(int64_t in, int64_t out, int64_t stride = 1) {
  return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)),
                        nn::BatchNorm2d(out), nn::ReLU());
}

// 1x1 reduce, 3x3, 1x1 expand, identity shortcut.
class ResidualUnitImpl : public nn::Module {
 public:
  explicit ResidualUnitImpl(int64_t channels) {
    const int64_t mid = std::max<int64_t>(channels / 4, 8);
    body_ = register_module(
        "body", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(channels, mid, 1).bias(false)), nn::BatchNorm2d(mid),
                               nn::ReLU(), nn::Conv2d(nn::Conv2dOptions(mid, mid, 3).padding(1).bias(false)),
                               nn::BatchNorm2d(mid), nn::ReLU(),
                               nn::Conv2d(nn::Conv2dOptions(mid, channels, 1).bias(false)),
                               nn::BatchNorm2d(channels)));
  }

  torch::Tensor forward(const torch::Tensor& x) { return torch::relu(x + body_->forward(x)); }

 private:
  nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualUnit);

int log2_exact(int64_t n) {
  int k = 0;
  while ((int64_t{1} << k) < n) ++k;
  if ((int64_t{1} << k) != n) throw Error("resolution ratio must be a power of two", "model");
  return k;
}

}  // namespace

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::PKG: return "PKG";
    case Mode::AE_only: return "AE_only";
    case Mode::KD_only: return "KD_only";
  }
  return "unknown";
}

Mode parse_mode(const std::string& name) {
  for (auto m : {Mode::PKG, Mode::AE_only, Mode::KD_only}) {
    if (to_string(m) == name) return m;
  }
  throw Error("unknown mode " + name, "model");
}

std::vector<int> TapSpec::blocks() const {
  std::vector<int> out;
  for (const auto& p : pairs) out.push_back(p.teacher_block);
  return out;
}

TapSpec make_tap_spec(const TeacherSpec& teacher, const StudentConfig& student) {
  if (teacher.tap_blocks.empty()) throw Error("tap_blocks must be non-empty", "model");
  if (student.bottleneck_block < 2 || student.bottleneck_block > 4) {
    throw Error("bottleneck_block must be 2, 3 or 4", "model");
  }
  if (teacher.tap_blocks.back() != student.bottleneck_block) {
    throw Error("tap shape impossible: deepest tapped block " + std::to_string(teacher.tap_blocks.back()) +
                    " must pair with the bottleneck at block " + std::to_string(student.bottleneck_block),
                "model");
  }
  const int64_t bottleneck_res = block_resolution(student.bottleneck_block);
  TapSpec spec;
  for (int block : teacher.tap_blocks) {
    TapPair pair;
    pair.teacher_block = block;
    pair.shape = {block_channels(teacher.backbone, block), block_resolution(block), block_resolution(block)};
    if (block == student.bottleneck_block) {
      pair.student_stage = "bottleneck";
    } else {
      pair.student_stage = "decoder_stage_" + std::to_string(log2_exact(pair.shape.height / bottleneck_res));
    }
    spec.pairs.push_back(pair);
  }
  return spec;
}

StudentImpl::StudentImpl(StudentConfig config, TapSpec taps) : config_(config), taps_(std::move(taps)) {
  if (config_.input_frames < 1 || config_.channels_per_frame < 1 || config_.base_width < 1) {
    throw Error("student dimensions must be positive", "model");
  }
  const auto bottleneck_pair =
      std::find_if(taps_.pairs.begin(), taps_.pairs.end(), [](const TapPair& p) { return p.student_stage == "bottleneck"; });
  if (bottleneck_pair == taps_.pairs.end()) throw Error("tap spec has no bottleneck pair", "model");
  const int64_t bottleneck_res = bottleneck_pair->shape.height;
  const int64_t bottleneck_channels = bottleneck_pair->shape.channels;
  if (block_resolution(config_.bottleneck_block) != bottleneck_res) {
    throw Error("tap shape impossible: bottleneck resolution mismatch", "model");
  }
  const int stages = log2_exact(data::kCropSize / bottleneck_res);

  const int64_t w = config_.base_width;
  encoder_ = register_module("encoder", nn::ModuleList());
  encoder_widths_.push_back(w);
  encoder_->push_back(conv_bn_relu(config_.input_frames * config_.channels_per_frame, w));
  for (int s = 1; s <= stages; ++s) {
    const int64_t width = std::min<int64_t>(w << s, 4 * w);
    encoder_->push_back(conv_bn_relu(encoder_widths_.back(), width, 2));
    encoder_widths_.push_back(width);
  }

  bottleneck_ = register_module("bottleneck", nn::Sequential());
  bottleneck_->push_back(nn::Conv2d(nn::Conv2dOptions(encoder_widths_.back(), bottleneck_channels, 1).bias(false)));
  bottleneck_->push_back(nn::BatchNorm2d(bottleneck_channels));
  bottleneck_->push_back(nn::ReLU());
  for (int64_t i = 0; i < config_.residual_blocks; ++i) bottleneck_->push_back(ResidualUnit(bottleneck_channels));

  decoder_ = register_module("decoder", nn::ModuleList());
  fuse_ = register_module("fuse", nn::ModuleList());
  int64_t in = bottleneck_channels;
  for (int s = 1; s <= stages; ++s) {
    const auto skip_index = static_cast<std::size_t>(stages - s);
    int64_t up_channels = encoder_widths_[skip_index];
    for (const auto& p : taps_.pairs) {
      if (p.student_stage == "decoder_stage_" + std::to_string(s)) {
        up_channels = p.shape.channels;
        decoder_taps_[static_cast<std::size_t>(s - 1)] = p.teacher_block;
      }
    }
    decoder_->push_back(nn::Sequential(
        nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, up_channels, 2).stride(2).bias(false)),
        nn::BatchNorm2d(up_channels), nn::ReLU()));
    const int64_t fuse_in = up_channels + (config_.skip_connections ? encoder_widths_[skip_index] : 0);
    fuse_->push_back(conv_bn_relu(fuse_in, encoder_widths_[skip_index]));
    in = encoder_widths_[skip_index];
  }
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, config_.channels_per_frame, 3).padding(1)));
}

StudentOutput StudentImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> skips;
  auto h = x;
  for (const auto& stage : *encoder_) {
    h = stage->as<nn::Sequential>()->forward(h);
    skips.push_back(h);
  }

  StudentOutput out;
  h = bottleneck_->forward(h);
  for (const auto& p : taps_.pairs) {
    if (p.student_stage == "bottleneck") out.taps.emplace(p.teacher_block, h);
  }

  for (std::size_t s = 0; s < decoder_->size(); ++s) {
    h = decoder_[s]->as<nn::Sequential>()->forward(h);
    if (auto tap = decoder_taps_.find(s); tap != decoder_taps_.end()) out.taps.emplace(tap->second, h);
    if (config_.skip_connections) {
      h = torch::cat({h, skips[skips.size() - 2 - s]}, 1);
    }
    h = fuse_[s]->as<nn::Sequential>()->forward(h);
  }
  out.prediction = torch::sigmoid(head_(h));
  return out;
}

Student build_student(const StudentConfig& config, const TapSpec& taps) { return Student(config, taps); }

}  // namespace pkgnet::model
