#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pkgnet/data.hpp"

namespace pkgnet::model {

enum class Backbone { resnet18, resnet50, resnext50, wide_resnet50 };

std::string to_string(Backbone backbone);
Backbone parse_backbone(const std::string& name);

struct TeacherSpec {
  Backbone backbone = Backbone::resnet50;
  // "random:<seed>" for a seeded He initialization, "imagenet" to resolve
  // `<backbone>.pt` under $PKGNET_WEIGHTS_DIR, or a path to a TorchScript file.
  std::string pretrained_weights = "imagenet";
  std::vector<int> tap_blocks{1, 2};

  bool operator==(const TeacherSpec&) const = default;
};

struct TensorShape {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;

  bool operator==(const TensorShape&) const = default;
};

// Output channels of residual stage `block` (1..4).
int64_t block_channels(Backbone backbone, int block);
// Spatial size of residual stage `block` for a square input of `input_size`.
int64_t block_resolution(int block, int64_t input_size = data::kCropSize);

inline constexpr const char* kWeightsDirEnv = "PKGNET_WEIGHTS_DIR";

// Torchvision-compatible residual network truncated after the deepest tapped
// stage. Parameter names match torchvision so state can be copied by name.
class ResNetImpl : public torch::nn::Module {
 public:
  ResNetImpl(Backbone backbone, int depth);

  // `x` is already normalized. Returns the outputs of the requested stages.
  std::map<int, torch::Tensor> forward(torch::Tensor x, const std::vector<int>& blocks);

 private:
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr};
  std::vector<torch::nn::Sequential> layers_;
};
TORCH_MODULE(ResNet);

// Frozen feature extractor. Copies share the same immutable network.
class Teacher {
 public:
  Teacher(TeacherSpec spec, ResNet network);

  const TeacherSpec& spec() const noexcept { return spec_; }

  // images: (B, C, H, W) in [0, 1] with C in {1, 3}. Grayscale is replicated to
  // three channels and ImageNet mean/std normalization is applied.
  std::map<int, torch::Tensor> tap(const torch::Tensor& images) const;

  std::vector<torch::Tensor> parameters() const;
  std::map<int, TensorShape> tap_shapes(int64_t input_size = data::kCropSize) const;

 private:
  TeacherSpec spec_;
  mutable ResNet network_;
};

Teacher build_teacher(const TeacherSpec& spec);

enum class Mode { PKG, AE_only, KD_only };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& name);

struct StudentConfig {
  int64_t input_frames = 4;
  int64_t channels_per_frame = 3;
  int bottleneck_block = 2;
  bool skip_connections = true;
  Mode mode = Mode::PKG;
  int64_t base_width = 32;
  int64_t residual_blocks = 2;

  bool operator==(const StudentConfig&) const = default;
};

struct TapPair {
  int teacher_block = 0;
  std::string student_stage;  // "bottleneck" or "decoder_stage_<n>"
  TensorShape shape;

  bool operator==(const TapPair&) const = default;
};

struct TapSpec {
  std::vector<TapPair> pairs;  // ordered by teacher block

  int K() const noexcept { return static_cast<int>(pairs.size()); }
  std::vector<int> blocks() const;
  bool operator==(const TapSpec&) const = default;
};

// Pairs the deepest tapped teacher block with the student bottleneck and each
// shallower one with the decoder stage at the same resolution.
TapSpec make_tap_spec(const TeacherSpec& teacher, const StudentConfig& student);

struct StudentOutput {
  torch::Tensor prediction;               // (B, C, 32, 32) in [0, 1]
  std::map<int, torch::Tensor> taps;      // teacher block -> (B, C_k, M_k, N_k)
};

// Auto-encoder with U-Net style skips. Encoder stages halve the resolution down
// to the bottleneck resolution; the decoder mirrors them with transposed
// convolutions. Submodules are registered as "encoder", "bottleneck", "decoder"
// and "head".
class StudentImpl : public torch::nn::Module {
 public:
  StudentImpl(StudentConfig config, TapSpec taps);

  // x: (B, input_frames * channels_per_frame, 32, 32)
  StudentOutput forward(const torch::Tensor& x);

  const StudentConfig& config() const noexcept { return config_; }
  const TapSpec& tap_spec() const noexcept { return taps_; }

 private:
  StudentConfig config_;
  TapSpec taps_;
  torch::nn::ModuleList encoder_{nullptr};
  torch::nn::Sequential bottleneck_{nullptr};
  torch::nn::ModuleList decoder_{nullptr};
  torch::nn::ModuleList fuse_{nullptr};
  torch::nn::Conv2d head_{nullptr};
  std::vector<int64_t> encoder_widths_;
  std::map<std::size_t, int> decoder_taps_;  // decoder stage index -> teacher block
};
TORCH_MODULE(Student);

Student build_student(const StudentConfig& config, const TapSpec& taps);

struct ForwardOutput {
  torch::Tensor prediction;                   // (B, C, 32, 32)
  torch::Tensor target;                       // (B, C, 32, 32), the true final frame
  std::map<int, torch::Tensor> student_taps;
  std::map<int, torch::Tensor> teacher_taps;  // no gradient
};

// Splits cubes (B, t, C, 32, 32) into the channel-concatenated first
// input_frames frames and the final frame.
std::pair<torch::Tensor, torch::Tensor> split_cubes(const torch::Tensor& cubes, int64_t input_frames);

// Student sees the first input_frames frames, teacher sees the final one. The
// teacher may be null in AE_only mode; in AE_only mode both tap maps are empty.
// `teacher_taps`, when given, replaces the teacher call with cached features.
ForwardOutput forward(Student& student, const Teacher* teacher, const torch::Tensor& cubes,
                      const std::map<int, torch::Tensor>* teacher_taps = nullptr);
ForwardOutput forward(Student& student, const Teacher* teacher, const data::STClip& clip);

nlohmann::json to_json(const TeacherSpec& spec);
TeacherSpec teacher_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StudentConfig& config);
StudentConfig student_config_from_json(const nlohmann::json& j);

inline constexpr const char* kCheckpointFormat = "pkgnet-checkpoint/1";

struct Checkpoint {
  Student student{nullptr};
  TeacherSpec teacher;
  std::optional<torch::serialize::InputArchive> optimizer_state;
  int64_t epoch = 0;
  nlohmann::json config;  // full run configuration snapshot
};

void save_checkpoint(const std::filesystem::path& path, Student& student, const TeacherSpec& teacher,
                     const torch::optim::Optimizer* optimizer, int64_t epoch, const nlohmann::json& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pkgnet::model
