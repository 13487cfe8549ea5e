#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>

#include <unistd.h>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pkgnet/model.hpp"

namespace fixture {

inline std::filesystem::path dir() { return PKGNET_FIXTURE_DIR; }

// Stage shapes recorded from torchvision by scripts/shape_oracle.py.
inline pkgnet::model::TensorShape teacher_shape(const std::string& backbone, int block) {
  static const nlohmann::json shapes = [] {
    std::ifstream in(dir() / "teacher_shapes.json");
    return nlohmann::json::parse(in);
  }();
  const auto s = shapes.at("backbones").at(backbone).at(std::to_string(block)).get<std::vector<int64_t>>();
  return {s.at(0), s.at(1), s.at(2)};
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("pkgnet_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline pkgnet::model::TeacherSpec random_teacher(pkgnet::model::Backbone backbone = pkgnet::model::Backbone::resnet50,
                                                 std::vector<int> taps = {1, 2}) {
  return {backbone, "random:0", std::move(taps)};
}

// Narrow student that trains quickly in tests.
inline pkgnet::model::StudentConfig small_student(pkgnet::model::Mode mode = pkgnet::model::Mode::PKG) {
  pkgnet::model::StudentConfig cfg;
  cfg.base_width = 8;
  cfg.residual_blocks = 1;
  cfg.mode = mode;
  return cfg;
}

inline bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.dtype() == b.dtype() && torch::equal(a, b);
}

}  // namespace fixture
