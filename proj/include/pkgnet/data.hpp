#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace pkgnet::data {

inline constexpr int64_t kCropSize = 32;

struct FrameShape {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;

  bool operator==(const FrameShape&) const = default;
};

// Read-only collection of videos. Frames are produced on demand by a per-video
// loader as float tensors of shape (channels, H, W) with values in [0, 1].
// Videos are kept in lexicographic order of their id.
class FrameStore {
 public:
  using Loader = std::function<torch::Tensor(int64_t)>;

  struct Video {
    std::string id;
    int64_t frame_count = 0;
    FrameShape shape;
    Loader loader;
  };

  void add_video(Video video);

  const std::vector<Video>& videos() const noexcept { return videos_; }
  std::size_t size() const noexcept { return videos_.size(); }
  bool contains(std::string_view id) const;
  const Video& video(std::string_view id) const;
  torch::Tensor frame(std::string_view id, int64_t index) const;

 private:
  std::vector<Video> videos_;
};

struct DatasetLayout {
  std::string split = "train";
  int64_t channels = 3;
  // Decode every frame at load time to reject videos with mixed frame sizes.
  bool validate_sizes = true;
};

// Reads `<root>/<split>/<video_id>/frame_%06d.{png,jpg}`.
FrameStore load_frame_store(const std::filesystem::path& dataset_root, const DatasetLayout& layout);

struct ObjectBox {
  std::string video_id;
  int64_t frame_index = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double confidence = 1.0;

  bool operator==(const ObjectBox&) const = default;
};

struct BoxIngestOptions {
  double min_confidence = 0.5;
  // When set, boxes are clamped to the frame size of their video.
  const FrameStore* bounds = nullptr;
};

struct BoxIngest {
  std::vector<ObjectBox> boxes;
  int64_t rows = 0;
  int64_t dropped_low_confidence = 0;
  int64_t clamped = 0;
};

// Box file: CSV with a header line, rows `video_id,frame_index,x1,y1,x2,y2,confidence`.
BoxIngest load_boxes(const std::filesystem::path& box_file, const BoxIngestOptions& options = {});
void save_boxes(const std::filesystem::path& box_file, std::span<const ObjectBox> boxes);

struct STClip {
  torch::Tensor cube;  // (t, channels, 32, 32)
  std::string video_id;
  int64_t frame_index = 0;  // index of the final frame
  ObjectBox box;
};

struct AssemblyReport {
  int64_t emitted = 0;
  int64_t skipped_history = 0;
};

// Crops `box` out of a (C, H, W) frame and resizes it bilinearly to size x size.
torch::Tensor crop_resize(const torch::Tensor& frame, const ObjectBox& box, int64_t size = kCropSize);

// Emits one clip per box with at least `temporal_window` frames of history, in
// nondecreasing (video_id, frame_index) order. All t = temporal_window + 1 crops
// use the box of the final frame.
AssemblyReport assemble_stclips(const FrameStore& store, std::span<const ObjectBox> boxes,
                                int64_t temporal_window,
                                const std::function<void(STClip&&)>& sink);

std::vector<STClip> assemble_stclips(const FrameStore& store, std::span<const ObjectBox> boxes,
                                     int64_t temporal_window, AssemblyReport* report = nullptr);

struct LabelTrack {
  std::string video_id;
  std::vector<uint8_t> labels;  // 1 = anomalous frame
};

// Labels file: JSON object mapping video_id to an array of 0/1 integers.
std::vector<LabelTrack> load_labels(const std::filesystem::path& label_file);
void save_labels(const std::filesystem::path& label_file, std::span<const LabelTrack> labels);
const LabelTrack& find_labels(std::span<const LabelTrack> labels, std::string_view video_id);

struct SyntheticConfig {
  int64_t n_train_videos = 8;
  int64_t n_test_videos = 4;
  int64_t frames_per_video = 200;
  int64_t image_size = 96;
  int64_t objects_per_video = 2;
  int64_t channels = 3;
  double anomaly_rate = 0.2;
  double noise = 0.02;
  uint64_t seed = 7;
};

struct SyntheticSplit {
  FrameStore store;
  std::vector<ObjectBox> boxes;
  std::vector<LabelTrack> labels;
};

struct SyntheticDataset {
  SyntheticSplit train;
  SyntheticSplit test;
};

// Moving filled squares at constant speed, bouncing off the borders. Test videos
// carry labeled intervals where one object speeds up abruptly, changes its
// shape, or takes a colour never seen in normal footage.
SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& config, uint64_t seed);

// Writes the dataset in the on-disk layout read by load_frame_store, plus
// `boxes/<split>.csv` and `labels/<split>.json`.
void write_dataset(const SyntheticDataset& dataset, const std::filesystem::path& root);

}  // namespace pkgnet::data
