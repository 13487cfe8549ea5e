#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pkgnet/data.hpp"
#include "pkgnet/error.hpp"

namespace fs = std::filesystem;

namespace pkgnet::data {

namespace {

enum class Shape { square, disc, cross, hollow };
enum class Anomaly { fast, reshape, recolour };

constexpr double kFastSpeed = 6.0;
constexpr int kBoxMargin = 2;
constexpr uint8_t kBackground = 40;

using Colour = std::array<uint8_t, 3>;

// Normal objects use kPalette; recoloured anomalies use kOddPalette.
constexpr std::array<Colour, 3> kPalette{{{230, 60, 60}, {60, 200, 80}, {70, 110, 240}}};
constexpr std::array<Colour, 3> kOddPalette{{{235, 210, 60}, {200, 80, 220}, {60, 210, 220}}};

struct MovingObject {
  double x = 0, y = 0;
  double vx = 0, vy = 0;
  int size = 16;
  Colour colour{};
};

struct Interval {
  int64_t begin = 0;  // inclusive
  int64_t end = 0;    // exclusive
  std::size_t object = 0;
  Anomaly kind = Anomaly::fast;
  Shape shape = Shape::square;
  Colour colour{};
};

bool inside_shape(Shape shape, int size, int px, int py) {
  switch (shape) {
    case Shape::square:
      return true;
    case Shape::disc: {
      const double r = size / 2.0;
      const double dx = px + 0.5 - r, dy = py + 0.5 - r;
      return dx * dx + dy * dy <= r * r;
    }
    case Shape::cross: {
      const int third = size / 3;
      return (px >= third && px < size - third) || (py >= third && py < size - third);
    }
    case Shape::hollow: {
      const int border = std::max(2, size / 6);
      return px < border || py < border || px >= size - border || py >= size - border;
    }
  }
  return true;
}

void draw(torch::Tensor& frame, const MovingObject& obj, Shape shape, const Colour& colour) {
  auto acc = frame.accessor<uint8_t, 3>();
  const int64_t channels = frame.size(0), height = frame.size(1), width = frame.size(2);
  const int ox = static_cast<int>(std::lround(obj.x));
  const int oy = static_cast<int>(std::lround(obj.y));
  for (int py = 0; py < obj.size; ++py) {
    for (int px = 0; px < obj.size; ++px) {
      const int x = ox + px, y = oy + py;
      if (x < 0 || y < 0 || x >= width || y >= height || !inside_shape(shape, obj.size, px, py)) continue;
      if (channels == 1) {
        acc[0][y][x] = static_cast<uint8_t>(
            std::lround(0.299 * colour[0] + 0.587 * colour[1] + 0.114 * colour[2]));
      } else {
        for (int64_t c = 0; c < channels; ++c) acc[c][y][x] = colour[static_cast<std::size_t>(c)];
      }
    }
  }
}

void step(MovingObject& obj, double speed_scale, int64_t image_size) {
  obj.x += obj.vx * speed_scale;
  obj.y += obj.vy * speed_scale;
  const double limit = static_cast<double>(image_size - obj.size);
  if (obj.x < 0) { obj.x = -obj.x; obj.vx = -obj.vx; }
  if (obj.y < 0) { obj.y = -obj.y; obj.vy = -obj.vy; }
  if (obj.x > limit) { obj.x = 2 * limit - obj.x; obj.vx = -obj.vx; }
  if (obj.y > limit) { obj.y = 2 * limit - obj.y; obj.vy = -obj.vy; }
}

std::vector<Interval> plan_anomalies(const SyntheticConfig& cfg, std::size_t objects, int64_t video_index,
                                     std::mt19937_64& rng) {
  const auto budget = static_cast<int64_t>(std::lround(cfg.anomaly_rate * cfg.frames_per_video));
  if (budget <= 0) return {};
  const int64_t count = budget >= 40 ? 2 : 1;
  const int64_t part = cfg.frames_per_video / count;
  const int64_t length = std::max<int64_t>(1, budget / count);
  constexpr int64_t kLeadIn = 8;

  std::vector<Interval> intervals;
  for (int64_t i = 0; i < count; ++i) {
    const int64_t lo = i * part + kLeadIn;
    const int64_t hi = std::max(lo, (i + 1) * part - length);
    Interval iv;
    iv.begin = std::uniform_int_distribution<int64_t>(lo, hi)(rng);
    iv.end = std::min(cfg.frames_per_video, iv.begin + length);
    iv.object = std::uniform_int_distribution<std::size_t>(0, objects - 1)(rng);
    constexpr std::array<Anomaly, 3> kKinds{Anomaly::fast, Anomaly::reshape, Anomaly::recolour};
    iv.kind = kKinds[static_cast<std::size_t>(video_index + i) % kKinds.size()];
    constexpr std::array<Shape, 3> kOdd{Shape::disc, Shape::cross, Shape::hollow};
    iv.shape = kOdd[std::uniform_int_distribution<std::size_t>(0, kOdd.size() - 1)(rng)];
    iv.colour = kOddPalette[std::uniform_int_distribution<std::size_t>(0, kOddPalette.size() - 1)(rng)];
    intervals.push_back(iv);
  }
  return intervals;
}

void render_video(const SyntheticConfig& cfg, uint64_t seed, int split_tag, int64_t video_index,
                  bool with_anomalies, SyntheticSplit& out) {
  std::seed_seq seq{seed, static_cast<uint64_t>(split_tag), static_cast<uint64_t>(video_index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int64_t size = cfg.image_size;
  std::vector<MovingObject> objects(static_cast<std::size_t>(cfg.objects_per_video));
  for (auto& obj : objects) {
    obj.size = std::uniform_int_distribution<int>(14, 20)(rng);
    obj.x = unit(rng) * static_cast<double>(size - obj.size);
    obj.y = unit(rng) * static_cast<double>(size - obj.size);
    const double speed = 1.0 + unit(rng);
    const double angle = unit(rng) * 2.0 * M_PI;
    obj.vx = speed * std::cos(angle);
    obj.vy = speed * std::sin(angle);
    obj.colour = kPalette[std::uniform_int_distribution<std::size_t>(0, kPalette.size() - 1)(rng)];
  }

  const auto id = "video_" + std::string(video_index < 10 ? "0" : "") + std::to_string(video_index);
  const auto intervals = with_anomalies ? plan_anomalies(cfg, objects.size(), video_index, rng)
                                        : std::vector<Interval>{};
  std::vector<uint8_t> labels(static_cast<std::size_t>(cfg.frames_per_video), 0);
  for (const auto& iv : intervals) {
    std::fill(labels.begin() + iv.begin, labels.begin() + iv.end, uint8_t{1});
  }

  std::normal_distribution<double> noise(0.0, cfg.noise * 255.0);
  auto frames = std::make_shared<std::vector<torch::Tensor>>();
  frames->reserve(static_cast<std::size_t>(cfg.frames_per_video));
  for (int64_t f = 0; f < cfg.frames_per_video; ++f) {
    auto frame = torch::full({cfg.channels, size, size}, static_cast<int64_t>(kBackground), torch::kUInt8);
    for (std::size_t o = 0; o < objects.size(); ++o) {
      Shape shape = Shape::square;
      Colour colour = objects[o].colour;
      for (const auto& iv : intervals) {
        if (iv.object != o || f < iv.begin || f >= iv.end) continue;
        if (iv.kind == Anomaly::reshape) shape = iv.shape;
        if (iv.kind == Anomaly::recolour) colour = iv.colour;
      }
      draw(frame, objects[o], shape, colour);
      const auto& obj = objects[o];
      out.boxes.push_back({id, f, std::max(0.0, std::round(obj.x) - kBoxMargin),
                           std::max(0.0, std::round(obj.y) - kBoxMargin),
                           std::min<double>(static_cast<double>(size), std::round(obj.x) + obj.size + kBoxMargin),
                           std::min<double>(static_cast<double>(size), std::round(obj.y) + obj.size + kBoxMargin),
                           1.0});
    }
    if (cfg.noise > 0.0) {
      auto* px = frame.data_ptr<uint8_t>();
      for (int64_t i = 0; i < frame.numel(); ++i) {
        px[i] = static_cast<uint8_t>(std::clamp<long>(std::lround(px[i] + noise(rng)), 0L, 255L));
      }
    }
    frames->push_back(frame);

    for (std::size_t o = 0; o < objects.size(); ++o) {
      double scale = 1.0;
      for (const auto& iv : intervals) {
        if (iv.object == o && iv.kind == Anomaly::fast && f + 1 >= iv.begin && f + 1 < iv.end) {
          scale = kFastSpeed / std::hypot(objects[o].vx, objects[o].vy);
        }
      }
      step(objects[o], scale, size);
    }
  }

  const FrameShape shape{cfg.channels, size, size};
  out.store.add_video({id, cfg.frames_per_video, shape, [frames](int64_t index) {
                         return frames->at(static_cast<std::size_t>(index)).to(torch::kFloat32).div(255.0);
                       }});
  out.labels.push_back({id, std::move(labels)});
}

void validate(const SyntheticConfig& cfg) {
  std::vector<std::string> problems;
  if (!(cfg.anomaly_rate >= 0.0 && cfg.anomaly_rate < 1.0)) problems.push_back("anomaly_rate must lie in [0, 1)");
  if (cfg.n_train_videos < 0 || cfg.n_test_videos < 0) problems.push_back("video counts must be >= 0");
  if (cfg.frames_per_video < 2) problems.push_back("frames_per_video must be >= 2");
  if (cfg.image_size < 24) problems.push_back("image_size must be >= 24");
  if (cfg.objects_per_video < 1) problems.push_back("objects_per_video must be >= 1");
  if (cfg.channels != 1 && cfg.channels != 3) problems.push_back("channels must be 1 or 3");
  if (cfg.noise < 0.0) problems.push_back("noise must be >= 0");
  if (!problems.empty()) throw ConfigError(problems);
}

}  // namespace

SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& config, uint64_t seed) {
  validate(config);
  SyntheticDataset dataset;
  for (int64_t v = 0; v < config.n_train_videos; ++v) {
    render_video(config, seed, 0, v, false, dataset.train);
  }
  for (int64_t v = 0; v < config.n_test_videos; ++v) {
    render_video(config, seed, 1, v, true, dataset.test);
  }
  return dataset;
}

void write_dataset(const SyntheticDataset& dataset, const fs::path& root) {
  const std::array<std::pair<const char*, const SyntheticSplit*>, 2> splits{
      {{"train", &dataset.train}, {"test", &dataset.test}}};
  for (const auto& [name, split] : splits) {
    for (const auto& video : split->store.videos()) {
      const auto dir = root / name / video.id;
      fs::create_directories(dir);
      for (int64_t f = 0; f < video.frame_count; ++f) {
        auto hwc = video.loader(f).mul(255.0).round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
        const int type = video.shape.channels == 1 ? CV_8UC1 : CV_8UC3;
        cv::Mat image(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), type, hwc.data_ptr<uint8_t>());
        cv::Mat bgr;
        if (video.shape.channels == 3) {
          cv::cvtColor(image, bgr, cv::COLOR_RGB2BGR);
        } else {
          bgr = image;
        }
        char name_buf[32];
        std::snprintf(name_buf, sizeof(name_buf), "frame_%06lld.png", static_cast<long long>(f));
        if (!cv::imwrite((dir / name_buf).string(), bgr)) {
          throw Error("cannot write frame " + (dir / name_buf).string(), "io");
        }
      }
    }
    save_boxes(root / "boxes" / (std::string(name) + ".csv"), split->boxes);
    save_labels(root / "labels" / (std::string(name) + ".json"), split->labels);
  }
}

}  // namespace pkgnet::data
