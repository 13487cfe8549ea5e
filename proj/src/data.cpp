#include "pkgnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pkgnet/error.hpp"

namespace fs = std::filesystem;

namespace pkgnet::data {

namespace {

Error data_error(const std::string& message) { return Error(message, "data"); }

torch::Tensor read_image(const fs::path& file, int64_t channels) {
  cv::Mat image = cv::imread(file.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (image.empty()) {
    throw data_error("cannot decode image " + file.string());
  }
  if (channels == 3) {
    cv::cvtColor(image, image, cv::COLOR_BGR2RGB);
  }
  auto hwc = torch::from_blob(image.data, {image.rows, image.cols, channels}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

bool is_frame_file(const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

// Trailing integer of the file stem, e.g. frame_000042 -> 42.
std::optional<int64_t> frame_number(const fs::path& path) {
  const auto stem = path.stem().string();
  auto begin = stem.size();
  while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) {
    --begin;
  }
  if (begin == stem.size()) {
    return std::nullopt;
  }
  int64_t value = 0;
  std::from_chars(stem.data() + begin, stem.data() + stem.size(), value);
  return value;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

void FrameStore::add_video(Video video) {
  if (contains(video.id)) {
    throw data_error("duplicate video id " + video.id);
  }
  auto pos = std::lower_bound(videos_.begin(), videos_.end(), video.id,
                              [](const Video& v, const std::string& id) { return v.id < id; });
  videos_.insert(pos, std::move(video));
}

bool FrameStore::contains(std::string_view id) const {
  return std::any_of(videos_.begin(), videos_.end(), [&](const Video& v) { return v.id == id; });
}

const FrameStore::Video& FrameStore::video(std::string_view id) const {
  auto pos = std::lower_bound(videos_.begin(), videos_.end(), id,
                              [](const Video& v, std::string_view key) { return v.id < key; });
  if (pos == videos_.end() || pos->id != id) {
    throw data_error("unknown video " + std::string(id));
  }
  return *pos;
}

torch::Tensor FrameStore::frame(std::string_view id, int64_t index) const {
  const auto& v = video(id);
  if (index < 0 || index >= v.frame_count) {
    throw data_error("frame " + std::to_string(index) + " out of range for video " + v.id);
  }
  return v.loader(index);
}

FrameStore load_frame_store(const fs::path& dataset_root, const DatasetLayout& layout) {
  if (layout.channels != 1 && layout.channels != 3) {
    throw data_error("channels must be 1 or 3");
  }
  const auto split_dir = dataset_root / layout.split;
  if (!fs::is_directory(split_dir)) {
    throw data_error("missing directory " + split_dir.string());
  }

  std::vector<fs::path> video_dirs;
  for (const auto& entry : fs::directory_iterator(split_dir)) {
    if (entry.is_directory()) video_dirs.push_back(entry.path());
  }
  if (video_dirs.empty()) {
    throw data_error("no videos found in " + split_dir.string());
  }
  std::sort(video_dirs.begin(), video_dirs.end());

  FrameStore store;
  for (const auto& dir : video_dirs) {
    const auto id = dir.filename().string();
    std::vector<std::pair<int64_t, fs::path>> numbered;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file() || !is_frame_file(entry.path())) continue;
      auto number = frame_number(entry.path());
      if (!number) {
        throw data_error("frame file without index: " + entry.path().string());
      }
      numbered.emplace_back(*number, entry.path());
    }
    if (numbered.empty()) {
      throw data_error("video " + id + " has zero frames");
    }
    std::sort(numbered.begin(), numbered.end());
    for (std::size_t i = 0; i < numbered.size(); ++i) {
      if (numbered[i].first != static_cast<int64_t>(i)) {
        throw data_error("video " + id + ": frame indices not contiguous at " +
                         numbered[i].second.string());
      }
    }

    auto files = std::make_shared<std::vector<fs::path>>();
    for (auto& [index, path] : numbered) files->push_back(std::move(path));

    const auto first = read_image(files->front(), layout.channels);
    FrameShape shape{first.size(0), first.size(1), first.size(2)};
    if (layout.validate_sizes) {
      for (std::size_t i = 1; i < files->size(); ++i) {
        cv::Mat header = cv::imread((*files)[i].string(), cv::IMREAD_UNCHANGED);
        if (header.empty()) {
          throw data_error("cannot decode image " + (*files)[i].string());
        }
        if (header.rows != shape.height || header.cols != shape.width) {
          std::ostringstream msg;
          msg << "inconsistent frame size in video " << id << ": " << (*files)[i].string() << " is "
              << header.cols << "x" << header.rows << ", expected " << shape.width << "x" << shape.height;
          throw data_error(msg.str());
        }
      }
    }

    const int64_t channels = layout.channels;
    store.add_video({id, static_cast<int64_t>(files->size()), shape,
                     [files, channels, shape](int64_t index) {
                       auto frame = read_image(files->at(static_cast<std::size_t>(index)), channels);
                       if (frame.size(1) != shape.height || frame.size(2) != shape.width) {
                         throw data_error("inconsistent frame size: " + files->at(index).string());
                       }
                       return frame;
                     }});
  }
  return store;
}

BoxIngest load_boxes(const fs::path& box_file, const BoxIngestOptions& options) {
  std::ifstream in(box_file);
  if (!in) {
    throw data_error("cannot open box file " + box_file.string());
  }
  BoxIngest ingest;
  std::string line;
  if (!std::getline(in, line) || trim(line).rfind("video_id", 0) != 0) {
    throw data_error("box file " + box_file.string() + " lacks the header line");
  }
  int64_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    ++ingest.rows;
    const auto fields = split_fields(line);
    const auto where = box_file.string() + ":" + std::to_string(line_no);
    if (fields.size() != 7 || fields[0].empty()) {
      throw data_error("malformed row at " + where);
    }
    ObjectBox box;
    box.video_id = std::string(fields[0]);
    if (!parse_number(fields[1], box.frame_index) || !parse_number(fields[2], box.x1) ||
        !parse_number(fields[3], box.y1) || !parse_number(fields[4], box.x2) ||
        !parse_number(fields[5], box.y2) || !parse_number(fields[6], box.confidence) ||
        box.frame_index < 0 || !(box.confidence >= 0.0 && box.confidence <= 1.0)) {
      throw data_error("malformed row at " + where);
    }
    if (!(box.x1 < box.x2) || !(box.y1 < box.y2)) {
      throw data_error("degenerate box at " + where);
    }
    if (box.confidence < options.min_confidence) {
      ++ingest.dropped_low_confidence;
      continue;
    }

    const ObjectBox raw = box;
    box.x1 = std::max(0.0, box.x1);
    box.y1 = std::max(0.0, box.y1);
    if (options.bounds != nullptr) {
      const auto& shape = options.bounds->video(box.video_id).shape;
      box.x2 = std::min(static_cast<double>(shape.width), box.x2);
      box.y2 = std::min(static_cast<double>(shape.height), box.y2);
    }
    if (!(box.x1 < box.x2) || !(box.y1 < box.y2)) {
      throw data_error("box lies outside the frame at " + where);
    }
    if (!(box == raw)) ++ingest.clamped;
    ingest.boxes.push_back(std::move(box));
  }
  return ingest;
}

void save_boxes(const fs::path& box_file, std::span<const ObjectBox> boxes) {
  if (box_file.has_parent_path()) fs::create_directories(box_file.parent_path());
  std::ofstream out(box_file);
  if (!out) {
    throw data_error("cannot write box file " + box_file.string());
  }
  out << "video_id,frame_index,x1,y1,x2,y2,confidence\n";
  out.precision(10);
  for (const auto& b : boxes) {
    out << b.video_id << ',' << b.frame_index << ',' << b.x1 << ',' << b.y1 << ',' << b.x2 << ','
        << b.y2 << ',' << b.confidence << '\n';
  }
}

torch::Tensor crop_resize(const torch::Tensor& frame, const ObjectBox& box, int64_t size) {
  TORCH_CHECK(frame.dim() == 3, "frame must be (C, H, W)");
  const int64_t height = frame.size(1);
  const int64_t width = frame.size(2);
  int64_t x1 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(box.x1)), 0, width - 1);
  int64_t y1 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(box.y1)), 0, height - 1);
  int64_t x2 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(box.x2)), x1 + 1, width);
  int64_t y2 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(box.y2)), y1 + 1, height);

  auto crop = frame.slice(1, y1, y2).slice(2, x1, x2);
  if (crop.size(1) == size && crop.size(2) == size) {
    return crop.contiguous().clone();
  }
  namespace F = torch::nn::functional;
  return F::interpolate(crop.unsqueeze(0), F::InterpolateFuncOptions()
                                               .size(std::vector<int64_t>{size, size})
                                               .mode(torch::kBilinear)
                                               .align_corners(false))
      .squeeze(0);
}

AssemblyReport assemble_stclips(const FrameStore& store, std::span<const ObjectBox> boxes,
                                int64_t temporal_window, const std::function<void(STClip&&)>& sink) {
  if (temporal_window < 1) {
    throw data_error("temporal_window must be >= 1");
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (boxes[a].video_id != boxes[b].video_id) return boxes[a].video_id < boxes[b].video_id;
    return boxes[a].frame_index < boxes[b].frame_index;
  });

  AssemblyReport report;
  std::string cached_video;
  std::map<int64_t, torch::Tensor> cache;
  for (const auto index : order) {
    const auto& box = boxes[index];
    const auto& video = store.video(box.video_id);
    if (box.frame_index >= video.frame_count) {
      throw data_error("box frame " + std::to_string(box.frame_index) + " beyond end of video " +
                       video.id);
    }
    if (box.frame_index < temporal_window) {
      ++report.skipped_history;
      continue;
    }
    if (cached_video != video.id) {
      cache.clear();
      cached_video = video.id;
    }
    const int64_t first = box.frame_index - temporal_window;
    cache.erase(cache.begin(), cache.lower_bound(first));

    std::vector<torch::Tensor> crops;
    crops.reserve(static_cast<std::size_t>(temporal_window + 1));
    for (int64_t f = first; f <= box.frame_index; ++f) {
      auto it = cache.find(f);
      if (it == cache.end()) {
        it = cache.emplace(f, video.loader(f)).first;
      }
      crops.push_back(crop_resize(it->second, box));
    }
    sink(STClip{torch::stack(crops), video.id, box.frame_index, box});
    ++report.emitted;
  }
  return report;
}

std::vector<STClip> assemble_stclips(const FrameStore& store, std::span<const ObjectBox> boxes,
                                     int64_t temporal_window, AssemblyReport* report) {
  std::vector<STClip> clips;
  auto r = assemble_stclips(store, boxes, temporal_window,
                            [&](STClip&& clip) { clips.push_back(std::move(clip)); });
  if (report != nullptr) *report = r;
  return clips;
}

std::vector<LabelTrack> load_labels(const fs::path& label_file) {
  std::ifstream in(label_file);
  if (!in) {
    throw data_error("cannot open label file " + label_file.string());
  }
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("malformed label file " + label_file.string() + ": " + e.what());
  }
  if (!doc.is_object()) {
    throw data_error("label file " + label_file.string() + " must map video_id to arrays");
  }
  std::vector<LabelTrack> tracks;
  for (const auto& [id, values] : doc.items()) {
    LabelTrack track{id, {}};
    for (const auto& v : values) {
      const int label = v.get<int>();
      if (label != 0 && label != 1) {
        throw data_error("label values must be 0 or 1 (video " + id + ")");
      }
      track.labels.push_back(static_cast<uint8_t>(label));
    }
    tracks.push_back(std::move(track));
  }
  return tracks;
}

void save_labels(const fs::path& label_file, std::span<const LabelTrack> labels) {
  if (label_file.has_parent_path()) fs::create_directories(label_file.parent_path());
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& track : labels) {
    doc[track.video_id] = track.labels;
  }
  std::ofstream out(label_file);
  if (!out) {
    throw data_error("cannot write label file " + label_file.string());
  }
  out << doc.dump() << '\n';
}

const LabelTrack& find_labels(std::span<const LabelTrack> labels, std::string_view video_id) {
  for (const auto& track : labels) {
    if (track.video_id == video_id) return track;
  }
  throw data_error("no labels for video " + std::string(video_id));
}

}  // namespace pkgnet::data
