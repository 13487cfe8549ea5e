#include "pkgnet/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "pkgnet/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pkgnet {

ConfigError::ConfigError(std::vector<std::string> violations)
    : Error(
          [&] {
            std::string msg = "invalid configuration: ";
            for (std::size_t i = 0; i < violations.size(); ++i) msg += (i ? "; " : "") + violations[i];
            return msg;
          }(),
          "config"),
      violations_(std::move(violations)) {}

}  // namespace pkgnet

namespace pkgnet::config {

namespace {

// Sections whose keys are free-form rather than fixed by the schema.
bool is_free_map(const std::string& path) { return path == "score.w_c"; }

void collect_unknown(const json& given, const json& schema, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : given.items()) {
    const auto path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) {
      out.push_back("unknown key " + path);
      continue;
    }
    if (value.is_object() && schema[key].is_object() && !is_free_map(path)) {
      collect_unknown(value, schema[key], path, out);
    }
  }
}

void merge(json& target, const json& patch, const std::string& prefix) {
  for (const auto& [key, value] : patch.items()) {
    const auto path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object() && target[key].is_object() && !is_free_map(path)) {
      merge(target[key], value, path);
    } else {
      target[key] = value;
    }
  }
}

std::string reduction_name(loss::Reduction r) { return r == loss::Reduction::mean ? "mean" : "sum"; }

loss::Reduction parse_reduction(const std::string& s) {
  if (s == "mean") return loss::Reduction::mean;
  if (s == "sum") return loss::Reduction::sum;
  throw ConfigError({"loss.reduction must be mean or sum"});
}

template <typename T>
void read(const json& j, const char* key, T& out, std::vector<std::string>& problems, const std::string& section) {
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    problems.push_back(section + "." + key + " has the wrong type");
  }
}

}  // namespace

model::StudentConfig TrainConfig::student_config() const {
  model::StudentConfig c;
  c.input_frames = data.temporal_window;
  c.channels_per_frame = data.channels;
  c.bottleneck_block = student.bottleneck_block;
  c.skip_connections = student.skip_connections;
  c.mode = student.mode;
  c.base_width = student.base_width;
  c.residual_blocks = student.residual_blocks;
  return c;
}

scoring::ScoreWeights TrainConfig::score_weights() const {
  scoring::ScoreWeights w;
  switch (student.mode) {
    case model::Mode::AE_only:
      w.w_e = 1.0;
      return w;
    case model::Mode::KD_only:
      w.w_e = 0.0;
      break;
    case model::Mode::PKG:
      w.w_e = score.w_e;
      break;
  }
  if (score.w_c.empty()) {
    const double share = student.mode == model::Mode::KD_only ? 1.0 : 1.0 - score.w_e;
    for (int b : teacher.tap_blocks) w.w_c[b] = share / static_cast<double>(teacher.tap_blocks.size());
  } else {
    w.w_c = score.w_c;
  }
  return w;
}

scoring::SeriesOptions TrainConfig::series_options(double no_object_score) const {
  return {scoring::parse_policy(score.policy), score.window, no_object_score};
}

json to_json(const TrainConfig& c) {
  const auto& s = c.data.synthetic;
  json w_c = json::object();
  for (const auto& [block, w] : c.score.w_c) w_c[std::to_string(block)] = w;
  return {
      {"data",
       {{"root", c.data.root},
        {"train_split", c.data.train_split},
        {"test_split", c.data.test_split},
        {"channels", c.data.channels},
        {"temporal_window", c.data.temporal_window},
        {"min_confidence", c.data.min_confidence},
        {"synthetic",
         {{"n_train_videos", s.n_train_videos},
          {"n_test_videos", s.n_test_videos},
          {"frames_per_video", s.frames_per_video},
          {"image_size", s.image_size},
          {"objects_per_video", s.objects_per_video},
          {"anomaly_rate", s.anomaly_rate},
          {"noise", s.noise},
          {"seed", s.seed}}}}},
      {"teacher", model::to_json(c.teacher)},
      {"student",
       {{"bottleneck_block", c.student.bottleneck_block},
        {"skip_connections", c.student.skip_connections},
        {"mode", model::to_string(c.student.mode)},
        {"base_width", c.student.base_width},
        {"residual_blocks", c.student.residual_blocks}}},
      {"loss",
       {{"lambda_e", c.loss.weights.lambda_e},
        {"lambda_g", c.loss.weights.lambda_g},
        {"lambda_c", c.loss.weights.lambda_c},
        {"alpha", c.loss.weights.alpha},
        {"reduction", reduction_name(c.loss.reduction)}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"lr_decay_factor", c.train.lr_decay_factor},
        {"lr_decay_every", c.train.lr_decay_every},
        {"adam_betas", c.train.adam_betas},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"seed", c.train.seed},
        {"checkpoint_every", c.train.checkpoint_every},
        {"patience", c.train.patience},
        {"threads", c.train.threads}}},
      {"score",
       {{"w_e", c.score.w_e},
        {"w_c", w_c},
        {"policy", c.score.policy},
        {"window", c.score.window},
        {"ddof", c.score.ddof}}},
      {"eval", {{"smoothing", c.eval.smoothing}}},
  };
}

TrainConfig from_json(const json& given) {
  if (!given.is_object()) throw ConfigError({"configuration must be a JSON object"});
  const TrainConfig defaults;
  json doc = to_json(defaults);
  std::vector<std::string> problems;
  collect_unknown(given, doc, "", problems);
  merge(doc, given, "");
  // Sections replaced by scalars cannot be read field by field.
  bool malformed = false;
  for (const char* section : {"data", "teacher", "student", "loss", "train", "score", "eval"}) {
    if (!doc[section].is_object()) {
      problems.push_back(std::string(section) + " must be an object");
      malformed = true;
    }
  }
  if (!malformed && !doc["data"]["synthetic"].is_object()) {
    problems.push_back("data.synthetic must be an object");
    malformed = true;
  }
  if (malformed) throw ConfigError(problems);

  TrainConfig c;
  const auto& d = doc["data"];
  read(d, "root", c.data.root, problems, "data");
  read(d, "train_split", c.data.train_split, problems, "data");
  read(d, "test_split", c.data.test_split, problems, "data");
  read(d, "channels", c.data.channels, problems, "data");
  read(d, "temporal_window", c.data.temporal_window, problems, "data");
  read(d, "min_confidence", c.data.min_confidence, problems, "data");
  const auto& s = d["synthetic"];
  read(s, "n_train_videos", c.data.synthetic.n_train_videos, problems, "data.synthetic");
  read(s, "n_test_videos", c.data.synthetic.n_test_videos, problems, "data.synthetic");
  read(s, "frames_per_video", c.data.synthetic.frames_per_video, problems, "data.synthetic");
  read(s, "image_size", c.data.synthetic.image_size, problems, "data.synthetic");
  read(s, "objects_per_video", c.data.synthetic.objects_per_video, problems, "data.synthetic");
  read(s, "anomaly_rate", c.data.synthetic.anomaly_rate, problems, "data.synthetic");
  read(s, "noise", c.data.synthetic.noise, problems, "data.synthetic");
  read(s, "seed", c.data.synthetic.seed, problems, "data.synthetic");
  c.data.synthetic.channels = c.data.channels;

  const auto& t = doc["teacher"];
  std::string backbone;
  read(t, "backbone", backbone, problems, "teacher");
  read(t, "pretrained_weights", c.teacher.pretrained_weights, problems, "teacher");
  read(t, "tap_blocks", c.teacher.tap_blocks, problems, "teacher");
  try {
    c.teacher.backbone = model::parse_backbone(backbone);
  } catch (const Error&) {
    problems.push_back("teacher.backbone '" + backbone + "' is not one of resnet18, resnet50, resnext50, wide_resnet50");
  }

  const auto& st = doc["student"];
  std::string mode;
  read(st, "bottleneck_block", c.student.bottleneck_block, problems, "student");
  read(st, "skip_connections", c.student.skip_connections, problems, "student");
  read(st, "mode", mode, problems, "student");
  read(st, "base_width", c.student.base_width, problems, "student");
  read(st, "residual_blocks", c.student.residual_blocks, problems, "student");
  try {
    c.student.mode = model::parse_mode(mode);
  } catch (const Error&) {
    problems.push_back("student.mode '" + mode + "' is not one of PKG, AE_only, KD_only");
  }

  const auto& l = doc["loss"];
  std::string reduction;
  read(l, "lambda_e", c.loss.weights.lambda_e, problems, "loss");
  read(l, "lambda_g", c.loss.weights.lambda_g, problems, "loss");
  read(l, "lambda_c", c.loss.weights.lambda_c, problems, "loss");
  read(l, "alpha", c.loss.weights.alpha, problems, "loss");
  read(l, "reduction", reduction, problems, "loss");
  if (reduction == "mean" || reduction == "sum") {
    c.loss.reduction = parse_reduction(reduction);
  } else {
    problems.push_back("loss.reduction must be mean or sum");
  }

  const auto& tr = doc["train"];
  read(tr, "learning_rate", c.train.learning_rate, problems, "train");
  read(tr, "lr_decay_factor", c.train.lr_decay_factor, problems, "train");
  read(tr, "lr_decay_every", c.train.lr_decay_every, problems, "train");
  read(tr, "adam_betas", c.train.adam_betas, problems, "train");
  read(tr, "batch_size", c.train.batch_size, problems, "train");
  read(tr, "epochs", c.train.epochs, problems, "train");
  read(tr, "seed", c.train.seed, problems, "train");
  read(tr, "checkpoint_every", c.train.checkpoint_every, problems, "train");
  read(tr, "patience", c.train.patience, problems, "train");
  read(tr, "threads", c.train.threads, problems, "train");

  const auto& sc = doc["score"];
  read(sc, "w_e", c.score.w_e, problems, "score");
  read(sc, "policy", c.score.policy, problems, "score");
  read(sc, "window", c.score.window, problems, "score");
  read(sc, "ddof", c.score.ddof, problems, "score");
  if (sc["w_c"].is_object()) {
    for (const auto& [key, value] : sc["w_c"].items()) {
      try {
        std::size_t used = 0;
        const int block = std::stoi(key, &used);
        if (used != key.size()) throw std::invalid_argument(key);
        c.score.w_c[block] = value.get<double>();
      } catch (const std::exception&) {
        problems.push_back("score.w_c entry '" + key + "' must map a block index to a number");
      }
    }
  } else {
    problems.push_back("score.w_c must be an object");
  }

  read(doc["eval"], "smoothing", c.eval.smoothing, problems, "eval");
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

std::vector<std::string> violations(const TrainConfig& c) {
  std::vector<std::string> v;
  if (c.data.channels != 1 && c.data.channels != 3) v.push_back("data.channels must be 1 or 3");
  if (c.data.temporal_window < 1) v.push_back("data.temporal_window must be >= 1");
  if (!(c.data.min_confidence >= 0 && c.data.min_confidence <= 1)) v.push_back("data.min_confidence must lie in [0, 1]");
  const auto& s = c.data.synthetic;
  if (!(s.anomaly_rate >= 0 && s.anomaly_rate < 1)) v.push_back("data.synthetic.anomaly_rate must lie in [0, 1)");
  if (s.n_train_videos < 1 || s.n_test_videos < 1) v.push_back("data.synthetic video counts must be >= 1");
  if (s.frames_per_video <= c.data.temporal_window) v.push_back("data.synthetic.frames_per_video must exceed temporal_window");
  if (s.image_size < 24) v.push_back("data.synthetic.image_size must be >= 24");
  if (s.objects_per_video < 1) v.push_back("data.synthetic.objects_per_video must be >= 1");

  const auto& taps = c.teacher.tap_blocks;
  if (taps.empty()) v.push_back("teacher.tap_blocks must be non-empty");
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] < 1 || taps[i] > 4) v.push_back("teacher.tap_blocks entries must lie in 1..4");
    if (i > 0 && taps[i] <= taps[i - 1]) v.push_back("teacher.tap_blocks must be strictly increasing");
  }
  if (c.teacher.pretrained_weights.empty()) v.push_back("teacher.pretrained_weights must be set");
  if (c.student.bottleneck_block < 2 || c.student.bottleneck_block > 4) v.push_back("student.bottleneck_block must be 2, 3 or 4");
  if (!taps.empty() && taps.back() != c.student.bottleneck_block) {
    v.push_back("student.bottleneck_block must equal the deepest teacher.tap_blocks entry");
  }
  if (c.student.base_width < 1) v.push_back("student.base_width must be >= 1");
  if (c.student.residual_blocks < 0) v.push_back("student.residual_blocks must be >= 0");

  const auto& w = c.loss.weights;
  if (w.alpha < 1) v.push_back("loss.alpha must be >= 1");
  if (w.lambda_e < 0 || w.lambda_g < 0 || w.lambda_c < 0) v.push_back("loss lambdas must be >= 0");
  const auto active = w.for_mode(c.student.mode);
  if (!(active.lambda_e > 0 || active.lambda_g > 0 || active.lambda_c > 0)) {
    v.push_back("loss lambdas leave no active term for mode " + model::to_string(c.student.mode));
  }

  const auto& t = c.train;
  if (!(t.learning_rate > 0)) v.push_back("train.learning_rate must be > 0");
  if (!(t.lr_decay_factor > 0 && t.lr_decay_factor <= 1)) v.push_back("train.lr_decay_factor must lie in (0, 1]");
  if (t.lr_decay_every < 1) v.push_back("train.lr_decay_every must be >= 1");
  for (double b : t.adam_betas) {
    if (!(b >= 0 && b < 1)) v.push_back("train.adam_betas entries must lie in [0, 1)");
  }
  if (t.batch_size < 1) v.push_back("train.batch_size must be >= 1");
  if (t.epochs < 1) v.push_back("train.epochs must be >= 1");
  if (t.checkpoint_every < 0) v.push_back("train.checkpoint_every must be >= 0");
  if (t.patience < 0) v.push_back("train.patience must be >= 0");
  if (t.threads < 1) v.push_back("train.threads must be >= 1");

  try {
    scoring::parse_policy(c.score.policy);
  } catch (const Error&) {
    v.push_back("score.policy must be max or top_k_mean:<k>");
  }
  if (c.score.window < 1 || c.score.window % 2 == 0) v.push_back("score.window must be odd and >= 1");
  if (c.score.ddof != 0 && c.score.ddof != 1) v.push_back("score.ddof must be 0 or 1");
  for (const auto& [block, weight] : c.score.w_c) {
    if (std::find(taps.begin(), taps.end(), block) == taps.end()) {
      v.push_back("score.w_c block " + std::to_string(block) + " is not a tapped block");
    }
  }
  if (!c.score.w_c.empty() && c.score.w_c.size() != taps.size()) {
    v.push_back("score.w_c must give a weight for every tapped block");
  }
  return v;
}

void validate(const TrainConfig& config) {
  auto v = violations(config);
  if (!v.empty()) throw ConfigError(std::move(v));
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing config file " + path.string(), "io");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError({"cannot parse " + path.string() + ": " + e.what()});
  }
  return from_json(doc);
}

void save_config(const fs::path& path, const TrainConfig& config) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write config " + path.string(), "io");
  out << to_json(config).dump(2) << '\n';
}

void apply_override(json& doc, const std::string& dot_path, const std::string& value) {
  const json schema = to_json(TrainConfig{});
  std::vector<std::string> keys;
  std::stringstream ss(dot_path);
  for (std::string key; std::getline(ss, key, '.');) keys.push_back(key);
  if (keys.empty()) throw ConfigError({"empty override path"});

  const json* node = &schema;
  std::string prefix;
  bool free = false;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const auto& key = keys[i];
    if (free) {
      if (i + 1 != keys.size()) throw ConfigError({"unknown flag --" + dot_path});
      break;
    }
    if (!node->is_object() || !node->contains(key)) throw ConfigError({"unknown flag --" + dot_path});
    node = &(*node)[key];
    prefix = prefix.empty() ? key : prefix + "." + key;
    free = is_free_map(prefix);
    if (!free && i + 1 == keys.size() && node->is_object()) {
      throw ConfigError({"--" + dot_path + " names a section, not a field"});
    }
  }

  json parsed;
  if (node->is_string()) {
    parsed = value;
  } else {
    try {
      parsed = json::parse(value);
    } catch (const json::exception&) {
      parsed = value;
    }
  }

  json* target = &doc;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    auto& next = (*target)[keys[i]];
    if (next.is_null()) next = json::object();
    target = &next;
  }
  (*target)[keys.back()] = parsed;
}

TrainConfig resolve_config(const fs::path* config_file, const std::vector<std::pair<std::string, std::string>>& overrides) {
  json doc = json::object();
  if (config_file != nullptr) {
    std::ifstream in(*config_file);
    if (!in) throw Error("missing config file " + config_file->string(), "io");
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError({"cannot parse " + config_file->string() + ": " + e.what()});
    }
  }
  std::vector<std::string> problems;
  for (const auto& [path, value] : overrides) {
    try {
      apply_override(doc, path, value);
    } catch (const ConfigError& e) {
      problems.insert(problems.end(), e.violations().begin(), e.violations().end());
    }
  }
  if (!problems.empty()) throw ConfigError(problems);
  auto config = from_json(doc);
  validate(config);
  return config;
}

}  // namespace pkgnet::config
