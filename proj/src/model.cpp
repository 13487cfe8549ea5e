#include "pkgnet/error.hpp"
#include "pkgnet/model.hpp"

namespace fs = std::filesystem;

namespace pkgnet::model {

std::pair<torch::Tensor, torch::Tensor> split_cubes(const torch::Tensor& cubes, int64_t input_frames) {
  if (cubes.dim() != 5) throw Error("clip cubes must be (B, t, C, H, W)", "model");
  if (cubes.size(1) != input_frames + 1) {
    throw Error("clip has " + std::to_string(cubes.size(1)) + " frames, expected input_frames + 1 = " +
                    std::to_string(input_frames + 1),
                "model");
  }
  const int64_t batch = cubes.size(0);
  auto inputs = cubes.narrow(1, 0, input_frames).reshape({batch, -1, cubes.size(3), cubes.size(4)});
  auto target = cubes.select(1, input_frames);
  return {inputs, target};
}

ForwardOutput forward(Student& student, const Teacher* teacher, const torch::Tensor& cubes,
                      const std::map<int, torch::Tensor>* teacher_taps) {
  const auto& cfg = student->config();
  auto [inputs, target] = split_cubes(cubes, cfg.input_frames);
  if (target.size(1) != cfg.channels_per_frame) {
    throw Error("clip channel count does not match the student", "model");
  }

  auto student_out = student->forward(inputs);
  ForwardOutput out;
  out.prediction = std::move(student_out.prediction);
  out.target = target;
  if (cfg.mode == Mode::AE_only) return out;

  out.student_taps = std::move(student_out.taps);
  if (teacher_taps != nullptr) {
    out.teacher_taps = *teacher_taps;
  } else {
    if (teacher == nullptr) throw Error("teacher required outside AE_only mode", "model");
    out.teacher_taps = teacher->tap(target);
  }
  for (auto& [block, f] : out.teacher_taps) f = f.detach();

  for (const auto& [block, fs_k] : out.student_taps) {
    auto ft = out.teacher_taps.find(block);
    if (ft == out.teacher_taps.end()) {
      throw Error("teacher produced no tap for block " + std::to_string(block), "model");
    }
    if (ft->second.sizes() != fs_k.sizes()) {
      throw Error("tap shape mismatch at block " + std::to_string(block), "model");
    }
  }
  if (out.teacher_taps.size() != out.student_taps.size()) {
    throw Error("teacher and student tap sets differ", "model");
  }
  return out;
}

ForwardOutput forward(Student& student, const Teacher* teacher, const data::STClip& clip) {
  return forward(student, teacher, clip.cube.unsqueeze(0));
}

nlohmann::json to_json(const TeacherSpec& spec) {
  return {{"backbone", to_string(spec.backbone)},
          {"pretrained_weights", spec.pretrained_weights},
          {"tap_blocks", spec.tap_blocks}};
}

TeacherSpec teacher_spec_from_json(const nlohmann::json& j) {
  TeacherSpec spec;
  spec.backbone = parse_backbone(j.at("backbone").get<std::string>());
  spec.pretrained_weights = j.at("pretrained_weights").get<std::string>();
  spec.tap_blocks = j.at("tap_blocks").get<std::vector<int>>();
  return spec;
}

nlohmann::json to_json(const StudentConfig& c) {
  return {{"input_frames", c.input_frames},
          {"channels_per_frame", c.channels_per_frame},
          {"bottleneck_block", c.bottleneck_block},
          {"skip_connections", c.skip_connections},
          {"mode", to_string(c.mode)},
          {"base_width", c.base_width},
          {"residual_blocks", c.residual_blocks}};
}

StudentConfig student_config_from_json(const nlohmann::json& j) {
  StudentConfig c;
  c.input_frames = j.at("input_frames").get<int64_t>();
  c.channels_per_frame = j.at("channels_per_frame").get<int64_t>();
  c.bottleneck_block = j.at("bottleneck_block").get<int>();
  c.skip_connections = j.at("skip_connections").get<bool>();
  c.mode = parse_mode(j.at("mode").get<std::string>());
  c.base_width = j.at("base_width").get<int64_t>();
  c.residual_blocks = j.at("residual_blocks").get<int64_t>();
  return c;
}

void save_checkpoint(const fs::path& path, Student& student, const TeacherSpec& teacher,
                     const torch::optim::Optimizer* optimizer, int64_t epoch, const nlohmann::json& config) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  archive.write("format", c10::IValue(std::string(kCheckpointFormat)));
  archive.write("teacher", c10::IValue(to_json(teacher).dump()));
  archive.write("student_config", c10::IValue(to_json(student->config()).dump()));
  archive.write("config", c10::IValue(config.dump()));
  archive.write("epoch", c10::IValue(epoch));

  torch::serialize::OutputArchive student_archive;
  student->save(student_archive);
  archive.write("student", student_archive);
  if (optimizer != nullptr) {
    torch::serialize::OutputArchive optimizer_archive;
    optimizer->save(optimizer_archive);
    archive.write("optimizer", optimizer_archive);
  }
  try {
    archive.save_to(path.string());
  } catch (const c10::Error& e) {
    throw Error("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace(), "io");
  }
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw Error("missing checkpoint " + path.string(), "io");
  torch::serialize::InputArchive archive;
  Checkpoint ckpt;
  try {
    archive.load_from(path.string());
    c10::IValue format;
    if (!archive.try_read("format", format) || !format.isString()) {
      throw Error("checkpoint " + path.string() + " has no format tag", "checkpoint");
    }
    if (format.toStringRef() != kCheckpointFormat) {
      throw Error("unsupported checkpoint version '" + format.toStringRef() + "' in " + path.string(), "checkpoint");
    }
    c10::IValue teacher, student_config, config, epoch;
    archive.read("teacher", teacher);
    archive.read("student_config", student_config);
    archive.read("config", config);
    archive.read("epoch", epoch);
    ckpt.teacher = teacher_spec_from_json(nlohmann::json::parse(teacher.toStringRef()));
    const auto cfg = student_config_from_json(nlohmann::json::parse(student_config.toStringRef()));
    ckpt.config = nlohmann::json::parse(config.toStringRef());
    ckpt.epoch = epoch.toInt();

    ckpt.student = build_student(cfg, make_tap_spec(ckpt.teacher, cfg));
    torch::serialize::InputArchive student_archive;
    archive.read("student", student_archive);
    ckpt.student->load(student_archive);

    torch::serialize::InputArchive optimizer_archive;
    if (archive.try_read("optimizer", optimizer_archive)) ckpt.optimizer_state = std::move(optimizer_archive);
  } catch (const c10::Error& e) {
    throw Error("corrupted checkpoint " + path.string() + ": " + e.what_without_backtrace(), "checkpoint");
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupted checkpoint " + path.string() + ": " + e.what(), "checkpoint");
  }
  return ckpt;
}

}  // namespace pkgnet::model
