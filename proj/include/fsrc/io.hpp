#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "fsrc/config.hpp"
#include "fsrc/eval.hpp"
#include "fsrc/experiment.hpp"
#include "fsrc/model.hpp"
#include "fsrc/resemblance.hpp"
#include "fsrc/trainer.hpp"

namespace fsrc {

using json = nlohmann::json;

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr int kGroupFormatVersion = 1;
inline constexpr int kManifestFormatVersion = 1;

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace io_detail {

inline void expect_format(const json& j, const std::string& format, int version, const std::string& what) {
  if (!j.is_object() || j.value("format", "") != format) throw Error(what + ": not a " + format + " document");
  if (!j.contains("version") || j["version"].get<int>() != version) {
    throw Error(what + ": unsupported " + format + " version");
  }
}

inline json box_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

inline Box box_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()}; }

inline json tensor_json(const Tensor2& t) {
  return {{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

inline Tensor2 tensor_from(const json& j) {
  return Tensor2(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(), j.at("data").get<std::vector<double>>());
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// Dataset: line-delimited JSON. Line 1 is a header carrying the resolved
// dataset config and class prototypes; every following line is one scene.

inline std::string serialize_dataset(const Dataset& ds) {
  ExperimentConfig holder;
  holder.dataset = ds.config;
  json header = {{"format", "fsrc-dataset"}, {"version", kDatasetFormatVersion}};
  header["config"] = config_to_map(holder)["dataset"];
  json classes = json::array();
  for (const auto& c : ds.classes) classes.push_back({{"id", c.class_id}, {"novel", c.is_novel}, {"prototype", c.prototype}});
  header["classes"] = classes;

  std::string out = header.dump() + "\n";
  auto emit = [&](const std::vector<SceneRecord>& split, const char* name) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      const auto& rec = split[i];
      json line = {{"split", name}, {"index", i}};
      json boxes = json::array();
      for (const auto& b : rec.scene.gt_boxes) boxes.push_back(io_detail::box_json(b));
      line["gt_boxes"] = boxes;
      line["gt_labels"] = rec.scene.gt_labels;
      json props = json::array();
      for (const auto& p : rec.proposals) {
        json jp = {{"box", io_detail::box_json(p.box)}, {"feature", p.feature}, {"iou", p.iou},
                   {"gt_class", p.gt_class}, {"fg", p.foreground}};
        jp["matched"] = p.matched_gt_index ? json(*p.matched_gt_index) : json(nullptr);
        props.push_back(std::move(jp));
      }
      line["proposals"] = std::move(props);
      out += line.dump();
      out += "\n";
    }
  };
  emit(ds.base_train, "base_train");
  emit(ds.base_val, "base_val");
  emit(ds.finetune_pool, "finetune_pool");
  emit(ds.test, "test");
  return out;
}

inline Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error("dataset: empty file");
  Dataset ds;
  try {
    const json header = json::parse(line);
    io_detail::expect_format(header, "fsrc-dataset", kDatasetFormatVersion, "dataset");
    std::string ini = "[dataset]\n";
    for (const auto& [k, v] : header.at("config").items()) ini += k + " = " + v.get<std::string>() + "\n";
    ds.config = parse_config(ini).dataset;
    for (const auto& c : header.at("classes")) {
      ds.classes.push_back({c.at("id").get<ClassId>(), c.at("prototype").get<std::vector<double>>(), c.at("novel").get<bool>()});
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      SceneRecord rec;
      for (const auto& b : j.at("gt_boxes")) rec.scene.gt_boxes.push_back(io_detail::box_from(b));
      rec.scene.gt_labels = j.at("gt_labels").get<std::vector<ClassId>>();
      if (rec.scene.gt_boxes.size() != rec.scene.gt_labels.size()) throw Error("dataset: box/label count mismatch");
      for (const auto& jp : j.at("proposals")) {
        Proposal p;
        p.box = io_detail::box_from(jp.at("box"));
        p.feature = jp.at("feature").get<std::vector<double>>();
        p.iou = jp.at("iou").get<double>();
        p.gt_class = jp.at("gt_class").get<ClassId>();
        p.foreground = jp.at("fg").get<bool>();
        if (!jp.at("matched").is_null()) p.matched_gt_index = jp.at("matched").get<std::size_t>();
        rec.proposals.push_back(std::move(p));
      }
      const std::string split = j.at("split").get<std::string>();
      if (split == "base_train") {
        ds.base_train.push_back(std::move(rec));
      } else if (split == "base_val") {
        ds.base_val.push_back(std::move(rec));
      } else if (split == "finetune_pool") {
        ds.finetune_pool.push_back(std::move(rec));
      } else if (split == "test") {
        ds.test.push_back(std::move(rec));
      } else {
        throw Error("dataset: unknown split '" + split + "'");
      }
    }
  } catch (const json::exception& e) {
    throw Error(std::string("dataset: malformed record: ") + e.what());
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_text_file(path, serialize_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("dataset not found: " + path.string());
  return parse_dataset(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Checkpoint

inline std::string serialize_checkpoint(const DetectionModel& model) {
  const auto& d = model.dims();
  json j = {{"format", "fsrc-checkpoint"}, {"version", kCheckpointFormatVersion}};
  j["dims"] = {{"input", d.input}, {"hidden", d.hidden}, {"num_classes", d.num_classes}, {"contrastive", d.contrastive}};
  json layers = json::array();
  const auto ls = model.layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    layers.push_back({{"name", DetectionModel::layer_names()[i]},
                      {"weight", io_detail::tensor_json(ls[i]->weight.value)},
                      {"bias", io_detail::tensor_json(ls[i]->bias.value)}});
  }
  j["layers"] = layers;
  return j.dump() + "\n";
}

inline DetectionModel parse_checkpoint(const std::string& text) {
  try {
    const json j = json::parse(text);
    io_detail::expect_format(j, "fsrc-checkpoint", kCheckpointFormatVersion, "checkpoint");
    const auto& jd = j.at("dims");
    ModelDims dims{jd.at("input").get<std::size_t>(), jd.at("hidden").get<std::size_t>(),
                   jd.at("num_classes").get<std::size_t>(), jd.at("contrastive").get<std::size_t>()};
    DetectionModel m(dims);
    auto ls = m.layers();
    const auto& jl = j.at("layers");
    if (jl.size() != ls.size()) throw Error("checkpoint: expected " + std::to_string(ls.size()) + " layers");
    for (std::size_t i = 0; i < ls.size(); ++i) {
      if (jl[i].at("name").get<std::string>() != DetectionModel::layer_names()[i]) {
        throw Error("checkpoint: layer " + std::to_string(i) + " should be " + DetectionModel::layer_names()[i]);
      }
      Tensor2 w = io_detail::tensor_from(jl[i].at("weight"));
      Tensor2 b = io_detail::tensor_from(jl[i].at("bias"));
      if (!w.same_shape(ls[i]->weight.value) || !b.same_shape(ls[i]->bias.value)) {
        throw Error("checkpoint: shape mismatch in layer " + DetectionModel::layer_names()[i]);
      }
      ls[i]->weight = Param(std::move(w));
      ls[i]->bias = Param(std::move(b));
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint: malformed: ") + e.what());
  }
}

inline void save_checkpoint(const DetectionModel& model, const std::filesystem::path& path) {
  write_text_file(path, serialize_checkpoint(model));
}

inline DetectionModel load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("checkpoint not found: " + path.string());
  return parse_checkpoint(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Resemblance group

inline std::string serialize_group(const ResemblanceGroup& g) {
  json j = {{"format", "fsrc-group"}, {"version", kGroupFormatVersion},
            {"classes", std::vector<ClassId>(g.classes.begin(), g.classes.end())}};
  return j.dump() + "\n";
}

inline ResemblanceGroup parse_group(const std::string& text) {
  try {
    const json j = json::parse(text);
    io_detail::expect_format(j, "fsrc-group", kGroupFormatVersion, "group");
    ResemblanceGroup g;
    for (ClassId c : j.at("classes").get<std::vector<ClassId>>()) g.classes.insert(c);
    return g;
  } catch (const json::exception& e) {
    throw Error(std::string("group: malformed: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV tables

inline std::string loss_history_csv(const std::vector<StepRecord>& history) {
  std::string out = "iteration,L_cls,L_Bbox,L_objectness,L_RCL,mode\n";
  for (const auto& r : history) {
    out += std::to_string(r.iteration) + "," + format_double(r.cls) + "," + format_double(r.box) + "," +
           format_double(r.obj) + "," + format_double(r.rcl) + "," + r.mode + "\n";
  }
  return out;
}

inline std::string histogram_csv(const std::vector<HistogramRow>& rows) {
  std::string out = "pair_a,pair_b,replications,has_novel\n";
  for (const auto& r : rows) {
    out += std::to_string(r.pair.class_a) + "," + std::to_string(r.pair.class_b) + "," + std::to_string(r.replications) +
           "," + (r.has_novel ? "true" : "false") + "\n";
  }
  return out;
}

inline const char* split_name(const ClassCatalog& cat, ClassId c) {
  if (cat.is_base(c)) return "base";
  if (cat.is_novel(c)) return "novel";
  return "other";
}

/// Columns kind,class_id,split,metric,value. Class rows carry ap50; summary rows the means and stds.
inline std::string ap_report_csv(const APReport& r, const ClassCatalog& cat) {
  std::string out = "kind,class_id,split,metric,value\n";
  for (const auto& [c, ap] : r.per_class_ap50) {
    out += "class," + std::to_string(c) + "," + split_name(cat, c) + ",ap50," + format_double(ap) + "\n";
  }
  for (ClassId c : r.absent) out += "class," + std::to_string(c) + "," + split_name(cat, c) + ",absent,\n";
  out += "summary,,base,map50," + format_double(r.map50_base) + "\n";
  out += "summary,,novel,map50," + format_double(r.map50_novel) + "\n";
  out += "summary,,all,map50," + format_double(r.map50_all) + "\n";
  out += "summary,,novel,std," + format_double(r.std_novel) + "\n";
  out += "summary,,all,std," + format_double(r.std_all) + "\n";
  return out;
}

/// Columns kind,class_a,class_b,value: one row per unordered class pair plus two summary rows.
inline std::string distance_report_csv(const DistanceReport& r) {
  std::string out = "kind,class_a,class_b,value\n";
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    for (std::size_t j = i + 1; j < r.classes.size(); ++j) {
      out += "pair," + std::to_string(r.classes[i]) + "," + std::to_string(r.classes[j]) + "," +
             format_double(r.pairwise_cosine_distance(i, j)) + "\n";
    }
  }
  out += "mean_within_group,,," + format_double(r.mean_within_group) + "\n";
  out += "mean_outside_group,,," + format_double(r.mean_outside_group) + "\n";
  return out;
}

inline json ap_report_json(const APReport& r) {
  json per = json::object();
  for (const auto& [c, ap] : r.per_class_ap50) per[std::to_string(c)] = ap;
  return {{"per_class_ap50", per},     {"map50_base", r.map50_base}, {"map50_novel", r.map50_novel},
          {"map50_all", r.map50_all}, {"std_novel", r.std_novel},   {"std_all", r.std_all}};
}

}  // namespace fsrc
