#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "fsrc/experiment.hpp"

namespace fsrc {

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& field, const std::string& text) {
  T v{};
  const std::string t = trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw PreconditionError(field + ": cannot parse '" + text + "' as a number");
  }
  return v;
}

inline bool parse_bool(const std::string& field, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw PreconditionError(field + ": expected true or false, got '" + text + "'");
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += f(v[i]);
  }
  return out;
}

}  // namespace config_detail

/// Typed binding of every config key to a field of an ExperimentConfig.
class ConfigSchema {
 public:
  struct Entry {
    std::string section;
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };

  explicit ConfigSchema(ExperimentConfig& cfg) {
    using namespace config_detail;
    auto& d = cfg.dataset;
    auto& m = cfg.model;
    auto& t = cfg.train;
    auto& e = cfg.eval;
    auto& a = cfg.ablation;
    auto& c = cfg.compare;

    num("dataset", "num_base", d.num_base);
    num("dataset", "num_novel", d.num_novel);
    num("dataset", "embed_dim", d.embed_dim);
    add("dataset", "confusable_pairs",
        [&d] {
          return join<ConfusablePair>(d.confusable_pairs, [](const ConfusablePair& p) {
            return std::to_string(p.class_a) + ":" + std::to_string(p.class_b) + ":" + format_double(p.angle_deg);
          });
        },
        [&d](const std::string& s) {
          d.confusable_pairs.clear();
          for (const auto& item : split(s, ',')) {
            const auto parts = split(item, ':');
            if (parts.size() != 3) {
              throw PreconditionError("dataset.confusable_pairs: expected class:class:degrees, got '" + item + "'");
            }
            d.confusable_pairs.push_back({parse_number<int>("dataset.confusable_pairs", parts[0]),
                                          parse_number<int>("dataset.confusable_pairs", parts[1]),
                                          parse_number<double>("dataset.confusable_pairs", parts[2])});
          }
        });
    num("dataset", "noise_sigma", d.noise_sigma);
    num("dataset", "context_mix", d.context_mix);
    num("dataset", "background_sigma", d.background_sigma);
    num("dataset", "proposals_per_gt", d.proposals_per_gt);
    num("dataset", "background_per_scene", d.background_per_scene);
    num("dataset", "fg_iou_threshold", d.fg_iou_threshold);
    num("dataset", "min_gt_per_scene", d.min_gt_per_scene);
    num("dataset", "max_gt_per_scene", d.max_gt_per_scene);
    num("dataset", "base_train_scenes", d.base_train_scenes);
    num("dataset", "base_val_scenes", d.base_val_scenes);
    num("dataset", "finetune_pool_scenes", d.finetune_pool_scenes);
    num("dataset", "test_scenes", d.test_scenes);
    num("dataset", "seed", d.seed);

    num("model", "hidden", m.hidden);
    num("model", "contrastive_dim", m.contrastive_dim);

    num("train", "lr", t.lr);
    num("train", "pretrain_lr", t.pretrain_lr);
    num("train", "momentum", t.momentum);
    num("train", "weight_decay", t.weight_decay);
    num("train", "batch_scenes", t.batch_scenes);
    num("train", "pretrain_iterations", t.pretrain_iterations);
    num("train", "total_iterations", t.total_iterations);
    num("train", "lambda", t.lambda);
    num("train", "temperature", t.temperature);
    num("train", "iou_floor", t.iou_floor);
    num("train", "group_iou_threshold", t.group_iou_threshold);
    num("train", "rep_threshold", t.rep_threshold);
    num("train", "milestone", t.milestone);
    num("train", "mining_window", t.mining_window);
    add("train", "contrastive_mode", [&t] { return std::string(to_string(t.contrastive_mode)); },
        [&t](const std::string& s) { t.contrastive_mode = parse_contrastive_mode(trim(s)); });
    add("train", "group_update",
        [&t] { return std::string(t.group_update == GroupUpdate::Freeze ? "freeze" : "continuous"); },
        [&t](const std::string& s) {
          const auto v = trim(s);
          if (v == "freeze") {
            t.group_update = GroupUpdate::Freeze;
          } else if (v == "continuous") {
            t.group_update = GroupUpdate::Continuous;
          } else {
            throw PreconditionError("train.group_update: expected freeze or continuous, got '" + s + "'");
          }
        });
    add("train", "include_background", [&t] { return std::string(t.include_background ? "true" : "false"); },
        [&t](const std::string& s) { t.include_background = parse_bool("train.include_background", s); });
    num("train", "k_shot", t.k_shot);
    num("train", "seed", t.seed);

    num("eval", "score_threshold", e.score_threshold);
    num("eval", "nms_iou", e.nms_iou);
    num("eval", "match_iou", e.match_iou);

    list("ablation", "milestones", a.milestones);
    list("ablation", "iou_thresholds", a.iou_thresholds);
    list("ablation", "rep_thresholds", a.rep_thresholds);
    num("ablation", "fixed_milestone", a.fixed_milestone);
    num("ablation", "fixed_iou_threshold", a.fixed_iou_threshold);
    num("ablation", "fixed_rep_threshold", a.fixed_rep_threshold);
    list("compare", "seeds", c.seeds);
  }

  const std::vector<Entry>& entries() const { return entries_; }

  const Entry* find(const std::string& section, const std::string& key) const {
    for (const auto& e : entries_) {
      if (e.section == section && e.key == key) return &e;
    }
    return nullptr;
  }

 private:
  void add(std::string section, std::string key, std::function<std::string()> get,
           std::function<void(const std::string&)> set) {
    entries_.push_back({std::move(section), std::move(key), std::move(get), std::move(set)});
  }

  template <typename T>
  void num(const std::string& section, const std::string& key, T& field) {
    const std::string name = section + "." + key;
    add(
        section, key,
        [&field] {
          if constexpr (std::is_floating_point_v<T>) {
            return format_double(field);
          } else {
            return std::to_string(field);
          }
        },
        [&field, name](const std::string& s) { field = config_detail::parse_number<T>(name, s); });
  }

  template <typename T>
  void list(const std::string& section, const std::string& key, std::vector<T>& field) {
    const std::string name = section + "." + key;
    add(
        section, key,
        [&field] {
          return config_detail::join<T>(field, [](const T& v) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(v);
            } else {
              return std::to_string(v);
            }
          });
        },
        [&field, name](const std::string& s) {
          field.clear();
          for (const auto& item : config_detail::split(s, ',')) field.push_back(config_detail::parse_number<T>(name, item));
        });
  }

  std::vector<Entry> entries_;
};

/// Section -> key -> value text for every key, fully resolved.
inline std::map<std::string, std::map<std::string, std::string>> config_to_map(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  ConfigSchema schema(copy);
  std::map<std::string, std::map<std::string, std::string>> out;
  for (const auto& e : schema.entries()) out[e.section][e.key] = e.get();
  return out;
}

/// INI text with every key; parses back to an identical config.
inline std::string dump_config(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  ConfigSchema schema(copy);
  std::ostringstream out;
  std::string section;
  for (const auto& e : schema.entries()) {
    if (e.section != section) {
      if (!section.empty()) out << "\n";
      section = e.section;
      out << "[" << section << "]\n";
    }
    out << e.key << " = " << e.get() << "\n";
  }
  return out.str();
}

/// Applies INI text on top of `base`. Unknown sections or keys are rejected.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& err) {
    throw PreconditionError(std::string("config: ") + err.what());
  }
  ConfigSchema schema(base);
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw PreconditionError("config: key '" + section + "' must live inside a [section]");
    for (const auto& [key, value] : body) {
      const auto* entry = schema.find(section, key);
      if (!entry) throw PreconditionError("config: unknown key " + section + "." + key);
      entry->set(value.get_value<std::string>());
    }
  }
  base.validate();
  return base;
}

inline ExperimentConfig load_config_file(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw PreconditionError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

}  // namespace fsrc
